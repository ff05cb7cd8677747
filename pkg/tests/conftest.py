"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import pytest

from aatrack.cli import main
from aatrack.shape_prior import VaeConfig, train_vae
from aatrack.synth import generate_mask_family

CRITERIA = {
    1: "gradient suite",
    2: "flow-algebra oracle",
    3: "metric oracle",
    4: "generator self-consistency",
    5: "baseline estimation accuracy",
    6: "drift compensation",
    7: "VAE shape prior",
    8: "anatomy-aware improvement",
    9: "ablation grid",
    10: "determinism",
}
_RESULTS: dict[int, tuple[bool, str]] = {}

# distractor suite used by the improvement and ablation criteria
SUITE_ARGS = ["--distractor", "yes", "--frames", "8", "--distractor-growth", "3.0", "--count", "20",
              "--train-count", "1", "--mask-count", "400", "--seed", "0"]
SUITE_PIPELINE_ARGS = ["--iters-per-level", "100", "--jobs", "1"]


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        _RESULTS[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _RESULTS:
            ok, detail = _RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {name}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN: {name}")


@pytest.fixture(scope="session")
def trained_vae():
    """Default-config VAE on 400 synthetic masks (about two minutes)."""
    return train_vae(generate_mask_family(400, seed=0), VaeConfig())


@pytest.fixture(scope="session")
def heldout_masks():
    return generate_mask_family(200, seed=999)


@pytest.fixture(scope="session")
def tiny_vae():
    """Briefly trained VAE for plumbing tests that do not judge quality."""
    return train_vae(generate_mask_family(32, seed=5), VaeConfig(epochs=2, batch_size=8, seed=3))


@pytest.fixture(scope="session")
def distractor_suite(tmp_path_factory):
    """Full pipeline over 20 distractor phantoms; returns the run directory."""
    root = tmp_path_factory.mktemp("suite")
    assert main(["synth", "--dataset", "--out", str(root / "data")] + SUITE_ARGS) == 0
    assert main(["pipeline", str(root / "data"), "--out", str(root / "run")] + SUITE_PIPELINE_ARGS) == 0
    return root / "run"
