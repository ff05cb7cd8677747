"""Command-line entry point.

Every command reads an optional key=value ``--config`` file; each config key
is also a flag (``lambda_h`` -> ``--lambda-h``) and flags win over the file.
The effective configuration is written to ``<out>/config.resolved``.

Exit codes: 0 success, 2 bad arguments or config, 3 malformed or missing
data, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cine import CineSequence, normalize, read_cine, write_cine
from .estimator import AnatomyPrior, DivergenceError, EstimatorConfig, estimate_pair
from .io import FormatError, atomic_write, format_keyvalue, read_keyvalue, read_pgm, read_tensor, write_pgm, write_tensor
from .losses import LossWeights
from .report import METHODS, MethodResults, write_report
from .shape_prior import VaeConfig, VaeDivergenceError, load_vae, save_vae, train_vae, vae_correct
from .synth import MaskFamilyConfig, PhantomConfig, generate_mask_family, generate_phantom
from .tracker import MetricTable, TrackingError, evaluate_tracking, track_sequence, weak_labels_from_result

log = logging.getLogger("aatrack")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------

def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "yes", "true", "on"):
        return True
    if s in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected yes/no, got {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("auto", "none", "") else float(v)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default, help)
CONFIG_KEYS: dict[str, tuple] = {
    "seed": (int, 0, "base seed for data generation and training"),
    "jobs": (int, 1, "worker processes across independent cines (1 = serial reference)"),
    "compensate": (_bool, True, "apply drift compensation"),
    "parameterization": (str, "direct_field", "direct_field or siamese_net"),
    "levels": (int, 3, "pyramid levels (direct field)"),
    "iters_per_level": (int, 150, "optimiser steps per pyramid level"),
    "learning_rate": (float, 1e-2, "direct-field learning rate"),
    "grad_smoothing": (float, 6.0, "Gaussian sigma applied to direct-field gradients"),
    "recon_every": (int, 1, "recompute VAE reconstructions every k iterations"),
    "channels": (_ints, (8, 16, 32), "siamese net channel widths"),
    "net_learning_rate": (float, 1e-3, "siamese net learning rate"),
    "batch_size": (int, 4, "siamese net batch size"),
    "epochs": (int, 20, "siamese net epochs (baseline and refinement)"),
    "lambda_h": (float, 0.02, "baseline Huber weight"),
    "aat_lambda_h": (float, 0.04, "Huber weight of the shape-constrained models"),
    "lambda_anat": (float, 6.0, "anatomy loss weight"),
    "lambda_recon": (float, 1.2, "reconstruction loss weight"),
    "huber_delta": (float, 1.0, "Huber threshold"),
    "latent_dim": (int, 32, "VAE latent size"),
    "vae_channels": (_ints, (8, 16, 32), "VAE encoder channel widths"),
    "vae_epochs": (int, 120, "VAE epochs"),
    "vae_batch_size": (int, 16, "VAE batch size"),
    "vae_learning_rate": (float, 2e-3, "VAE learning rate"),
    "kld_weight": (_opt_float, None, "KLD weight (auto = 1e-3 * pixels / latent_dim)"),
    "vae_augment": (_bool, True, "flip/rotation augmentation"),
    "vae_denoise": (float, 0.25, "probability of perturbing a VAE training input"),
    "size": (int, 64, "phantom grid size"),
    "frames": (int, 12, "frames per phantom"),
    "count": (int, 20, "phantoms to generate (evaluation cines for --dataset)"),
    "train_count": (int, 4, "weakly labelled training cines (--dataset)"),
    "mask_count": (int, 400, "VAE training masks (--dataset)"),
    "contraction_amplitude": (float, 0.25, "peak inward wall motion, fraction of radius"),
    "inner_radius": (float, 12.0, "inner wall radius (px)"),
    "wall_thickness": (float, 5.0, "wall thickness (px)"),
    "gap_deg": (float, 70.0, "opening of the C shape (degrees)"),
    "distractor": (_bool, False, "add the intracavity distractor"),
    "distractor_radius": (float, 3.0, "distractor radius at ED (px)"),
    "distractor_growth": (float, 3.0, "relative distractor growth at peak contraction"),
    "distractor_follow": (float, 1.0, "distractor attachment motion relative to the wall"),
    "distractor_overlap": (float, 1.0, "distractor overlap with the wall (px)"),
    "distractor_contrast": (float, 1.0, "distractor contrast (1 = wall intensity)"),
    "texture_noise": (float, 0.05, "texture standard deviation"),
    "drift": (float, 0.01, "intensity gain drift per frame"),
    "pixel_spacing": (float, 1.5, "mm per pixel"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def build(cls, file_values: dict[str, str], overrides: dict[str, str]) -> "RunConfig":
        vals = {k: d for k, (_, d, _) in CONFIG_KEYS.items()}
        for source in (file_values, overrides):
            for k, raw in source.items():
                if k not in CONFIG_KEYS:
                    raise ConfigError(f"unknown config key {k!r}")
                try:
                    vals[k] = CONFIG_KEYS[k][0](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {k}: {exc}") from exc
        if vals["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
        return cls(vals)

    def resolved_text(self) -> str:
        return format_keyvalue({k: _fmt(v) for k, v in sorted(self.values.items())})

    def weights(self, method: str = "Baseline") -> LossWeights:
        v = self.values
        base = LossWeights(lambda_h=v["lambda_h"], huber_delta=v["huber_delta"])
        if method == "Baseline":
            return base
        anat = v["lambda_anat"] if method in ("Baseline+anat", "AATracker") else 0.0
        recon = v["lambda_recon"] if method in ("Baseline+recon", "AATracker") else 0.0
        return base.with_(lambda_h=v["aat_lambda_h"], lambda_anat=anat, lambda_recon=recon)

    def estimator(self, method: str = "Baseline") -> EstimatorConfig:
        v = self.values
        try:
            return EstimatorConfig(
                levels=v["levels"], iters_per_level=v["iters_per_level"], learning_rate=v["learning_rate"],
                weights=self.weights(method), parameterization=v["parameterization"], seed=v["seed"],
                recon_every=v["recon_every"], grad_smoothing=v["grad_smoothing"], channels=v["channels"],
                net_learning_rate=v["net_learning_rate"], batch_size=v["batch_size"], epochs=v["epochs"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def vae(self, grid: tuple[int, int]) -> VaeConfig:
        v = self.values
        try:
            return VaeConfig(
                input_size=grid, latent_dim=v["latent_dim"], channels=v["vae_channels"], epochs=v["vae_epochs"],
                batch_size=v["vae_batch_size"], learning_rate=v["vae_learning_rate"], kld_weight=v["kld_weight"],
                augment=v["vae_augment"], denoise=v["vae_denoise"], seed=v["seed"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def phantom(self, seed: int) -> PhantomConfig:
        v = self.values
        keys = ("size", "frames", "contraction_amplitude", "inner_radius", "wall_thickness", "gap_deg",
                "distractor", "distractor_radius", "distractor_growth", "distractor_follow",
                "distractor_overlap", "distractor_contrast", "texture_noise", "drift", "pixel_spacing")
        cfg = PhantomConfig(seed=seed, **{k: v[k] for k in keys})
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


# -- output staging and parallel map ----------------------------------------

@contextmanager
def staged_output(out):
    """Write into a sibling temp directory; move results into ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for entry in sorted(tmp.iterdir()):
        dest = out / entry.name
        if dest.is_dir() and not dest.is_symlink():
            shutil.rmtree(dest)
        os.replace(entry, dest)
    tmp.rmdir()


def parallel_map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _write_csv(path, rows) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    atomic_write(path, buf.getvalue().encode("ascii"))


def _history_rows(history: list[dict]) -> list[list[str]]:
    if not history:
        return [["iteration", "loss"]]
    keys = ["iteration"] + [k for k in history[0] if k != "iteration"]
    for h in history:
        for k in h:
            if k not in keys:
                keys.append(k)
    rows = [keys]
    for h in history:
        rows.append([_fmt(h[k]) if k in h else "" for k in keys])
    return rows


def _cine_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    if (root / "manifest.txt").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.txt").is_file())
    if not dirs:
        raise FormatError(f"{root}: no cine directories (manifest.txt) found")
    return dirs


def _load_net(path):
    from .network import load_siamese

    return load_siamese(path) if path else None


# -- commands ---------------------------------------------------------------

def cmd_synth(args, rc: RunConfig, out: Path) -> None:
    seed = rc["seed"]
    if args.dataset:
        masks = generate_mask_family(rc["mask_count"], MaskFamilyConfig(size=rc["size"]), seed=seed + 20000)
        (out / "vae_masks").mkdir()
        for i, m in enumerate(masks):
            write_pgm(out / "vae_masks" / f"mask_{i:04d}.pgm", m)
        for i in range(rc["train_count"]):
            ph = generate_phantom(rc.phantom(seed + 10000 + i))
            write_cine(ph.cine.weak_view(), out / "train" / ph.cine.cine_id)
        root = out / "eval"
    else:
        root = out
    for i in range(rc["count"]):
        ph = generate_phantom(rc.phantom(seed + i))
        write_cine(ph.cine, root / ph.cine.cine_id)


def cmd_register(args, rc: RunConfig, out: Path) -> None:
    i1, i2 = normalize(read_tensor(args.i1)), normalize(read_tensor(args.i2))
    net = _load_net(args.checkpoint)
    method = "Baseline"
    anatomy = None
    if args.m1 or args.m2:
        if not (args.m1 and args.m2):
            raise ConfigError("--m1 and --m2 must be given together")
        vae = load_vae(args.vae) if args.vae else None
        anatomy = AnatomyPrior(read_pgm(args.m1).astype(float), read_pgm(args.m2).astype(float), vae)
        method = "AATracker" if vae is not None else "Baseline+anat"
    cfg = rc.estimator(method)
    if net is not None:
        cfg = cfg.with_(parameterization="siamese_net")
    pair = estimate_pair(i1, i2, cfg, anatomy=anatomy, params=net)
    write_tensor(out / "f12.aat", pair.f12.numpy())
    write_tensor(out / "f21.aat", pair.f21.numpy())
    _write_csv(out / "history.csv", _history_rows(pair.history))
    atomic_write(out / "summary.txt", format_keyvalue({
        "final_loss": _fmt(pair.final_loss), "iterations": pair.iterations_run,
        "converged": _fmt(pair.converged)}).encode("ascii"))


def _metric_rows(table: MetricTable) -> list[list[str]]:
    rows = [["frame", "dsc", "hd_mm", "assd_mm"]]
    for f, r in zip(table.frames, table.reports):
        rows.append([str(f), f"{r.dsc:.6f}", f"{r.hd_mm:.6f}", f"{r.assd_mm:.6f}"])
    return rows


def _write_tracking(out: Path, cine: CineSequence, result, table: MetricTable | None) -> None:
    for n, f in enumerate(result.final_flows, start=1):
        write_tensor(out / f"composite_{n:03d}.aat", f.numpy())
    for n, m in enumerate(result.tracked_masks):
        write_pgm(out / f"tracked_{n:03d}.pgm", m)
    if table is not None:
        _write_csv(out / "metrics.csv", _metric_rows(table))


def _track_variants(cine: CineSequence, rc: RunConfig, methods, net=None, vae=None, nets=None):
    """Track one cine with every requested method; labels come from the baseline run."""
    compensate = rc["compensate"]
    results = {}
    base = track_sequence(cine, rc.estimator("Baseline").with_(
        parameterization="siamese_net" if net is not None else "direct_field"), params=net, compensate=compensate)
    results["Baseline"] = base
    if nets is not None:
        for m in methods:
            if m != "Baseline":
                cfg = rc.estimator(m).with_(parameterization="siamese_net")
                results[m] = track_sequence(cine, cfg, params=nets[m], compensate=compensate)
        return results
    need_labels = [m for m in methods if m != "Baseline"]
    if need_labels:
        if vae is None:
            raise ConfigError("anatomy-aware tracking needs a VAE")
        labels = weak_labels_from_result(base, vae)
        for m in need_labels:
            results[m] = track_sequence(cine, rc.estimator(m), compensate=compensate, labels=labels, vae=vae)
    return results


def cmd_track(args, rc: RunConfig, out: Path) -> None:
    cine = read_cine(args.cine)
    net = _load_net(args.checkpoint)
    vae = load_vae(args.anatomy) if args.anatomy else None
    if vae is not None and net is not None:
        raise ConfigError("--anatomy applies to direct-field tracking; refine a network checkpoint instead")
    method = "AATracker" if vae is not None else "Baseline"
    res = _track_variants(cine, rc, ["Baseline", method], net=net, vae=vae)[method]
    table = None
    if cine.truth_masks is not None:
        table = evaluate_tracking(res, cine.truth_masks, cine.pixel_spacing, cine.cine_id)
    _write_tracking(out, cine, res, table)


def _read_masks(root) -> list[np.ndarray]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix == ".pgm")
    if not files:
        raise FormatError(f"{root}: no .pgm masks found")
    return [read_pgm(p) for p in files]


def _train_vae_stage(masks: list[np.ndarray], rc: RunConfig, out: Path, figures: bool = True):
    from .plotting import plot_training_curve

    vae = train_vae(masks, rc.vae(masks[0].shape))
    save_vae(vae, out / "vae.ckpt")
    _write_csv(out / "vae_history.csv", _history_rows(vae.history))
    if figures:
        plot_training_curve(vae.history, out / "vae_training.png", keys=("loss", "recon", "kld"), title="VAE")
    return vae


def cmd_train_vae(args, rc: RunConfig, out: Path) -> None:
    if args.masks:
        masks = _read_masks(args.masks)
    else:
        masks = generate_mask_family(rc["mask_count"], MaskFamilyConfig(size=rc["size"]), seed=rc["seed"] + 20000)
    _train_vae_stage(masks, rc, out)


def cmd_correct_mask(args, rc: RunConfig, out: Path) -> None:
    vae = load_vae(args.vae)
    mask = read_pgm(args.mask).astype(np.float64)
    corrected = vae_correct(vae, mask)
    write_pgm(out / "corrected.pgm", corrected)
    write_tensor(out / "corrected_soft.aat", corrected)


def _pairs(cines: list[CineSequence]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for c in cines:
        frames = [normalize(f) for f in c.frames]
        out += [(frames[n - 1], frames[n]) for n in range(1, len(frames))]
    return out


def cmd_train_baseline(args, rc: RunConfig, out: Path) -> None:
    from .network import save_siamese, train_siamese
    from .plotting import plot_training_curve

    cines = [read_cine(d).weak_view() for d in _cine_dirs(args.cines)]
    net = train_siamese(_pairs(cines), rc.estimator("Baseline").with_(parameterization="siamese_net"))
    save_siamese(net, out / "baseline.ckpt")
    _write_csv(out / "baseline_history.csv", _history_rows(net.history))
    plot_training_curve(net.history, out / "baseline_training.png", title="baseline")


def _refine_samples(cines, labels) -> list[tuple]:
    samples = []
    for c, lab in zip(cines, labels):
        frames = [normalize(f) for f in c.frames]
        samples += [(frames[n - 1], frames[n], lab[n - 1], lab[n]) for n in range(1, len(frames))]
    return samples


def _refine_nets(net, cines, rc: RunConfig, vae, methods) -> dict:
    from .network import refine_anatomy_aware
    from .tracker import prepare_weak_labels

    cfg = rc.estimator("Baseline").with_(parameterization="siamese_net")
    labels = prepare_weak_labels(cines, cfg, vae, params=net, compensate=rc["compensate"])
    samples = _refine_samples(cines, labels)
    return {m: refine_anatomy_aware(net, samples, rc.estimator(m).with_(parameterization="siamese_net"), vae)
            for m in methods if m != "Baseline"}


def cmd_refine(args, rc: RunConfig, out: Path) -> None:
    from .network import load_siamese, save_siamese

    net = load_siamese(args.checkpoint)
    vae = load_vae(args.vae)
    cines = [read_cine(d).weak_view() for d in _cine_dirs(args.cines)]
    refined = _refine_nets(net, cines, rc, vae, ["AATracker"])["AATracker"]
    save_siamese(refined, out / "aatracker.ckpt")
    _write_csv(out / "refine_history.csv", _history_rows(refined.history))


def cmd_evaluate(args, rc: RunConfig, out: Path) -> None:
    from .plotting import plot_paired_comparison

    cine_dirs = _cine_dirs(args.cines)
    cines = [read_cine(d) for d in cine_dirs]
    if any(c.truth_masks is None for c in cines):
        raise FormatError("evaluation cines must carry ground-truth masks")
    results = []
    for spec in args.tracked:
        if "=" not in spec:
            raise ConfigError(f"--tracked expects NAME=DIR, got {spec!r}")
        name, root = spec.split("=", 1)
        tables = []
        for d, c in zip(cine_dirs, cines):
            masks = _read_masks(Path(root) / d.name)
            tables.append(evaluate_tracking(masks, c.truth_masks, c.pixel_spacing, c.cine_id))
        results.append(MethodResults(name, tables))
    write_report(results, out, reference=results[0].name)
    _paired_figure(results, out, plot_paired_comparison)


def _paired_figure(results: list[MethodResults], out: Path, plot) -> None:
    from .report import p_value_or_nan

    values = {r.name: r.end("hd_mm") for r in results}
    ref = results[0]
    pv = {r.name: p_value_or_nan(ref.end("hd_mm"), r.end("hd_mm")) for r in results[1:]}
    plot(values, out / "paired_end_hd.png", metric="end-frame HD (mm)", p_values=pv, reference=ref.name)


# pipeline workers are module-level so they pickle for --jobs > 1

def _pipeline_direct_job(job):
    cine_dir, values, vae_path = job
    rc = RunConfig(values)
    cine = read_cine(cine_dir)
    vae = load_vae(vae_path)
    res = _track_variants(cine.weak_view(), rc, METHODS, vae=vae)
    tables = {m: evaluate_tracking(r, cine.truth_masks, cine.pixel_spacing, cine.cine_id) for m, r in res.items()}
    return tables, {m: r.tracked_masks for m, r in res.items()}


def _pipeline_net_job(job):
    cine_dir, values, ckpts = job
    from .network import load_siamese

    rc = RunConfig(values)
    cine = read_cine(cine_dir)
    nets = {m: load_siamese(p) for m, p in ckpts.items()}
    res = _track_variants(cine.weak_view(), rc, METHODS, net=nets["Baseline"], nets=nets)
    tables = {m: evaluate_tracking(r, cine.truth_masks, cine.pixel_spacing, cine.cine_id) for m, r in res.items()}
    return tables, {m: r.tracked_masks for m, r in res.items()}


def cmd_pipeline(args, rc: RunConfig, out: Path) -> None:
    from .network import save_siamese, train_siamese
    from .plotting import plot_paired_comparison, plot_tracking_overlay, plot_training_curve

    data = Path(args.dataset)
    eval_dirs = _cine_dirs(data / "eval")
    stage = "train-vae"
    try:
        masks = _read_masks(data / "vae_masks")
        vae = _train_vae_stage(masks, rc, out)
        if rc["parameterization"] == "siamese_net":
            stage = "train-baseline"
            train = [read_cine(d).weak_view() for d in _cine_dirs(data / "train")]
            net = train_siamese(_pairs(train), rc.estimator("Baseline").with_(parameterization="siamese_net"))
            save_siamese(net, out / "baseline.ckpt")
            plot_training_curve(net.history, out / "baseline_training.png", title="baseline")
            stage = "refine"
            refined = _refine_nets(net, train, rc, vae, METHODS)
            ckpts = {"Baseline": out / "baseline.ckpt"}
            for m, r in refined.items():
                path = out / (m.lower().replace("+", "_") + ".ckpt")
                save_siamese(r, path)
                ckpts[m] = path
            jobs = [(d, rc.values, ckpts) for d in eval_dirs]
            worker = _pipeline_net_job
        else:
            jobs = [(d, rc.values, out / "vae.ckpt") for d in eval_dirs]
            worker = _pipeline_direct_job
        stage = "evaluate"
        outputs = parallel_map(worker, jobs, rc["jobs"])
    except (DivergenceError, TrackingError, VaeDivergenceError) as exc:
        raise DivergenceError(f"pipeline stage {stage}: {exc}") from exc
    results = [MethodResults(m, [o[0][m] for o in outputs]) for m in METHODS]
    write_report(results, out)
    _paired_figure(results, out, plot_paired_comparison)
    first = read_cine(eval_dirs[0])
    plot_tracking_overlay(first.frames, first.truth_masks, {m: outputs[0][1][m] for m in ("Baseline", "AATracker")},
                          out / f"overlay_{first.cine_id}.png")


COMMANDS = {
    "synth": (cmd_synth, "generate phantom cines (or a full pipeline dataset with --dataset)"),
    "register": (cmd_register, "estimate (F12, F21) for one image pair"),
    "track": (cmd_track, "track the ED mask through one cine"),
    "train-vae": (cmd_train_vae, "train the mask VAE"),
    "correct-mask": (cmd_correct_mask, "VAE-correct one mask"),
    "train-baseline": (cmd_train_baseline, "train the siamese baseline network"),
    "refine": (cmd_refine, "anatomy-aware refinement of a baseline network"),
    "evaluate": (cmd_evaluate, "compare tracked-mask sets against ground truth"),
    "pipeline": (cmd_pipeline, "VAE -> baseline -> weak labels -> refine -> evaluate report"),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config keys (override --config)")
    for key, (_, default, help_) in CONFIG_KEYS.items():
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="V", default=None,
                       help=f"{help_} [default {_fmt(default)}]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aatrack", description="Anatomy-aware myocardium tracking on cine phantoms.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        if name == "synth":
            p.add_argument("--dataset", action="store_true", help="write vae_masks/, train/ and eval/")
        elif name == "register":
            p.add_argument("--i1", required=True)
            p.add_argument("--i2", required=True)
            p.add_argument("--m1")
            p.add_argument("--m2")
            p.add_argument("--vae")
            p.add_argument("--checkpoint")
        elif name == "track":
            p.add_argument("cine")
            p.add_argument("--checkpoint", help="siamese network checkpoint (default: direct field)")
            p.add_argument("--anatomy", metavar="VAE_CKPT", help="anatomy-aware tracking with this VAE")
        elif name == "train-vae":
            p.add_argument("--masks", help="directory of PGM masks (default: synthetic family)")
        elif name == "correct-mask":
            p.add_argument("--vae", required=True)
            p.add_argument("--mask", required=True)
        elif name == "train-baseline":
            p.add_argument("--cines", required=True)
        elif name == "refine":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--vae", required=True)
            p.add_argument("--cines", required=True)
        elif name == "evaluate":
            p.add_argument("--cines", required=True)
            p.add_argument("--tracked", action="append", required=True, metavar="NAME=DIR")
        elif name == "pipeline":
            p.add_argument("dataset")
        _add_config_flags(p)
    return parser


def _read_config(path) -> dict[str, str]:
    try:
        return read_keyvalue(path)
    except (OSError, FormatError) as exc:
        raise ConfigError(f"cannot use config file {path}: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _normalise_switches(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_ARGS
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        file_values = _read_config(args.config) if args.config else {}
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        rc = RunConfig.build(file_values, overrides)
        with staged_output(args.out) as tmp:
            atomic_write(tmp / "config.resolved", rc.resolved_text().encode("ascii"))
            fn(args, rc, tmp)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, FormatError):
            print(f"error: malformed input: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, TrackingError, VaeDivergenceError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


_SWITCH_VALUES = ("1", "0", "yes", "no", "true", "false", "on", "off")


def _normalise_switches(argv: list[str]) -> list[str]:
    """Accept bare ``--compensate`` / ``--no-compensate`` switches."""
    out: list[str] = []
    for i, a in enumerate(argv):
        if a == "--no-compensate":
            out += ["--compensate", "no"]
        elif a == "--compensate" and (i + 1 == len(argv) or argv[i + 1].lower() not in _SWITCH_VALUES):
            out += ["--compensate", "yes"]
        else:
            out.append(a)
    return out


if __name__ == "__main__":
    sys.exit(main())
