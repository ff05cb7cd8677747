"""Siamese convolutional motion network.

A shared three-level encoder is applied to both frames. One decoder, fed the
two feature stacks in a fixed order, produces the flow from the first to the
second; feeding them swapped produces the reverse flow, so exchanging the
inputs exactly exchanges (F12, F21). The decoder emits a flow head at every
scale and refines upward, each level adding a residual to the 2x upsampled
coarser flow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .estimator import DivergenceError, EstimatorConfig
from .flow import FlowField, warp
from .io import FormatError, read_checkpoint, write_checkpoint
from .optim import Adam
from .tensor import NonFiniteError, Parameter, Tensor, upsample_matrix

log = logging.getLogger(__name__)

HEAD_INIT = 1e-3


@dataclass
class SiameseNet:
    params: dict[str, Parameter]
    channels: tuple[int, int, int]
    history: list[dict] = field(default_factory=list)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def _layer_shapes(channels) -> dict[str, tuple]:
    c1, c2, c3 = channels
    return {
        "enc1.w": (c1, 1, 3, 3), "enc1.b": (c1,),
        "enc2.w": (c2, c1, 4, 4), "enc2.b": (c2,),
        "enc3.w": (c3, c2, 4, 4), "enc3.b": (c3,),
        "dec3.w": (c3, 2 * c3, 3, 3), "dec3.b": (c3,),
        "head3.w": (2, c3, 3, 3), "head3.b": (2,),
        "up2.w": (c3, c2, 4, 4), "up2.b": (c2,),
        "dec2.w": (c2, 3 * c2, 3, 3), "dec2.b": (c2,),
        "head2.w": (2, c2, 3, 3), "head2.b": (2,),
        "up1.w": (c2, c1, 4, 4), "up1.b": (c1,),
        "dec1.w": (c1, 3 * c1, 3, 3), "dec1.b": (c1,),
        "head1.w": (2, c1, 3, 3), "head1.b": (2,),
    }


def siamese_parameter_count(channels=(8, 16, 32)) -> int:
    """Closed form for ``build_siamese_net``.

    encoder: 9*c1 + c1 + 16*c1*c2 + c2 + 16*c2*c3 + c3
    decoder: 18*c3^2 + c3 + 27*c2^2 + c2 + 27*c1^2 + c1   (fusion convs)
             + 16*c3*c2 + c2 + 16*c2*c1 + c1              (upsampling)
             + 18*(c1 + c2 + c3) + 6                       (flow heads)
    """
    c1, c2, c3 = channels
    enc = 9 * c1 + c1 + 16 * c1 * c2 + c2 + 16 * c2 * c3 + c3
    fuse = 18 * c3 * c3 + c3 + 27 * c2 * c2 + c2 + 27 * c1 * c1 + c1
    up = 16 * c3 * c2 + c2 + 16 * c2 * c1 + c1
    heads = 18 * (c1 + c2 + c3) + 6
    return enc + fuse + up + heads


def build_siamese_net(config: EstimatorConfig) -> SiameseNet:
    channels = tuple(int(c) for c in config.channels)
    if len(channels) != 3 or min(channels) < 1:
        raise ValueError("siamese net needs three positive channel widths")
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _layer_shapes(channels).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.startswith("head"):
            data = rng.normal(0.0, HEAD_INIT, shape)
        elif name.startswith("up"):
            data = rng.normal(0.0, np.sqrt(2.0 / (shape[0] * 4)), shape)
        else:
            data = rng.normal(0.0, np.sqrt(2.0 / (shape[1] * shape[2] * shape[3])), shape)
        params[name] = Parameter(data, name)
    return SiameseNet(params, channels)


def _encode(p, x):
    e1 = T.leaky_relu(T.conv2d(x, p["enc1.w"], p["enc1.b"], 1, 1))
    e2 = T.leaky_relu(T.conv2d(e1, p["enc2.w"], p["enc2.b"], 2, 1))
    e3 = T.leaky_relu(T.conv2d(e2, p["enc3.w"], p["enc3.b"], 2, 1))
    return e1, e2, e3


def _upsample_flow(f: Tensor) -> Tensor:
    h, w = f.shape[-2:]
    return T.resample(f, upsample_matrix(h), upsample_matrix(w)) * 2.0


def _decode(p, fa, fb) -> Tensor:
    a1, a2, a3 = fa
    b1, b2, b3 = fb
    d3 = T.leaky_relu(T.conv2d(T.concat([a3, b3], axis=1), p["dec3.w"], p["dec3.b"], 1, 1))
    flow = T.conv2d(d3, p["head3.w"], p["head3.b"], 1, 1)
    u2 = T.leaky_relu(T.conv_transpose2d(d3, p["up2.w"], p["up2.b"], 2, 1))
    d2 = T.leaky_relu(T.conv2d(T.concat([u2, a2, b2], axis=1), p["dec2.w"], p["dec2.b"], 1, 1))
    flow = _upsample_flow(flow) + T.conv2d(d2, p["head2.w"], p["head2.b"], 1, 1)
    u1 = T.leaky_relu(T.conv_transpose2d(d2, p["up1.w"], p["up1.b"], 2, 1))
    d1 = T.leaky_relu(T.conv2d(T.concat([u1, a1, b1], axis=1), p["dec1.w"], p["dec1.b"], 1, 1))
    return _upsample_flow(flow) + T.conv2d(d1, p["head1.w"], p["head1.b"], 1, 1)


def forward(params: dict[str, Tensor], i1, i2) -> tuple[Tensor, Tensor]:
    """Batched forward: (N, H, W) images -> (F12, F21), each (N, 2, H, W)."""
    a = np.asarray(i1, dtype=np.float64)
    b = np.asarray(i2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"siamese forward: expected matching (N, H, W) stacks, got {a.shape} and {b.shape}")
    if a.shape[1] % 4 or a.shape[2] % 4:
        raise ValueError("siamese forward: grid must be divisible by 4")
    fa = _encode(params, a[:, None])
    fb = _encode(params, b[:, None])
    return _decode(params, fa, fb), _decode(params, fb, fa)


def _frozen(net: SiameseNet) -> dict[str, Tensor]:
    return {k: Tensor.wrap(p.data) for k, p in net.params.items()}


def predict_pair(net: SiameseNet, i1, i2) -> tuple[FlowField, FlowField]:
    f12, f21 = forward(_frozen(net), np.asarray(i1)[None], np.asarray(i2)[None])
    return FlowField.from_array(f12.numpy()[0]), FlowField.from_array(f21.numpy()[0])


def _check_pairs(pairs) -> tuple[int, int]:
    if not pairs:
        raise ValueError("training needs at least one pair")
    grid = np.shape(pairs[0][0])
    for item in pairs:
        if np.shape(item[0]) != grid or np.shape(item[1]) != grid:
            raise ValueError("all training pairs must share one grid")
    return grid


def _batch_loss(params, items, weights, vae) -> tuple[Tensor, dict[str, float]]:
    i1 = np.stack([it[0] for it in items])
    i2 = np.stack([it[1] for it in items])
    f12, f21 = forward(params, i1, i2)
    total = None
    sums: dict[str, float] = {}
    for k, it in enumerate(items):
        a, b = FlowField(f12[k]), FlowField(f21[k])
        if len(it) > 2:
            m1, m2 = it[2], it[3]
            r1 = r2 = None
            if vae is not None and weights.lambda_recon > 0:
                from .shape_prior import vae_correct_batch

                rec = vae_correct_batch(vae, np.stack([warp(m1, a.detach()).warped.data,
                                                       warp(m2, b.detach()).warped.data]))
                r1, r2 = rec[0], rec[1]
            terms = L.objective_terms(it[0], it[1], a, b, weights, m1, m2, r1, r2)
        else:
            terms = L.objective_terms(it[0], it[1], a, b, weights)
        loss = L.combine(terms, weights)
        total = loss if total is None else total + loss
        for name, v in terms.items():
            sums[name] = sums.get(name, 0.0) + v.item() / len(items)
    return total * (1.0 / len(items)), sums


def _fit(net: SiameseNet, data, config: EstimatorConfig, weights, vae, seed_offset: int) -> SiameseNet:
    rng = np.random.default_rng(config.seed + seed_offset)
    opt = Adam(list(net.params.values()), lr=config.net_learning_rate)
    it = len(net.history)
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), config.batch_size):
            items = [data[i] for i in order[s: s + config.batch_size]]
            try:
                loss, terms = _batch_loss(net.params, items, weights, vae)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(f"network training diverged at epoch {epoch}, iteration {it}") from exc
            opt.step()
            net.history.append({"epoch": epoch, "iteration": it, "loss": loss.item(), **terms})
            it += 1
    return net


def train_siamese(pairs, config: EstimatorConfig) -> SiameseNet:
    """Unsupervised training on (i1, i2) pairs under the baseline objective."""
    _check_pairs(pairs)
    data = [(np.asarray(a, float), np.asarray(b, float)) for a, b in pairs]
    net = build_siamese_net(config)
    base = config.weights.with_(lambda_anat=0.0, lambda_recon=0.0)
    return _fit(net, data, config, base, None, 1)


def refine_anatomy_aware(net: SiameseNet, samples, config: EstimatorConfig, vae=None) -> SiameseNet:
    """Fine-tune a copy of ``net`` on (i1, i2, m1, m2) samples under the anatomy-aware objective."""
    _check_pairs(samples)
    data = [tuple(np.asarray(x, float) for x in s) for s in samples]
    if any(len(s) != 4 for s in data):
        raise ValueError("refinement samples must be (i1, i2, m1, m2)")
    copy = SiameseNet({k: Parameter(p.data.copy(), k) for k, p in net.params.items()}, net.channels)
    return _fit(copy, data, config, config.weights, vae, 2)


def mean_objective(net: SiameseNet, samples, weights, vae=None) -> dict[str, float]:
    """Average objective terms of a trained net over a dataset (no gradients)."""
    params = _frozen(net)
    acc: dict[str, float] = {}
    total = 0.0
    for s in samples:
        loss, terms = _batch_loss(params, [tuple(np.asarray(x, float) for x in s)], weights, vae)
        total += loss.item()
        for k, v in terms.items():
            acc[k] = acc.get(k, 0.0) + v
    n = len(samples)
    return {"loss": total / n, **{k: v / n for k, v in acc.items()}}


def save_siamese(net: SiameseNet, path) -> None:
    meta = {"kind": "siamese", "channels": ",".join(str(c) for c in net.channels)}
    write_checkpoint(path, {k: p.data for k, p in net.params.items()}, meta)


def load_siamese(path) -> SiameseNet:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "siamese":
        raise FormatError(f"{path}: not a siamese-network checkpoint")
    try:
        channels = tuple(int(c) for c in meta["channels"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing channel metadata") from exc
    shapes = _layer_shapes(channels)
    if set(tensors) != set(shapes):
        raise FormatError(f"{path}: parameter names do not match the network layout")
    params = {}
    for k, shape in shapes.items():
        if tensors[k].shape != shape:
            raise FormatError(f"{path}: tensor {k} has shape {tensors[k].shape}, expected {shape}")
        params[k] = Parameter(tensors[k], k)
    return SiameseNet(params, channels)
