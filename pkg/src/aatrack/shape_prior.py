"""Convolutional VAE over myocardium masks.

Encoder: three stride-2 4x4 convolutions (leaky ReLU) and a dense layer giving
``2 * latent_dim`` outputs (mu, then logvar). Decoder: dense layer to the
coarsest feature map, two stride-2 transposed convolutions with leaky ReLU and
a final transposed convolution to one channel of logits. Grids must be
divisible by 8.

Correction decodes the mean latent without sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import tensor as T
from .io import FormatError, read_checkpoint, write_checkpoint
from .losses import kld_loss
from .optim import Adam
from .tensor import NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 20.0


class VaeDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    input_size: tuple[int, int] = (64, 64)
    latent_dim: int = 32
    channels: tuple[int, int, int] = (8, 16, 32)
    epochs: int = 120
    batch_size: int = 16
    learning_rate: float = 2e-3
    kld_weight: float | None = None  # None -> 1e-3 * pixels / latent_dim
    augment: bool = True
    denoise: float = 0.25  # probability an input is perturbed while the target stays clean
    seed: int = 0

    def __post_init__(self):
        h, w = self.input_size
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ValueError("VAE input grid must be a positive multiple of 8 on both axes")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("channels must be three positive ints")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.denoise <= 1.0:
            raise ValueError("denoise must lie in [0, 1]")
        if self.kld_weight is not None and self.kld_weight < 0:
            raise ValueError("kld_weight must be non-negative")

    @property
    def effective_kld_weight(self) -> float:
        if self.kld_weight is not None:
            return float(self.kld_weight)
        h, w = self.input_size
        return 1e-3 * h * w / self.latent_dim

    def with_(self, **kw) -> "VaeConfig":
        return replace(self, **kw)


@dataclass
class VaeModel:
    params: dict[str, Parameter]
    input_size: tuple[int, int]
    latent_dim: int
    channels: tuple[int, int, int]
    history: list[dict] = field(default_factory=list)

    @property
    def coarse(self) -> tuple[int, int]:
        return self.input_size[0] // 8, self.input_size[1] // 8

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def init_vae(config: VaeConfig) -> VaeModel:
    rng = np.random.default_rng(config.seed)
    c1, c2, c3 = config.channels
    h8, w8 = config.input_size[0] // 8, config.input_size[1] // 8
    flat = c3 * h8 * w8
    z = config.latent_dim

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    shapes = {
        "enc1.w": he((c1, 1, 4, 4), 16), "enc1.b": np.zeros(c1),
        "enc2.w": he((c2, c1, 4, 4), 16 * c1), "enc2.b": np.zeros(c2),
        "enc3.w": he((c3, c2, 4, 4), 16 * c2), "enc3.b": np.zeros(c3),
        "enc_fc.w": rng.normal(0.0, np.sqrt(1.0 / flat), (flat, 2 * z)), "enc_fc.b": np.zeros(2 * z),
        "dec_fc.w": he((z, flat), z), "dec_fc.b": np.zeros(flat),
        "dec1.w": he((c3, c2, 4, 4), 4 * c3), "dec1.b": np.zeros(c2),
        "dec2.w": he((c2, c1, 4, 4), 4 * c2), "dec2.b": np.zeros(c1),
        "dec3.w": he((c1, 1, 4, 4), 4 * c1), "dec3.b": np.zeros(1),
    }
    params = {k: Parameter(v, k) for k, v in shapes.items()}
    return VaeModel(params, tuple(config.input_size), config.latent_dim, tuple(config.channels))


def vae_parameter_count(input_size=(64, 64), latent_dim: int = 32, channels=(8, 16, 32)) -> int:
    """Closed-form count matching ``init_vae``."""
    c1, c2, c3 = channels
    flat = c3 * (input_size[0] // 8) * (input_size[1] // 8)
    enc = (16 * 1 * c1 + c1) + (16 * c1 * c2 + c2) + (16 * c2 * c3 + c3) + (flat * 2 * latent_dim + 2 * latent_dim)
    dec = (latent_dim * flat + flat) + (16 * c3 * c2 + c2) + (16 * c2 * c1 + c1) + (16 * c1 + 1)
    return enc + dec


def _frozen(model: VaeModel) -> dict[str, Tensor]:
    return {k: Tensor.wrap(p.data) for k, p in model.params.items()}


def encode(params: dict[str, Tensor], x, latent_dim: int) -> tuple[Tensor, Tensor]:
    """x: (N, 1, H, W) -> (mu, logvar), each (N, latent_dim)."""
    h = T.leaky_relu(T.conv2d(x, params["enc1.w"], params["enc1.b"], 2, 1))
    h = T.leaky_relu(T.conv2d(h, params["enc2.w"], params["enc2.b"], 2, 1))
    h = T.leaky_relu(T.conv2d(h, params["enc3.w"], params["enc3.b"], 2, 1))
    n = h.shape[0]
    out = T.linear(T.reshape(h, (n, -1)), params["enc_fc.w"], params["enc_fc.b"])
    return out[:, :latent_dim], out[:, latent_dim:]


def decode_logits(params: dict[str, Tensor], z, coarse: tuple[int, int]) -> Tensor:
    """z: (N, latent_dim) -> logits (N, 1, H, W)."""
    z = T.as_tensor(z)
    n = z.shape[0]
    c3 = params["dec1.w"].shape[0]
    h = T.leaky_relu(T.linear(z, params["dec_fc.w"], params["dec_fc.b"]))
    h = T.reshape(h, (n, c3, coarse[0], coarse[1]))
    h = T.leaky_relu(T.conv_transpose2d(h, params["dec1.w"], params["dec1.b"], 2, 1))
    h = T.leaky_relu(T.conv_transpose2d(h, params["dec2.w"], params["dec2.b"], 2, 1))
    return T.conv_transpose2d(h, params["dec3.w"], params["dec3.b"], 2, 1)


def _as_batch(model: VaeModel, masks) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3 or m.shape[1:] != tuple(model.input_size):
        raise ValueError(f"mask grid {m.shape[-2:]} does not match VAE input grid {tuple(model.input_size)}")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    return m[:, None]


def vae_encode(model: VaeModel, mask) -> tuple[np.ndarray, np.ndarray]:
    """Latent mean and log-variance; 1-D outputs for a single (H, W) mask."""
    single = np.ndim(mask) == 2
    mu, logvar = encode(_frozen(model), _as_batch(model, mask), model.latent_dim)
    mu, logvar = mu.numpy(), np.clip(logvar.numpy(), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return (mu[0], logvar[0]) if single else (mu, logvar)


def vae_decode(model: VaeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != model.latent_dim:
        raise ValueError(f"latent has length {z.shape[1]}, model expects {model.latent_dim}")
    out = T._sigmoid(decode_logits(_frozen(model), z, model.coarse).numpy()[:, 0])
    return out[0] if single else out


def vae_sample_and_decode(model: VaeModel, mu, logvar, seed: int = 0) -> np.ndarray:
    """Decode z = mu + exp(logvar / 2) * eps with eps drawn from a seeded normal."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape or mu.shape[-1] != model.latent_dim:
        raise ValueError(f"latent statistics must both have trailing length {model.latent_dim}")
    eps = np.random.default_rng(seed).standard_normal(mu.shape)
    return vae_decode(model, mu + np.exp(0.5 * logvar) * eps)


def vae_correct(model: VaeModel, mask) -> np.ndarray:
    """Soft corrected mask decode(mu); threshold at 0.5 for a binary mask."""
    mu, _ = vae_encode(model, mask)
    return vae_decode(model, mu)


def vae_correct_batch(model: VaeModel, masks, chunk: int = 64) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim != 3:
        raise ValueError("expected a (N, H, W) stack of masks")
    parts = [vae_decode(model, vae_encode(model, m[s: s + chunk])[0]) for s in range(0, len(m), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros_like(m)


def vae_loss(params, batch: np.ndarray, latent_dim: int, coarse, kld_weight: float,
             eps: np.ndarray, target: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(total, recon, kld): per-sample summed BCE averaged over the batch, plus weighted KLD.

    ``target`` defaults to the input batch (plain reconstruction).
    """
    target = batch if target is None else target
    mu, logvar = encode(params, batch, latent_dim)
    z = mu + T.exp(logvar * 0.5) * Tensor(eps)
    logits = decode_logits(params, z, coarse)
    recon = T.bce_with_logits(logits, target).sum() * (1.0 / batch.shape[0])
    kld = kld_loss(mu, logvar)
    return recon + kld * kld_weight, recon, kld


def augment_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal/vertical flip and rotation by a multiple of 15 degrees."""
    m = mask
    if rng.random() < 0.5:
        m = m[:, ::-1]
    if rng.random() < 0.5:
        m = m[::-1, :]
    angle = 15.0 * int(rng.integers(0, 24))
    if angle:
        m = ndimage.rotate(m.astype(np.float64), angle, reshape=False, order=1, mode="constant", cval=0.0)
    return (np.asarray(m) >= 0.5).astype(np.float64)


def perturb_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add or cut one to three discs (radius 2-6 px) centred near the mask boundary."""
    m = mask >= 0.5
    h, w = m.shape
    dist = ndimage.distance_transform_edt(~m) + ndimage.distance_transform_edt(m)
    rr, cc = np.mgrid[0:h, 0:w]
    out = m.copy()
    for _ in range(int(rng.integers(1, 4))):
        radius = rng.uniform(2.0, 6.0)
        cand = np.argwhere(dist <= radius + 2.0)
        if len(cand) == 0:
            break
        cy, cx = cand[rng.integers(len(cand))]
        disc = (rr - cy) ** 2 + (cc - cx) ** 2 <= radius * radius
        out = out | disc if rng.random() < 0.7 else out & ~disc
    return out.astype(np.float64)


def train_vae(masks, config: VaeConfig | None = None) -> VaeModel:
    """Mini-batch Adam on BCE + kld_weight * KLD; bit-reproducible for a fixed seed."""
    config = config or VaeConfig()
    data = [np.asarray(m, dtype=np.float64) for m in masks]
    if not data:
        raise ValueError("train_vae needs at least one mask")
    if any(m.shape != tuple(config.input_size) for m in data):
        raise ValueError(f"all masks must share the VAE grid {tuple(config.input_size)}")
    data = [(m >= 0.5).astype(np.float64) for m in data]
    model = init_vae(config)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(list(model.params.values()), lr=config.learning_rate)
    beta = config.effective_kld_weight
    it = 0
    total_steps = config.epochs * -(-len(data) // config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), config.batch_size):
            idx = order[s: s + config.batch_size]
            target = np.stack([augment_mask(data[i], rng) if config.augment else data[i] for i in idx])
            inputs = np.stack([perturb_mask(t, rng) if rng.random() < config.denoise else t for t in target])
            eps = rng.standard_normal((len(idx), config.latent_dim))
            try:
                total, recon, kld = vae_loss(model.params, inputs[:, None], config.latent_dim, model.coarse, beta,
                                             eps, target[:, None])
                opt.zero_grad()
                total.backward()
            except NonFiniteError as exc:
                raise VaeDivergenceError(f"VAE loss diverged at epoch {epoch}, iteration {it}") from exc
            # cosine decay to 5% of the base rate
            opt.lr = config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * it / total_steps)))
            opt.step()
            model.history.append({"epoch": epoch, "iteration": it, "loss": total.item(),
                                  "recon": recon.item(), "kld": kld.item()})
            it += 1
        log.debug("vae epoch %d loss %.4f", epoch, model.history[-1]["loss"])
    return model


def save_vae(model: VaeModel, path) -> None:
    meta = {
        "kind": "vae",
        "height": model.input_size[0],
        "width": model.input_size[1],
        "latent_dim": model.latent_dim,
        "channels": ",".join(str(c) for c in model.channels),
    }
    write_checkpoint(path, {k: p.data for k, p in model.params.items()}, meta)


def load_vae(path) -> VaeModel:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "vae":
        raise FormatError(f"{path}: not a VAE checkpoint")
    try:
        size = (int(meta["height"]), int(meta["width"]))
        latent = int(meta["latent_dim"])
        channels = tuple(int(c) for c in meta["channels"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete VAE metadata") from exc
    ref = init_vae(VaeConfig(input_size=size, latent_dim=latent, channels=channels))
    if set(tensors) != set(ref.params):
        raise FormatError(f"{path}: parameter names do not match the VAE layout")
    for k, p in ref.params.items():
        if tensors[k].shape != p.data.shape:
            raise FormatError(f"{path}: tensor {k} has shape {tensors[k].shape}, expected {p.data.shape}")
        p.data = tensors[k]
    return ref
