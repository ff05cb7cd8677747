"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records a closure that maps the output gradient to the
gradients of its inputs. ``backward`` walks the tape once in reverse
topological order and then releases it; a graph cannot be replayed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Constant view of an existing float64 array (no copy); the caller must not mutate it."""
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            return cls(arr)
        return cls._make(arr, (), None, "leaf")

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return reduce("sum", self)

    def mean(self):
        return reduce("mean", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ------------------------------------------------------------

def _binary_operands(a, b, op: str):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return a, b, False
    if np.ndim(b) != 0:
        raise ValueError(f"{op}: only scalars broadcast, got array of shape {np.shape(b)}")
    return a, float(b), True


def add(a, b) -> Tensor:
    a, b, scalar = _binary_operands(a, b, "add")
    if scalar:
        return Tensor._make(a.data + b, (a,), lambda g: (g,), "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b, scalar = _binary_operands(a, b, "sub")
    if scalar:
        return Tensor._make(a.data - b, (a,), lambda g: (g,), "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b, scalar = _binary_operands(a, b, "mul")
    if scalar:
        return Tensor._make(a.data * b, (a,), lambda g: (g * b,), "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    s = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return Tensor._make(d * d, (a,), lambda g: (2.0 * d * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return Tensor._make(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,), "relu")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    k = np.where(a.data > 0, 1.0, slope)
    return Tensor._make(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def huber(a, delta: float = 1.0) -> Tensor:
    """0.5 z^2 for |z| <= delta, delta (|z| - delta/2) beyond."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    a = as_tensor(a)
    z = a.data
    quad = np.abs(z) <= delta
    out = np.where(quad, 0.5 * z * z, delta * (np.abs(z) - 0.5 * delta))
    dz = np.where(quad, z, delta * np.sign(z))
    return Tensor._make(out, (a,), lambda g: (g * dz,), "huber")


def bce_with_logits(logits, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against a fixed target."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"bce: shape mismatch {logits.shape} vs {t.shape}")
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    p = _sigmoid(x)
    return Tensor._make(out, (logits,), lambda g: (g * (p - t),), "bce_with_logits")


_UNARY = {
    "abs": abs,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "square": square,
    "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions and shape ops ----------------------------------------------

def reduce(op_kind: str, a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError(f"{op_kind} of an empty tensor")
    shape = a.shape
    if op_kind == "sum":
        return Tensor._make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")
    if op_kind == "mean":
        n = a.size
        return Tensor._make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")
    raise ValueError(f"unknown reduction {op_kind!r}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        if _has_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return Tensor._make(np.array(a.data[idx]), (a,), bw, "getitem")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def forward_diff(a, axis: int) -> Tensor:
    """x[i+1] - x[i] along ``axis``, zero in the last slot (replicate boundary)."""
    a = as_tensor(a)
    x = a.data
    axis = axis % x.ndim
    out = np.zeros_like(x)
    n = x.shape[axis]
    hi = [slice(None)] * x.ndim
    lo = [slice(None)] * x.ndim
    head = [slice(None)] * x.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    head[axis] = slice(0, n - 1)
    hi, lo, head = tuple(hi), tuple(lo), tuple(head)
    out[head] = x[hi] - x[lo]

    def bw(g):
        gx = np.zeros_like(g)
        gh = g[head]
        gx[hi] += gh
        gx[lo] -= gh
        return (gx,)

    return Tensor._make(out, (a,), bw, "forward_diff")


# -- linear algebra ---------------------------------------------------------

def linear(x, weight, bias) -> Tensor:
    """x @ weight + bias for x of shape (N, D), weight (D, K), bias (K,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: incompatible shapes {x.shape}, {weight.shape}, {bias.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return Tensor._make(xd @ wd + bias.data, (x, weight, bias), bw, "linear")


def resample(x, ry: np.ndarray, rx: np.ndarray) -> Tensor:
    """Separable linear resampling of the last two axes: ry @ x @ rx.T.

    Pooling and bilinear upsampling are both expressed as fixed matrices.
    """
    x = as_tensor(x)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return Tensor._make(out, (x,), bw, "resample")


def pool_matrix(n: int, factor: int = 2) -> np.ndarray:
    if n % factor:
        raise ValueError(f"size {n} not divisible by {factor}")
    m = np.zeros((n // factor, n))
    for i in range(n // factor):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return m


def upsample_matrix(n: int, factor: int = 2) -> np.ndarray:
    """Bilinear upsampling n -> n*factor with half-pixel centres and edge clamping."""
    out = n * factor
    m = np.zeros((out, n))
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.minimum(np.floor(src).astype(int), max(n - 2, 0))
    w = src - i0
    rows = np.arange(out)
    m[rows, i0] += 1.0 - w
    if n > 1:
        m[rows, i0 + 1] += w
    return m


def nearest_upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), bw, "nearest_upsample2")


# -- convolution ------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    """floor((n + 2p - k) / s) + 1."""
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape_p: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape_p[:2]
    out = np.zeros(shape_p)
    # one transpose up front keeps every accumulated slab contiguous
    cols = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride] += cols[i, j]
    return out


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of NCHW input with OIkk weights.

    Output size per axis is ``conv_output_size(n, k, stride, padding)``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d: expected NCHW input and OIHW weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gr = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gr.T @ cols).reshape(weight.shape)
        gb = gr.sum(axis=0)
        gxp = _col2im(gr @ wmat, xp.shape, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        return gx, gw, gb

    return Tensor._make(np.ascontiguousarray(out), (x, weight, bias), bw, "conv2d")


def conv_transpose2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d with respect to its input; weight is (C_in, C_out, k, k).

    Output size per axis is (n - 1) * stride - 2 * padding + k.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if stride < 1 or padding < 0:
        raise ValueError("conv_transpose2d: stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    if bias.shape != (o,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d: padding too large")
    xcols = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wmat = weight.data.reshape(c, o * kh * kw)
    full = _col2im(xcols @ wmat, (n, o, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding: padding + ho, padding: padding + wo] + bias.data[None, :, None, None]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, kh, kw, stride, h, w)  # (N*H*W, O*kh*kw)
        gx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gw = (xcols.T @ gcols).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    return Tensor._make(np.ascontiguousarray(out), (x, weight, bias), bw, "conv_transpose2d")


# -- differentiation --------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Gradients accumulate into existing ``.grad`` arrays. The tape is freed
    afterwards, so calling this twice on the same loss raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                _check_finite(g, "backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int | None = 100,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). At most
    ``n_coords`` coordinates are sampled (all of them when None or when x is
    smaller).
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    again = f(Tensor(x)).data
    if not np.array_equal(out.data, again):
        raise RuntimeError("gradient_check: f is not deterministic")
    if out.size != 1:
        raise ValueError("gradient_check: f must return a scalar")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    flat = x.reshape(-1)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        coords = np.random.default_rng(seed).choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for k in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += step
        xm[k] -= step
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        num = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[k]
        err = np.abs(a - num) / max(np.abs(a), np.abs(num), floor)
        worst = max(worst, float(err))
    return GradCheckReport(worst, tol, len(coords))


def parameters_of(params: dict[str, Parameter] | Iterable[Parameter]) -> list[Parameter]:
    return list(params.values()) if isinstance(params, dict) else list(params)
