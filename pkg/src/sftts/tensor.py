"""Dense-tensor substrate with reverse-mode differentiation.

Tensors wrap contiguous numpy float arrays (float32 for training, float64
for gradient checking). Operations record a tape of parent links; calling
:func:`backward` on a scalar loss walks the tape once in reverse
topological order and accumulates gradients additively across fan-out.

Every op output is checked for NaN/Inf while nan checking is enabled (the
default); diverging GAN losses surface immediately instead of poisoning
the parameters. Integer data (token ids, unit indices, masks) stays in
plain numpy arrays and never enters the tape.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "SeededRng",
    "derive_seed",
    "no_grad",
    "set_nan_checks",
    "backward",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf while nan checking is on."""


_grad_enabled = True
_nan_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference/eval paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_nan_checks(enabled: bool) -> bool:
    """Toggle eager per-op finiteness checks. Returns the previous setting."""
    global _nan_checks
    prev = _nan_checks
    _nan_checks = enabled
    return prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _nan_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # own the buffer so later in-place accumulation is safe
        t.grad = np.array(g, dtype=t.data.dtype)
    elif t.grad.shape == np.shape(g):
        t.grad += g
    else:
        t.grad = t.grad + g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss.

    Visits each recorded node exactly once (iterative topological order)
    and leaves accumulated gradients in ``.grad`` of every reachable
    tensor with ``requires_grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def bw(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    return _make(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data - b.data

    def bw(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(-g, b.shape))

    return _make(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def bw(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    return _make(data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        _accum(a, _sum_to_shape(g / b.data, a.shape))
        _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), bw, "relu")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    data = np.where(a.data > 0, a.data, alpha * a.data)

    def bw(g):
        _accum(a, g * np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype))

    return _make(data, (a,), bw, "leaky_relu")


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), bw, "abs")


def power(a: Tensor, p: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(data, (a,), bw, "power")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _make(data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bw, "log")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make(data, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.shape).astype(a.data.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape).astype(a.data.dtype))

    return _make(data, (a,), bw, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, (g - inner) * data)

    return _make(data, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bw(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - xhat * gx))

    return _make(xhat.astype(a.data.dtype), (a,), bw, "layer_norm")


def layer_norm_affine(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """layer_norm followed by the learned elementwise affine, fused."""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm_affine expects ({a.shape[-1]},) scale/shift, got "
            f"{gamma.shape} and {beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        gh = g * gamma.data
        gm = gh.mean(axis=-1, keepdims=True)
        gx = (gh * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gh - gm - xhat * gx))

    return _make(out.astype(a.data.dtype), (a, gamma, beta), bw, "layer_norm_affine")


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inverse))

    return _make(data, (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(t, g[tuple(idx)])
            offset += n

    return _make(data, tuple(tensors), bw, "concat")


def tslice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters into the sliced region."""
    data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make(data, (a,), bw, "slice")


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup: output shape = indices.shape + (dim,)."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding index out of range [0, {table.shape[0]}) for lookup table"
        )
    data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[-1]))
        _accum(table, gt)

    return _make(data, (table,), bw, "embedding")


def take_along_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = a[i, idx[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"take_along_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        _accum(a, ga)

    return _make(data, (a,), bw, "take_along_rows")


# ---------------------------------------------------------------------------
# contraction ops


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _sum_to_shape(ga, a.shape))
        _accum(b, _sum_to_shape(gb, b.shape))

    return _make(data, (a, b), bw, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b fused (the Linear layer fast path)."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes: x {x.shape}, w {w.shape}, b {b.shape}")
    data = x.data @ w.data + b.data

    def bw(g):
        _accum(x, g @ w.data.T)
        if x.ndim == 2:
            _accum(w, x.data.T @ g)
            _accum(b, g.sum(axis=0))
        else:
            flat_x = x.data.reshape(-1, x.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            _accum(w, flat_x.T @ flat_g)
            _accum(b, flat_g.sum(axis=0))

    return _make(data, (x, w, b), bw, "affine")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1-D convolution over time, stride 1, zero same-padding.

    x: (T, C_in), w: (C_out, C_in, K), b: (C_out,) -> (T, C_out).
    Direct (no FFT): the K-tap window is unrolled into one matmul.
    """
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (T,Cin), w (Cout,Cin,K); got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    t, ci = x.shape
    co, _, k = w.shape
    left = (k - 1) // 2
    if k == 1:
        xp = xw = x.data
    else:
        xp = np.pad(x.data, ((left, k - 1 - left), (0, 0)))
        # xw[t, j*ci + i] = xp[t + j, i];  wmat[j*ci + i, o] = w[o, i, j]
        windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (t, ci, k)
        xw = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(t, k * ci)
    wmat = np.ascontiguousarray(w.data.transpose(2, 1, 0)).reshape(k * ci, co)
    out = xw @ wmat
    parents = [x, w]
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv1d bias shape {b.shape} != ({co},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        gw = (xw.T @ g).reshape(k, ci, co).transpose(2, 1, 0)
        if k == 1:
            _accum(x, g @ wmat.T)
        else:
            gxw = (g @ wmat.T).reshape(t, k, ci)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j : j + t] += gxw[:, j, :]
            _accum(x, gxp[left : left + t])
        _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=0))

    return _make(out, tuple(parents), bw, "conv1d")


def conv1d_packed(x: Tensor, wmat: Tensor, k: int, b: Tensor | None = None) -> Tensor:
    """conv1d with the weight kept in unrolled (K*C_in, C_out) layout.

    wmat[j*ci + i, o] corresponds to w[o, i, j] of :func:`conv1d`; storing
    parameters this way skips the per-call transpose.
    """
    t, ci = x.shape
    if wmat.shape[0] != k * ci:
        raise ShapeError(f"packed conv weight {wmat.shape} incompatible with K={k}, Cin={ci}")
    co = wmat.shape[1]
    left = (k - 1) // 2
    if k == 1:
        xw = x.data
    else:
        xp = np.pad(x.data, ((left, k - 1 - left), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)
        xw = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(t, k * ci)
    out = xw @ wmat.data
    parents = [x, wmat]
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv1d_packed bias shape {b.shape} != ({co},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        _accum(wmat, xw.T @ g)
        if k == 1:
            _accum(x, g @ wmat.data.T)
        else:
            gxw = (g @ wmat.data.T).reshape(t, k, ci)
            gxp = np.zeros((t + k - 1, ci), dtype=x.data.dtype)
            for j in range(k):
                gxp[j : j + t] += gxw[:, j, :]
            _accum(x, gxp[left : left + t])
        if b is not None:
            _accum(b, g.sum(axis=0))

    return _make(out, tuple(parents), bw, "conv1d_packed")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution with 'same' zero padding: out dims = ceil(in/stride).

    x: (C_in, H, W), w: (C_out, C_in, KH, KW) -> (C_out, H', W').
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W), w (Co,Ci,KH,KW); got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    _, H, W = x.shape
    co, _, kh, kw = w.shape
    ho = -(-H // stride)
    wo = -(-W // stride)
    pad_h = max((ho - 1) * stride + kh - H, 0)
    pad_w = max((wo - 1) * stride + kw - W, 0)
    pads = ((0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))
    xp = np.pad(x.data, pads)
    out = np.zeros((co, ho, wo), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u : u + stride * ho : stride, v : v + stride * wo : stride]
            out += np.tensordot(w.data[:, :, u, v], sl, axes=([1], [0]))
    parents = [x, w]
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({co},)")
        out = out + b.data[:, None, None]
        parents.append(b)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for u in range(kh):
            for v in range(kw):
                sl = xp[:, u : u + stride * ho : stride, v : v + stride * wo : stride]
                gw[:, :, u, v] = np.tensordot(g, sl, axes=([1, 2], [1, 2]))
                gxp[:, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                    np.tensordot(w.data[:, :, u, v].T, g, axes=([1], [0]))
                )
        _accum(x, gxp[:, pads[1][0] : pads[1][0] + H, pads[2][0] : pads[2][0] + W])
        _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))

    return _make(out, tuple(parents), bw, "conv2d")


# ---------------------------------------------------------------------------
# seeded randomness


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit child seed from a base seed and arbitrary keys."""
    h = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode())
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


class SeededRng:
    """Deterministic random stream (PCG64). Same seed, same draws, always."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=(), std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return (lo + (hi - lo) * self._gen.random(shape)).astype(np.float64)

    def integers(self, lo: int, hi: int, shape=None):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=shape)

    def categorical(self, probs: np.ndarray) -> int:
        """Draw an index from a probability vector (sums to 1)."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self._gen.random()
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, *keys) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(fn, inputs: Iterable[Tensor], step: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare analytic gradients against central finite differences.

    Inputs must be float64 tensors with requires_grad. Returns the worst
    relative error seen; raises AssertionError beyond ``tol``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.zero_grad()
    out = fn(*inputs)
    if out.size != 1:
        out = tsum(out)
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = fn(*inputs)
            plus = plus if plus.size == 1 else tsum(plus)
            flat[i] = orig - step
            minus = fn(*inputs)
            minus = minus if minus.size == 1 else tsum(minus)
            flat[i] = orig
            nflat[i] = (plus.item() - minus.item()) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        worst = max(worst, rel)
        if rel > tol:
            raise AssertionError(f"gradcheck failed: relative error {rel:.3e} > {tol:.0e}")
    return worst
