"""Neural building blocks on top of the tensor substrate.

Modules are plain attribute containers; ``named_parameters`` walks the
attribute tree in construction order, so parameter naming (and hence
checkpoint layout) is deterministic. Shared parameter tensors are listed
once, under the first path that reaches them.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import SeededRng, Tensor


class Module:
    def named_parameters(self, prefix: str = "", _seen=None):
        if _seen is None:
            _seen = set()
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            yield from _walk(path, value, _seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(path, value, seen):
    # every Tensor attribute is a parameter; constants live as numpy arrays
    if isinstance(value, Tensor):
        if id(value) not in seen:
            seen.add(id(value))
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=path + ".", _seen=seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{path}.{i}", item, seen)


def xavier(rng: SeededRng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -limit, limit).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: SeededRng, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = xavier(rng, d_in, d_out, (d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: SeededRng):
        self.table = Tensor(rng.normal((vocab, dim), std=dim**-0.5), requires_grad=True)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return T.embedding(self.table, indices)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm_affine(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; self-attention when kv is omitted."""

    def __init__(self, dim: int, heads: int, rng: SeededRng):
        if dim % heads:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, kv: Tensor | None = None, causal: bool = False) -> Tensor:
        kv = x if kv is None else kv
        tq, dim = x.shape
        tk = kv.shape[0]
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(kv), self.heads)
        v = _split_heads(self.wv(kv), self.heads)
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (self.head_dim**-0.5)
        if causal:
            mask = np.triu(np.full((tq, tk), -1e9, dtype=np.float32), k=1)
            scores = scores + mask
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (tq, dim))
        return self.wo(out)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, dim = x.shape
    return T.transpose(T.reshape(x, (t, heads, dim // heads)), (1, 0, 2))


class ConvFeedForward(Module):
    """Position-wise feed-forward realized as two 1-D convolutions.

    Weights live in the packed (K*C_in, C_out) layout; see conv1d_packed.
    """

    def __init__(self, dim: int, ff_dim: int, kernel: int, rng: SeededRng):
        self.kernel = kernel
        self.w1 = Tensor(xavier(rng, dim * kernel, ff_dim, (kernel * dim, ff_dim)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(ff_dim, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor(xavier(rng, ff_dim * kernel, dim, (kernel * ff_dim, dim)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.conv1d_packed(x, self.w1, self.kernel, self.b1))
        return T.conv1d_packed(h, self.w2, self.kernel, self.b2)


class FFTBlock(Module):
    """Pre-norm transformer block: self-attention + convolutional FF."""

    def __init__(self, dim: int, ff_dim: int, heads: int, kernel: int, rng: SeededRng):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = ConvFeedForward(dim, ff_dim, kernel, rng)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.ff(self.ln2(x))


_SINUSOID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table (length, dim), float32. Cached."""
    cached = _SINUSOID_CACHE.get((length, dim))
    if cached is not None:
        return cached
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * (idx // 2) / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    out = table.astype(np.float32)
    out.flags.writeable = False
    _SINUSOID_CACHE[(length, dim)] = out
    return out
