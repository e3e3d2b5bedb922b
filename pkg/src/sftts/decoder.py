"""Acoustic decoder with sample-adaptive convolution kernels.

A mapping MLP turns (global style embedding, noise) into a style vector w.
Each adaptive convolution keeps a bank of learnable filters; a softmax
over selection logits from w aggregates the bank, the result is scaled
per input channel (modulation) and renormalized to unit per-output-channel
norm (demodulation) before the actual convolution runs. Transformer blocks
use two such convolutions with a ReLU between, then a linear head emits
the 80-band mel frame.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import DecoderConfig
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, sinusoid_positions, xavier
from .tensor import SeededRng, Tensor

DEMOD_EPS = 1e-8


class MappingNetwork(Module):
    def __init__(self, cfg: DecoderConfig, rng: SeededRng):
        dims = [cfg.global_style_dim + cfg.noise_dim] + [cfg.mapped_style_dim] * cfg.mapping_depth
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(cfg.mapping_depth)]

    def __call__(self, global_style: Tensor, noise: Tensor) -> Tensor:
        w = T.concat([global_style, noise], axis=1)
        for i, layer in enumerate(self.layers):
            w = layer(w)
            if i + 1 < len(self.layers):
                w = T.relu(w)
        return w  # (1, mapped_style_dim)


def aggregate_kernels(bank: Tensor, select_logits: Tensor) -> Tensor:
    """Softmax-weighted sum of bank filters: (K,Co,Ci,k) x (1,K) -> (Co,Ci,k)."""
    alpha = T.softmax(select_logits, axis=-1)
    flat = T.reshape(bank, (bank.shape[0], -1))
    return T.reshape(T.matmul(alpha, flat), bank.shape[1:])


def modulate_demodulate(filt: Tensor, scales: Tensor) -> Tensor:
    """Per-input-channel scale, then unit per-output-channel L2 norm.

    scales: (1, Ci). Epsilon sits inside the square root.
    """
    scaled = filt * T.reshape(scales, (1, scales.shape[-1], 1))
    sumsq = T.tsum(scaled * scaled, axis=(1, 2), keepdims=True)
    denom = T.power(sumsq + DEMOD_EPS, 0.5)
    return scaled / denom


class AdaptiveConv1d(Module):
    """Style-selected, modulated/demodulated 1-D convolution."""

    def __init__(self, c_in: int, c_out: int, kernel: int, cfg: DecoderConfig, rng: SeededRng):
        bank = np.stack([
            xavier(rng, c_in * kernel, c_out, (c_out, c_in, kernel))
            for _ in range(cfg.kernel_bank)
        ])
        self.bank = Tensor(bank, requires_grad=True)
        self.select = Linear(cfg.mapped_style_dim, cfg.kernel_bank, rng)
        self.scale = Linear(cfg.mapped_style_dim, c_in, rng, zero_init=True)
        self.scale.b.data = np.ones(c_in, dtype=np.float32)  # identity modulation at init
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def effective_filter(self, w: Tensor) -> Tensor:
        agg = aggregate_kernels(self.bank, self.select(w))
        return modulate_demodulate(agg, self.scale(w))

    def __call__(self, x: Tensor, w: Tensor) -> Tensor:
        return T.conv1d(x, self.effective_filter(w), self.bias)


class PlainConv1d(Module):
    """Ablation stand-in: ordinary convolution, no style pathway."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: SeededRng):
        self.w = Tensor(xavier(rng, c_in * kernel, c_out, (c_out, c_in, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor, w: Tensor) -> Tensor:
        return T.conv1d(x, self.w, self.bias)


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, adaptive: bool, rng: SeededRng):
        self.ln1 = LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.hidden)
        if adaptive:
            self.conv1 = AdaptiveConv1d(cfg.hidden, cfg.ff, cfg.kernel, cfg, rng)
            self.conv2 = AdaptiveConv1d(cfg.ff, cfg.hidden, cfg.kernel, cfg, rng)
        else:
            self.conv1 = PlainConv1d(cfg.hidden, cfg.ff, cfg.kernel, rng)
            self.conv2 = PlainConv1d(cfg.ff, cfg.hidden, cfg.kernel, rng)

    def __call__(self, x: Tensor, w: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.conv2(T.relu(self.conv1(self.ln2(x), w)), w)


class StyleDecoder(Module):
    def __init__(self, cfg: DecoderConfig, n_mels: int, rng: SeededRng, adaptive: bool = True):
        # the mapping network belongs to the kernel-selection pathway; the
        # plain-convolution ablation drops it along with banks and affines
        self.mapping = MappingNetwork(cfg, rng) if adaptive else None
        self.blocks = [DecoderBlock(cfg, adaptive, rng) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.hidden)
        self.out = Linear(cfg.hidden, n_mels, rng)
        self.noise_dim = cfg.noise_dim
        self.hidden = cfg.hidden

    def __call__(self, coarse: Tensor, global_style: Tensor, noise: Tensor | np.ndarray) -> Tensor:
        noise = noise if isinstance(noise, Tensor) else Tensor(noise)
        if noise.shape != (1, self.noise_dim):
            raise ValueError(f"noise must have shape (1, {self.noise_dim}), got {noise.shape}")
        w = self.mapping(global_style, noise) if self.mapping is not None else None
        x = coarse + sinusoid_positions(coarse.shape[0], self.hidden)
        for block in self.blocks:
            x = block(x, w)
        return self.out(self.final_ln(x))
