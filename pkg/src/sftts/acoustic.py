"""Source-filter acoustic model components.

The filter generator shapes upsampled phoneme content (plus energy), the
source generator shapes upsampled pitch/energy embeddings; both are
transformer stacks whose blocks are modulated by prompt-conditioned FiLM
(cross-attention into the encoded prompt predicts per-frame scale/shift).
Their outputs fuse additively in the hidden log-domain space before the
acoustic decoder.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import EncoderConfig, ModelConfig
from .nn import Embedding, FFTBlock, LayerNorm, Linear, Module, MultiHeadAttention, sinusoid_positions
from .tensor import SeededRng, Tensor


class AcousticError(ValueError):
    pass


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: SeededRng):
        self.embed = Embedding(vocab_size, cfg.hidden, rng)
        self.blocks = [FFTBlock(cfg.hidden, cfg.ff, cfg.heads, cfg.kernel, rng)
                       for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.hidden)
        self.hidden = cfg.hidden

    def __call__(self, phoneme_ids: np.ndarray) -> Tensor:
        ids = np.asarray(phoneme_ids)
        if ids.size == 0:
            raise AcousticError("empty phoneme sequence")
        x = self.embed(ids) + sinusoid_positions(ids.size, self.hidden)
        for block in self.blocks:
            x = block(x)
        return self.final_ln(x)


class PromptEncoder(Module):
    def __init__(self, cfg: EncoderConfig, n_mels: int, rng: SeededRng):
        self.prenet = Linear(n_mels, cfg.hidden, rng)
        self.blocks = [FFTBlock(cfg.hidden, cfg.ff, cfg.heads, cfg.kernel, rng)
                       for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.hidden)
        self.hidden = cfg.hidden

    def __call__(self, mel: Tensor | np.ndarray) -> Tensor:
        mel = mel if isinstance(mel, Tensor) else Tensor(mel)
        if mel.ndim != 2 or mel.shape[0] < 1:
            raise AcousticError(f"prompt mel must be (frames, bands) with frames >= 1, got {mel.shape}")
        x = self.prenet(mel) + sinusoid_positions(mel.shape[0], self.hidden)
        for block in self.blocks:
            x = block(x)
        return self.final_ln(x)


class GlobalStyleEncoder(Module):
    """Convolutional embedder with mean-over-time pooling (order-insensitive
    at the pooling stage); stands in for an external speaker encoder."""

    def __init__(self, n_mels: int, hidden: int, style_dim: int, rng: SeededRng):
        from .nn import xavier

        self.w1 = Tensor(xavier(rng, n_mels * 5, hidden, (5 * n_mels, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor(xavier(rng, hidden * 5, hidden, (5 * hidden, hidden)), requires_grad=True)
        self.b2 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        self.out = Linear(hidden, style_dim, rng)

    def __call__(self, mel: Tensor | np.ndarray) -> Tensor:
        mel = mel if isinstance(mel, Tensor) else Tensor(mel)
        if mel.ndim != 2 or mel.shape[0] < 1:
            raise AcousticError(f"style input must be (frames, bands), got {mel.shape}")
        h = T.relu(T.conv1d_packed(mel, self.w1, 5, self.b1))
        h = T.relu(T.conv1d_packed(h, self.w2, 5, self.b2))
        pooled = T.tmean(h, axis=0, keepdims=True)
        return self.out(pooled)  # (1, style_dim)


def gaussian_upsample_weights(durations: np.ndarray, sigma: float) -> np.ndarray:
    """(T, N) frame-over-token weights; rows are softmax distributions.

    Token centers sit at cumulative duration midpoints; frame t is queried
    at position t + 0.5.
    """
    durations = np.asarray(durations)
    if np.any(durations < 1):
        raise AcousticError("all durations must be >= 1 frame")
    ends = np.cumsum(durations).astype(np.float64)
    centers = ends - durations / 2.0
    total = int(ends[-1])
    tpos = np.arange(total, dtype=np.float64) + 0.5
    logits = -((tpos[:, None] - centers[None, :]) ** 2) / (2.0 * sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return (w / w.sum(axis=1, keepdims=True)).astype(np.float32)


def gaussian_upsample(tokens: Tensor, durations: np.ndarray, sigma: float = 1.0) -> Tensor:
    weights = gaussian_upsample_weights(durations, sigma)
    return T.matmul(Tensor(weights), tokens)


class FiLMLayer(Module):
    """Prompt-conditioned feature-wise modulation.

    Cross-attention (frame hiddens as queries, prompt hiddens as keys and
    values) feeds a zero-initialized head predicting (delta, beta); the
    scale is 1 + delta so a fresh layer is exactly the identity.
    """

    def __init__(self, dim: int, heads: int, rng: SeededRng):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.head = Linear(dim, 2 * dim, rng, zero_init=True)
        self.dim = dim

    def params_for(self, frames: Tensor, prompt: Tensor) -> tuple[Tensor, Tensor]:
        if prompt.shape[0] < 1:
            raise AcousticError("FiLM needs a nonempty prompt")
        ctx = self.attn(frames, kv=prompt)
        raw = self.head(ctx)
        delta = raw[:, : self.dim]
        beta = raw[:, self.dim :]
        return delta + 1.0, beta

    def __call__(self, frames: Tensor, prompt: Tensor) -> Tensor:
        gamma, beta = self.params_for(frames, prompt)
        return film_modulate(frames, gamma, beta)


def film_modulate(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    if gamma.shape != h.shape or beta.shape != h.shape:
        raise AcousticError(
            f"FiLM shape mismatch: h {h.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    return gamma * h + beta


class GeneratorBlock(Module):
    def __init__(self, cfg: EncoderConfig, use_film: bool, rng: SeededRng):
        self.fft = FFTBlock(cfg.hidden, cfg.ff, cfg.heads, cfg.kernel, rng)
        self.film = FiLMLayer(cfg.hidden, cfg.heads, rng) if use_film else None

    def __call__(self, x: Tensor, prompt: Tensor | None) -> Tensor:
        x = self.fft(x)
        if self.film is not None and prompt is not None:
            x = self.film(x, prompt)
        return x


class Generator(Module):
    """Filter or source generator: FFT blocks with per-block FiLM after the
    feed-forward sublayer. Only FiLM carries the prompt into the stack."""

    def __init__(self, cfg: EncoderConfig, use_film: bool, rng: SeededRng):
        self.blocks = [GeneratorBlock(cfg, use_film, rng) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.hidden)

    def __call__(self, frames: Tensor, prompt: Tensor | None) -> Tensor:
        x = frames
        for block in self.blocks:
            x = block(x, prompt)
        return self.final_ln(x)


class Fuse(Module):
    """Additive fusion in hidden (log-domain) space + linear projection."""

    def __init__(self, hidden: int, rng: SeededRng):
        self.proj = Linear(hidden, hidden, rng)

    def __call__(self, filter_rep: Tensor, source_rep: Tensor) -> Tensor:
        if filter_rep.shape != source_rep.shape:
            raise AcousticError(
                f"fuse shape mismatch: {filter_rep.shape} vs {source_rep.shape}"
            )
        return self.proj(filter_rep + source_rep)
