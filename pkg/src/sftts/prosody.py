"""Autoregressive prosody predictor over duration/pitch/energy unit streams.

A decoder-only transformer consumes the encoded phoneme sequence and the
encoded prompt as a prefix (with distinct segment embeddings), then emits
one position per phoneme. Each position embeds its three previous units
(summed) plus a learned positional embedding; three independent output
heads produce per-stream logits. Factorization is strictly causal: step t
sees the prefix and steps < t only.

The feed-forward inside each block is pointwise (kernel 1), so the causal
attention mask is the only cross-time path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Embedding, FFTBlock, LayerNorm, Linear, Module
from .tensor import SeededRng, Tensor


class ProsodyError(ValueError):
    pass


@dataclass
class UnitStreams:
    """Aligned per-phoneme unit index streams (the AR model's targets)."""

    duration: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        self.duration = np.asarray(self.duration, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.int64)
        self.energy = np.asarray(self.energy, dtype=np.int64)
        if not (len(self.duration) == len(self.pitch) == len(self.energy)):
            raise ProsodyError("unit streams must share one length")

    def __len__(self) -> int:
        return len(self.duration)

    @classmethod
    def from_matrix(cls, units: np.ndarray) -> "UnitStreams":
        return cls(units[0], units[1], units[2])

    def as_matrix(self) -> np.ndarray:
        return np.stack([self.duration, self.pitch, self.energy])


def manipulate_units(units: UnitStreams, stream: str, offset: int, bins: dict) -> UnitStreams:
    """Shift one stream by a signed offset, clamped to its codebook range."""
    out = {"duration": units.duration, "pitch": units.pitch, "energy": units.energy}
    if stream not in out:
        raise ProsodyError(f"unknown stream {stream!r}")
    shifted = np.clip(out[stream] + int(offset), 0, bins[stream] - 1)
    out[stream] = shifted
    return UnitStreams(out["duration"], out["pitch"], out["energy"])


class ProsodyPredictor(Module):
    def __init__(self, cfg: ModelConfig, rng: SeededRng,
                 dur_embed: Embedding, pitch_embed: Embedding, energy_embed: Embedding):
        p = cfg.prosody
        h = p.hidden
        self.dur_embed = dur_embed
        self.pitch_embed = pitch_embed
        self.energy_embed = energy_embed
        self.bos = Tensor(rng.normal((h,), std=h**-0.5), requires_grad=True)
        self.seg_text = Tensor(rng.normal((h,), std=h**-0.5), requires_grad=True)
        self.seg_prompt = Tensor(rng.normal((h,), std=h**-0.5), requires_grad=True)
        self.seg_units = Tensor(rng.normal((h,), std=h**-0.5), requires_grad=True)
        self.pos = Embedding(p.max_len, h, rng)
        self.blocks = [FFTBlock(h, p.ff, p.heads, 1, rng) for _ in range(p.layers)]
        self.final_ln = LayerNorm(h)
        self.dur_head = Linear(h, p.duration_bins, rng)
        self.pitch_head = Linear(h, p.pitch_bins, rng)
        self.energy_head = Linear(h, p.energy_bins, rng)
        self._bins = (p.duration_bins, p.pitch_bins, p.energy_bins)
        self._max_len = p.max_len

    # --- sequence assembly --------------------------------------------------

    def _step_inputs(self, units: UnitStreams, num_steps: int) -> list[Tensor]:
        """Input embedding per unit position: BOS, then summed unit embeddings."""
        for name, stream, bins in (
            ("duration", units.duration, self._bins[0]),
            ("pitch", units.pitch, self._bins[1]),
            ("energy", units.energy, self._bins[2]),
        ):
            used = stream[: max(num_steps - 1, 0)]
            if used.size and (used.min() < 0 or used.max() >= bins):
                raise ProsodyError(f"{name} unit out of range [0, {bins})")
        steps = [T.reshape(self.bos, (1, -1))]
        for t in range(num_steps - 1):
            emb = (
                self.dur_embed(np.array([units.duration[t]]))
                + self.pitch_embed(np.array([units.pitch[t]]))
                + self.energy_embed(np.array([units.energy[t]]))
            )
            steps.append(emb)
        return steps

    def _forward(self, phoneme_hidden: Tensor, prompt_hidden: Tensor,
                 units: UnitStreams, num_steps: int,
                 collect_steps: bool = False):
        n_text = phoneme_hidden.shape[0]
        n_prompt = prompt_hidden.shape[0]
        total = n_text + n_prompt + num_steps
        if total > self._max_len:
            raise ProsodyError(f"sequence length {total} exceeds max_len {self._max_len}")
        step_inputs = self._step_inputs(units, num_steps)
        seq = T.concat(
            [phoneme_hidden + self.seg_text, prompt_hidden + self.seg_prompt,
             T.concat(step_inputs, axis=0) + self.seg_units],
            axis=0,
        )
        seq = seq + self.pos(np.arange(total))
        for block in self.blocks:
            seq = block(seq, causal=True)
        seq = self.final_ln(seq)
        unit_hidden = seq[n_text + n_prompt :, :]
        logits = (
            self.dur_head(unit_hidden),
            self.pitch_head(unit_hidden),
            self.energy_head(unit_hidden),
        )
        if collect_steps:
            return logits, step_inputs
        return logits

    # --- public API -----------------------------------------------------------

    def step_logits(self, phoneme_hidden: Tensor, prompt_hidden: Tensor,
                    history: UnitStreams):
        """Logit triple (sizes 32/64/64) for the step after ``history``."""
        n_hist = len(history)
        if n_hist >= phoneme_hidden.shape[0]:
            raise ProsodyError("history length must stay below the phoneme count")
        logits = self._forward(phoneme_hidden, prompt_hidden, history, n_hist + 1)
        return tuple(head[n_hist, :] for head in logits)

    def teacher_forced(self, phoneme_hidden: Tensor, prompt_hidden: Tensor,
                       targets: UnitStreams, collect_steps: bool = False):
        """Per-step logits for all positions with ground-truth history."""
        return self._forward(
            phoneme_hidden, prompt_hidden, targets, len(targets), collect_steps=collect_steps
        )

    def decode(self, phoneme_hidden: Tensor, prompt_hidden: Tensor, *,
               seed: int, temperature: float = 1.0, greedy: bool = False) -> UnitStreams:
        """Sample (or argmax) unit streams, one step per phoneme.

        The three streams are drawn independently per step. Deterministic
        given the seed; temperature ~ 0 collapses to greedy.
        """
        count = phoneme_hidden.shape[0]
        if count < 1:
            raise ProsodyError("need at least one phoneme")
        rng = SeededRng(seed)
        d, p, e = [], [], []
        with T.no_grad():
            for t in range(count):
                history = UnitStreams(np.array(d), np.array(p), np.array(e))
                logits = self._forward(phoneme_hidden, prompt_hidden, history, t + 1)
                picks = []
                for head in logits:
                    row = head.data[t].astype(np.float64)
                    if greedy:
                        picks.append(int(np.argmax(row)))
                        continue
                    tau = max(float(temperature), 1e-8)
                    scaled = (row - row.max()) / tau
                    with np.errstate(under="ignore"):
                        probs = np.exp(scaled)
                    probs = probs / probs.sum()
                    picks.append(rng.categorical(probs))
                d.append(picks[0])
                p.append(picks[1])
                e.append(picks[2])
        return UnitStreams(np.array(d), np.array(p), np.array(e))


def prosody_ce_loss(logits, targets: UnitStreams) -> Tensor:
    """Sum over streams of the mean cross-entropy across unit steps."""
    total = None
    for head, target in zip(logits, (targets.duration, targets.pitch, targets.energy)):
        if head.shape[0] != len(target):
            raise ProsodyError(
                f"logit length {head.shape[0]} vs target length {len(target)}"
            )
        ls = T.log_softmax(head, axis=-1)
        picked = T.take_along_rows(ls, np.asarray(target))
        stream_loss = -T.tmean(picked)
        total = stream_loss if total is None else total + stream_loss
    return total


def per_stream_ce(logits, targets: UnitStreams) -> tuple[float, float, float]:
    """Detached per-stream mean CE values, for loss logging."""
    vals = []
    for head, target in zip(logits, (targets.duration, targets.pitch, targets.energy)):
        ls = T.log_softmax(Tensor(head.data), axis=-1)
        vals.append(float(-T.tmean(T.take_along_rows(ls, np.asarray(target))).item()))
    return tuple(vals)


def sequence_log_prob(logits, targets: UnitStreams) -> float:
    """Teacher-forced sequence log-probability (sum over steps and streams)."""
    total = 0.0
    for head, target in zip(logits, (targets.duration, targets.pitch, targets.energy)):
        ls = T.log_softmax(Tensor(head.data), axis=-1).data
        total += float(ls[np.arange(len(target)), np.asarray(target)].sum())
    return total
