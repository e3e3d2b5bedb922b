"""Multi-task inference (zero-shot / cross-lingual / style transfer /
prosody control), representation analysis, and the objective metric suite.

Routing: the speaker prompt drives the global style embedding and the
generators' modulation; the style prompt (defaulting to the speaker
prompt) conditions the AR prosody predictor. With identical prompts the
style-transfer path is bit-identical to plain zero-shot synthesis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from . import tensor as T
from .corpus import save_matrix
from .model import TTSModel
from .prosody import UnitStreams, manipulate_units
from .tensor import SeededRng, Tensor, derive_seed


class TaskError(ValueError):
    pass


@dataclass
class SynthesisRequest:
    phonemes: list[str]
    language: str
    speaker_prompt: np.ndarray  # mel (frames, 80)
    style_prompt: np.ndarray | None = None  # defaults to the speaker prompt
    unit_offsets: dict[str, int] = field(default_factory=dict)
    seed: int = 0
    greedy: bool = True
    temperature: float = 1.0
    fixed_noise: np.ndarray | None = None

    @property
    def is_style_transfer(self) -> bool:
        return self.style_prompt is not None and self.style_prompt is not self.speaker_prompt


@dataclass
class SynthesisResult:
    mel: np.ndarray
    units: UnitStreams
    durations: np.ndarray
    f0_proxy: np.ndarray  # frame-level dequantized pitch (normalized domain)
    seed: int
    noise: np.ndarray
    request: SynthesisRequest


def pitch_proxy(units: UnitStreams, durations: np.ndarray, bins: int) -> np.ndarray:
    """Frame-level contour of dequantized pitch units repeated by duration."""
    values = dsp.dequantize_units(units.pitch, bins, *dsp.PITCH_RANGE)
    return np.repeat(values, np.asarray(durations, dtype=np.int64))


def _run(model: TTSModel, req: SynthesisRequest, which: str) -> SynthesisResult:
    cfg = model.cfg
    speaker_mel = np.asarray(req.speaker_prompt, dtype=np.float32)
    style_mel = (
        speaker_mel if req.style_prompt is None
        else np.asarray(req.style_prompt, dtype=np.float32)
    )
    with T.no_grad():
        x = model.encode_text(req.phonemes)
        r_speaker = model.prompt_encoder(Tensor(speaker_mel))
        r_style = model.prompt_encoder(Tensor(style_mel))
        r_g = model.style_embedder(Tensor(speaker_mel))
        units = model.prosody.decode(
            x, r_style, seed=derive_seed(req.seed, "units"),
            temperature=req.temperature, greedy=req.greedy,
        )
        for stream, offset in (req.unit_offsets or {}).items():
            bins = {"duration": cfg.prosody.duration_bins, "pitch": cfg.prosody.pitch_bins,
                    "energy": cfg.prosody.energy_bins}
            units = manipulate_units(units, stream, offset, bins)
        durations = dsp.dequantize_duration(units.duration)
        noise = (
            np.asarray(req.fixed_noise, dtype=np.float32)
            if req.fixed_noise is not None
            else model.draw_noise(req.seed)
        )
        mel = model.decode_mel(x, durations, units, r_speaker, r_g, noise, which=which)
    return SynthesisResult(
        mel=mel.data.copy(),
        units=units,
        durations=durations,
        f0_proxy=pitch_proxy(units, durations, cfg.prosody.pitch_bins),
        seed=req.seed,
        noise=np.asarray(noise),
        request=req,
    )


def synthesize(model: TTSModel, req: SynthesisRequest) -> SynthesisResult:
    """Full inference path (coarse = filter + source fused)."""
    return _run(model, req, "coarse")


def analyze_representation(model: TTSModel, req: SynthesisRequest, which: str) -> SynthesisResult:
    """Decode from one representation alone ('filter' | 'source' | 'coarse');
    the omitted branch is replaced by zeros before fusion."""
    if which not in ("filter", "source", "coarse"):
        raise TaskError(f"unknown representation mode {which!r}")
    return _run(model, req, which)


# ---------------------------------------------------------------------------
# objective metrics


def _voiced_values(contour: np.ndarray, voiced: np.ndarray | None) -> np.ndarray:
    contour = np.asarray(contour, dtype=np.float64)
    if voiced is None:
        return contour
    return contour[np.asarray(voiced, dtype=bool)]


def _resample(values: np.ndarray, length: int) -> np.ndarray:
    if len(values) == length:
        return values
    src = np.linspace(0.0, 1.0, len(values))
    dst = np.linspace(0.0, 1.0, length)
    return np.interp(dst, src, values)


def f0_pcc(a: np.ndarray, b: np.ndarray,
           voiced_a: np.ndarray | None = None, voiced_b: np.ndarray | None = None) -> float:
    """Pearson correlation of voiced contours, linearly resampled to the
    shorter length. Zero-variance contours are an error (undefined)."""
    va = _voiced_values(a, voiced_a)
    vb = _voiced_values(b, voiced_b)
    if len(va) < 2 or len(vb) < 2:
        raise TaskError("need at least two voiced frames in each contour")
    n = min(len(va), len(vb))
    va, vb = _resample(va, n), _resample(vb, n)
    if va.std() == 0 or vb.std() == 0:
        raise TaskError("Pearson correlation undefined for a constant contour")
    return float(np.corrcoef(va, vb)[0, 1])


def f0_dtw(a: np.ndarray, b: np.ndarray,
           voiced_a: np.ndarray | None = None, voiced_b: np.ndarray | None = None) -> float:
    """Mean absolute local cost along the optimal DTW path of mean/variance
    normalized voiced contours. Step moves: (1,0), (0,1), (1,1)."""
    va = _voiced_values(a, voiced_a)
    vb = _voiced_values(b, voiced_b)
    if len(va) == 0 or len(vb) == 0:
        raise TaskError("empty contour")
    va = (va - va.mean()) / (va.std() if va.std() > 0 else 1.0)
    vb = (vb - vb.mean()) / (vb.std() if vb.std() > 0 else 1.0)
    n, m = len(va), len(vb)
    cost = np.abs(va[:, None] - vb[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    steps = np.zeros((n + 1, m + 1), dtype=np.int64)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            options = (acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
            counts = (steps[i - 1, j], steps[i, j - 1], steps[i - 1, j - 1])
            k = int(np.argmin(options))
            acc[i, j] = cost[i - 1, j - 1] + options[k]
            steps[i, j] = counts[k] + 1
    return float(acc[n, m] / steps[n, m])


def duration_rmse(pred: np.ndarray, ref: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise TaskError(
            f"duration RMSE needs matching phoneme counts, got {pred.shape} vs {ref.shape}"
        )
    return float(np.sqrt(np.mean((pred - ref) ** 2)))


def embed_similarity(model: TTSModel, a: np.ndarray, b: np.ndarray,
                     embedder=None) -> float:
    """Cosine similarity of global style embeddings (pluggable provider)."""
    fn = embedder if embedder is not None else (
        lambda mel: model.style_embedder(Tensor(np.asarray(mel, dtype=np.float32))).data[0]
    )
    with T.no_grad():
        ea = np.asarray(fn(a), dtype=np.float64)
        eb = np.asarray(fn(b), dtype=np.float64)
    denom = np.linalg.norm(ea) * np.linalg.norm(eb)
    if denom == 0:
        raise TaskError("zero-norm style embedding")
    return float(np.dot(ea, eb) / denom)


# ---------------------------------------------------------------------------
# batch metric evaluation over (output, prompt) pairs


def evaluate_pairs(pairs_dir, model: TTSModel | None, out_csv) -> list[dict]:
    """Each ``pairs_dir/<id>/`` holds an ``output/`` result directory plus
    ``prompt.mel.tmat`` and optionally ``prompt.f0.tmat`` / ``ref.align.tmat``.
    Emits one CSV row per pair per computable metric."""
    from .corpus import load_matrix

    pairs_dir = Path(pairs_dir)
    rows = []
    for pair in sorted(p for p in pairs_dir.iterdir() if p.is_dir()):
        out_mel = load_matrix(pair / "output" / "mel.tmat")
        proxy_path = pair / "output" / "f0_proxy.tmat"
        prompt_mel = load_matrix(pair / "prompt.mel.tmat")
        if model is not None:
            rows.append({"id": pair.name, "metric": "secs",
                         "value": embed_similarity(model, out_mel, prompt_mel)})
        f0_path = pair / "prompt.f0.tmat"
        if f0_path.exists() and proxy_path.exists():
            prompt_f0 = load_matrix(f0_path)
            proxy = load_matrix(proxy_path)
            pv = prompt_f0 > 0
            # a metric undefined on these inputs still gets its row (NaN)
            for metric, fn in (("f0_pcc", f0_pcc), ("f0_dtw", f0_dtw)):
                try:
                    value = fn(proxy, prompt_f0, voiced_b=pv)
                except TaskError:
                    value = float("nan")
                rows.append({"id": pair.name, "metric": metric, "value": value})
        align_path = pair / "ref.align.tmat"
        dur_path = pair / "output" / "durations.tmat"
        if align_path.exists() and dur_path.exists():
            ref = load_matrix(align_path)
            pred = load_matrix(dur_path)
            if ref.shape == pred.shape:
                rows.append({"id": pair.name, "metric": "duration_rmse",
                             "value": duration_rmse(pred, ref)})
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["id", "metric", "value"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def save_result(result: SynthesisResult, out_dir) -> Path:
    """Persist a synthesis result as corpus-format matrices + metadata."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "mel.tmat", result.mel.astype(np.float32))
    save_matrix(out / "units.tmat", result.units.as_matrix())
    save_matrix(out / "durations.tmat", result.durations.astype(np.int64))
    save_matrix(out / "f0_proxy.tmat", result.f0_proxy.astype(np.float32))
    meta = {
        "seed": result.seed,
        "noise": np.asarray(result.noise).tolist(),
        "phonemes": result.request.phonemes,
        "language": result.request.language,
        "style_transfer": bool(result.request.is_style_transfer),
        "unit_offsets": result.request.unit_offsets or {},
        "frames": int(result.mel.shape[0]),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out
