"""Acoustic feature pipeline: mel, pitch, energy, units.

Conventions (fixed for bit-exact tests):
  * 22050 Hz audio, STFT window 1024, hop 256, 80 mel bands (HTK mel scale).
  * Center framing with reflect padding of window/2 per side, so the frame
    count is always ceil(num_samples / hop); frame t is centered at t*hop.
  * Mel magnitudes are floored at 1e-5 before the log.
  * Quantization rounds half away from zero.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 22050
WIN = 1024
HOP = 256
N_FFT = 1024
N_MELS = 80
LOG_FLOOR = 1e-5

F0_MIN = 60.0
F0_MAX = 500.0
VOICED_THRESHOLD = 0.3
SILENCE_RMS = 1e-4

PITCH_BINS = 64
PITCH_RANGE = (-4.0, 4.0)
ENERGY_BINS = 64
ENERGY_RANGE = (-5.0, 5.0)
DURATION_BINS = 32


class FeatureError(ValueError):
    """Bad input to the feature pipeline (short audio, invalid spans, ...)."""


def frame_count(num_samples: int) -> int:
    return -(-num_samples // HOP)


def _frames(audio: np.ndarray, pad_mode: str = "reflect") -> np.ndarray:
    """(T, WIN) frames under the center-padding convention.

    Mel extraction uses reflect padding (the documented STFT convention);
    the pitch estimator zero-pads, since an even extension at the edges
    fools the autocorrelation peak.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size < WIN:
        raise FeatureError(f"audio must be 1-D with at least {WIN} samples, got {audio.shape}")
    t = frame_count(audio.size)
    padded = np.pad(audio, WIN // 2, mode=pad_mode)
    starts = np.arange(t) * HOP
    idx = starts[:, None] + np.arange(WIN)[None, :]
    return padded[idx]


def _hann() -> np.ndarray:
    # periodic Hann
    n = np.arange(WIN)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN)


def stft_magnitude(audio: np.ndarray) -> np.ndarray:
    """Linear magnitude spectrogram, shape (T, N_FFT//2 + 1)."""
    frames = _frames(audio) * _hann()[None, :]
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, N_FFT//2 + 1)."""
    n_bins = N_FFT // 2 + 1
    fft_freqs = np.linspace(0, SAMPLE_RATE / 2, n_bins)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_MEL_FB: np.ndarray | None = None


def _melfb() -> np.ndarray:
    global _MEL_FB
    if _MEL_FB is None:
        _MEL_FB = mel_filterbank()
    return _MEL_FB


def extract_mel(audio: np.ndarray) -> np.ndarray:
    """Log mel-spectrogram, shape (T, 80), float32. Deterministic."""
    mag = stft_magnitude(audio)
    mel = mag @ _melfb().T
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def frame_energy(audio: np.ndarray) -> np.ndarray:
    """Per-frame energy: L2 norm of the linear magnitude spectrum."""
    mag = stft_magnitude(audio)
    return np.sqrt((mag**2).sum(axis=1)).astype(np.float32)


def mel_band_of_hz(hz: float) -> float:
    """Fractional mel-band index of a frequency (band centers from the filterbank grid)."""
    mel_lo = hz_to_mel(0.0)
    mel_hi = hz_to_mel(SAMPLE_RATE / 2)
    return float((hz_to_mel(hz) - mel_lo) / (mel_hi - mel_lo) * (N_MELS + 1) - 1.0)


def estimate_f0(audio: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame F0 (Hz) and voiced flags via windowed autocorrelation.

    Confidence is the window-corrected normalized autocorrelation; frames
    below the periodicity threshold or the silence floor are unvoiced
    (f0 reported as 0 there). A small octave penalty prefers the shortest
    lag among near-equal peaks.
    """
    frames = _frames(audio, pad_mode="constant")
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames**2).mean(axis=1))
    win = _hann()
    fw = frames * win[None, :]

    lag_min = int(np.ceil(SAMPLE_RATE / F0_MAX))
    lag_max = int(np.floor(SAMPLE_RATE / F0_MIN))
    nfft = 2 * WIN
    spec = np.fft.rfft(fw, n=nfft, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, : lag_max + 2]
    ac0 = np.maximum(ac[:, :1], 1e-12)
    norm = ac / ac0
    # divide out the taper of each frame's *effective* window (Hann times the
    # valid-sample mask); edge frames are partially zero-padded and would
    # otherwise favor spurious short lags
    t_frames = frames.shape[0]
    n_samples = np.asarray(audio).shape[0]
    valid = np.ones((t_frames, WIN))
    starts = np.arange(t_frames) * HOP - WIN // 2
    sample_idx = starts[:, None] + np.arange(WIN)[None, :]
    valid[(sample_idx < 0) | (sample_idx >= n_samples)] = 0.0
    weff = win[None, :] * valid
    wac = np.fft.irfft(np.abs(np.fft.rfft(weff, n=nfft, axis=1)) ** 2, n=nfft, axis=1)
    wac = wac[:, : lag_max + 2]
    wac = wac / np.maximum(wac[:, :1], 1e-12)
    conf = norm / np.maximum(wac, 0.05)

    lags = np.arange(lag_min, lag_max + 1)
    penalty = 0.01 * np.log2(lags / lag_min)
    scores = conf[:, lag_min : lag_max + 1] - penalty[None, :]
    best = np.argmax(scores, axis=1) + lag_min

    t = frames.shape[0]
    f0 = np.zeros(t, dtype=np.float32)
    voiced = np.zeros(t, dtype=bool)
    for i in range(t):
        lag = int(best[i])
        c = conf[i, lag]
        if c < VOICED_THRESHOLD or rms[i] < SILENCE_RMS:
            continue
        # parabolic refinement around the peak
        if lag_min < lag < lag_max:
            y0, y1, y2 = conf[i, lag - 1], conf[i, lag], conf[i, lag + 1]
            denom = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / denom if abs(denom) > 1e-12 else 0.0
            shift = float(np.clip(shift, -0.5, 0.5))
        else:
            shift = 0.0
        f0[i] = SAMPLE_RATE / (lag + shift)
        voiced[i] = True
    return f0, voiced


def phoneme_average(
    values: np.ndarray, alignment: np.ndarray, voiced: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``values`` over each phoneme span.

    ``alignment`` holds per-phoneme frame counts; spans must tile [0, T)
    exactly. With ``voiced`` given, only voiced frames enter the mean and
    spans with no voiced frame are flagged invalid (mean reported 0 there;
    the unit pipeline maps them to the speaker mean).

    Returns (means, has_data).
    """
    values = np.asarray(values, dtype=np.float64)
    alignment = np.asarray(alignment)
    if alignment.ndim != 1 or np.any(alignment < 0):
        raise FeatureError("alignment must be 1-D with nonnegative frame counts")
    if int(alignment.sum()) != values.shape[0]:
        raise FeatureError(
            f"alignment covers {int(alignment.sum())} frames but values has {values.shape[0]}"
        )
    n = alignment.shape[0]
    means = np.zeros(n, dtype=np.float64)
    has_data = np.zeros(n, dtype=bool)
    start = 0
    for i, d in enumerate(alignment):
        stop = start + int(d)
        chunk = values[start:stop]
        if voiced is not None:
            keep = np.asarray(voiced[start:stop], dtype=bool)
            chunk = chunk[keep]
        if chunk.size:
            means[i] = chunk.mean()
            has_data[i] = True
        start = stop
    return means, has_data


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_units(values, k: int, lo: float, hi: float) -> np.ndarray:
    """Uniform quantizer over [lo, hi] with K levels; clips out-of-range values."""
    if k < 2:
        raise FeatureError(f"codebook size must be >= 2, got {k}")
    if not lo < hi:
        raise FeatureError(f"invalid range [{lo}, {hi}]")
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FeatureError("cannot quantize non-finite values")
    t = (np.clip(v, lo, hi) - lo) / (hi - lo) * (k - 1)
    return np.clip(_round_half_away(t), 0, k - 1).astype(np.int64)


def dequantize_units(indices, k: int, lo: float, hi: float) -> np.ndarray:
    idx = np.asarray(indices)
    return (lo + idx * (hi - lo) / (k - 1)).astype(np.float64)


def quantize_duration(frames) -> np.ndarray:
    """Frame counts to duration unit indices: clamp(frames, 1, 32) - 1."""
    f = np.asarray(frames)
    if np.any(f < 0):
        raise FeatureError("negative phoneme duration")
    return (np.clip(f, 1, DURATION_BINS) - 1).astype(np.int64)


def dequantize_duration(indices) -> np.ndarray:
    return np.asarray(indices).astype(np.int64) + 1


@dataclass
class SpeakerStats:
    speaker_id: str
    f0_mean: float
    f0_std: float
    energy_mean: float
    energy_std: float

    def __post_init__(self):
        if not (self.f0_std > 0 and self.energy_std > 0):
            raise FeatureError(f"degenerate speaker stats for {self.speaker_id}")


def normalize(value, mean: float, std: float):
    if std <= 0:
        raise FeatureError("std must be positive")
    return (np.asarray(value, dtype=np.float64) - mean) / std


def denormalize(value, mean: float, std: float):
    return np.asarray(value, dtype=np.float64) * std + mean


def units_from_features(
    f0: np.ndarray,
    voiced: np.ndarray,
    energy: np.ndarray,
    alignment: np.ndarray,
    stats: SpeakerStats,
) -> np.ndarray:
    """Per-phoneme (3, N) unit matrix: duration, pitch, energy rows.

    Pitch averages voiced frames only; fully unvoiced phonemes sit at the
    speaker mean (normalized 0). Everything is speaker-normalized before
    quantization.
    """
    dur_units = quantize_duration(alignment)
    f0_means, f0_valid = phoneme_average(f0, alignment, voiced=voiced)
    f0_norm = np.where(f0_valid, normalize(f0_means, stats.f0_mean, stats.f0_std), 0.0)
    pitch_units = quantize_units(f0_norm, PITCH_BINS, *PITCH_RANGE)
    e_means, _ = phoneme_average(energy, alignment)
    e_norm = normalize(e_means, stats.energy_mean, stats.energy_std)
    energy_units = quantize_units(e_norm, ENERGY_BINS, *ENERGY_RANGE)
    return np.stack([dur_units, pitch_units, energy_units]).astype(np.int64)


# ---------------------------------------------------------------------------
# audio file I/O and an audibility-only mel renderer


def read_wav(path) -> np.ndarray:
    """16-bit PCM mono RIFF at 22.05 kHz -> float64 samples in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise FeatureError(f"{path}: expected 16-bit mono PCM")
        if wf.getframerate() != SAMPLE_RATE:
            raise FeatureError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
        raw = wf.readframes(wf.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return data / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


def _istft(spec: np.ndarray, num_samples: int) -> np.ndarray:
    win = _hann()
    t = spec.shape[0]
    pad_len = num_samples + WIN
    out = np.zeros(pad_len)
    wsum = np.zeros(pad_len)
    frames = np.fft.irfft(spec, n=N_FFT, axis=1)[:, :WIN]
    for i in range(t):
        start = i * HOP
        out[start : start + WIN] += frames[i] * win
        wsum[start : start + WIN] += win**2
    out = out / np.maximum(wsum, 1e-8)
    return out[WIN // 2 : WIN // 2 + num_samples]


def render_audio(mel: np.ndarray, iterations: int = 32, seed: int = 0) -> np.ndarray:
    """Iterative phase reconstruction from a log-mel matrix.

    Audibility aid only; never used by acceptance checks. The mel is
    pseudo-inverted to a linear spectrogram, then Griffin-Lim style
    magnitude/phase alternation produces samples.
    """
    fb = _melfb()
    linear = np.maximum(np.exp(np.asarray(mel, dtype=np.float64)) @ np.linalg.pinv(fb).T, 0.0)
    num_samples = mel.shape[0] * HOP
    rng = np.random.Generator(np.random.PCG64(seed))
    phase = np.exp(2j * np.pi * rng.random(linear.shape))
    spec = linear * phase
    for _ in range(iterations):
        audio = _istft(spec, num_samples)
        if audio.size < WIN:
            break
        est = np.fft.rfft(_frames(audio)[: linear.shape[0]] * _hann()[None, :], n=N_FFT, axis=1)
        spec = linear * np.exp(1j * np.angle(est))
    audio = _istft(spec, num_samples)
    peak = np.abs(audio).max()
    return audio / peak * 0.95 if peak > 0 else audio
