"""Deterministic synthetic toy-speech corpus with known ground truth.

Two toy "languages" with disjoint phoneme alphabets, per-speaker spectral
tilt and F0 offset, and two styles whose duration/pitch families differ
(narrow unimodal for neutral, wide bimodal for expressive). Mels are
synthesized directly in the log-mel domain as phoneme envelope templates
plus a pitch-driven excitation pattern, so every utterance ships exact
phonemes, alignment, F0, energy.

Corpus directory layout::

    manifest.tsv          line-oriented index (version-gated)
    toyspec.json          generator parameters (world is rebuilt from these)
    mel/<utt>.tmat        (T, 80) float32 log-mel
    f0/<utt>.tmat         (T,) float32 Hz, 0 where unvoiced
    voiced/<utt>.tmat     (T,) uint8
    energy/<utt>.tmat     (T,) float32
    align/<utt>.tmat      (N,) int64 per-phoneme frame counts
    wav/<utt>.wav         optional rendered audio
    speakers.tsv          per-speaker stats       (written by prepare)
    units/<utt>.tmat      (3, N) int64 d/p/e rows (written by prepare)

Binary matrix (.tmat) format, little-endian, bit-exact:
    magic b"TMAT" | u32 version=1 | u32 dtype | u32 rank | u64*rank extents | raw data
    dtype codes: 0 float32, 1 float64, 2 int32, 3 uint8, 4 int64
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .tensor import SeededRng, derive_seed

MANIFEST_MAGIC = "#sftts-toycorpus"
MANIFEST_VERSION = "v1"

LANGUAGES = {
    "A": [f"a{i:02d}" for i in range(12)],
    "B": [f"b{i:02d}" for i in range(10)],
}
STYLES = ("neutral", "expressive")
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    """Malformed corpus directory, record, or generation request."""


# ---------------------------------------------------------------------------
# binary matrix I/O

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int32, 3: np.uint8, 4: np.int64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
_TMAT_VERSION = 1


def save_matrix(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise CorpusError(f"unsupported matrix dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(b"TMAT")
        f.write(struct.pack("<III", _TMAT_VERSION, _CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"TMAT":
            raise CorpusError(f"{path}: bad matrix magic {magic!r}")
        version, code, rank = struct.unpack("<III", f.read(12))
        if version != _TMAT_VERSION:
            raise CorpusError(f"{path}: unsupported matrix version {version}")
        if code not in _DTYPES:
            raise CorpusError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
        data = np.frombuffer(f.read(), dtype=dtype)
    expected = int(np.prod(shape)) if rank else 1
    if data.size != expected:
        raise CorpusError(f"{path}: truncated matrix ({data.size} of {expected} items)")
    return data.reshape(shape).astype(_DTYPES[code])


# ---------------------------------------------------------------------------
# generator specification and world


@dataclass
class ToySpec:
    seed: int = 1234
    num_speakers: int = 8
    train_utterances: int = 320
    val_utterances: int = 40
    test_utterances: int = 40
    min_phonemes: int = 8
    max_phonemes: int = 14
    prosody_mode: str = "stochastic"  # or "deterministic" (delta-distribution families)
    paired_styles: bool = False  # consecutive utterances share text, differ in style
    emit_audio: bool = False

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToySpec":
        return cls(**json.loads(text))


def overfit_spec(seed: int = 77) -> ToySpec:
    """10-utterance single-speaker corpus with deterministic prosody.

    Five texts, each rendered in both styles; the prompt is the only way
    to tell which prosody pattern an utterance follows.
    """
    return ToySpec(
        seed=seed,
        num_speakers=1,
        train_utterances=10,
        val_utterances=0,
        test_utterances=0,
        min_phonemes=7,
        max_phonemes=7,
        prosody_mode="deterministic",
        paired_styles=True,
    )


@dataclass
class SpeakerParams:
    speaker_id: str
    f0_base: float
    tilt: np.ndarray
    energy_offset: float


class ToyWorld:
    """Everything derivable from a ToySpec: templates, speakers, style families."""

    def __init__(self, spec: ToySpec):
        self.spec = spec
        rng = SeededRng(derive_seed(spec.seed, "world"))
        self.templates: dict[str, np.ndarray] = {}
        self.unvoiced: set[str] = set()
        bands = np.arange(dsp.N_MELS, dtype=np.float64)
        for lang, alphabet in LANGUAGES.items():
            for i, ph in enumerate(alphabet):
                t = np.full(dsp.N_MELS, -5.0)
                for _ in range(3):
                    center = rng.uniform((), 5.0, 75.0)
                    width = rng.uniform((), 3.0, 8.0)
                    height = rng.uniform((), 2.0, 5.0)
                    t += height * np.exp(-0.5 * ((bands - center) / width) ** 2)
                if i % 4 == 3:
                    self.unvoiced.add(ph)
                    t[60:] += 1.5  # fricative-like high shelf
                # fixed linear loudness so frame energy tracks style, not phoneme id
                t = t - np.log(np.sqrt((np.exp(t) ** 2).sum()) / 30.0)
                self.templates[ph] = t
        self.speakers: list[SpeakerParams] = []
        slope = np.linspace(-1.0, 1.0, dsp.N_MELS)
        for s in range(spec.num_speakers):
            # timbre signature: spectral tilt plus a fixed resonance bump,
            # strong enough that speaker identity is recoverable from mel
            tilt = slope * float(rng.uniform((), -0.5, 0.5))
            center = float(rng.uniform((), 15.0, 70.0))
            tilt = tilt + 1.2 * np.exp(-0.5 * ((bands - center) / 4.0) ** 2)
            self.speakers.append(
                SpeakerParams(
                    speaker_id=f"spk{s}",
                    f0_base=170.0 + 14.0 * s,
                    tilt=tilt,
                    energy_offset=float(rng.uniform((), -0.3, 0.3)),
                )
            )

    # --- style families ---------------------------------------------------

    def sample_durations(self, style: str, n: int, rng: SeededRng) -> np.ndarray:
        if self.spec.prosody_mode == "deterministic":
            if style == "neutral":
                return np.full(n, 5, dtype=np.int64)
            cycle = np.array([3, 10, 4, 9, 5, 8], dtype=np.int64)
            return cycle[np.arange(n) % len(cycle)]
        if style == "neutral":
            d = np.round(rng.normal((n,), std=1.0).astype(np.float64) + 6.0)
            return np.clip(d, 2, 12).astype(np.int64)
        short = np.round(rng.normal((n,), std=1.0).astype(np.float64) + 3.5)
        long = np.round(rng.normal((n,), std=1.5).astype(np.float64) + 10.0)
        pick = rng.uniform((n,)) < 0.5
        return np.clip(np.where(pick, short, long), 1, 32).astype(np.int64)

    def pitch_excursion(self, style: str, num_frames: int, rng: SeededRng) -> np.ndarray:
        t = np.arange(num_frames, dtype=np.float64)
        if self.spec.prosody_mode == "deterministic":
            if style == "neutral":
                return 8.0 * np.sin(2 * np.pi * t / 50.0)
            return 70.0 * np.sin(2 * np.pi * t / 30.0)
        if style == "neutral":
            amp = float(rng.uniform((), 5.0, 15.0))
            phase = float(rng.uniform((), 0.0, 2 * np.pi))
            return amp * np.sin(2 * np.pi * t / 60.0 + phase)
        a1 = float(rng.uniform((), 35.0, 60.0))
        a2 = float(rng.uniform((), 8.0, 20.0))
        p1 = float(rng.uniform((), 0.0, 2 * np.pi))
        p2 = float(rng.uniform((), 0.0, 2 * np.pi))
        return a1 * np.sin(2 * np.pi * t / 45.0 + p1) + a2 * np.sin(2 * np.pi * t / 14.0 + p2)

    def energy_offsets(self, style: str, n: int, rng: SeededRng) -> np.ndarray:
        i = np.arange(n, dtype=np.float64)
        if self.spec.prosody_mode == "deterministic":
            if style == "neutral":
                return 0.15 * np.sin(2 * np.pi * i / 6.0)
            return 0.5 * np.sin(2 * np.pi * i / 3.0)
        std = 0.1 if style == "neutral" else 0.4
        return rng.normal((n,), std=std).astype(np.float64)

    def excitation(self, f0: float) -> np.ndarray:
        """Log-mel-domain source pattern: harmonic bumps at f0 and 2*f0."""
        bands = np.arange(dsp.N_MELS, dtype=np.float64)
        out = np.zeros(dsp.N_MELS)
        for mult, height in ((1.0, 2.0), (2.0, 1.0)):
            center = dsp.mel_band_of_hz(mult * f0)
            out += height * np.exp(-0.5 * ((bands - center) / 1.5) ** 2)
        return out


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    language: str
    style: str
    split: str
    phonemes: list[str]
    mel: np.ndarray
    alignment: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray
    energy: np.ndarray
    units: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.mel.shape[0]


def _build_utterance(
    world: ToyWorld,
    utt_id: str,
    speaker: SpeakerParams,
    language: str,
    style: str,
    split: str,
    phonemes: list[str],
) -> Utterance:
    rng = SeededRng(derive_seed(world.spec.seed, "utt", utt_id))
    n = len(phonemes)
    durations = world.sample_durations(style, n, rng)
    total = int(durations.sum())
    voiced_ph = np.array([ph not in world.unvoiced for ph in phonemes])
    voiced = np.repeat(voiced_ph, durations)
    exc = world.pitch_excursion(style, total, rng)
    if voiced.any():
        exc = exc - exc[voiced].mean()  # speaker mean F0 is exactly f0_base
    f0 = np.where(voiced, speaker.f0_base + exc, 0.0)
    f0 = np.maximum(f0, 0.0)
    offsets = world.energy_offsets(style, n, rng)
    mel = np.zeros((total, dsp.N_MELS))
    start = 0
    for i, ph in enumerate(phonemes):
        stop = start + int(durations[i])
        frame = world.templates[ph] + speaker.tilt + speaker.energy_offset + offsets[i]
        mel[start:stop] = frame
        start = stop
    for t in range(total):
        if voiced[t]:
            mel[t] += world.excitation(float(f0[t]))
    mel = np.maximum(mel, np.log(dsp.LOG_FLOOR))
    energy = np.sqrt((np.exp(mel) ** 2).sum(axis=1))
    return Utterance(
        utt_id=utt_id,
        speaker_id=speaker.speaker_id,
        language=language,
        style=style,
        split=split,
        phonemes=list(phonemes),
        mel=mel.astype(np.float32),
        alignment=durations.astype(np.int64),
        f0=f0.astype(np.float32),
        voiced=voiced,
        energy=energy.astype(np.float32),
    )


def _render_waveform(utt: Utterance, world: ToyWorld) -> np.ndarray:
    """Excitation-through-envelope render (harmonic additive + noise)."""
    total = utt.num_frames * dsp.HOP
    audio = np.zeros(total)
    rng = SeededRng(derive_seed(world.spec.seed, "wav", utt.utt_id))
    phases = rng.uniform((10,), 0.0, 2 * np.pi)
    phase = phases.copy()
    linear = np.exp(utt.mel.astype(np.float64))
    for t in range(utt.num_frames):
        seg = slice(t * dsp.HOP, (t + 1) * dsp.HOP)
        if utt.voiced[t]:
            f0 = float(utt.f0[t])
            for h in range(1, 11):
                band = int(np.clip(round(dsp.mel_band_of_hz(h * f0)), 0, dsp.N_MELS - 1))
                amp = linear[t, band] / 200.0
                step = 2 * np.pi * h * f0 / dsp.SAMPLE_RATE
                phase[h - 1] += 0.0
                audio[seg] += amp * np.sin(phase[h - 1] + step * np.arange(dsp.HOP))
                phase[h - 1] = (phase[h - 1] + step * dsp.HOP) % (2 * np.pi)
        else:
            audio[seg] = rng.normal((dsp.HOP,), std=0.01).astype(np.float64)
    peak = np.abs(audio).max()
    return audio / peak * 0.7 if peak > 0 else audio


def generate_corpus(spec: ToySpec, out_dir, force: bool = False) -> Path:
    """Write a full corpus directory. Same spec + seed => bit-identical output."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CorpusError(f"output directory {out} exists; pass force to overwrite")
    world = ToyWorld(spec)
    pick = SeededRng(derive_seed(spec.seed, "assign"))
    counts = [
        ("train", spec.train_utterances),
        ("val", spec.val_utterances),
        ("test", spec.test_utterances),
    ]
    for sub in ("mel", "f0", "voiced", "energy", "align"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if spec.emit_audio:
        (out / "wav").mkdir(exist_ok=True)

    rows = []
    index = 0
    for split, count in counts:
        for j in range(count):
            utt_id = f"utt{index:05d}"
            if spec.paired_styles:
                style = STYLES[index % 2]
                text_rng = SeededRng(derive_seed(spec.seed, "text", split, index // 2))
            else:
                style = STYLES[int(pick.integers(0, len(STYLES)))]
                text_rng = SeededRng(derive_seed(spec.seed, "text", split, index))
            language = list(LANGUAGES)[int(text_rng.integers(0, len(LANGUAGES)))]
            speaker = world.speakers[int(text_rng.integers(0, spec.num_speakers))]
            n_ph = int(text_rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
            alphabet = LANGUAGES[language]
            phonemes = [alphabet[int(i)] for i in text_rng.integers(0, len(alphabet), n_ph)]
            if all(ph in world.unvoiced for ph in phonemes):
                phonemes[0] = next(p for p in alphabet if p not in world.unvoiced)
            utt = _build_utterance(world, utt_id, speaker, language, style, split, phonemes)
            save_matrix(out / "mel" / f"{utt_id}.tmat", utt.mel)
            save_matrix(out / "f0" / f"{utt_id}.tmat", utt.f0)
            save_matrix(out / "voiced" / f"{utt_id}.tmat", utt.voiced.astype(np.uint8))
            save_matrix(out / "energy" / f"{utt_id}.tmat", utt.energy)
            save_matrix(out / "align" / f"{utt_id}.tmat", utt.alignment)
            if spec.emit_audio:
                dsp.write_wav(out / "wav" / f"{utt_id}.wav", _render_waveform(utt, world))
            rows.append(
                (utt_id, utt.speaker_id, language, style, split, str(len(phonemes)),
                 str(utt.num_frames), " ".join(phonemes))
            )
            index += 1

    (out / "toyspec.json").write_text(spec.to_json())
    with open(out / "manifest.tsv", "w") as f:
        f.write(f"{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\n")
        f.write(f"#seed\t{spec.seed}\n")
        f.write("#columns\tutt_id\tspeaker\tlanguage\tstyle\tsplit\tn_phonemes\tn_frames\tphonemes\n")
        for row in sorted(rows):
            f.write("\t".join(row) + "\n")
    return out


class Corpus:
    """Loaded corpus: manifest plus lazy per-utterance feature access."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.tsv"
        if not manifest.exists():
            raise CorpusError(f"no manifest.tsv under {self.root}")
        lines = manifest.read_text().splitlines()
        if not lines or not lines[0].startswith(MANIFEST_MAGIC):
            raise CorpusError(f"{manifest}: not a toy-corpus manifest")
        version = lines[0].split("\t")[1] if "\t" in lines[0] else "?"
        if version != MANIFEST_VERSION:
            raise CorpusError(f"{manifest}: unknown schema version {version!r}")
        self.spec = ToySpec.from_json((self.root / "toyspec.json").read_text())
        self.rows: list[dict] = []
        for line in lines[1:]:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise CorpusError(f"{manifest}: malformed row {line!r}")
            self.rows.append(
                dict(
                    utt_id=parts[0], speaker=parts[1], language=parts[2], style=parts[3],
                    split=parts[4], n_phonemes=int(parts[5]), n_frames=int(parts[6]),
                    phonemes=parts[7].split(" "),
                )
            )
        self.rows.sort(key=lambda r: r["utt_id"])
        self._stats: dict[str, dsp.SpeakerStats] | None = None

    def utterance_ids(self, split: str | None = None) -> list[str]:
        return [r["utt_id"] for r in self.rows if split is None or r["split"] == split]

    def row(self, utt_id: str) -> dict:
        for r in self.rows:
            if r["utt_id"] == utt_id:
                return r
        raise CorpusError(f"unknown utterance {utt_id}")

    def load(self, utt_id: str) -> Utterance:
        r = self.row(utt_id)
        try:
            mel = load_matrix(self.root / "mel" / f"{utt_id}.tmat")
            f0 = load_matrix(self.root / "f0" / f"{utt_id}.tmat")
            voiced = load_matrix(self.root / "voiced" / f"{utt_id}.tmat").astype(bool)
            energy = load_matrix(self.root / "energy" / f"{utt_id}.tmat")
            align = load_matrix(self.root / "align" / f"{utt_id}.tmat")
        except (OSError, CorpusError) as e:
            raise CorpusError(f"record {utt_id} unreadable: {e}") from e
        if mel.shape != (r["n_frames"], dsp.N_MELS) or int(align.sum()) != r["n_frames"]:
            raise CorpusError(f"record {utt_id} inconsistent with manifest")
        units_path = self.root / "units" / f"{utt_id}.tmat"
        units = load_matrix(units_path) if units_path.exists() else None
        return Utterance(
            utt_id=utt_id, speaker_id=r["speaker"], language=r["language"], style=r["style"],
            split=r["split"], phonemes=list(r["phonemes"]), mel=mel, alignment=align,
            f0=f0, voiced=voiced, energy=energy, units=units,
        )

    def iter_split(self, split: str):
        for utt_id in self.utterance_ids(split):
            yield self.load(utt_id)

    # --- prepared artifacts -------------------------------------------------

    @property
    def prepared(self) -> bool:
        return (self.root / "speakers.tsv").exists()

    def speaker_stats(self) -> dict[str, dsp.SpeakerStats]:
        if self._stats is None:
            path = self.root / "speakers.tsv"
            if not path.exists():
                raise CorpusError(f"{self.root} not prepared (no speakers.tsv); run prepare")
            stats = {}
            for line in path.read_text().splitlines():
                if line.startswith("#") or not line.strip():
                    continue
                sid, f0m, f0s, em, es = line.split("\t")
                stats[sid] = dsp.SpeakerStats(sid, float(f0m), float(f0s), float(em), float(es))
            self._stats = stats
        return self._stats

    def world(self) -> ToyWorld:
        return ToyWorld(self.spec)

    def vocabulary(self) -> list[str]:
        return LANGUAGES["A"] + LANGUAGES["B"]


def prepare_corpus(root) -> Corpus:
    """Compute per-speaker stats on the train split and quantize unit streams."""
    corpus = Corpus(root)
    per_speaker: dict[str, dict[str, list]] = {}
    stats_split = "train" if corpus.utterance_ids("train") else None
    ids = corpus.utterance_ids(stats_split)
    for utt in (corpus.load(u) for u in ids):
        bag = per_speaker.setdefault(utt.speaker_id, {"f0": [], "energy": []})
        bag["f0"].append(utt.f0[utt.voiced])
        bag["energy"].append(utt.energy)
    stats: dict[str, dsp.SpeakerStats] = {}
    for sid, bag in sorted(per_speaker.items()):
        f0 = np.concatenate(bag["f0"]) if bag["f0"] else np.zeros(0)
        en = np.concatenate(bag["energy"])
        if f0.size < 2 or f0.std() <= 0 or en.std() <= 0:
            raise CorpusError(f"degenerate speaker {sid}: cannot normalize")
        stats[sid] = dsp.SpeakerStats(sid, float(f0.mean()), float(f0.std()),
                                      float(en.mean()), float(en.std()))
    units_dir = corpus.root / "units"
    units_dir.mkdir(exist_ok=True)
    for utt_id in corpus.utterance_ids():
        utt = corpus.load(utt_id)
        units = dsp.units_from_features(
            utt.f0, utt.voiced, utt.energy, utt.alignment, stats[utt.speaker_id]
        )
        save_matrix(units_dir / f"{utt_id}.tmat", units)
    with open(corpus.root / "speakers.tsv", "w") as f:
        f.write("#speaker\tf0_mean\tf0_std\tenergy_mean\tenergy_std\n")
        for sid, s in sorted(stats.items()):
            f.write(f"{sid}\t{s.f0_mean!r}\t{s.f0_std!r}\t{s.energy_mean!r}\t{s.energy_std!r}\n")
    corpus._stats = None
    return Corpus(root)


# ---------------------------------------------------------------------------
# toy oracles used by representation analysis


def classify_templates(mel: np.ndarray, alignment: np.ndarray, world: ToyWorld,
                       language: str) -> list[str]:
    """Nearest-template phoneme prediction per aligned span (mean-centered L2)."""
    alphabet = LANGUAGES[language]
    refs = np.stack([world.templates[ph] for ph in alphabet])
    refs = refs - refs.mean(axis=1, keepdims=True)
    preds = []
    start = 0
    for d in alignment:
        stop = start + int(d)
        seg = np.asarray(mel[start:stop], dtype=np.float64).mean(axis=0)
        seg = seg - seg.mean()
        dist = ((refs - seg[None, :]) ** 2).sum(axis=1)
        preds.append(alphabet[int(np.argmin(dist))])
        start = stop
    return preds


def _highpass_bands(x: np.ndarray, width: int = 9) -> np.ndarray:
    """Subtract a moving average along the band axis (keeps narrow bumps)."""
    kernel = np.ones(width) / width
    smooth = np.stack([np.convolve(row, kernel, mode="same") for row in x])
    return x - smooth


def readout_f0(mel: np.ndarray, world: ToyWorld, grid: np.ndarray | None = None) -> np.ndarray:
    """Per-frame F0 readout by matching the generator's excitation pattern.

    Band-axis high-pass first: phoneme envelope bumps are wide, excitation
    bumps narrow, so the residual isolates the source pattern.
    """
    if grid is None:
        grid = np.linspace(dsp.F0_MIN, dsp.F0_MAX, 221)
    patterns = _highpass_bands(np.stack([world.excitation(float(f)) for f in grid]))
    frames = _highpass_bands(np.asarray(mel, dtype=np.float64))
    scores = frames @ patterns.T
    return grid[np.argmax(scores, axis=1)]
