"""Run configuration: model/training hyperparameters, file format, hashing.

Config files are flat ``section.key = value`` lines. Unknown keys are
errors, not warnings: silent config drift is the main reproducibility
hazard. The config hash covers the canonical flat dump and gates
checkpoint resumption.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class EncoderConfig:
    layers: int
    hidden: int
    ff: int
    heads: int
    kernel: int


@dataclass
class ProsodyConfig:
    layers: int = 3
    hidden: int = 128
    ff: int = 512
    heads: int = 4
    duration_bins: int = 32
    pitch_bins: int = 64
    energy_bins: int = 64
    max_len: int = 640


@dataclass
class DecoderConfig:
    layers: int = 3
    hidden: int = 128
    ff: int = 512
    heads: int = 4
    kernel: int = 3
    mapping_depth: int = 4
    mapped_style_dim: int = 64
    noise_dim: int = 16
    global_style_dim: int = 128
    kernel_bank: int = 4


@dataclass
class DiscriminatorConfig:
    windows: tuple = (32, 64, 128)
    kernel: int = 3
    hidden: int = 32


@dataclass
class AblationConfig:
    no_source_filter: bool = False
    no_adaptive_kernels: bool = False
    no_film: bool = False


@dataclass
class ModelConfig:
    n_mels: int = 80
    upsample_sigma: float = 1.0
    text: EncoderConfig = field(default_factory=lambda: EncoderConfig(6, 128, 512, 4, 3))
    prompt: EncoderConfig = field(default_factory=lambda: EncoderConfig(3, 128, 512, 4, 9))
    prosody: ProsodyConfig = field(default_factory=ProsodyConfig)
    generator: EncoderConfig = field(default_factory=lambda: EncoderConfig(3, 128, 512, 4, 3))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Default desk-scale model: width 1/4 of full scale, same depths."""
        return cls()

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-scale hyperparameters (~260M parameters); not the test default."""
        return cls(
            text=EncoderConfig(6, 512, 2048, 8, 3),
            prompt=EncoderConfig(3, 512, 2048, 8, 9),
            prosody=ProsodyConfig(layers=3, hidden=512, ff=2048, heads=8, max_len=2048),
            generator=EncoderConfig(3, 512, 2048, 8, 3),
            decoder=DecoderConfig(
                layers=3, hidden=512, ff=2048, heads=8, kernel=3, mapping_depth=4,
                mapped_style_dim=256, noise_dim=64, global_style_dim=512, kernel_bank=4,
            ),
            discriminator=DiscriminatorConfig(windows=(32, 64, 128), kernel=3, hidden=128),
        )


@dataclass
class TrainConfig:
    seed: int = 1
    batch_size: int = 4
    max_steps: int = 2000
    warmup: int = 400
    lr_scale: float = 0.05
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    adv_weight: float = 1.0
    adv_start_step: int = 10000
    prompt_min_frac: float = 0.25
    prompt_max_frac: float = 0.5
    prompt_min_len: int = 8
    prompt_max_len: int = 256
    min_frames: int = 24
    log_every: int = 20
    ckpt_every: int = 500
    eval_every: int = 250
    # per-op NaN checks are debug-build behaviour; each step always verifies
    # loss finiteness and aborts with the offending batch ids
    debug_nan_checks: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus_root: str = ""
    run_seed: int = 0


def overfit_run_config(corpus_root="") -> RunConfig:
    """Recipe for the 10-utterance overfit oracle: desk model, short warmup,
    adversarial term deferred past the horizon, no weight decay (decay
    fights exact memorization). Calibrated once; the calibration manifest
    lives under calibration/."""
    cfg = RunConfig()
    cfg.train.seed = 1
    cfg.train.batch_size = 2
    cfg.train.warmup = 200
    cfg.train.lr_scale = 0.04
    cfg.train.weight_decay = 0.0
    cfg.train.max_steps = 5000
    cfg.train.eval_every = 50
    cfg.corpus_root = str(corpus_root)
    return cfg


_SCALARS = (int, float, bool, str)


def _flatten(obj, prefix: str, out: dict) -> None:
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            _flatten(value, key + ".", out)
        elif isinstance(value, tuple):
            out[key] = ",".join(str(v) for v in value)
        elif isinstance(value, _SCALARS):
            out[key] = value
        else:
            raise TypeError(f"unsupported config field {key}: {type(value)}")


def to_flat_dict(cfg: RunConfig) -> dict:
    out: dict = {}
    _flatten(cfg, "", out)
    return out


def _assign(obj, dotted: str, raw: str) -> None:
    head, _, rest = dotted.partition(".")
    matching = [f for f in fields(obj) if f.name == head]
    if not matching:
        raise KeyError(f"unknown config key component {head!r} in {dotted!r}")
    current = getattr(obj, head)
    if dataclasses.is_dataclass(current):
        if not rest:
            raise KeyError(f"config key {dotted!r} names a section, not a value")
        _assign(current, rest, raw)
        return
    if rest:
        raise KeyError(f"unknown config key {dotted!r}")
    setattr(obj, head, _coerce(raw, current, dotted))


def _coerce(raw, current, key):
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("true", "1", "yes"):
            return True
        if str(raw).lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in str(raw).split(","))
    return str(raw)


def apply_overrides(cfg: RunConfig, items: dict) -> RunConfig:
    for key, value in items.items():
        try:
            _assign(cfg, key, value)
        except KeyError as e:
            raise KeyError(f"unknown config key {key!r}") from e
    return cfg


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        apply_overrides(cfg, {key.strip(): value.strip()})
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def format_config(cfg: RunConfig) -> str:
    flat = to_flat_dict(cfg)
    return "\n".join(f"{k} = {flat[k]}" for k in sorted(flat)) + "\n"


# paths are volatile across machines; the hash identifies the recipe
_HASH_EXCLUDE = {"corpus_root"}


def config_hash(cfg: RunConfig) -> str:
    flat = to_flat_dict(cfg)
    text = "\n".join(f"{k} = {flat[k]}" for k in sorted(flat) if k not in _HASH_EXCLUDE)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
