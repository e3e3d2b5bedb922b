"""Training: losses, prompt planning, optimizer, checkpoints, loop.

Each step forwards the generator path with ground-truth units and a
random prompt plan, updates the discriminator on (real, detached fake),
then updates the generator on masked L1 + adversarial + prosody CE. The
discriminator is frozen during the generator update, so neither update
leaks gradients into the other's parameters. A single seeded stream
drives every random choice; checkpoints capture it, making resume
bit-exact in single-threaded mode.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import DiscriminatorConfig, RunConfig, TrainConfig, config_hash, to_flat_dict
from .corpus import Corpus
from .model import TTSModel
from .nn import Module
from .prosody import UnitStreams, per_stream_ce, prosody_ce_loss
from .tensor import NonFiniteError, SeededRng, Tensor, derive_seed

CKPT_MAGIC = b"SFCK"
CKPT_VERSION = 1
LOSS_COLUMNS = ("step", "l1", "ce_d", "ce_p", "ce_e", "g_adv", "d_loss", "lr")


class TrainingError(RuntimeError):
    pass


class NumericFailure(TrainingError):
    """Training diverged: a loss became non-finite."""


# ---------------------------------------------------------------------------
# discriminator


class WindowDiscriminator(Module):
    """2-D patch scorer over a fixed-width time crop of the mel."""

    def __init__(self, window: int, cfg: DiscriminatorConfig, rng: SeededRng):
        from .nn import xavier

        self.window = window
        k = cfg.kernel
        h = cfg.hidden
        chans = [(1, h, 2), (h, h, 2), (h, h, 2), (h, 1, 1)]
        self.weights = []
        self.biases = []
        for ci, co, _ in chans:
            self.weights.append(Tensor(xavier(rng, ci * k * k, co, (co, ci, k, k)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(co, dtype=np.float32), requires_grad=True))
        self._strides = [s for _, _, s in chans]

    def __call__(self, crop: Tensor) -> Tensor:
        x = T.reshape(crop, (1,) + crop.shape)
        last = len(self.weights) - 1
        for i, (w, b, s) in enumerate(zip(self.weights, self.biases, self._strides)):
            x = T.conv2d(x, w, b, stride=s)
            if i != last:
                x = T.leaky_relu(x, 0.2)
        return x

    def patch_shape(self, frames: int, bands: int) -> tuple[int, int]:
        h, w = frames, bands
        for s in self._strides:
            h, w = -(-h // s), -(-w // s)
        return h, w


class MultiWindowDiscriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, seed: int):
        rng = SeededRng(derive_seed(seed, "discriminator"))
        self.subs = [WindowDiscriminator(w, cfg, rng.spawn(w)) for w in cfg.windows]

    def active(self, num_frames: int) -> list[WindowDiscriminator]:
        return [d for d in self.subs if num_frames >= d.window]

    def score_crops(self, mel: Tensor, starts: dict[int, int]) -> list[Tensor]:
        scores = []
        for d in self.subs:
            if d.window not in starts:
                continue
            s = starts[d.window]
            scores.append(d(mel[s : s + d.window, :]))
        return scores

    def sample_crops(self, num_frames: int, rng: SeededRng) -> dict[int, int]:
        starts = {}
        for d in self.active(num_frames):
            starts[d.window] = int(rng.integers(0, num_frames - d.window + 1))
        return starts


def discriminate(disc: MultiWindowDiscriminator, mel: np.ndarray, window: int, seed: int) -> np.ndarray:
    """Score one random `window`-frame crop; deterministic given the seed."""
    sub = next((d for d in disc.subs if d.window == window), None)
    if sub is None:
        raise TrainingError(f"no discriminator with window {window}")
    num_frames = mel.shape[0]
    if num_frames < window:
        raise TrainingError(f"mel with {num_frames} frames is shorter than window {window}")
    start = int(SeededRng(seed).integers(0, num_frames - window + 1))
    with T.no_grad():
        return sub(Tensor(mel[start : start + window]))


# ---------------------------------------------------------------------------
# losses


def lsgan_losses(real_scores: list[Tensor], fake_scores: list[Tensor]) -> tuple[Tensor, Tensor]:
    """(L_D, L_G) averaged over the active windows; zeros when none active."""
    if len(real_scores) != len(fake_scores):
        raise TrainingError("real/fake score lists must pair up")
    if not real_scores:
        zero = Tensor(np.float32(0.0))
        return zero, zero
    d_total = None
    g_total = None
    for real, fake in zip(real_scores, fake_scores):
        d_term = T.tmean((real - 1.0) * (real - 1.0)) + T.tmean(fake * fake)
        g_term = T.tmean((fake - 1.0) * (fake - 1.0))
        d_total = d_term if d_total is None else d_total + d_term
        g_total = g_term if g_total is None else g_total + g_term
    n = float(len(real_scores))
    return d_total * (1.0 / n), g_total * (1.0 / n)


def lsgan_generator_loss(fake_scores: list[Tensor]) -> Tensor:
    if not fake_scores:
        return Tensor(np.float32(0.0))
    total = None
    for fake in fake_scores:
        term = T.tmean((fake - 1.0) * (fake - 1.0))
        total = term if total is None else total + term
    return total * (1.0 / len(fake_scores))


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over unmasked frames x all bands."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise TrainingError(f"masked_l1 shape mismatch: {pred.shape} vs {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("masked_l1 needs at least one unmasked frame")
    weights = mask.astype(pred.data.dtype)[:, None]
    diff = T.absolute(pred - target) * weights
    return T.tsum(diff) * (1.0 / (count * target.shape[1]))


# ---------------------------------------------------------------------------
# prompt planning


@dataclass
class PromptPlan:
    start: int
    length: int
    prosody_length: int
    mask: np.ndarray  # False exactly on the prompt segment

    @property
    def stop(self) -> int:
        return self.start + self.length


def sample_prompt_plan(num_frames: int, rng: SeededRng, cfg: TrainConfig) -> PromptPlan | None:
    """Uniform segment length in [ceil(.25T), ceil(.5T)] clamped to [8, 256];
    the prosody prompt is the first half of the segment. None = skip sample."""
    if num_frames < cfg.min_frames:
        return None
    lo = max(cfg.prompt_min_len, math.ceil(cfg.prompt_min_frac * num_frames))
    hi = min(cfg.prompt_max_len, math.ceil(cfg.prompt_max_frac * num_frames))
    if hi < lo or hi >= num_frames:
        return None
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, num_frames - length + 1))
    mask = np.ones(num_frames, dtype=bool)
    mask[start : start + length] = False
    return PromptPlan(start=start, length=length, prosody_length=math.ceil(length / 2), mask=mask)


# ---------------------------------------------------------------------------
# schedule and optimizer


def noam_lr(step: int, warmup: int, scale: float) -> float:
    if step < 1:
        raise TrainingError("scheduler steps start at 1")
    return scale * min(step**-0.5, step * warmup**-1.5)


def prosody_lr(step: int, warmup: int, scale: float) -> float:
    """Prosody group starts at the peak rate, then follows the shared decay."""
    peak = scale * warmup**-0.5
    return peak if step < warmup else noam_lr(step, warmup, scale)


def _adamw_kernel_numpy(p, g, m, v, b1, b2, lr, lr_t, eps_t, wd):
    m *= b1
    scratch = g * (1 - b1)
    m += scratch
    v *= b2
    np.multiply(g, g, out=scratch)
    scratch *= 1 - b2
    v += scratch
    np.sqrt(v, out=scratch)
    scratch += eps_t
    np.divide(m, scratch, out=scratch)
    p *= np.float32(1.0 - lr * wd)
    scratch *= lr_t
    p -= scratch


try:  # single fused pass; the flat buffers are memory-bound under numpy
    import numba

    @numba.njit(cache=True)
    def _adamw_kernel_fused(p, g, m, v, b1, b2, lr, lr_t, eps_t, wd):  # pragma: no cover
        decay = np.float32(1.0) - lr * wd
        one = np.float32(1.0)
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (one - b1) * gi
            vi = b2 * v[i] + (one - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = p[i] * decay - lr_t * (mi / (np.sqrt(vi) + eps_t))

    _ADAMW_KERNEL = _adamw_kernel_fused
except ImportError:  # pragma: no cover
    _ADAMW_KERNEL = None


class AdamW:
    """Decoupled weight decay Adam over flat per-group master buffers.

    Parameter tensors (and their gradients) are re-bound as views into one
    contiguous float32 buffer per group: backward accumulates straight into
    the flat gradient, and the update is one fused pass. Nothing else may
    re-bind ``p.data`` while an optimizer owns the parameter (in-place
    writes are fine; checkpoint restore copies into the views).
    """

    def __init__(self, named_params, beta1: float, beta2: float,
                 weight_decay: float = 0.01, eps: float = 1e-9):
        self.params = list(named_params)  # (name, tensor, group) triples
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.groups: dict[str, dict] = {}
        by_group: dict[str, list] = {}
        for name, p, group in self.params:
            by_group.setdefault(group, []).append((name, p))
        self._slots: dict[str, tuple[str, int, int]] = {}
        for group, members in by_group.items():
            total = sum(p.size for _, p in members)
            flat = np.empty(total, dtype=np.float32)
            grad = np.zeros(total, dtype=np.float32)
            offset = 0
            views = []
            for name, p in members:
                n = p.size
                flat[offset : offset + n] = p.data.ravel()
                p.data = flat[offset : offset + n].reshape(p.shape)
                views.append((p, grad[offset : offset + n].reshape(p.shape)))
                self._slots[name] = (group, offset, n)
                offset += n
            self.groups[group] = {
                "flat": flat,
                "grad": grad,
                "m": np.zeros(total, dtype=np.float32),
                "v": np.zeros(total, dtype=np.float32),
                "members": members,
                "views": views,
            }
        self.zero_grad()

    def zero_grad(self) -> None:
        """Zero the flat gradient and point every ``p.grad`` at its slice."""
        for group in self.groups.values():
            group["grad"].fill(0.0)
            for p, view in group["views"]:
                p.grad = view

    def grad_norm(self) -> float:
        total = 0.0
        for group in self.groups.values():
            flat = group["grad"]
            total += float(np.dot(flat, flat))
        return math.sqrt(total)

    def step(self, lrs: dict[str, float], clip: float = 0.0) -> float:
        """Optionally clip the global grad norm, then apply the update."""
        self._adopt_rebound_grads()
        norm = self.grad_norm()
        if clip > 0 and norm > clip:
            factor = np.float32(clip / (norm + 1e-12))
            for group in self.groups.values():
                group["grad"] *= factor
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for tag, group in self.groups.items():
            lr = lrs[tag]
            lr_t = np.float32(lr * math.sqrt(bc2) / bc1)
            eps_t = np.float32(self.eps * math.sqrt(bc2))
            args = (group["flat"], group["grad"], group["m"], group["v"],
                    np.float32(self.beta1), np.float32(self.beta2), np.float32(lr),
                    lr_t, eps_t, np.float32(self.weight_decay))
            if _ADAMW_KERNEL is not None:
                _ADAMW_KERNEL(*args)
            else:
                _adamw_kernel_numpy(*args)
        return norm

    def _adopt_rebound_grads(self) -> None:
        # a backward pass normally accumulates into the bound views; if user
        # code re-bound p.grad (fresh tensors), copy the values back in
        for group in self.groups.values():
            for p, view in group["views"]:
                if p.grad is not view and p.grad is not None:
                    view[...] = p.grad.reshape(view.shape)
                    p.grad = view

    # --- checkpoint access: per-parameter moment slices -----------------------

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        group, offset, n = self._slots[name]
        g = self.groups[group]
        return g["m"][offset : offset + n], g["v"][offset : offset + n]

    def set_moments(self, name: str, m: np.ndarray, v: np.ndarray) -> None:
        group, offset, n = self._slots[name]
        g = self.groups[group]
        g["m"][offset : offset + n] = m.ravel()
        g["v"][offset : offset + n] = v.ravel()


def clip_gradients(params, max_norm: float) -> float:
    total = 0.0
    for _, p, _ in params:
        if p.grad is not None:
            total += float(np.vdot(p.grad, p.grad))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / (norm + 1e-12))
        for _, p, _ in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Versioned container: magic, header JSON, then raw named tensors."""
    directory = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        directory.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = dict(header)
    header["tensors"] = directory
    encoded = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(encoded)))
        f.write(encoded)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise TrainingError(f"{path}: not a checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != CKPT_VERSION:
            raise TrainingError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode())
        payload = f.read()
    tensors = {}
    for ent in header["tensors"]:
        dtype = np.dtype(ent["dtype"]).newbyteorder("<")
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        if arr.size != count:
            raise TrainingError(f"{path}: truncated tensor {ent['name']}")
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(np.dtype(ent["dtype"]))
    return header, tensors


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, run_cfg: RunConfig, corpus: Corpus, out_dir=None):
        if not corpus.prepared:
            raise TrainingError("corpus is not prepared (no unit streams); run prepare first")
        self.cfg = run_cfg
        self.corpus = corpus
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = TTSModel(run_cfg.model, corpus.vocabulary(), seed=run_cfg.train.seed)
        self.disc = MultiWindowDiscriminator(run_cfg.model.discriminator, run_cfg.train.seed)
        self.rng = SeededRng(derive_seed(run_cfg.train.seed, "trainloop"))
        self.step = 0
        tc = run_cfg.train
        prosody_names = self.model.prosody_parameter_names()
        gen_params = [
            (f"model/{name}", p, "prosody" if (name in prosody_names or name.startswith("prosody.")) else "main")
            for name, p in self.model.named_parameters()
        ]
        disc_params = [(f"disc/{name}", p, "disc") for name, p in self.disc.named_parameters()]
        self.opt_g = AdamW(gen_params, tc.beta1, tc.beta2, tc.weight_decay)
        self.opt_d = AdamW(disc_params, tc.beta1, tc.beta2, tc.weight_decay)
        self._utts = {u: corpus.load(u) for u in corpus.utterance_ids("train")}
        self._train_ids = sorted(self._utts)
        if not self._train_ids:
            raise TrainingError("corpus has no training utterances")

    # --- single utterance forward -------------------------------------------

    def _forward_losses(self, utt, plan: PromptPlan, noise: np.ndarray, adv: bool,
                        crops: dict[int, int]):
        prompt_mel = utt.mel[plan.start : plan.stop]
        prosody_mel = utt.mel[plan.start : plan.start + plan.prosody_length]
        r_full = self.model.prompt_encoder(Tensor(prompt_mel))
        r_pros = self.model.prompt_encoder(Tensor(prosody_mel))
        r_g = self.model.style_embedder(Tensor(prompt_mel))
        x = self.model.encode_text(utt.phonemes)
        units = UnitStreams.from_matrix(utt.units)
        mel_pred = self.model.decode_mel(
            x, utt.alignment, units, r_full, r_g, noise, which="coarse"
        )
        l1 = masked_l1(mel_pred, utt.mel, plan.mask)
        logits = self.model.prosody.teacher_forced(x, r_pros, units)
        ce = prosody_ce_loss(logits, units)
        ce_streams = per_stream_ce(logits, units)
        record = {"l1": float(l1.item()), "ce_d": ce_streams[0], "ce_p": ce_streams[1],
                  "ce_e": ce_streams[2]}
        d_loss = None
        g_adv = None
        if adv and crops:
            real_scores = self.disc.score_crops(Tensor(utt.mel), crops)
            fake_detached = Tensor(mel_pred.data)  # detached: L_D cannot reach the generator
            fake_scores_d = self.disc.score_crops(fake_detached, crops)
            d_loss, _ = lsgan_losses(real_scores, fake_scores_d)
            g_adv = lsgan_generator_loss(self.disc.score_crops(mel_pred, crops))
        return l1, ce, g_adv, d_loss, record

    def _draw_sample(self):
        """Pick an utterance with a valid prompt plan (skips too-short ones)."""
        for _ in range(64):
            utt_id = self._train_ids[int(self.rng.integers(0, len(self._train_ids)))]
            utt = self._utts[utt_id]
            plan = sample_prompt_plan(utt.num_frames, self.rng, self.cfg.train)
            if plan is not None:
                return utt, plan
        raise TrainingError("no trainable utterance found (all below minimum length)")

    def train_step(self) -> dict:
        tc = self.cfg.train
        prev_checks = T.set_nan_checks(tc.debug_nan_checks)
        try:
            return self._train_step_inner()
        finally:
            T.set_nan_checks(prev_checks)

    def _train_step_inner(self) -> dict:
        tc = self.cfg.train
        step = self.step + 1
        adv = tc.adv_weight > 0 and step > tc.adv_start_step
        self.opt_g.zero_grad()
        self.opt_d.zero_grad()
        records = []
        batch_ids = []
        scale = 1.0 / tc.batch_size
        for _ in range(tc.batch_size):
            utt, plan = self._draw_sample()
            batch_ids.append(utt.utt_id)
            noise = self.rng.normal((1, self.cfg.model.decoder.noise_dim))
            crops = self.disc.sample_crops(utt.num_frames, self.rng) if adv else {}
            try:
                l1, ce, g_adv, d_loss, rec = self._forward_losses(utt, plan, noise, adv, crops)
                if d_loss is not None and d_loss.requires_grad:
                    T.backward(d_loss * scale)
                g_total = l1 + ce
                if g_adv is not None:
                    g_total = g_total + g_adv * tc.adv_weight
                # gradients land where requires_grad holds at backward time;
                # freezing here keeps the generator update off the discriminator
                self.disc.set_requires_grad(False)
                T.backward(g_total * scale)
                self.disc.set_requires_grad(True)
            except NonFiniteError as e:
                raise NumericFailure(
                    f"non-finite loss at step {step}; batch {batch_ids}"
                ) from e
            rec["g_adv"] = float(g_adv.item()) if g_adv is not None else 0.0
            rec["d_loss"] = float(d_loss.item()) if d_loss is not None else 0.0
            if not all(np.isfinite(v) for v in rec.values()):
                raise NumericFailure(f"non-finite loss at step {step}; batch {batch_ids}")
            records.append(rec)
        lr_main = noam_lr(step, tc.warmup, tc.lr_scale)
        lrs = {"main": lr_main, "prosody": prosody_lr(step, tc.warmup, tc.lr_scale)}
        self.opt_g.step(lrs, clip=tc.grad_clip)
        if adv:
            self.opt_d.step({"disc": lr_main}, clip=tc.grad_clip)
        self.opt_g.zero_grad()
        self.opt_d.zero_grad()
        self.step = step
        out = {k: float(np.mean([r[k] for r in records])) for k in records[0]}
        out["step"] = step
        out["lr"] = lr_main
        return out

    # --- evaluation -----------------------------------------------------------

    def evaluate(self, split: str = "train", plan_seed: int = 123) -> dict:
        """Deterministic masked-L1 and teacher-forced unit accuracy."""
        ids = self.corpus.utterance_ids(split) or self._train_ids
        l1s = []
        hits = np.zeros(3)
        totals = np.zeros(3)
        with T.no_grad():
            for utt_id in ids:
                utt = self._utts.get(utt_id) or self.corpus.load(utt_id)
                plan = sample_prompt_plan(
                    utt.num_frames, SeededRng(derive_seed(plan_seed, utt_id)), self.cfg.train
                )
                if plan is None:
                    continue
                noise = SeededRng(derive_seed(plan_seed, "noise", utt_id)).normal(
                    (1, self.cfg.model.decoder.noise_dim)
                )
                l1, _, _, _, _ = self._forward_losses(utt, plan, noise, adv=False, crops={})
                l1s.append(float(l1.item()))
                x = self.model.encode_text(utt.phonemes)
                r_pros = self.model.prompt_encoder(
                    Tensor(utt.mel[plan.start : plan.start + plan.prosody_length])
                )
                units = UnitStreams.from_matrix(utt.units)
                logits = self.model.prosody.teacher_forced(x, r_pros, units)
                for k, (head, target) in enumerate(
                    zip(logits, (units.duration, units.pitch, units.energy))
                ):
                    pred = head.data.argmax(axis=1)
                    hits[k] += (pred == target).sum()
                    totals[k] += len(target)
        acc = hits / np.maximum(totals, 1)
        return {"l1": float(np.mean(l1s)), "acc_d": acc[0], "acc_p": acc[1], "acc_e": acc[2]}

    # --- persistence ------------------------------------------------------------

    def checkpoint_header(self) -> dict:
        return {
            "config_hash": config_hash(self.cfg),
            "config": to_flat_dict(self.cfg),
            "vocab": self.model.symbols,
            "step": self.step,
            "rng_state": _encode_rng(self.rng.get_state()),
            "opt_t": {"g": self.opt_g.t, "d": self.opt_d.t},
        }

    def save(self, path) -> None:
        tensors = {}
        for opt, tag in ((self.opt_g, "optg"), (self.opt_d, "optd")):
            for name, p, _ in opt.params:
                m, v = opt.moments(name)
                tensors[name] = p.data
                tensors[f"{tag}_m/{name}"] = m.reshape(p.shape)
                tensors[f"{tag}_v/{name}"] = v.reshape(p.shape)
        save_checkpoint(path, self.checkpoint_header(), tensors)

    @classmethod
    def restore(cls, path, corpus: Corpus, out_dir=None, force: bool = False,
                expect: RunConfig | None = None) -> "Trainer":
        header, tensors = load_checkpoint(path)
        cfg = _config_from_flat(header["config"])
        if expect is not None and config_hash(expect) != header["config_hash"]:
            if not force:
                raise TrainingError(
                    f"checkpoint config hash {header['config_hash']} does not match the "
                    f"requested config {config_hash(expect)}; pass force to override"
                )
            cfg = expect
        trainer = cls(cfg, corpus, out_dir=out_dir)
        if trainer.model.symbols != header["vocab"]:
            raise TrainingError("checkpoint vocabulary does not match the corpus")
        _load_params(trainer, header, tensors)
        return trainer

    def run(self, log_path=None, stop_check=None, quiet: bool = True) -> dict:
        """Advance to max_steps, appending one CSV row per step."""
        tc = self.cfg.train
        log_file = None
        if log_path is not None:
            log_path = Path(log_path)
            fresh = not log_path.exists()
            log_file = open(log_path, "a")
            if fresh:
                log_file.write(",".join(LOSS_COLUMNS) + "\n")
        last = {}
        try:
            while self.step < tc.max_steps:
                rec = self.train_step()
                last = rec
                if log_file is not None:
                    log_file.write(",".join(f"{rec[c]:.6g}" if c != "step" else str(rec[c])
                                            for c in LOSS_COLUMNS) + "\n")
                if not quiet and (rec["step"] % tc.log_every == 0):
                    print(f"step {rec['step']}: l1={rec['l1']:.4f} ce={rec['ce_d']:.3f}/"
                          f"{rec['ce_p']:.3f}/{rec['ce_e']:.3f} d={rec['d_loss']:.3f}")
                if self.out_dir is not None and rec["step"] % tc.ckpt_every == 0:
                    self.save(self.out_dir / "latest.ckpt")
                if stop_check is not None and stop_check(self, rec):
                    break
        finally:
            if log_file is not None:
                log_file.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "latest.ckpt")
        return last


def _encode_rng(state: dict) -> dict:
    return json.loads(json.dumps(state, default=int))


def _config_from_flat(flat: dict) -> RunConfig:
    from .config import apply_overrides

    return apply_overrides(RunConfig(), dict(flat))


def _load_params(trainer: Trainer, header: dict, tensors: dict) -> None:
    for opt, tag in ((trainer.opt_g, "optg"), (trainer.opt_d, "optd")):
        for name, p, _ in opt.params:
            if name not in tensors:
                raise TrainingError(f"checkpoint is missing tensor {name}")
            if tuple(tensors[name].shape) != p.shape:
                raise TrainingError(f"checkpoint tensor {name} has shape "
                                    f"{tensors[name].shape}, expected {p.shape}")
            p.data[...] = tensors[name]  # in place: data is an optimizer view
            opt.set_moments(name, tensors[f"{tag}_m/{name}"], tensors[f"{tag}_v/{name}"])
    trainer.opt_g.t = header["opt_t"]["g"]
    trainer.opt_d.t = header["opt_t"]["d"]
    trainer.step = header["step"]
    trainer.rng.set_state(header["rng_state"])


def build_model_from_checkpoint(path) -> tuple[TTSModel, dict]:
    """Inference-side load: model parameters only."""
    header, tensors = load_checkpoint(path)
    cfg = _config_from_flat(header["config"])
    model = TTSModel(cfg.model, header["vocab"], seed=cfg.train.seed)
    for name, p in model.named_parameters():
        key = f"model/{name}"
        if key not in tensors:
            raise TrainingError(f"checkpoint is missing tensor {key}")
        p.data = tensors[key].astype(np.float32)
    return model, header
