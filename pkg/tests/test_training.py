"""Losses, prompt plans, scheduler, optimizer, checkpoints, GAN wiring."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sftts import tensor as T
from sftts import training
from sftts.config import RunConfig, TrainConfig, config_hash
from sftts.corpus import ToySpec, generate_corpus, prepare_corpus
from sftts.tensor import SeededRng, Tensor
from sftts.training import (
    MultiWindowDiscriminator,
    NumericFailure,
    PromptPlan,
    Trainer,
    TrainingError,
    discriminate,
    load_checkpoint,
    lsgan_generator_loss,
    lsgan_losses,
    masked_l1,
    noam_lr,
    prosody_lr,
    sample_prompt_plan,
)


@pytest.fixture(scope="module")
def prepared_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("traincorpus") / "c"
    spec = ToySpec(seed=91, num_speakers=2, train_utterances=8, val_utterances=0,
                   test_utterances=0, min_phonemes=6, max_phonemes=8)
    generate_corpus(spec, root)
    return prepare_corpus(root)


def small_cfg(**overrides) -> RunConfig:
    cfg = RunConfig()
    for enc in (cfg.model.text, cfg.model.prompt, cfg.model.generator):
        enc.hidden, enc.ff, enc.heads, enc.layers = 32, 64, 2, 2
    cfg.model.prosody.hidden, cfg.model.prosody.ff = 32, 64
    cfg.model.prosody.heads, cfg.model.prosody.layers = 2, 2
    d = cfg.model.decoder
    d.hidden, d.ff, d.heads, d.layers = 32, 64, 2, 2
    d.mapped_style_dim, d.noise_dim, d.global_style_dim = 16, 8, 24
    cfg.model.discriminator.hidden = 8
    cfg.train.batch_size = 2
    cfg.train.max_steps = 4
    cfg.train.warmup = 10
    for key, value in overrides.items():
        setattr(cfg.train, key, value)
    return cfg


# --- analytic loss contracts -------------------------------------------------


def test_lsgan_analytic_cases():
    ones = [Tensor(np.ones((1, 2, 3), dtype=np.float32))]
    zeros = [Tensor(np.zeros((1, 2, 3), dtype=np.float32))]
    halves = [Tensor(np.full((1, 2, 3), 0.5, dtype=np.float32))]
    d, _ = lsgan_losses(ones, zeros)
    assert d.item() == 0.0
    assert lsgan_generator_loss(ones).item() == 0.0
    d, g = lsgan_losses(halves, halves)
    assert d.item() == pytest.approx(0.5)
    assert g.item() == pytest.approx(0.25)
    d, g = lsgan_losses([], [])
    assert d.item() == 0.0 and g.item() == 0.0


def test_masked_l1_contract():
    rng = SeededRng(1)
    target = rng.normal((10, 80)).astype(np.float32)
    mask = np.ones(10, dtype=bool)
    mask[3:6] = False
    pred = Tensor(target.copy())
    assert masked_l1(pred, target, mask).item() == 0.0
    off = Tensor(target + 0.5)
    assert masked_l1(off, target, mask).item() == pytest.approx(0.5, rel=1e-5)
    perturbed = target.copy()
    perturbed[3:6] += 123.0  # inside the masked prompt segment
    a = masked_l1(off, target, mask).item()
    b = masked_l1(off, perturbed, mask).item()
    assert a == b  # bitwise invariant
    with pytest.raises(TrainingError):
        masked_l1(off, target, np.zeros(10, dtype=bool))
    with pytest.raises(TrainingError):
        masked_l1(off, target[:5], mask)


# --- prompt plan --------------------------------------------------------------


def test_prompt_plan_mask_and_prosody_rule():
    cfg = TrainConfig()
    plan = sample_prompt_plan(100, SeededRng(3), cfg)
    assert plan is not None
    assert not plan.mask[plan.start : plan.stop].any()
    outside = np.ones(100, dtype=bool)
    outside[plan.start : plan.stop] = False
    np.testing.assert_array_equal(plan.mask, outside)
    assert plan.prosody_length == -(-plan.length // 2)
    assert plan.prosody_length < plan.length  # strictly shorter for length >= 2


def test_prompt_plan_skips_short_utterances():
    cfg = TrainConfig()
    assert sample_prompt_plan(cfg.min_frames - 1, SeededRng(1), cfg) is None


def test_prompt_plan_length_distribution_uniform():
    cfg = TrainConfig()
    rng = SeededRng(7)
    t = 100
    lo, hi = 25, 50  # ceil(.25*100), ceil(.5*100)
    counts = np.zeros(hi - lo + 1)
    draws = 10_000
    for _ in range(draws):
        plan = sample_prompt_plan(t, rng, cfg)
        counts[plan.length - lo] += 1
    expected = draws / len(counts)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # dof = 25; p > 0.01 ⇔ chi2 < 44.31
    assert chi2 < 44.31


# --- scheduler ----------------------------------------------------------------


def test_noam_matches_closed_form():
    assert noam_lr(1, 4000, 1.0) == pytest.approx(4000**-1.5, rel=1e-9)
    assert noam_lr(1, 4000, 1.0) == pytest.approx(3.9528e-6, rel=1e-4)
    w = 400
    assert noam_lr(w, w, 1.0) == pytest.approx(w**-0.5)
    seq = [noam_lr(s, w, 1.0) for s in range(1, 3 * w)]
    assert all(a < b for a, b in zip(seq[: w - 1], seq[1:w]))
    assert all(a > b for a, b in zip(seq[w - 1 :], seq[w:]))


def test_prosody_lr_clamped_to_peak_then_equal():
    w, scale = 100, 0.5
    peak = scale * w**-0.5
    for step in range(1, w):
        assert prosody_lr(step, w, scale) == peak
        assert prosody_lr(step, w, scale) >= noam_lr(step, w, scale)
    for step in range(w, 3 * w, 17):
        assert prosody_lr(step, w, scale) == noam_lr(step, w, scale)


# --- discriminator ------------------------------------------------------------


def test_discriminator_patch_shape_formula():
    disc = MultiWindowDiscriminator(RunConfig().model.discriminator, seed=5)
    for sub in disc.subs:
        mel = SeededRng(sub.window).normal((sub.window, 80))
        out = sub(Tensor(mel))
        expected = sub.patch_shape(sub.window, 80)
        assert out.shape == (1,) + expected
        # three stride-2 stages: ceil(x/8)
        assert expected == (-(-sub.window // 8), 10)


def test_discriminate_crop_deterministic():
    disc = MultiWindowDiscriminator(RunConfig().model.discriminator, seed=5)
    mel = SeededRng(2).normal((200, 80))
    a = discriminate(disc, mel, 64, seed=123)
    b = discriminate(disc, mel, 64, seed=123)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(TrainingError):
        discriminate(disc, mel[:40], 64, seed=1)


def test_short_mel_skips_all_windows():
    disc = MultiWindowDiscriminator(RunConfig().model.discriminator, seed=5)
    assert disc.active(31) == []
    crops = disc.sample_crops(31, SeededRng(1))
    assert crops == {}
    d, g = lsgan_losses([], [])
    assert d.item() == 0.0 and g.item() == 0.0


# --- optimizer ----------------------------------------------------------------


def test_adamw_kernels_agree():
    rng = SeededRng(11)
    n = 4097
    args = [rng.normal((n,)) for _ in range(3)]
    args.append(np.abs(rng.normal((n,))))  # second moment is nonnegative
    scalars = (np.float32(0.8), np.float32(0.99), np.float32(1e-3),
               np.float32(9e-4), np.float32(1e-9), np.float32(0.01))
    ref = [a.copy() for a in args]
    training._adamw_kernel_numpy(*ref, *scalars)
    if training._ADAMW_KERNEL is None:
        pytest.skip("numba unavailable")
    fused = [a.copy() for a in args]
    training._ADAMW_KERNEL(*fused, *scalars)
    for a, b in zip(ref, fused):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)


def test_adamw_flat_views_track_updates():
    rng = SeededRng(12)
    p = Tensor(rng.normal((3, 4)), requires_grad=True)
    opt = training.AdamW([("p", p, "main")], 0.8, 0.99, weight_decay=0.0)
    before = p.data.copy()
    loss = T.tsum(p * p)
    T.backward(loss)
    opt.step({"main": 0.1})
    assert not np.array_equal(p.data, before)
    m, v = opt.moments("p")
    assert np.abs(m).max() > 0 and np.abs(v).max() > 0


# --- trainer behaviour ---------------------------------------------------------


def test_gradient_isolation(prepared_corpus):
    cfg = small_cfg(adv_start_step=0)
    trainer = Trainer(cfg, prepared_corpus)
    utt, plan = trainer._draw_sample()
    noise = trainer.rng.normal((1, cfg.model.decoder.noise_dim))
    crops = trainer.disc.sample_crops(utt.num_frames, trainer.rng)
    trainer.opt_g.zero_grad()
    trainer.opt_d.zero_grad()
    l1, ce, g_adv, d_loss, _ = trainer._forward_losses(utt, plan, noise, True, crops)
    assert d_loss is not None and g_adv is not None
    T.backward(d_loss)
    for _, p, _ in trainer.opt_g.params:  # D update leaves the generator untouched
        assert p.grad is None or not np.any(p.grad)
    disc_grads = [np.array(p.grad) for _, p, _ in trainer.opt_d.params]
    trainer.disc.set_requires_grad(False)
    T.backward(l1 + ce + g_adv)
    trainer.disc.set_requires_grad(True)
    for (_, p, _), before in zip(trainer.opt_d.params, disc_grads):
        np.testing.assert_array_equal(p.grad, before)  # G update left D grads alone
    model_norm = sum(float(np.abs(p.grad).sum()) for _, p, _ in trainer.opt_g.params
                     if p.grad is not None)
    assert model_norm > 0


def test_adv_disabled_losses_are_pure_recon_plus_ce(prepared_corpus):
    cfg = small_cfg(adv_weight=0.0)
    trainer = Trainer(cfg, prepared_corpus)
    rec = trainer.train_step()
    assert rec["g_adv"] == 0.0 and rec["d_loss"] == 0.0
    assert {"step", "l1", "ce_d", "ce_p", "ce_e", "g_adv", "d_loss", "lr"} <= set(rec)


def test_gan_training_steps_run_finitely(prepared_corpus):
    cfg = small_cfg(adv_start_step=0, max_steps=3)
    trainer = Trainer(cfg, prepared_corpus)
    for _ in range(3):
        rec = trainer.train_step()
        assert np.isfinite(rec["d_loss"]) and np.isfinite(rec["g_adv"])
    assert rec["d_loss"] != 0.0


def test_loss_log_has_contract_columns(prepared_corpus, tmp_path):
    cfg = small_cfg(max_steps=2)
    trainer = Trainer(cfg, prepared_corpus, out_dir=tmp_path)
    trainer.run(log_path=tmp_path / "loss_log.csv")
    lines = (tmp_path / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "step,l1,ce_d,ce_p,ce_e,g_adv,d_loss,lr"
    assert len(lines) == 3


def test_checkpoint_roundtrip_bitwise(prepared_corpus, tmp_path):
    cfg = small_cfg(max_steps=3)
    trainer = Trainer(cfg, prepared_corpus)
    trainer.train_step()
    path = tmp_path / "a.ckpt"
    trainer.save(path)
    restored = Trainer.restore(path, prepared_corpus)
    for (n1, p1, _), (n2, p2, _) in zip(trainer.opt_g.params, restored.opt_g.params):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    assert restored.step == trainer.step


def test_resume_reproduces_uninterrupted_run_bitwise(prepared_corpus, tmp_path):
    cfg = small_cfg(max_steps=6)
    straight = Trainer(cfg, prepared_corpus)
    for _ in range(2):
        straight.train_step()
    path = tmp_path / "mid.ckpt"
    straight.save(path)
    straight_recs = [straight.train_step() for _ in range(2)]

    resumed = Trainer.restore(path, prepared_corpus)
    resumed_recs = [resumed.train_step() for _ in range(2)]
    assert straight_recs == resumed_recs  # loss records match bitwise
    for (n1, p1, _), (n2, p2, _) in zip(straight.opt_g.params, resumed.opt_g.params):
        np.testing.assert_array_equal(p1.data, p2.data, err_msg=n1)
    for (n1, p1, _), (n2, p2, _) in zip(straight.opt_d.params, resumed.opt_d.params):
        np.testing.assert_array_equal(p1.data, p2.data, err_msg=n1)


def test_checkpoint_config_hash_gate(prepared_corpus, tmp_path):
    cfg = small_cfg(max_steps=2)
    trainer = Trainer(cfg, prepared_corpus)
    path = tmp_path / "a.ckpt"
    trainer.save(path)
    other = small_cfg(max_steps=99)
    assert config_hash(other) != config_hash(cfg)
    with pytest.raises(TrainingError):
        Trainer.restore(path, prepared_corpus, expect=other)
    forced = Trainer.restore(path, prepared_corpus, expect=other, force=True)
    assert forced.cfg.train.max_steps == 99


def test_corrupt_checkpoint_rejected(tmp_path, prepared_corpus):
    cfg = small_cfg()
    trainer = Trainer(cfg, prepared_corpus)
    path = tmp_path / "a.ckpt"
    trainer.save(path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TrainingError):
        load_checkpoint(bad)


@pytest.mark.parametrize("flag", ["no_source_filter", "no_adaptive_kernels", "no_film"])
def test_ablation_flags_train_and_checkpoint(prepared_corpus, tmp_path, flag):
    cfg = small_cfg(adv_start_step=0, max_steps=2)
    setattr(cfg.model.ablation, flag, True)
    trainer = Trainer(cfg, prepared_corpus, out_dir=tmp_path)
    rec = trainer.run(log_path=tmp_path / "loss_log.csv")
    assert np.isfinite(rec["l1"])
    assert (tmp_path / "latest.ckpt").exists()


def test_unprepared_corpus_rejected(tmp_path):
    spec = ToySpec(seed=5, num_speakers=1, train_utterances=2, val_utterances=0,
                   test_utterances=0)
    root = tmp_path / "c"
    generate_corpus(spec, root)
    from sftts.corpus import Corpus

    with pytest.raises(TrainingError):
        Trainer(small_cfg(), Corpus(root))
