"""Style decoder: mapping, kernel selection, modulation/demodulation."""

import numpy as np
import pytest

from sftts import tensor as T
from sftts.config import DecoderConfig, ModelConfig
from sftts.corpus import LANGUAGES
from sftts.decoder import (
    DEMOD_EPS,
    AdaptiveConv1d,
    MappingNetwork,
    StyleDecoder,
    aggregate_kernels,
    modulate_demodulate,
)
from sftts.model import TTSModel
from sftts.tensor import SeededRng, Tensor

VOCAB = LANGUAGES["A"] + LANGUAGES["B"]


def cfg_small(bank=4):
    return DecoderConfig(layers=2, hidden=16, ff=32, heads=2, kernel=3, mapping_depth=4,
                         mapped_style_dim=8, noise_dim=4, global_style_dim=12, kernel_bank=bank)


def test_mapping_network_deterministic_and_sized():
    cfg = cfg_small()
    rng = SeededRng(1)
    net = MappingNetwork(cfg, rng)
    g = Tensor(rng.normal((1, 12)))
    z = Tensor(rng.normal((1, 4)))
    w1 = net(g, z)
    w2 = net(g, z)
    assert w1.shape == (1, 8)
    np.testing.assert_array_equal(w1.data, w2.data)
    z2 = Tensor(rng.normal((1, 4)))
    assert not np.array_equal(net(g, z2).data, w1.data)


def test_aggregate_single_bank_is_that_kernel():
    rng = SeededRng(2)
    bank = Tensor(rng.normal((1, 3, 2, 3)))
    out = aggregate_kernels(bank, Tensor(rng.normal((1, 1))))
    np.testing.assert_array_equal(out.data, bank.data[0])


def test_aggregate_uniform_logits_mean_and_saturation():
    rng = SeededRng(3)
    bank = Tensor(rng.normal((4, 3, 2, 3)))
    uniform = aggregate_kernels(bank, Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(uniform.data, bank.data.mean(axis=0), atol=1e-6)
    logits = np.zeros((1, 4), dtype=np.float32)
    logits[0, 2] = 20.0
    dominant = aggregate_kernels(bank, Tensor(logits))
    np.testing.assert_allclose(dominant.data, bank.data[2], atol=1e-6)


def test_demodulation_unit_norm_and_scale_invariance():
    rng = SeededRng(4)
    filt = Tensor(rng.normal((5, 3, 3)))
    scales = Tensor(np.abs(rng.normal((1, 3))) + 0.5)
    out = modulate_demodulate(filt, scales)
    norms = np.sqrt((out.data**2).sum(axis=(1, 2)))
    np.testing.assert_allclose(norms, 1.0, atol=1e-4)
    scaled = modulate_demodulate(filt, scales * 7.3)
    np.testing.assert_allclose(scaled.data, out.data, atol=1e-6)


def test_demodulation_unit_norm_input_with_unit_scales_unchanged():
    rng = SeededRng(5)
    raw = rng.normal((4, 3, 3)).astype(np.float64)
    raw /= np.sqrt((raw**2).sum(axis=(1, 2), keepdims=True))
    out = modulate_demodulate(Tensor(raw.astype(np.float32)), Tensor(np.ones((1, 3))))
    np.testing.assert_allclose(out.data, raw, atol=1e-4)


def test_demodulation_epsilon_inside_sqrt():
    filt = Tensor(np.zeros((2, 2, 1), dtype=np.float32))
    out = modulate_demodulate(filt, Tensor(np.ones((1, 2))))
    np.testing.assert_array_equal(out.data, 0)  # 0 / sqrt(eps), not a NaN


def test_bank_size_one_identity_scale_equals_plain_conv():
    cfg = cfg_small(bank=1)
    rng = SeededRng(6)
    conv = AdaptiveConv1d(16, 16, 3, cfg, rng)
    x = Tensor(rng.normal((10, 16)))
    w1 = Tensor(rng.normal((1, 8)))
    w2 = Tensor(rng.normal((1, 8)))
    # scale head is zero-init with bias 1 => identity modulation scales
    out1 = conv(x, w1)
    out2 = conv(x, w2)
    np.testing.assert_array_equal(out1.data, out2.data)  # style-independent
    eff = conv.effective_filter(w1)
    plain = T.conv1d(x, Tensor(eff.data), conv.bias)
    np.testing.assert_array_equal(out1.data, plain.data)


def test_gradients_reach_every_bank_entry():
    cfg = cfg_small(bank=4)
    rng = SeededRng(7)
    conv = AdaptiveConv1d(16, 16, 3, cfg, rng)
    x = Tensor(rng.normal((6, 16)))
    w = Tensor(rng.normal((1, 8)))
    out = conv(x, w)
    T.backward(T.tsum(out * out))
    bank_grad = conv.bank.grad
    assert bank_grad is not None
    for k in range(4):
        assert np.abs(bank_grad[k]).max() > 0


def test_decoder_output_shape_and_determinism():
    cfg = ModelConfig.desk()
    model = TTSModel(cfg, VOCAB, seed=50)
    rng = SeededRng(8)
    coarse = Tensor(rng.normal((14, 128)))
    g = Tensor(rng.normal((1, cfg.decoder.global_style_dim)))
    z = rng.normal((1, cfg.decoder.noise_dim))
    a = model.decoder(coarse, g, z)
    b = model.decoder(coarse, g, z)
    assert a.shape == (14, 80)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        model.decoder(coarse, g, np.zeros((1, 3), dtype=np.float32))


def test_ablation_parameter_count_delta_matches_formula():
    cfg = ModelConfig.desk()
    adaptive = TTSModel(cfg, VOCAB, seed=60)
    cfg_plain = ModelConfig.desk()
    cfg_plain.ablation.no_adaptive_kernels = True
    plain = TTSModel(cfg_plain, VOCAB, seed=60)

    d = cfg.decoder
    per_conv_pairs = ((d.hidden, d.ff), (d.ff, d.hidden))
    delta = 0
    for ci, co in per_conv_pairs:
        conv_w = co * ci * d.kernel
        adaptive_side = (d.kernel_bank * conv_w                       # bank
                         + d.mapped_style_dim * d.kernel_bank + d.kernel_bank  # select
                         + d.mapped_style_dim * ci + ci)              # scale affine
        delta += adaptive_side - conv_w
    delta *= d.layers
    # mapping network exists only in the adaptive decoder
    dims = [d.global_style_dim + d.noise_dim] + [d.mapped_style_dim] * d.mapping_depth
    delta += sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(d.mapping_depth))
    assert adaptive.param_count() - plain.param_count() == delta


def test_plain_decoder_ignores_style_pathway():
    cfg = ModelConfig.desk()
    cfg.ablation.no_adaptive_kernels = True
    model = TTSModel(cfg, VOCAB, seed=61)
    rng = SeededRng(9)
    coarse = Tensor(rng.normal((9, 128)))
    z = rng.normal((1, cfg.decoder.noise_dim))
    g1 = Tensor(rng.normal((1, cfg.decoder.global_style_dim)))
    g2 = Tensor(rng.normal((1, cfg.decoder.global_style_dim)))
    np.testing.assert_array_equal(
        model.decoder(coarse, g1, z).data, model.decoder(coarse, g2, z).data
    )
