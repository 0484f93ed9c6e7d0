import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrvc import neural as nn
from asrvc.decoder import (ConditioningSeq, DecoderConfig, SpeakerTable, _fold_cols, _repeat_cols,
                           build_conditioning, forward, init_decoder, param_shapes, project_conditioning,
                           receptive_field, shift_right, teacher_forced_logits, zero_decoder)
from asrvc.dsp import F0Contour
from asrvc.encoder import LatentSeq
from asrvc.errors import DuplicateSpeaker, MissingF0, ShapeMismatch, UnknownSpeaker

from conftest import numeric_grad, rel_err, rf_influence, sample_idx

TOY = DecoderConfig.toy()
TOY_PARAMS = init_decoder(TOY, 0)
rng = np.random.default_rng(7)
# hundreds of ReLU inputs in the whole-network check; a 1e-3 step can straddle a kink
EPS = 1e-5


def _cond(config, n_audio, seed=0, f0=False):
    r = np.random.default_rng(seed)
    lat = LatentSeq(r.standard_normal((config.latent_channels, -(-n_audio // 320))).astype(np.float32))
    contour = F0Contour(np.where(r.random(n_audio // 160 + 1) > 0.5, r.uniform(60, 400), 0.0)) if f0 else None
    return build_conditioning(lat, r.standard_normal(config.speaker_dim).astype(np.float32), contour, n_audio, config)


def test_receptive_field_values():
    assert receptive_field(DecoderConfig.paper()) == 4093
    assert receptive_field(DecoderConfig(n_blocks=1, layers_per_block=1)) == 2
    assert receptive_field(DecoderConfig(n_blocks=2, layers_per_block=3)) == 15
    assert receptive_field(TOY) == 63


def test_conditioning_length_and_rows():
    lat = LatentSeq(rng.standard_normal((64, 50)).astype(np.float32))
    a = build_conditioning(lat, np.ones(64, np.float32), None, None, TOY)
    b = build_conditioning(lat, -np.ones(64, np.float32), None, None, TOY)
    assert len(a) == 16000
    da, db = a.channels, b.channels
    assert da.shape == (128, 16000)
    assert np.array_equal(da[:64], db[:64])
    assert np.all(da[64:] != db[64:])


def test_zero_conditioning():
    cfg = DecoderConfig.toy(use_f0=True)
    lat = LatentSeq(np.zeros((64, 5), np.float32))
    c = build_conditioning(lat, np.zeros(64, np.float32), F0Contour(np.zeros(11)), None, cfg)
    assert c.channels.shape == (130, 1600) and np.all(c.channels == 0)


def test_conditioning_errors():
    lat = LatentSeq(np.zeros((64, 5), np.float32))
    with pytest.raises(MissingF0):
        build_conditioning(lat, np.zeros(64), None, None, DecoderConfig.toy(use_f0=True))
    with pytest.raises(ShapeMismatch):
        build_conditioning(lat, np.zeros(10), None, None, TOY)
    with pytest.raises(ShapeMismatch):
        build_conditioning(LatentSeq(np.zeros((8, 5))), np.zeros(64), None, None, TOY)


def test_conditioning_window_and_column_agree():
    c = _cond(DecoderConfig.toy(use_f0=True), 2000, f0=True)
    dense = c.channels
    w = c.window(700, 1300).channels
    assert np.array_equal(w, dense[:, 700:1300])
    assert np.array_equal(c.column(999), dense[:, 999])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 40), st.integers(0, 12))
def test_repeat_fold_adjoint(n_cols, factor, length, offset):
    r = np.random.default_rng(n_cols * 1000 + length)
    m = r.standard_normal((2, n_cols))
    g = r.standard_normal((2, length))
    lhs = (_repeat_cols(m, factor, length, offset) * g).sum()
    rhs = (m * _fold_cols(g, factor, n_cols, offset)).sum()
    assert abs(lhs - rhs) < 1e-9


def test_project_conditioning_matches_dense():
    c = _cond(TOY, 1000)
    W = rng.standard_normal((16, c.n_channels)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    ref = W.astype(np.float64) @ c.channels + b[:, None]
    assert np.allclose(project_conditioning(W, b, c).data, ref, atol=1e-4)


def test_shift_right():
    assert shift_right(np.array([5, 6, 7])).tolist() == [128, 5, 6]


def test_strict_causality():
    n = 300
    x = rng.integers(0, 256, n)
    cond = _cond(TOY, n)
    base = forward(TOY_PARAMS, x, cond, TOY).data
    for t in (0, 50, 150, 299):
        y = x.copy()
        y[t] = (y[t] + 50) % 256
        out = forward(TOY_PARAMS, y, cond, TOY).data
        assert np.array_equal(out[:, :t + 1], base[:, :t + 1])
        if t < n - 1:
            assert not np.array_equal(out[:, t + 1], base[:, t + 1])


def test_toy_receptive_field_probe():
    rf = receptive_field(TOY)
    t = 200
    changed = rf_influence(TOY_PARAMS, TOY, t, 260)
    # raw view: x[t-1] .. x[t-rf] influence logits[:, t]; the decoder stack sees
    # the shifted input s[j] = x[j-1], so in stack coordinates the window is s[t-rf+1 .. t]
    assert changed(1) and changed(rf)
    assert not changed(rf + 1)
    assert not changed(0)


def test_zero_params_uniform():
    logits = forward(zero_decoder(TOY), rng.integers(0, 256, 100), _cond(TOY, 100), TOY).data
    assert np.all(logits == 0)


def test_teacher_forced_deterministic_and_normalized():
    x = rng.integers(0, 256, 500)
    cond = _cond(TOY, 500)
    a = teacher_forced_logits(x, cond, TOY_PARAMS, TOY)
    b = teacher_forced_logits(x, cond, TOY_PARAMS, TOY)
    assert a.tobytes() == b.tobytes()
    assert np.allclose(nn.softmax_array(a.astype(np.float64)).sum(axis=0), 1, atol=1e-6)


@pytest.mark.parametrize("use_f0", [False, True])
def test_full_decoder_gradients(use_f0):
    cfg = DecoderConfig(n_blocks=1, layers_per_block=3, residual_channels=8, skip_channels=8,
                        latent_channels=6, speaker_dim=5, use_f0=use_f0, upsample_factor_latent=32,
                        upsample_factor_f0=16, preset="toy")
    r = np.random.default_rng(11)
    params = {k: v.astype(np.float64) for k, v in init_decoder(cfg, 3).items()}
    n = 96
    x = r.integers(0, 256, n)
    latent = r.standard_normal((6, 3))
    spk = r.standard_normal(5)
    f0 = r.random((2, 7)) if use_f0 else None

    def loss_with(p, v):
        cond = ConditioningSeq(latent, v, f0, n, 32, 16)
        return nn.softmax_cross_entropy(forward(p, x, cond, cfg), x)

    tp = {k: nn.Parameter(v, k) for k, v in params.items()}
    v = nn.Parameter(spk)
    loss_with(tp, v).backward()

    def f():
        return float(loss_with({k: nn.Tensor(a) for k, a in params.items()}, nn.Tensor(spk)).data)

    worst = {}
    for name in list(params) + ["speaker"]:
        arr = spk if name == "speaker" else params[name]
        grad = v.grad if name == "speaker" else tp[name].grad
        idx = sample_idx(arr.size, r, 12)
        worst[name] = rel_err(grad.reshape(-1)[idx], numeric_grad(f, arr, idx, EPS))
    assert set(worst) == set(param_shapes(cfg)) | {"speaker"}
    bad = {k: e for k, e in worst.items() if e >= 1e-3}
    assert not bad, bad


def test_speaker_table():
    t = SpeakerTable(np.array([[1.0, 0.0], [0.0, 1.0]]), ["a", "b"])
    assert t.mean_row().tolist() == [0.5, 0.5]
    i = t.add("c", [0.25, -3.0])
    assert i == 2 and t.lookup("c").tolist() == [0.25, -3.0]
    with pytest.raises(DuplicateSpeaker):
        t.add("a", [0, 0])
    with pytest.raises(UnknownSpeaker, match="available: a, b, c"):
        t.lookup("zed")
    one = SpeakerTable(np.array([[0.1, 0.2]], np.float32), ["solo"])
    assert np.array_equal(one.mean_row(), one.lookup("solo"))


def test_param_shapes_paper():
    shapes = param_shapes(DecoderConfig.paper())
    assert shapes["dec.embed"] == (256, 128)
    assert shapes["dec.layer39.dil_w"] == (256, 128, 2)
    assert shapes["dec.fc2_w"] == (256, 128)
