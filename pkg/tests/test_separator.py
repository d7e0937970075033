import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as o
from conftest import tiny_config
from tfacm import ModelConfig, NonFiniteError, SeparatorConfig, StftConfig, init_weights, separator
from tfacm import nn, separate_offline
from tfacm.separator import (cache_memory, car, decode, encode, f_local, misalign, run_blocks,
                             segment_deconv_weight, t_local)

seeds = st.integers(0, 2**32 - 1)


def _features(model, n_t, seed, n_f=None):
    rng = np.random.default_rng(seed)
    n_f = n_f or model.cfg.n_freqs
    return o.uniform(rng, (n_t, n_f, model.cfg.sep.channels))


# ---- encoder --------------------------------------------------------------------

def test_encode_shape_and_zero_input(tiny_model):
    g = encode(np.zeros(8000, np.float32), tiny_model)
    assert g.shape == (993, 33, 4)
    # zero spectrum: conv output is its bias everywhere, so LN yields one vector
    assert np.array_equal(g, np.broadcast_to(g[0, 0], g.shape))
    w = tiny_model.weights
    exp = o.layer_norm_two_pass(w["encoder.conv.bias"][None], (-1,), w["encoder.norm.gamma"],
                                w["encoder.norm.beta"])[0]
    np.testing.assert_allclose(g[0, 0], exp, atol=1e-6)


@given(seeds, st.integers(64, 900))
def test_encode_frame_causality(seed, n):
    rng = np.random.default_rng(seed)
    model = init_weights(tiny_config(), seed % 1000)
    a = o.uniform(rng, 1000)
    b = a.copy()
    b[n:] = o.uniform(rng, 1000 - n)
    ga, gb = encode(a, model), encode(b, model)
    done = (n - 64) // 8 + 1                  # frames lying inside [0, n)
    assert np.array_equal(ga[:done], gb[:done])


# ---- F-Local ------------------------------------------------------------------------

def f_local_oracle(g, model, block):
    s = model.cfg.sep
    w = model.weights
    p = f"blocks.{block}.flocal"
    n_t, n_f, n_ch = g.shape
    out = np.zeros(g.shape)
    extra = (n_f - s.f_width) % s.f_stride
    n_pad = n_f + (s.f_stride - extra if extra else 0)
    for t in range(n_t):
        x = o.layer_norm_two_pass(g[t], (-1,), w[p + ".norm.gamma"], w[p + ".norm.beta"])
        x = np.concatenate([x, np.zeros((n_pad - n_f, n_ch))])
        segs = [x[l * s.f_stride:l * s.f_stride + s.f_width].reshape(-1)
                for l in range((n_pad - s.f_width) // s.f_stride + 1)]
        ys, _ = o.lstm_sequence_scalar(np.array(segs), w[p + ".lstm.w_ih"], w[p + ".lstm.w_hh"],
                                       w[p + ".lstm.bias"])
        merged = o.deconv1d_scatter(ys, w[p + ".deconv.weight"], w[p + ".deconv.bias"], s.f_stride, n_f)
        out[t] = g[t] + merged
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_f_local_matches_composed_oracle(stride):
    cfg = tiny_config(f_width=3, f_stride=stride)
    model = init_weights(cfg, 3)
    g = _features(model, 2, 0, n_f=6)
    np.testing.assert_allclose(f_local(g, model, 0), f_local_oracle(g, model, 0), atol=1e-5)


def test_f_local_frames_independent(tiny_model):
    g = _features(tiny_model, 5, 1)
    g[3] = g[1]
    y = f_local(g, tiny_model, 1)
    assert y.shape == g.shape
    np.testing.assert_array_equal(y[3], y[1])


def test_f_local_width_error():
    model = init_weights(tiny_config(f_width=8), 0)
    with pytest.raises(ValueError, match="f_width"):
        f_local(np.zeros((2, 6, 4), np.float32), model, 0)


# ---- T-Local, cache memory, misalignment -----------------------------------------

def t_local_oracle(g, model, block, cm_in=None):
    s = model.cfg.sep
    w = model.weights
    p = f"blocks.{block}.tlocal"
    n_t, n_f, _ = g.shape
    width = s.t_width
    n_seg = -(-n_t // width)
    hsz = s.hidden
    x = o.layer_norm_two_pass(g, (-1,), w[p + ".norm.gamma"], w[p + ".norm.beta"])
    x = np.concatenate([x, np.zeros((n_seg * width - n_t, *x.shape[1:]))])
    dec = w[p + ".deconv.weight"]
    out = np.array(g, dtype=np.float64)
    h_fin = np.zeros((n_seg, n_f, hsz))
    c_fin = np.zeros((n_seg, n_f, hsz))
    for l in range(n_seg):
        for f in range(n_f):
            h0 = None if cm_in is None else cm_in[0][l, f]
            c0 = None if cm_in is None else cm_in[1][l, f]
            ys, (h, c) = o.lstm_sequence_scalar(x[l * width:(l + 1) * width, f], w[p + ".lstm.w_ih"],
                                                w[p + ".lstm.w_hh"], w[p + ".lstm.bias"], h0, c0)
            h_fin[l, f], c_fin[l, f] = h, c
            for j in range(width):
                if l * width + j >= n_t:
                    continue
                acc = w[p + ".deconv.bias"].astype(np.float64).copy()
                for k in range(j + 1):          # position j reads positions <= j only
                    acc += ys[k] @ dec[k * hsz:(k + 1) * hsz, :, j]
                out[l * width + j, f] += acc
    return out, (h_fin, c_fin)


@pytest.mark.parametrize("n_t", [8, 10])
def test_t_local_matches_composed_oracle(tiny_model, n_t):
    g = _features(tiny_model, n_t, 2, n_f=5)
    rng = np.random.default_rng(3)
    n_seg = -(-n_t // 4)
    cm = (o.uniform(rng, (n_seg, 5, 4)), o.uniform(rng, (n_seg, 5, 4)))
    got, (h, c) = t_local(g, tiny_model, 1, cm)
    exp, (h_o, c_o) = t_local_oracle(g, tiny_model, 1, cm)
    np.testing.assert_allclose(got, exp, atol=1e-5)
    np.testing.assert_allclose(h, h_o, atol=1e-5)
    np.testing.assert_allclose(c, c_o, atol=1e-5)


def test_t_local_zero_cache_is_default(tiny_model):
    g = _features(tiny_model, 12, 4)
    z = np.zeros((3, 33, 4), np.float32)
    a, sa = t_local(g, tiny_model, 0, (z, z))
    b, sb = t_local(g, tiny_model, 0)
    assert np.array_equal(a, b) and np.array_equal(sa[0], sb[0])
    with pytest.raises(ValueError, match="segments"):
        t_local(g, tiny_model, 0, (z[:2], z[:2]))


@given(seeds, st.integers(0, 3))
def test_t_local_segments_ignore_later_segments(seed, l):
    model = init_weights(tiny_config(), seed % 97)
    g = _features(model, 16, seed, n_f=3)
    y, (h, _) = t_local(g, model, 0)
    g2 = g.copy()
    g2[4 * (l + 1):] = o.uniform(np.random.default_rng(seed + 1), g2[4 * (l + 1):].shape)
    y2, (h2, _) = t_local(g2, model, 0)
    assert np.array_equal(y[:4 * (l + 1)], y2[:4 * (l + 1)])
    assert np.array_equal(h[:l + 1], h2[:l + 1])


def test_segment_deconv_mask():
    w = np.ones((4 * 2, 3, 4), np.float32)
    m = segment_deconv_weight(w, 4).reshape(4, 2, 3, 4)
    for k in range(4):
        for j in range(4):
            assert (m[k, :, :, j] == (1 if k <= j else 0)).all()


def test_cache_memory_matches_lstm_oracle(tiny_model):
    rng = np.random.default_rng(5)
    h_seq, c_seq = o.uniform(rng, (5, 3, 4)), o.uniform(rng, (5, 3, 4))
    h_out, c_out = cache_memory(h_seq, c_seq, tiny_model)
    w = tiny_model.weights
    for f in range(3):
        exp_h = o.lstm_sequence_scalar(h_seq[:, f], w["cm.lstm_h.w_ih"], w["cm.lstm_h.w_hh"], w["cm.lstm_h.bias"])[0]
        exp_c = o.lstm_sequence_scalar(c_seq[:, f], w["cm.lstm_c.w_ih"], w["cm.lstm_c.w_hh"], w["cm.lstm_c.bias"])[0]
        np.testing.assert_allclose(h_out[:, f], exp_h, atol=1e-6)
        np.testing.assert_allclose(c_out[:, f], exp_c, atol=1e-6)


def test_cache_memory_single_segment_is_one_step(tiny_model):
    rng = np.random.default_rng(6)
    h_seq, c_seq = o.uniform(rng, (1, 2, 4)), o.uniform(rng, (1, 2, 4))
    h_out, _ = cache_memory(h_seq, c_seq, tiny_model)
    p = nn.LstmParams.from_weights(tiny_model.weights, "cm.lstm_h")
    z = np.zeros((2, 4), np.float32)
    assert np.array_equal(h_out[0], nn.lstm_step(h_seq[0], z, z, p)[0])
    with pytest.raises(ValueError):
        cache_memory(h_seq, c_seq[:, :1], tiny_model)


@given(seeds, st.integers(1, 6))
def test_cache_memory_prefix(seed, l):
    model = init_weights(tiny_config(), 1)
    rng = np.random.default_rng(seed)
    h_seq, c_seq = o.uniform(rng, (7, 2, 4)), o.uniform(rng, (7, 2, 4))
    h2, c2 = h_seq.copy(), c_seq.copy()
    h2[l:] = o.uniform(rng, h2[l:].shape)
    c2[l:] = o.uniform(rng, c2[l:].shape)
    a, b = cache_memory(h_seq, c_seq, model), cache_memory(h2, c2, model)
    assert np.array_equal(a[0][:l], b[0][:l]) and np.array_equal(a[1][:l], b[1][:l])


def test_misalign_exact_shift():
    h = np.array([[1.0], [2.0], [3.0]], np.float32)
    c = -h
    hb, cb = misalign(h, c)
    np.testing.assert_array_equal(hb, [[0], [1], [2]])
    np.testing.assert_array_equal(cb, [[0], [-1], [-2]])
    np.testing.assert_array_equal(misalign(h[:1], c[:1])[0], [[0]])
    h2, c2 = misalign(*misalign(h, c))
    np.testing.assert_array_equal(h2, [[0], [0], [1]])
    np.testing.assert_array_equal(c2, [[0], [0], [-1]])


def two_blocks(g, model, i, relay_in, shift=misalign):
    """Block ``i`` then block ``i + 1`` on ``g``; ``relay_in`` seeds block ``i``."""
    g_bar = f_local(g, model, i)
    g_hat, states = t_local(g_bar, model, i, relay_in)
    relay = shift(*cache_memory(*states, model))
    g_next = car(g_hat, model, i)
    g_hat2, _ = t_local(f_local(g_next, model, i + 1), model, i + 1, relay)
    return car(g_hat2, model, i + 1)


def _block_input(model, i, seed):
    g = encode(np.random.default_rng(seed).uniform(-1, 1, 64 + 8 * 39).astype(np.float32), model)
    trace = []
    run_blocks(g, model, trace=trace)
    if i == 0:
        return g, None
    return trace[i - 1]["out"], trace[i - 1]["relay"]


@pytest.mark.parametrize("block", [0, 1])
@pytest.mark.parametrize("l", [1, 3, 7])
def test_cache_no_leak_segments(tiny3_model, block, l):
    g, relay = _block_input(tiny3_model, block, 21 + l)
    ref = two_blocks(g, tiny3_model, block, relay)
    g2 = g.copy()
    g2[4 * l:] = o.uniform(np.random.default_rng(l), g2[4 * l:].shape)
    alt = two_blocks(g2, tiny3_model, block, relay)
    assert np.array_equal(ref[:4 * l], alt[:4 * l])


def _identity(h, c):
    return h, c


@pytest.mark.parametrize("block", [0, 1])
def test_cache_no_leak_inside_segment(tiny3_model, block):
    # perturb from the second frame of segment l: block i+1 up to that frame must not move
    g, relay = _block_input(tiny3_model, block, 5)
    for l in (1, 4, 8):
        cut = 4 * l + 1
        g2 = g.copy()
        g2[cut:] = o.uniform(np.random.default_rng(l), g2[cut:].shape)
        ref = two_blocks(g, tiny3_model, block, relay)
        alt = two_blocks(g2, tiny3_model, block, relay)
        assert np.array_equal(ref[:cut], alt[:cut])
        # negative control: without the one-segment shift segment l reads its own final state
        ref = two_blocks(g, tiny3_model, block, relay, _identity)
        alt = two_blocks(g2, tiny3_model, block, relay, _identity)
        assert not np.array_equal(ref[:cut], alt[:cut])


# ---- CAR -------------------------------------------------------------------------------

def car_oracle(g_hat, model, block):
    w = model.weights
    p = f"blocks.{block}.car"
    n_t, n_f, _ = g_hat.shape

    def proj(name):
        q = f"{p}.{name}"
        y = o.conv2d_loop(g_hat, w[q + ".conv.weight"], w[q + ".conv.bias"])
        y = o.prelu_ln_oracle(y, w[q + ".prelu"], w[q + ".norm.gamma"].T, w[q + ".norm.beta"].T)
        return np.array([[y[t, f, e] for e in range(y.shape[2]) for f in range(n_f)] for t in range(n_t)])

    att = o.softmax_attention_dense(proj("q"), proj("k"), proj("v"), model.cfg.sep.heads)
    n_e = att.shape[1] // n_f
    frames = np.array([[[att[t, e * n_f + f] for e in range(n_e)] for f in range(n_f)] for t in range(n_t)])
    y = frames @ w[p + ".proj.weight"].T.astype(np.float64) + w[p + ".proj.bias"]
    y = o.prelu_ln_oracle(y, w[p + ".proj.prelu"], w[p + ".proj.norm.gamma"].T, w[p + ".proj.norm.beta"].T)
    gate = nn.GatedConvParams.from_weights(w, p + ".gate")
    return g_hat + o.gated_conv_composed(y.astype(np.float32), gate)


def _car_model():
    cfg = ModelConfig(preset="custom", stft=StftConfig(win_len=6, hop=2),
                      sep=SeparatorConfig(channels=4, blocks=1, hidden=4, heads=2, attn_channels=2, f_width=2))
    return init_weights(cfg, 9)


def test_car_matches_composed_oracle():
    model = _car_model()
    g = _features(model, 3, 10)
    assert g.shape == (3, 4, 4)
    np.testing.assert_allclose(car(g, model, 0), car_oracle(g, model, 0), atol=1e-5)


def test_car_single_frame_and_causality(tiny_model):
    g = _features(tiny_model, 6, 11)
    y = car(g, tiny_model, 0)
    np.testing.assert_allclose(car(g[:1], tiny_model, 0), y[:1], atol=1e-6)
    for t in range(5):
        g2 = g.copy()
        g2[t + 1:] = o.uniform(np.random.default_rng(t), g2[t + 1:].shape)
        assert np.array_equal(car(g2, tiny_model, 0)[:t + 1], y[:t + 1])
    # removing the mask lets early frames see the future
    g2 = g.copy()
    g2[5] += 1
    assert not np.array_equal(car(g2, tiny_model, 0, causal=False)[:5], car(g, tiny_model, 0, causal=False)[:5])


def test_heads_must_divide_embedding():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(preset="custom", sep=SeparatorConfig(heads=5))


# ---- decoder and full pass ------------------------------------------------------------------

def test_decode_zero_features_is_silent(tiny_model):
    w = dict(tiny_model.weights)
    w["decoder.deconv.bias"] = np.zeros_like(w["decoder.deconv.bias"])
    model = dataclasses.replace(tiny_model, weights=w)
    y = decode(np.zeros((20, 33, 4), np.float32), model, 200)
    assert y.shape == (2, 200) and not y.any()


@given(seeds, st.integers(0, 30))
def test_decode_causality(seed, cut):
    model = init_weights(tiny_config(), 2)
    rng = np.random.default_rng(seed)
    g = o.uniform(rng, (32, 33, 4))
    g2 = g.copy()
    g2[cut:] = o.uniform(rng, g2[cut:].shape)
    a, b = decode(g, model, 304), decode(g2, model, 304)
    # sample s reads frames floor((s - 56) / 8) .. floor(s / 8); frame floor(s / 8) weighs sample 8 * floor(s / 8) by zero
    end = 8 * cut + 1
    assert np.array_equal(a[:, :end], b[:, :end])


def test_relu_output_activation():
    cfg = tiny_config(output_activation="relu")
    model = init_weights(cfg, 0)
    spectra = separator.decode_spectra(_features(model, 5, 0), model)
    assert spectra.shape == (2, 2, 33, 5) and spectra.min() >= 0
    with pytest.raises(ValueError):
        tiny_config(output_activation="tanh")


def test_separate_offline_deterministic(tiny_model):
    x = np.random.default_rng(0).uniform(-1, 1, 777).astype(np.float32)
    a = separate_offline(x, tiny_model)
    b = separate_offline(x.copy(), init_weights(tiny_config(), 7))
    assert a.shape == (2, 777) and a.dtype == np.float32
    assert np.array_equal(a, b)


def test_blocks_preserve_shape(tiny3_model):
    g = _features(tiny3_model, 13, 1)
    trace = []
    run_blocks(g, tiny3_model, trace=trace)
    assert len(trace) == 3
    for t in trace:
        assert t["f_local"].shape == t["t_local"].shape == t["out"].shape == g.shape
    assert trace[-1]["relay"] is trace[-2]["relay"]


def test_non_finite_errors_name_location(tiny_model):
    x = np.zeros(200, np.float32)
    x[5] = np.nan
    with pytest.raises(NonFiniteError, match="input"):
        separate_offline(x, tiny_model)
    w = dict(tiny_model.weights)
    w["blocks.1.car.gate.pw_out.bias"] = np.full(4, np.inf, np.float32)
    with pytest.raises(NonFiniteError, match="block 1"):
        separate_offline(np.zeros(200, np.float32), dataclasses.replace(tiny_model, weights=w))
    with pytest.raises(ValueError):
        separate_offline(np.zeros((2, 100), np.float32), tiny_model)
