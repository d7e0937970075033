"""Offline (whole-utterance) forward pass of the TFACM separator.

Feature maps are frame-major and channels-last, ``(T, F, N)``. Cache-memory
state sequences are stored segment-major as ``(L_seg, F, H)``.
"""

import numpy as np

from . import nn
from .dsp import istft, stft
from .tensor import DTYPE, pad_axis


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x, where):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced in {where}")


def encode(mix, model):
    """Waveform -> ``G_0 (T, F, N)``: STFT, causal 3x3 conv, channel LayerNorm."""
    spec = stft(mix, model.cfg.stft)
    return encode_frames(spec.transpose(2, 1, 0), model.weights)


def encode_frames(spec, w, history=None):
    """``spec (T, F, 2)`` (real, imag last) -> ``(T, F, N)``."""
    x = nn.causal_conv2d(spec, w["encoder.conv.weight"], w["encoder.conv.bias"], history)
    return nn.layer_norm(x, -1, w["encoder.norm.gamma"], w["encoder.norm.beta"])


def f_local(g, model, block):
    """Sub-band LSTM along frequency, independently for every frame."""
    s = model.cfg.sep
    w = model.weights
    p = f"blocks.{block}.flocal"
    n_t, n_f, n_ch = g.shape
    if s.f_width > n_f:
        raise ValueError(f"f_width {s.f_width} exceeds {n_f} frequency bins")
    x = nn.layer_norm(g, -1, w[p + ".norm.gamma"], w[p + ".norm.beta"])
    extra = (n_f - s.f_width) % s.f_stride
    if extra:
        x = pad_axis(x, 1, 0, s.f_stride - extra)
    segs = nn.unfold_axis(x, 1, s.f_width, s.f_stride)          # (L_F, T, W1, N)
    seq = segs.reshape(segs.shape[0], n_t, s.f_width * n_ch)
    ys, _ = nn.lstm_sequence(seq, nn.LstmParams.from_weights(w, p + ".lstm"))  # (L_F, T, H)
    merged = nn.causal_deconv1d(ys, w[p + ".deconv.weight"], w[p + ".deconv.bias"],
                                stride=s.f_stride, out_len=n_f, axis=0)         # (F, T, N)
    return g + merged.transpose(1, 0, 2)


def segment_deconv_weight(w, t_width):
    """Mask the time deconvolution so frame ``j`` of a segment reads positions ``<= j`` only."""
    c_in, n_out, k = w.shape
    hidden = c_in // t_width
    keep = np.tril(np.ones((t_width, k), dtype=DTYPE)).T   # keep[k_in, j] = k_in <= j
    return (w.reshape(t_width, hidden, n_out, k) * keep[:, None, None, :]).reshape(c_in, n_out, k)


def t_local(g, model, block, cm_in=None):
    """Segment-wise LSTM along time seeded from the relayed cache state.

    Returns ``(g_hat, (H_i, C_i))`` where ``H_i, C_i`` hold the final LSTM
    state of each segment, shape ``(L_seg, F, H)``.
    """
    s = model.cfg.sep
    w = model.weights
    p = f"blocks.{block}.tlocal"
    n_t, n_f, n_ch = g.shape
    width = s.t_width
    x = nn.layer_norm(g, -1, w[p + ".norm.gamma"], w[p + ".norm.beta"])
    n_seg = -(-n_t // width)
    x = pad_axis(x, 0, 0, n_seg * width - n_t)
    seq = x.reshape(n_seg, width, n_f, n_ch).transpose(1, 0, 2, 3)   # (W2, L, F, N)
    if cm_in is not None:
        h0, c0 = cm_in
        if h0.shape[0] != n_seg or c0.shape[0] != n_seg:
            raise ValueError(f"cache state has {h0.shape[0]} segments, input has {n_seg}")
        cm_in = (np.asarray(h0, dtype=DTYPE), np.asarray(c0, dtype=DTYPE))
    ys, (h_fin, c_fin) = nn.lstm_sequence(seq, nn.LstmParams.from_weights(w, p + ".lstm"), cm_in)
    hidden = ys.shape[-1]
    # (W2, L, F, H) -> (L, F, W2*H): per segment, positions stacked into channels
    seg_in = ys.transpose(1, 2, 0, 3).reshape(n_seg, n_f, width * hidden)
    kernel = segment_deconv_weight(w[p + ".deconv.weight"], width)
    out = nn.causal_deconv1d(seg_in, kernel, w[p + ".deconv.bias"], stride=s.t_stride,
                             out_len=n_t, axis=0)
    return g + out, (h_fin, c_fin)


def cache_memory(h_seq, c_seq, model):
    """Re-encode per-segment states with LSTM-H / LSTM-C along the segment axis."""
    w = model.weights
    if h_seq.shape[0] < 1 or h_seq.shape != c_seq.shape:
        raise ValueError(f"cache sequences must be non-empty and equal-shaped: {h_seq.shape}, {c_seq.shape}")
    h_out, c_out = nn.lstm_sequences(
        [h_seq, c_seq], [nn.LstmParams.from_weights(w, "cm.lstm_h"), nn.LstmParams.from_weights(w, "cm.lstm_c")])
    return h_out, c_out


def misalign(h_seq, c_seq):
    """Shift by one segment: position 0 becomes zero, position ``l`` takes ``l - 1``."""
    def shift(a):
        out = np.zeros_like(a)
        out[1:] = a[:-1]
        return out
    return shift(h_seq), shift(c_seq)


def car_projection(x, w, prefix, history=None):
    """Causal 3x3 conv -> PReLU -> LayerNorm over (channel, freq)."""
    y = nn.causal_conv2d(x, w[prefix + ".conv.weight"], w[prefix + ".conv.bias"], history)
    return nn.prelu_layer_norm(y, w[prefix + ".prelu"], w[prefix + ".norm.gamma"].T, w[prefix + ".norm.beta"].T)


def frames_to_tokens(x):
    """``(T, F, E)`` -> ``(T, E*F)`` with frequency flattened inside each channel."""
    return np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(x.shape[0], -1)


def tokens_to_frames(tokens, n_freqs):
    """Inverse of :func:`frames_to_tokens`."""
    n_t = tokens.shape[0]
    return np.ascontiguousarray(tokens.reshape(n_t, -1, n_freqs).transpose(0, 2, 1))


def car_output(att, g_hat, model, block, gate_history=None):
    """Project attention tokens back to ``N`` channels, gate, and add the residual."""
    w = model.weights
    p = f"blocks.{block}.car"
    a = tokens_to_frames(att, g_hat.shape[1])
    y = nn.pointwise(a, w[p + ".proj.weight"], w[p + ".proj.bias"])
    y = nn.prelu_layer_norm(y, w[p + ".proj.prelu"], w[p + ".proj.norm.gamma"].T, w[p + ".proj.norm.beta"].T)
    gate = nn.GatedConvParams.from_weights(w, p + ".gate")
    return g_hat + nn.gated_conv(y, gate, gate_history), y


def car(g_hat, model, block, causal=True):
    """Causal attention refinement over time frames followed by a gated conv."""
    w = model.weights
    p = f"blocks.{block}.car"
    q, k, v = (frames_to_tokens(car_projection(g_hat, w, f"{p}.{name}")) for name in "qkv")
    att = nn.masked_mha(q, k, v, model.cfg.sep.heads, causal=causal)
    out, _ = car_output(att, g_hat, model, block)
    return out


def decode_spectra(g, model, history=None):
    """``G_B (T, F, N)`` -> per-speaker spectra ``(C, 2, F, T)``."""
    s = model.cfg.sep
    w = model.weights
    y = nn.causal_deconv2d(g, w["decoder.deconv.weight"], w["decoder.deconv.bias"], history)
    if s.output_activation == "relu":
        y = np.maximum(y, 0)
    n_t, n_f, _ = y.shape
    return y.reshape(n_t, n_f, s.n_speakers, 2).transpose(2, 3, 1, 0)


def decode(g, model, out_len):
    spectra = decode_spectra(g, model)
    return np.stack([istft(spectra[c], model.cfg.stft, out_len) for c in range(spectra.shape[0])])


def run_blocks(g, model, causal_attention=True, trace=None):
    """All separator blocks; ``trace`` (a list) collects per-block intermediates."""
    n_blocks = model.cfg.sep.blocks
    relay = None
    for i in range(n_blocks):
        g_bar = f_local(g, model, i)
        g_hat, (h_seq, c_seq) = t_local(g_bar, model, i, relay)
        if i + 1 < n_blocks:
            relay = misalign(*cache_memory(h_seq, c_seq, model))
        g = car(g_hat, model, i, causal=causal_attention)
        check_finite(g, f"block {i}")
        if trace is not None:
            trace.append({"f_local": g_bar, "t_local": g_hat, "states": (h_seq, c_seq),
                          "relay": relay, "out": g})
    return g


def separate_offline(mix, model, causal_attention=True):
    """Separate one mono waveform into ``(C, len(mix))`` float32 sources.

    ``causal_attention=False`` removes the attention mask; it exists only as
    a negative control for causality checks.
    """
    mix = np.asarray(mix, dtype=DTYPE)
    if mix.ndim != 1:
        raise ValueError(f"expected a mono waveform, got shape {mix.shape}")
    check_finite(mix, "input mixture")
    g = encode(mix, model)
    check_finite(g, "encoder")
    g = run_blocks(g, model, causal_attention)
    out = decode(g, model, mix.shape[0])
    check_finite(out, "decoder")
    return out
