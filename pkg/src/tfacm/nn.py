"""Causal neural-network primitives.

Activations are frame-major and channels-last: a feature map is
``(T, F, C)`` and a sequence is ``(T, C)``. Weights keep the conventional
layouts (``(C_out, C_in, K_f, K_t)`` for convolutions, ``(C_in, C_out, K)``
for transposed convolutions, ``(4H, in)`` for LSTMs).

Causality is a property of the time axis only; frequency is padded
symmetrically. Causal convolutions are built by left-padding time with
``k_t - 1`` frames rather than masking the latter half of a centred kernel.
For odd kernels the two give the same outputs: a centred kernel of width
``2m + 1`` whose last ``m`` taps are zero, applied with ``m`` frames of
symmetric padding, reads exactly the frames ``t - m .. t`` that
left-padding by ``m`` reads with the remaining ``m + 1`` taps.

Every time-causal op accepts ``history``, the ``k_t - 1`` frames preceding
``x``; ``None`` means zeros (start of stream).

LSTM gates are stored in the order ``(i, f, g, o)``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import DTYPE, pad_axis

LN_EPS = 1e-5


def _mm(x, w):
    """``x (..., K) @ w (K, M)`` as one 2-D matrix product (stacked ``@`` loops per leading index)."""
    return (np.ascontiguousarray(x).reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])


def _check_channels(x, expected, what):
    if x.shape[-1] != expected:
        raise ValueError(f"{what}: input has {x.shape[-1]} channels, weight expects {expected}")


def _time_context(x, k_t, history):
    """Prefix ``x`` with ``k_t - 1`` past frames along axis 0."""
    if k_t == 1:
        return x
    if history is None:
        return pad_axis(x, 0, k_t - 1, 0)
    if history.shape[0] != k_t - 1 or history.shape[1:] != x.shape[1:]:
        raise ValueError(f"history shape {history.shape} does not fit {k_t - 1} frames of {x.shape[1:]}")
    return np.concatenate([history, x], axis=0)


def causal_conv1d(x, w, b=None, history=None):
    """Causal 1-D convolution. ``x (T, C_in)``, ``w (C_out, C_in, K)``.

    ``y[t] = sum_j w[:, :, j] @ x[t - (K - 1) + j] + b``.
    """
    x = np.asarray(x, dtype=DTYPE)
    c_out, c_in, k = w.shape
    _check_channels(x, c_in, "causal_conv1d")
    n_t = x.shape[0]
    xc = _time_context(x, k, history)
    y = np.zeros((n_t, c_out), dtype=DTYPE)
    for j in range(k):
        y += xc[j:j + n_t] @ np.ascontiguousarray(w[:, :, j].T)
    if b is not None:
        y += b
    return y


def causal_conv2d(x, w, b=None, history=None):
    """Causal 2-D convolution. ``x (T, F, C_in)``, ``w (C_out, C_in, K_f, K_t)``.

    Frequency is zero-padded by ``K_f // 2`` on both sides (``K_f`` odd) so
    ``F`` is kept; time reads frames ``t - K_t + 1 .. t``.
    """
    x = np.asarray(x, dtype=DTYPE)
    c_out, c_in, k_f, k_t = w.shape
    _check_channels(x, c_in, "causal_conv2d")
    if k_f % 2 == 0:
        raise ValueError(f"frequency kernel must be odd, got {k_f}")
    n_t, n_f, _ = x.shape
    pf = k_f // 2
    xc = _time_context(x, k_t, history)
    taps = k_f * k_t
    if c_in * taps <= 64:
        # few input channels: im2col, one matmul
        xp = pad_axis(xc, 1, pf, pf)
        cols = np.empty((n_t, n_f, k_t, k_f, c_in), dtype=DTYPE)
        for c in range(k_t):
            for a in range(k_f):
                cols[:, :, c, a] = xp[c:c + n_t, a:a + n_f]
        kern = np.ascontiguousarray(w.transpose(3, 2, 1, 0)).reshape(taps * c_in, c_out)
        y = (cols.reshape(n_t * n_f, -1) @ kern).reshape(n_t, n_f, c_out)
    elif c_out <= c_in:
        # one matmul on the unshifted input, then shift-add the small outputs
        kern = np.ascontiguousarray(w.transpose(1, 3, 2, 0)).reshape(c_in, taps * c_out)
        z = (xc.reshape(-1, c_in) @ kern).reshape(xc.shape[0], n_f, k_t, k_f, c_out)
        y = np.zeros((n_t, n_f, c_out), dtype=DTYPE)
        for c in range(k_t):
            for a in range(k_f):
                d = a - pf
                lo, hi = max(0, -d), min(n_f, n_f - d)
                y[:, lo:hi] += z[c:c + n_t, lo + d:hi + d, c, a]
    else:
        xp = pad_axis(xc, 1, pf, pf)
        y = np.zeros((n_t * n_f, c_out), dtype=DTYPE)
        for c in range(k_t):
            for a in range(k_f):
                patch = np.ascontiguousarray(xp[c:c + n_t, a:a + n_f]).reshape(-1, c_in)
                y += patch @ np.ascontiguousarray(w[:, :, a, c].T)
        y = y.reshape(n_t, n_f, c_out)
    if b is not None:
        y += b
    return y


def depthwise_conv2d(x, w, b=None, history=None):
    """Per-channel causal 2-D convolution. ``x (T, F, C)``, ``w (C, K_f, K_t)``."""
    x = np.asarray(x, dtype=DTYPE)
    ch, k_f, k_t = w.shape
    _check_channels(x, ch, "depthwise_conv2d")
    if k_f % 2 == 0:
        raise ValueError(f"frequency kernel must be odd, got {k_f}")
    n_t, n_f, _ = x.shape
    xc = np.ascontiguousarray(_time_context(x, k_t, history))
    y = np.zeros_like(x)
    _kernels.depthwise_taps(xc, np.ascontiguousarray(w.transpose(2, 1, 0), dtype=DTYPE), y)
    if b is not None:
        y += b
    return y


def causal_deconv1d(x, w, b=None, stride=1, out_len=None, axis=0):
    """Transposed 1-D convolution (overlap-add of kernels at ``stride``).

    ``x`` has channels last and the sequence on ``axis``; ``w (C_in, C_out, K)``.
    Input position ``l`` writes outputs ``[l * stride, l * stride + K)``, so
    output ``p`` reads only inputs with ``l * stride <= p``. The full length
    is ``(L - 1) * stride + K``; ``out_len`` trims from the right. The output
    keeps the sequence on ``axis``.
    """
    x = np.asarray(x, dtype=DTYPE)
    c_in, c_out, k = w.shape
    _check_channels(x, c_in, "causal_deconv1d")
    if stride < 1 or k < stride:
        raise ValueError(f"need 1 <= stride <= kernel, got stride={stride}, kernel={k}")
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        raise ValueError("sequence axis cannot be the channel axis")
    xs = np.ascontiguousarray(np.moveaxis(x, axis, 0))
    n_in = xs.shape[0]
    full = (n_in - 1) * stride + k
    if out_len is None:
        out_len = full
    if out_len > full:
        raise ValueError(f"target length {out_len} exceeds producible length {full}")
    flat = xs.reshape(-1, c_in)
    taps = np.ascontiguousarray(w.transpose(2, 0, 1))
    y = np.zeros((full, *xs.shape[1:-1], c_out), dtype=DTYPE)
    span = (n_in - 1) * stride + 1
    for j in range(k):
        y[j:j + span:stride] += (flat @ taps[j]).reshape(*xs.shape[:-1], c_out)
    y = y[:out_len]
    if b is not None:
        y += b
    return np.moveaxis(y, 0, axis)


def causal_deconv2d(x, w, b=None, history=None):
    """Stride-1 transposed 2-D convolution. ``x (T, F, C_in)``, ``w (C_in, C_out, K_f, K_t)``.

    Frequency keeps its length (``K_f // 2`` cropped from each side); time is
    cropped on the right so output frame ``t`` reads inputs ``t - K_t + 1 .. t``.
    Evaluated as the equivalent causal convolution with a flipped kernel.
    """
    flipped = np.ascontiguousarray(np.transpose(w, (1, 0, 2, 3))[:, :, ::-1, ::-1])
    return causal_conv2d(x, flipped, b, history=history)


@dataclass(frozen=True)
class LstmParams:
    w_ih: np.ndarray  # (4H, input_size)
    w_hh: np.ndarray  # (4H, H)
    bias: np.ndarray  # (4H,)

    def __post_init__(self):
        four_h = self.w_ih.shape[0]
        if four_h % 4 or self.w_hh.shape != (four_h, four_h // 4) or self.bias.shape != (four_h,):
            raise ValueError(
                f"inconsistent LSTM shapes: w_ih {self.w_ih.shape}, "
                f"w_hh {self.w_hh.shape}, bias {self.bias.shape}"
            )

    @property
    def hidden_size(self):
        return self.w_hh.shape[1]

    @property
    def input_size(self):
        return self.w_ih.shape[1]

    @classmethod
    def from_weights(cls, weights, prefix):
        return cls(weights[prefix + ".w_ih"], weights[prefix + ".w_hh"], weights[prefix + ".bias"])

    def reordered(self):
        """``(w_ih.T, w_hh.T, bias)`` prepared for :func:`_lstm_cell`.

        Gates are permuted to ``(i, f, o, g)`` and the three sigmoid gates are
        halved, so a single ``tanh`` over all pre-activations yields
        ``sigmoid(x) = 0.5 * tanh(x / 2) + 0.5``. Halving is exact in binary
        floating point.
        """
        hsz = self.hidden_size
        idx = np.arange(4 * hsz)
        order = np.concatenate([idx[:2 * hsz], idx[3 * hsz:], idx[2 * hsz:3 * hsz]])
        scale = np.ones((4 * hsz, 1), dtype=DTYPE)
        scale[:3 * hsz] = 0.5
        return (np.ascontiguousarray((self.w_ih[order] * scale).T),
                np.ascontiguousarray((self.w_hh[order] * scale).T),
                self.bias[order] * scale[:, 0])


def sigmoid(x, out=None):
    """Logistic function evaluated as ``0.5 * tanh(x / 2) + 0.5``."""
    out = np.multiply(x, DTYPE(0.5), out=out)
    np.tanh(out, out=out)
    out *= DTYPE(0.5)
    out += DTYPE(0.5)
    return out


def _lstm_cell(z, c):
    """Gate nonlinearities for pre-activations from :meth:`LstmParams.reordered`.

    ``z`` may be overwritten. With ``t = tanh(z)``, ``sigmoid = (t + 1) / 2``
    for the ``i, f, o`` gates; ``tanh`` is the rational approximation of
    :func:`tfacm._kernels._tanh32` (abs. error < 4e-7).
    """
    hsz = c.shape[-1]
    lead = c.shape[:-1]
    z2 = np.ascontiguousarray(z, dtype=DTYPE).reshape(-1, 4 * hsz)
    c2 = np.ascontiguousarray(c, dtype=DTYPE).reshape(-1, hsz)
    h_new = np.empty_like(c2)
    c_new = np.empty_like(c2)
    _kernels.lstm_cell_rows(z2, c2, h_new, c_new)
    return h_new.reshape(*lead, hsz), c_new.reshape(*lead, hsz)


def _check_state(h, c, batch, hsz, what):
    if h.shape != (*batch, hsz) or c.shape != h.shape:
        raise ValueError(f"{what}: state shapes {h.shape}/{c.shape}, expected {(*batch, hsz)}")


def lstm_step(x, h, c, p):
    """One LSTM step: ``c' = s(f) c + s(i) tanh(g)``, ``h' = s(o) tanh(c')``.

    ``x (..., in)``, ``h, c (..., H)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != p.input_size:
        raise ValueError(f"lstm_step: input size {x.shape[-1]} != {p.input_size}")
    _check_state(h, c, x.shape[:-1], p.hidden_size, "lstm_step")
    w_ih, w_hh, bias = p.reordered()
    z = _mm(x, w_ih)
    z += bias
    z += _mm(h, w_hh)
    return _lstm_cell(z, c)


def lstm_sequence(xs, p, init=None):
    """Unroll an LSTM over the leading axis of ``xs (S, ..., in)``.

    Returns ``(ys (S, ..., H), (h, c))``; ``ys[s]`` is the hidden state after
    step ``s``. ``init=None`` is the zero state.
    """
    xs = np.asarray(xs, dtype=DTYPE)
    if xs.shape[-1] != p.input_size:
        raise ValueError(f"lstm_sequence: input size {xs.shape[-1]} != {p.input_size}")
    batch = xs.shape[1:-1]
    hsz = p.hidden_size
    if init is None:
        h = np.zeros((*batch, hsz), dtype=DTYPE)
        c = np.zeros((*batch, hsz), dtype=DTYPE)
    else:
        h, c = init
        _check_state(h, c, batch, hsz, "lstm_sequence")
    w_ih, w_hh, bias = p.reordered()
    zx = xs.reshape(-1, xs.shape[-1]) @ w_ih
    zx += bias
    zx = zx.reshape(*xs.shape[:-1], 4 * hsz)
    ys = np.empty((*xs.shape[:-1], hsz), dtype=DTYPE)
    for s in range(xs.shape[0]):
        z = zx[s]
        z += _mm(h, w_hh)
        h, c = _lstm_cell(z, c)
        ys[s] = h
    return ys, (h, c)


def lstm_sequences(xs_list, params_list):
    """Unroll several same-shaped LSTMs in lock-step from zero state.

    Equivalent to ``[lstm_sequence(x, p)[0] for x, p in zip(...)]``; one
    stacked matmul per step instead of one per LSTM.
    """
    if len(xs_list) != len(params_list) or not xs_list:
        raise ValueError("need one parameter set per input sequence")
    xs = np.stack([np.asarray(x, dtype=DTYPE) for x in xs_list])
    hsz = params_list[0].hidden_size
    for p in params_list:
        if p.hidden_size != hsz or p.input_size != xs.shape[-1]:
            raise ValueError("stacked LSTMs must share input and hidden sizes")
    prepared = [p.reordered() for p in params_list]
    w_ih = np.stack([q[0] for q in prepared])
    w_hh = np.stack([q[1] for q in prepared])
    bias = np.stack([q[2] for q in prepared])
    n_g, n_s = xs.shape[:2]
    batch = xs.shape[2:-1]
    zx = np.matmul(xs.reshape(n_g, -1, xs.shape[-1]), w_ih)
    zx += bias[:, None, :]
    zx = zx.reshape(n_g, n_s, -1, 4 * hsz)
    h = np.zeros((n_g, zx.shape[2], hsz), dtype=DTYPE)
    c = np.zeros_like(h)
    ys = np.empty((n_g, n_s, zx.shape[2], hsz), dtype=DTYPE)
    for s in range(n_s):
        z = zx[:, s]
        z += np.matmul(h, w_hh)
        h, c = _lstm_cell(z, c)
        ys[:, s] = h
    return [y.reshape(n_s, *batch, hsz) for y in ys]


def layer_norm(x, axes, gamma, beta, eps=LN_EPS):
    """Normalise over ``axes``; ``gamma``/``beta`` have the shape of those axes (in order)."""
    x = np.asarray(x, dtype=DTYPE)
    axes = tuple(sorted(int(a) % x.ndim for a in np.atleast_1d(axes)))
    expect = tuple(x.shape[a] for a in axes)
    if gamma.shape != expect or beta.shape != expect:
        raise ValueError(f"layer_norm: affine shape {gamma.shape} does not match normalised axes {expect}")
    if axes == tuple(range(x.ndim - len(axes), x.ndim)):
        # trailing axes: one fused pass per row
        dim = int(np.prod(expect))
        y = np.empty(x.shape, dtype=DTYPE)
        _kernels.layer_norm_rows(np.ascontiguousarray(x).reshape(-1, dim),
                                 np.ascontiguousarray(gamma).reshape(dim),
                                 np.ascontiguousarray(beta).reshape(dim), eps, y.reshape(-1, dim))
        return y
    # general axes: float64 two-pass statistics, as in the fused kernel
    shape = tuple(x.shape[a] if a in axes else 1 for a in range(x.ndim))
    x64 = x.astype(np.float64)
    y = x64 - x64.mean(axis=axes, keepdims=True)
    y /= np.sqrt(np.square(y).mean(axis=axes, keepdims=True) + eps)
    return (y * gamma.reshape(shape) + beta.reshape(shape)).astype(DTYPE)


def prelu(x, alpha):
    """PReLU with one slope per channel (last axis)."""
    return np.where(x >= 0, x, x * alpha)


def prelu_layer_norm(x, alpha, gamma, beta, eps=LN_EPS):
    """``layer_norm(prelu(x, alpha), (1, 2), gamma, beta)`` for ``x (T, F, C)`` in one pass."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    n_t, n_f, ch = x.shape
    if alpha.shape != (ch,) or gamma.shape != (n_f, ch) or beta.shape != (n_f, ch):
        raise ValueError(f"prelu_layer_norm: parameter shapes {alpha.shape}, {gamma.shape} do not fit {x.shape}")
    y = np.empty_like(x)
    _kernels.prelu_layer_norm_rows(x.reshape(n_t, -1), np.tile(alpha.astype(DTYPE), n_f),
                                   np.ascontiguousarray(gamma, dtype=DTYPE).reshape(-1),
                                   np.ascontiguousarray(beta, dtype=DTYPE).reshape(-1), eps,
                                   y.reshape(n_t, -1))
    return y


def pointwise(x, w, b=None):
    """1x1 convolution: ``x (..., C_in) @ w.T`` with ``w (C_out, C_in)``."""
    _check_channels(x, w.shape[1], "pointwise")
    y = _mm(x, np.ascontiguousarray(w.T))
    if b is not None:
        y += b
    return y


def unfold_axis(x, axis, width, stride):
    """Cut ``axis`` into ``L = (n - width) // stride + 1`` windows.

    Returns shape ``(L, *x.shape)`` with ``axis`` replaced by ``width``;
    window ``l`` is ``x[l * stride : l * stride + width]`` along ``axis``.
    """
    x = np.asarray(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if width > n:
        raise ValueError(f"window width {width} exceeds axis length {n}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (n - width) % stride:
        raise ValueError(f"(length {n} - width {width}) not divisible by stride {stride}")
    windows = np.lib.stride_tricks.sliding_window_view(x, width, axis=axis)
    windows = windows[(slice(None),) * axis + (slice(None, None, stride),)]
    windows = np.moveaxis(windows, axis, 0)            # segments first, window last
    return np.ascontiguousarray(np.moveaxis(windows, -1, axis + 1))


def attention_mask(n_q, n_k, q_start, k_start=0, causal=True):
    """Boolean ``(n_q, n_k)``; True where key position <= query position."""
    if not causal:
        return np.ones((n_q, n_k), dtype=bool)
    q_pos = q_start + np.arange(n_q)[:, None]
    k_pos = k_start + np.arange(n_k)[None, :]
    return k_pos <= q_pos


def masked_mha(q, k, v, num_heads, w_out=None, b_out=None, causal=True,
               q_start=None, k_start=0, block=128):
    """Multi-head scaled dot-product attention with a lower-triangular mask.

    ``q (T_q, D)``, ``k, v (T_k, D)``; heads take contiguous slices of ``D``.
    Query row ``i`` sits at position ``q_start + i`` (default: aligned with
    the last ``T_q`` keys) and attends keys at positions ``<=`` its own.
    The optional output projection is ``y @ w_out.T + b_out``.
    """
    q = np.asarray(q, dtype=DTYPE)
    k = np.asarray(k, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    n_q, dim = q.shape
    n_k = k.shape[0]
    if dim % num_heads:
        raise ValueError(f"embedding dim {dim} not divisible by {num_heads} heads")
    if k.shape != (n_k, dim) or v.shape != (n_k, dim):
        raise ValueError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if q_start is None:
        q_start = k_start + n_k - n_q
    if causal and q_start < k_start:
        raise ValueError("a query precedes every key; its attention row would be empty")
    hd = dim // num_heads
    scale = DTYPE(1.0 / np.sqrt(hd))
    qh = (q * scale).reshape(n_q, num_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(n_k, num_heads, hd).transpose(1, 2, 0)
    vh = v.reshape(n_k, num_heads, hd).transpose(1, 0, 2)
    out = np.empty((num_heads, n_q, hd), dtype=DTYPE)
    for s in range(0, n_q, block):
        e = min(s + block, n_q)
        # keys after the last query of this block are never visible
        k_end = n_k if not causal else min(n_k, q_start + e - k_start)
        mask = attention_mask(e - s, k_end, q_start + s, k_start, causal)
        scores = np.where(mask, qh[:, s:e] @ kh[:, :, :k_end], -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[:, s:e] = scores @ vh[:, :k_end]
    y = out.transpose(1, 0, 2).reshape(n_q, dim)
    if w_out is not None:
        y = y @ w_out.T
        if b_out is not None:
            y += b_out
    return y


@dataclass(frozen=True)
class GatedConvParams:
    """Linear and gate paths (depthwise then pointwise) plus an output pointwise conv."""

    dw_lin: np.ndarray   # (N, K_f, K_t)
    dw_lin_b: np.ndarray
    pw_lin: np.ndarray   # (N, N)
    pw_lin_b: np.ndarray
    dw_gate: np.ndarray
    dw_gate_b: np.ndarray
    pw_gate: np.ndarray
    pw_gate_b: np.ndarray
    pw_out: np.ndarray
    pw_out_b: np.ndarray

    @classmethod
    def from_weights(cls, weights, prefix):
        kw = {}
        for n in ("dw_lin", "pw_lin", "dw_gate", "pw_gate", "pw_out"):
            kw[n] = weights[f"{prefix}.{n}.weight"]
            kw[n + "_b"] = weights[f"{prefix}.{n}.bias"]
        return cls(**kw)

    @property
    def time_kernel(self):
        return self.dw_lin.shape[-1]


def gated_conv(x, p, history=None):
    """``pw_out(sigmoid(PW_g(DW_g(x))) * PW_l(DW_l(x)))``, causal on time. ``x (T, F, N)``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise ValueError(f"gated_conv expects (T, F, N), got shape {x.shape}")
    _check_channels(x, p.pw_out.shape[1], "gated_conv")
    lin = pointwise(depthwise_conv2d(x, p.dw_lin, p.dw_lin_b, history), p.pw_lin, p.pw_lin_b)
    # sigmoid(u) = (tanh(u / 2) + 1) / 2; both halvings are folded into weights
    half = DTYPE(0.5)
    gate = pointwise(depthwise_conv2d(x, p.dw_gate, p.dw_gate_b, history),
                     p.pw_gate * half, p.pw_gate_b * half)
    np.tanh(gate, out=gate)
    gate += DTYPE(1)
    gate *= lin
    return pointwise(gate, p.pw_out * half, p.pw_out_b)
