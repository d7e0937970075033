"""Fused single-pass loops for the memory-bound hot spots.

Each kernel has a plain numpy counterpart in :mod:`tfacm.nn` semantics and
is checked against an independent implementation in the tests.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, error_model="numpy")
def depthwise_taps(xc, wt, y):
    """``y[t, f, c] += sum_{dt, a} xc[t + dt, f + a - pf, c] * wt[dt, a, c]``.

    ``xc`` is ``(T + K_t - 1, F, C)`` (history already prepended), ``wt`` is
    ``(K_t, K_f, C)``; frequency positions outside ``[0, F)`` read zero.
    """
    n_t, n_f, n_c = y.shape
    k_t, k_f, _ = wt.shape
    pf = k_f // 2
    for t in range(n_t):
        for f in range(n_f):
            out = y[t, f]
            for dt in range(k_t):
                for a in range(k_f):
                    ff = f + a - pf
                    if ff < 0 or ff >= n_f:
                        continue
                    row = xc[t + dt, ff]
                    wk = wt[dt, a]
                    for c in range(n_c):
                        out[c] += row[c] * wk[c]


@numba.njit(cache=True, error_model="numpy", fastmath={"reassoc", "nsz", "arcp", "contract"})
def layer_norm_rows(x, gamma, beta, eps, y):
    """Normalise each row of ``x (M, D)`` with two-pass float64 statistics."""
    n_rows, dim = x.shape
    for r in range(n_rows):
        row = x[r]
        s = 0.0
        for k in range(dim):
            s += row[k]
        mean = s / dim
        v = 0.0
        for k in range(dim):
            d = row[k] - mean
            v += d * d
        inv = 1.0 / math.sqrt(v / dim + eps)
        for k in range(dim):
            y[r, k] = (row[k] - mean) * inv * gamma[k] + beta[k]


@numba.njit(cache=True, error_model="numpy", fastmath={"reassoc", "nsz", "arcp", "contract"})
def prelu_layer_norm_rows(x, alpha, gamma, beta, eps, y):
    """PReLU with per-column slopes ``alpha`` followed by :func:`layer_norm_rows`."""
    n_rows, dim = x.shape
    for r in range(n_rows):
        row = y[r]
        s = 0.0
        for k in range(dim):
            v = x[r, k]
            if v < 0:
                v = v * alpha[k]
            row[k] = v
            s += v
        mean = s / dim
        acc = 0.0
        for k in range(dim):
            d = row[k] - mean
            acc += d * d
        inv = 1.0 / math.sqrt(acc / dim + eps)
        for k in range(dim):
            row[k] = (row[k] - mean) * inv * gamma[k] + beta[k]


_F = np.float32
_TANH_CLAMP = _F(7.90531110763549805)
_TANH_P = (_F(4.89352455891786e-03), _F(6.37261928875436e-04), _F(1.48572235717979e-05),
           _F(5.12229709037114e-08), _F(-8.60467152213735e-11), _F(2.00018790482477e-13),
           _F(-2.76076847742355e-16))
_TANH_Q = (_F(4.89352518554385e-03), _F(2.26843463243900e-03), _F(1.18534705686654e-04),
           _F(1.19825839466702e-06))
_P0, _P1, _P2, _P3, _P4, _P5, _P6 = _TANH_P
_Q0, _Q1, _Q2, _Q3 = _TANH_Q
_ONE = _F(1.0)
_HALF = _F(0.5)


@numba.njit(cache=True, inline="always", error_model="numpy")
def _tanh32(x):
    """Odd rational approximation of ``tanh`` (abs. error < 4e-7), branch-free so loops vectorise."""
    x = min(max(x, -_TANH_CLAMP), _TANH_CLAMP)
    x2 = x * x
    p = ((((((_P6 * x2 + _P5) * x2 + _P4) * x2 + _P3) * x2 + _P2) * x2 + _P1) * x2 + _P0) * x
    q = ((_Q3 * x2 + _Q2) * x2 + _Q1) * x2 + _Q0
    return p / q


@numba.njit(cache=True, inline="always", error_model="numpy")
def _cell(z, c, h_out, c_out):
    """Gate nonlinearities on pre-activations laid out as in :func:`lstm_scan`."""
    hsz = c.shape[0]
    for j in range(z.shape[0]):
        z[j] = _tanh32(z[j])
    for j in range(hsz):
        cn = _HALF * ((z[hsz + j] + _ONE) * c[j] + (z[j] + _ONE) * z[3 * hsz + j])
        c_out[j] = cn
        h_out[j] = _HALF * (z[2 * hsz + j] + _ONE) * _tanh32(cn)


@numba.njit(cache=True, error_model="numpy")
def lstm_cell_rows(z, c, h_out, c_out):
    """Apply :func:`_cell` to every row: ``z (M, 4H)`` (overwritten), ``c (M, H)``."""
    for r in range(z.shape[0]):
        _cell(z[r], c[r], h_out[r], c_out[r])


@numba.njit(cache=True, error_model="numpy")
def _add_row(x, row):
    for r in range(x.shape[0]):
        for k in range(x.shape[1]):
            x[r, k] += row[k]


@numba.njit(cache=True, error_model="numpy")
def lstm_rows_step(x, h, c, w_cat, bias, h_out, c_out):
    """One step for ``M`` independent rows: ``x (M, in)``, ``h, c (M, H)``.

    ``w_cat (in + H, 4H)`` stacks the input and recurrent weights prepared
    as in :func:`lstm_scan`, so both products are one matrix multiply.
    """
    n_r, n_in = x.shape
    hsz = h.shape[1]
    xh = np.empty((n_r, n_in + hsz), dtype=np.float32)
    for r in range(n_r):
        for k in range(n_in):
            xh[r, k] = x[r, k]
        for k in range(hsz):
            xh[r, n_in + k] = h[r, k]
    z = np.dot(xh, w_cat)
    _add_row(z, bias)
    for r in range(x.shape[0]):
        _cell(z[r], c[r], h_out[r], c_out[r])


@numba.njit(cache=True, inline="always", error_model="numpy", fastmath={"reassoc", "nsz", "arcp", "contract"})
def _vec_mat(v, w, init, out):
    """``out = init + v @ w`` as row updates; BLAS call overhead dominates at this size."""
    for j in range(out.shape[0]):
        out[j] = init[j]
    for k in range(v.shape[0]):
        a = v[k]
        row = w[k]
        for j in range(out.shape[0]):
            out[j] += a * row[j]


@numba.njit(cache=True, error_model="numpy")
def lstm_scan(zx, w_hh, ys):
    """Single-sequence LSTM recurrence from the zero state.

    ``zx (S, 4H)`` holds input projections plus bias with gates in
    ``(i, f, o, g)`` order and the sigmoid rows pre-halved (see
    ``LstmParams.reordered``); ``w_hh (H, 4H)`` is prepared the same way.
    Writes hidden states to ``ys (S, H)``.
    """
    n_s, four_h = zx.shape
    hsz = four_h // 4
    h = np.zeros(hsz, dtype=np.float32)
    c = np.zeros(hsz, dtype=np.float32)
    z = np.empty(four_h, dtype=np.float32)
    for s in range(n_s):
        _vec_mat(h, w_hh, zx[s], z)
        _cell(z, c, h, c)
        for j in range(hsz):
            ys[s, j] = h[j]


@numba.njit(cache=True, error_model="numpy", fastmath={"reassoc", "nsz", "arcp", "contract"})
def f_local_frame(g, gamma, beta, eps, f_width, f_stride, w_ih, w_hh, bias, dec, dec_bias, out):
    """Sub-band LSTM over one frame ``g (F, N)``; writes ``g + deconv(lstm(windows))`` to ``out``."""
    n_f, n_ch = g.shape
    extra = (n_f - f_width) % f_stride
    n_pad = n_f + (f_stride - extra if extra else 0)
    x = np.zeros((n_pad, n_ch), dtype=np.float32)
    layer_norm_rows(g, gamma, beta, eps, x[:n_f])
    n_seg = (n_pad - f_width) // f_stride + 1
    win = np.empty((n_seg, f_width * n_ch), dtype=np.float32)
    for l in range(n_seg):
        for j in range(f_width):
            src = x[l * f_stride + j]
            for k in range(n_ch):
                win[l, j * n_ch + k] = src[k]
    zx = np.dot(win, w_ih)
    _add_row(zx, bias)
    ys = np.empty((n_seg, w_hh.shape[0]), dtype=np.float32)
    lstm_scan(zx, w_hh, ys)
    parts = np.dot(ys, dec)
    merged = np.zeros((n_pad + f_width, n_ch), dtype=np.float32)
    for j in range(f_width):
        for l in range(n_seg):
            row = merged[l * f_stride + j]
            src = parts[l, j * n_ch:(j + 1) * n_ch]
            for k in range(n_ch):
                row[k] += src[k]
    for f in range(n_f):
        for k in range(n_ch):
            out[f, k] = merged[f, k] + dec_bias[k] + g[f, k]


_LOG2E = _F(1.44269504088896341)
_LN2_HI = _F(0.693359375)
_LN2_LO = _F(-2.12194440e-4)
_EXP_LO = _F(-87.3)
_EXP_C = (_F(1.9875691500e-4), _F(1.3981999507e-3), _F(8.3334519073e-3), _F(4.1665795894e-2),
          _F(1.6666665459e-1), _F(5.0000001201e-1))
_E0, _E1, _E2, _E3, _E4, _E5 = _EXP_C


@numba.njit(cache=True, error_model="numpy")
def exp_nonpos(x, out, bits):
    """``out = exp(x)`` for ``x <= 0`` (values below -87.3 flush to ~0); ``bits`` is int32 scratch.

    Range reduction ``x = k ln2 + r`` and a degree-7 polynomial in ``r``; the
    ``2**k`` factor is assembled from exponent bits so the loop vectorises.
    """
    n = x.shape[0]
    scale = bits[:n].view(np.float32)
    for t in range(n):
        v = max(x[t], _EXP_LO)
        k = math.floor(v * _LOG2E + _HALF)
        r = v - k * _LN2_HI - k * _LN2_LO
        p = ((((_E0 * r + _E1) * r + _E2) * r + _E3) * r + _E4) * r + _E5
        out[t] = p * r * r + r + _ONE
        bits[t] = (np.int32(k) + 127) << 23
    for t in range(n):
        out[t] *= scale[t]


@numba.njit(cache=True, error_model="numpy", fastmath={"reassoc", "nsz", "arcp", "contract"})
def attend(keys_t, values_t, n, q, heads, out):
    """Causal softmax attention of one query over cached keys ``[0, n)``.

    ``keys_t, values_t (heads, head_dim, capacity)`` are stored transposed so
    both products stream along the key axis; ``q`` and ``out`` are ``(D,)``.
    """
    hd = keys_t.shape[1]
    scale = _F(1.0 / math.sqrt(hd))
    s = np.empty(n, dtype=np.float32)
    e = np.empty(n, dtype=np.float32)
    bits = np.empty(n, dtype=np.int32)
    for h in range(heads):
        s[:] = 0
        for d in range(hd):
            qd = q[h * hd + d] * scale
            row = keys_t[h, d]
            for t in range(n):
                s[t] += qd * row[t]
        m = s[0]
        for t in range(1, n):
            m = max(m, s[t])
        for t in range(n):
            s[t] -= m
        exp_nonpos(s, e, bits)
        tot = _F(0)
        for t in range(n):
            tot += e[t]
        inv = _ONE / tot
        # dot products keep the long key reduction off a serial dependency chain
        for d in range(hd):
            out[h * hd + d] = np.dot(values_t[h, d, :n], e) * inv


@numba.njit(cache=True, error_model="numpy")
def t_local_frame(g, gamma, beta, eps, w_cat, bias, h, c, seg_h, pos, dec, dec_bias, out):
    """One T-Local step at segment position ``pos``; ``h, c`` are advanced in place.

    ``seg_h (W2, F, H)`` collects the segment's hidden states and
    ``dec[k, j] (H, N)`` maps position ``k`` to output position ``j``; only
    ``k <= pos`` is read.
    """
    x = np.empty_like(g)
    layer_norm_rows(g, gamma, beta, eps, x)
    lstm_rows_step(x, h, c, w_cat, bias, h, c)
    n_f, hsz = h.shape
    for f in range(n_f):
        for j in range(hsz):
            seg_h[pos, f, j] = h[f, j]
    acc = np.dot(seg_h[0], dec[0, pos])
    for k in range(1, pos + 1):
        acc += np.dot(seg_h[k], dec[k, pos])
    n_ch = g.shape[1]
    for f in range(n_f):
        for k in range(n_ch):
            out[f, k] = acc[f, k] + dec_bias[k] + g[f, k]


@numba.njit(cache=True, error_model="numpy")
def _shift_context(ctx, frame, pad):
    k_t, _, ch = ctx.shape
    n_f = frame.shape[0]
    for dt in range(k_t - 1):
        for f in range(n_f):
            for k in range(ch):
                ctx[dt, f + pad, k] = ctx[dt + 1, f + pad, k]
    for f in range(n_f):
        for k in range(ch):
            ctx[k_t - 1, f + pad, k] = frame[f, k]


@numba.njit(cache=True, error_model="numpy")
def _im2col(ctx, n_f, k_f):
    """``(F, K_t * K_f * C)`` columns from a frequency-padded context ``(K_t, F + K_f - 1, C)``."""
    k_t, _, ch = ctx.shape
    cols = np.empty((n_f, k_t * k_f * ch), dtype=np.float32)
    for f in range(n_f):
        for dt in range(k_t):
            for a in range(k_f):
                o = (dt * k_f + a) * ch
                for k in range(ch):
                    cols[f, o + k] = ctx[dt, f + a, k]
    return cols


@numba.njit(cache=True, error_model="numpy")
def conv_frame(ctx, frame, kernel, bias, out):
    """Push ``frame (F, C_in)`` into ``ctx`` and evaluate the causal 3x3 conv for it."""
    n_f = frame.shape[0]
    _shift_context(ctx, frame, 1)
    y = np.dot(_im2col(ctx, n_f, 3), kernel)
    for f in range(n_f):
        for k in range(y.shape[1]):
            out[f, k] = y[f, k] + bias[k]


@numba.njit(cache=True, error_model="numpy")
def car_frame(g, eps, qkv_ctx, qkv_kernel, qkv_bias, qkv_alpha, qkv_gamma, qkv_beta,
              keys_t, values_t, n_keys, heads,
              proj, proj_bias, proj_alpha, proj_gamma, proj_beta,
              gate_ctx, dw_lin, dw_lin_b, pw_lin, pw_lin_b, dw_gate, dw_gate_b, pw_gate, pw_gate_b,
              pw_out, pw_out_b, out):
    """Attention refinement of one frame ``g (F, N)``.

    The new key/value go to cache slot ``n_keys`` (capacity is the caller's
    job) and the query attends slots ``[0, n_keys]``. The gate pointwise
    weights carry the sigmoid halving (see ``gated_conv``).
    """
    n_f, n_ch = g.shape
    e3 = qkv_bias.shape[0]
    n_e = e3 // 3
    qkv = np.empty((n_f, e3), dtype=np.float32)
    conv_frame(qkv_ctx, g, qkv_kernel, qkv_bias, qkv)
    dim = n_e * n_f
    hd = dim // heads
    tokens = np.empty((3, dim), dtype=np.float32)
    part = np.empty((1, n_f * n_e), dtype=np.float32)
    normed = np.empty((1, n_f * n_e), dtype=np.float32)
    for i in range(3):
        for f in range(n_f):
            for e in range(n_e):
                part[0, f * n_e + e] = qkv[f, i * n_e + e]
        prelu_layer_norm_rows(part, qkv_alpha[i], qkv_gamma[i], qkv_beta[i], eps, normed)
        for f in range(n_f):
            for e in range(n_e):
                tokens[i, e * n_f + f] = normed[0, f * n_e + e]
    for h in range(heads):
        for d in range(hd):
            keys_t[h, d, n_keys] = tokens[1, h * hd + d]
            values_t[h, d, n_keys] = tokens[2, h * hd + d]
    att = np.empty(dim, dtype=np.float32)
    attend(keys_t, values_t, n_keys + 1, tokens[0], heads, att)
    a = np.empty((n_f, n_e), dtype=np.float32)
    for f in range(n_f):
        for e in range(n_e):
            a[f, e] = att[e * n_f + f]
    y = np.dot(a, proj)
    _add_row(y, proj_bias)
    yn = np.empty((1, n_f * n_ch), dtype=np.float32)
    prelu_layer_norm_rows(y.reshape(1, n_f * n_ch), proj_alpha, proj_gamma, proj_beta, eps, yn)
    yf = yn.reshape(n_f, n_ch)
    _shift_context(gate_ctx, yf, 0)
    lin = np.zeros((1, n_f, n_ch), dtype=np.float32)
    gt = np.zeros((1, n_f, n_ch), dtype=np.float32)
    depthwise_taps(gate_ctx, dw_lin, lin)
    depthwise_taps(gate_ctx, dw_gate, gt)
    _add_row(lin[0], dw_lin_b)
    _add_row(gt[0], dw_gate_b)
    lp = np.dot(lin[0], pw_lin)
    gp = np.dot(gt[0], pw_gate)
    for f in range(n_f):
        for k in range(n_ch):
            gp[f, k] = (_tanh32(gp[f, k] + pw_gate_b[k]) + _ONE) * (lp[f, k] + pw_lin_b[k])
    o = np.dot(gp, pw_out)
    for f in range(n_f):
        for k in range(n_ch):
            out[f, k] = o[f, k] + pw_out_b[k] + g[f, k]


@numba.njit(cache=True, error_model="numpy")
def _t_local_step(g, p, st, pos, has_init, eps, out):
    """T-Local for one block and frame; ``p, st`` are that block's parameter and state tuples."""
    h, c, seg_h = st[5], st[6], st[2]
    if pos == 0:
        if has_init:
            h[:] = st[7]
            c[:] = st[8]
        else:
            h[:] = 0
            c[:] = 0
        seg_h[:] = 0
    t_local_frame(g, p[7], p[8], eps, p[9], p[10], h, c, seg_h, pos, p[11], p[12], out)


@numba.njit(cache=True, error_model="numpy")
def _relay(st, nxt, cm):
    """Cache-memory step on a finished segment; seeds the next block's next segment."""
    lstm_rows_step(st[5], st[9], st[10], cm[0], cm[1], st[9], st[10])
    lstm_rows_step(st[6], st[11], st[12], cm[2], cm[3], st[11], st[12])
    nxt[7][:] = st[9]
    nxt[8][:] = st[11]


@numba.njit(cache=True, error_model="numpy")
def _roll_cache(keys, values, keep):
    """Keep the newest ``keep`` cached frames at the front of ``(heads, head_dim, capacity)``."""
    cap = keys.shape[2]
    for a in range(keys.shape[0]):
        for b in range(keys.shape[1]):
            for t in range(keep):
                keys[a, b, t] = keys[a, b, cap - keep + t]
                values[a, b, t] = values[a, b, cap - keep + t]


@numba.njit(cache=True, error_model="numpy")
def _analyse(x, ana_re, ana_im, spec):
    """Windowed real DFT of one frame into ``spec (F, 2)`` (float64 sums)."""
    n_f = spec.shape[0]
    re = np.zeros(n_f)
    im = np.zeros(n_f)
    for n in range(x.shape[0]):
        v = x[n]
        for f in range(n_f):
            re[f] += v * ana_re[n, f]
            im[f] += v * ana_im[n, f]
    for f in range(n_f):
        spec[f, 0] = re[f]
        spec[f, 1] = im[f]


@numba.njit(cache=True, error_model="numpy")
def _synthesise(y, syn_re, syn_im, ola):
    """Add the windowed inverse DFT of ``y (F, 2C)`` (interleaved re/im per speaker) to ``ola``."""
    n_f, win = syn_re.shape
    for c in range(ola.shape[0]):
        for f in range(n_f):
            re = np.float64(y[f, 2 * c])
            im = np.float64(y[f, 2 * c + 1])
            for n in range(win):
                ola[c, n] += re * syn_re[f, n] + im * syn_im[f, n]


@numba.njit(cache=True, error_model="numpy")
def stream_frames(buf, n_frames, hop, out, ana_re, ana_im, syn_re, syn_im, ola, ola_w, win_sq, floor,
                  enc_ctx, enc_kernel, enc_bias, enc_gamma, enc_beta, blocks_p, blocks_s, counters, cm,
                  dec_ctx, dec_kernel, dec_bias, relu, f_width, f_stride, t_width, heads, eps, max_keys):
    """Run ``n_frames`` frames starting every ``hop`` samples of ``buf`` through the network.

    Writes ``hop`` finished samples per frame and speaker into ``out``.
    ``counters[b]`` holds (segment position, cached keys, has relayed state)
    for block ``b``; ``max_keys < 0`` keeps the whole attention history,
    whose capacity the caller must have reserved. Returns ``n_frames`` or
    ``-(i + 1)`` when frame ``i`` produced a non-finite value.
    """
    win = ana_re.shape[0]
    n_f = ana_re.shape[1]
    n_ch = enc_bias.shape[0]
    n_blocks = counters.shape[0]
    spec = np.empty((n_f, 2), dtype=np.float32)
    g = np.empty((n_f, n_ch), dtype=np.float32)
    x = np.empty((n_f, n_ch), dtype=np.float32)
    y = np.empty((n_f, dec_bias.shape[0]), dtype=np.float32)
    for i in range(n_frames):
        _analyse(buf[i * hop:i * hop + win], ana_re, ana_im, spec)
        conv_frame(enc_ctx, spec, enc_kernel, enc_bias, g)
        layer_norm_rows(g, enc_gamma, enc_beta, eps, x)
        for b in range(n_blocks):
            p = blocks_p[b]
            st = blocks_s[b]
            f_local_frame(x, p[0], p[1], eps, f_width, f_stride, p[2], p[3], p[4], p[5], p[6], g)
            pos = counters[b, 0]
            _t_local_step(g, p, st, pos, counters[b, 2] != 0, eps, x)
            pos += 1
            if pos == t_width:
                pos = 0
                if b + 1 < n_blocks:
                    _relay(st, blocks_s[b + 1], cm)
                    counters[b + 1, 2] = 1
            counters[b, 0] = pos
            n_keys = counters[b, 1]
            if max_keys > 0 and n_keys == st[3].shape[2]:
                _roll_cache(st[3], st[4], max_keys - 1)
                n_keys = max_keys - 1
            car_frame(x, eps, st[0], p[13], p[14], p[15], p[16], p[17], st[3], st[4], n_keys, heads,
                      p[18], p[19], p[20], p[21], p[22], st[1], p[23], p[24], p[25], p[26], p[27], p[28],
                      p[29], p[30], p[31], p[32], g)
            counters[b, 1] = n_keys + 1
            x[:] = g
        conv_frame(dec_ctx, x, dec_kernel, dec_bias, y)
        for f in range(n_f):
            for k in range(y.shape[1]):
                if relu and y[f, k] < 0:
                    y[f, k] = 0
                if not math.isfinite(y[f, k]):
                    return -(i + 1)
        _synthesise(y, syn_re, syn_im, ola)
        for n in range(win):
            ola_w[n] += win_sq[n]
        for c in range(ola.shape[0]):
            for j in range(hop):
                w = ola_w[j]
                out[c, i * hop + j] = ola[c, j] / max(w, floor) if w > floor else 0.0
            for n in range(win - hop):
                ola[c, n] = ola[c, n + hop]
            for n in range(win - hop, win):
                ola[c, n] = 0.0
        for n in range(win - hop):
            ola_w[n] = ola_w[n + hop]
        for n in range(win - hop, win):
            ola_w[n] = 0.0
    return n_frames
