"""Sample-in / sample-out execution of the separator.

Every completed STFT frame is pushed through the encoder, all blocks and
the decoder before the next frame is touched, and every per-frame operation
has a fixed shape. How the input is split into pushes therefore cannot
change a single floating-point operation, so any two partitions give
bit-identical output.

Latency: once ``consumed`` samples have been pushed, exactly
``hop * floor((consumed - win_len + hop) / hop)`` output samples exist per
speaker. That is ``consumed - (win_len - hop)`` whenever ``consumed`` is on
the hop grid, and zero before the first full window.
"""

from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels, nn
from .dsp import WIN_SUM_FLOOR, hann_window, normalize_ola
from .config import ModelConfig, SeparatorConfig
from .separator import NonFiniteError, segment_deconv_weight, separate_offline
from .tensor import DTYPE
from .weights import init_weights


def _conv_kernel(w):
    """``(C_out, C_in, K_f, K_t)`` -> ``(K_t * K_f * C_in, C_out)`` matching the per-frame im2col."""
    c_out = w.shape[0]
    return np.ascontiguousarray(w.transpose(3, 2, 1, 0)).reshape(-1, c_out)


def _flat_norm(w, prefix, n_f):
    """PReLU slopes tiled over frequency and ``(C, F)`` norm affine as ``(F * C,)``."""
    return (np.tile(w[prefix + ".prelu"], n_f),
            np.ascontiguousarray(w[prefix + ".norm.gamma"].T).reshape(-1),
            np.ascontiguousarray(w[prefix + ".norm.beta"].T).reshape(-1))


def _stacked_lstm(w, prefix):
    """``(vstack(w_ih, w_hh), bias)`` in the layout of ``LstmParams.reordered``."""
    w_ih, w_hh, bias = nn.LstmParams.from_weights(w, prefix).reordered()
    return np.ascontiguousarray(np.vstack([w_ih, w_hh])), bias


def _dft_matrices(window, n_freqs):
    """Real DFT analysis ``(win, F)`` and windowed inverse ``(F, win)`` matrices, float64.

    Analysis gives ``rfft(x * window)``; synthesis gives ``irfft(z) * window``
    with DC and Nyquist counted once.
    """
    win = window.shape[0]
    n = np.arange(win)
    phase = 2 * np.pi * np.outer(n, np.arange(n_freqs)) / win       # (win, F)
    ana_re = window[:, None] * np.cos(phase)
    ana_im = -window[:, None] * np.sin(phase)
    weight = np.full(n_freqs, 2.0)
    weight[0] = 1.0
    if win % 2 == 0:
        weight[-1] = 1.0
    syn_re = (weight[:, None] * np.cos(phase.T)) * window / win
    syn_im = (-weight[:, None] * np.sin(phase.T)) * window / win
    return tuple(np.ascontiguousarray(a) for a in (ana_re, ana_im, syn_re, syn_im))


def _typed_list(items):
    """A numba typed list, so the compiled kernel does not depend on the block count."""
    out = numba.typed.List()
    for item in items:
        out.append(item)
    return out


def _flat_block(b):
    """One block's prepared weights as the flat tuple ``_kernels.stream_frames`` indexes."""
    (qkv_kernel, qkv_bias, qkv_alpha, qkv_gamma, qkv_beta), proj, gate = b["car"]
    parts = (*b["fl_norm"], *b["fl_lstm"], b["fl_deconv"], b["fl_bias"],
             *b["tl_norm"], *b["tl_lstm"], b["tl_deconv"], b["tl_bias"],
             qkv_kernel, qkv_bias, qkv_alpha, qkv_gamma, qkv_beta, *proj, *gate)
    return tuple(np.ascontiguousarray(a, dtype=DTYPE) for a in parts)


class _Plan:
    """Weights rearranged once for per-frame evaluation."""

    def __init__(self, model):
        cfg = model.cfg
        s = cfg.sep
        w = model.weights
        self.cfg = cfg
        self.n_freqs = cfg.n_freqs
        self.win = cfg.stft.win_len
        self.hop = cfg.stft.hop
        self.window = hann_window(self.win)
        self.window_sq = self.window ** 2
        self.enc_kernel = _conv_kernel(w["encoder.conv.weight"])
        self.enc_bias = w["encoder.conv.bias"]
        self.enc_norm = (w["encoder.norm.gamma"], w["encoder.norm.beta"])
        self.blocks = [self._block(w, s, f"blocks.{i}", self.n_freqs) for i in range(s.blocks)]
        self.ana_re, self.ana_im, self.syn_re, self.syn_im = _dft_matrices(self.window, self.n_freqs)
        self.block_params = _typed_list(_flat_block(b) for b in self.blocks)
        if s.blocks > 1:
            self.cm = (*_stacked_lstm(w, "cm.lstm_h"), *_stacked_lstm(w, "cm.lstm_c"))
        else:
            # typed placeholders; a single block never relays state
            self.cm = (np.zeros((1, 4), DTYPE), np.zeros(4, DTYPE)) * 2
        flipped = np.ascontiguousarray(
            np.transpose(w["decoder.deconv.weight"], (1, 0, 2, 3))[:, :, ::-1, ::-1])
        self.dec_kernel = _conv_kernel(flipped)
        self.dec_bias = w["decoder.deconv.bias"]
        self.relu = s.output_activation == "relu"

    @staticmethod
    def _block(w, s, p, n_f):
        half = DTYPE(0.5)
        fl_w = w[p + ".flocal.deconv.weight"]                  # (H, N, W1)
        tl_w = segment_deconv_weight(w[p + ".tlocal.deconv.weight"], s.t_width)
        tl_w = tl_w.reshape(s.t_width, s.hidden, s.channels, s.t_width)
        car = p + ".car"
        qkv = [car + "." + n for n in "qkv"]
        norms = [_flat_norm(w, q, n_f) for q in qkv]
        b = {
            "fl_norm": (w[p + ".flocal.norm.gamma"], w[p + ".flocal.norm.beta"]),
            "fl_lstm": nn.LstmParams.from_weights(w, p + ".flocal.lstm").reordered(),
            "fl_deconv": np.ascontiguousarray(fl_w.transpose(0, 2, 1)).reshape(fl_w.shape[0], -1),
            "fl_bias": w[p + ".flocal.deconv.bias"],
            "tl_norm": (w[p + ".tlocal.norm.gamma"], w[p + ".tlocal.norm.beta"]),
            "tl_lstm": _stacked_lstm(w, p + ".tlocal.lstm"),
            # [k, j] maps segment position k to output position j
            "tl_deconv": np.ascontiguousarray(tl_w.transpose(0, 3, 1, 2)),
            "tl_bias": w[p + ".tlocal.deconv.bias"],
        }
        gp = nn.GatedConvParams.from_weights(w, car + ".gate")
        b["car"] = (
            np.concatenate([_conv_kernel(w[q + ".conv.weight"]) for q in qkv], axis=1),
            np.concatenate([w[q + ".conv.bias"] for q in qkv]),
            np.stack([n[0] for n in norms]), np.stack([n[1] for n in norms]), np.stack([n[2] for n in norms]),
        ), (
            np.ascontiguousarray(w[car + ".proj.weight"].T), w[car + ".proj.bias"],
            *_flat_norm(w, car + ".proj", n_f),
        ), (
            np.ascontiguousarray(gp.dw_lin.transpose(2, 1, 0)), gp.dw_lin_b,
            np.ascontiguousarray(gp.pw_lin.T), gp.pw_lin_b,
            np.ascontiguousarray(gp.dw_gate.transpose(2, 1, 0)), gp.dw_gate_b,
            np.ascontiguousarray((gp.pw_gate * half).T), gp.pw_gate_b * half,
            np.ascontiguousarray((gp.pw_out * half).T), gp.pw_out_b,
        )
        return b


@dataclass
class _BlockState:
    qkv_ctx: np.ndarray          # (3, F + 2, N) frequency-padded history for the Q/K/V convs
    gate_ctx: np.ndarray         # (3, F, N) history for the gated conv
    seg_h: np.ndarray            # (W2, F, H) T-Local outputs of the open segment
    keys: np.ndarray             # (heads, head_dim, capacity), transposed for the kernel
    values: np.ndarray
    h: np.ndarray                # T-Local running state, (F, H)
    c: np.ndarray
    next_h: np.ndarray           # relayed cache state for this block's next segment
    next_c: np.ndarray
    cm: tuple                    # (h, c) of LSTM-H then (h, c) of LSTM-C, all (F, H)

    def arrays(self):
        return [self.qkv_ctx, self.gate_ctx, self.seg_h, self.keys, self.values, self.h, self.c,
                self.next_h, self.next_c, *self.cm]

    def as_tuple(self):
        return tuple(self.arrays())


# columns of StreamState.counters
_SEG_POS, _N_KEYS, _HAS_INIT = 0, 1, 2


@dataclass
class StreamState:
    """Everything carried between pushes for one stream."""

    plan: _Plan
    pending: np.ndarray           # input samples from the next frame start onwards
    enc_ctx: np.ndarray           # (3, F + 2, 2)
    dec_ctx: np.ndarray           # (3, F + 2, N)
    ola: np.ndarray               # (C, win) float64 overlap-add accumulator
    ola_weight: np.ndarray        # (win,) float64 squared-window sum
    blocks: list
    counters: np.ndarray          # (B, 3) int64: segment position, cached keys, has relayed state
    max_attn_frames: int = None
    block_arrays: object = None   # typed list of per-block state tuples handed to the kernel
    consumed: int = 0
    emitted: int = 0
    frames: int = 0
    flushed: bool = False
    poisoned: bool = False

    @property
    def n_speakers(self):
        return self.plan.cfg.sep.n_speakers

    def n_keys(self, block):
        return int(self.counters[block, _N_KEYS])

    def nbytes(self):
        """Bytes held by the per-stream buffers (weights excluded)."""
        arrays = [self.pending, self.enc_ctx, self.dec_ctx, self.ola, self.ola_weight, self.counters]
        for b in self.blocks:
            arrays += b.arrays()
        return int(sum(a.nbytes for a in arrays))


def stream_init(model, max_attn_frames=None):
    """Fresh stream: empty buffers, zero histories and a zero cache state for block 0.

    ``max_attn_frames`` caps the attention history (constant memory, no
    longer equivalent to the offline pass); ``None`` keeps every frame.
    """
    if max_attn_frames is not None and max_attn_frames < 1:
        raise ValueError("max_attn_frames must be >= 1 or None")
    plan = _Plan(model)
    s = plan.cfg.sep
    f = plan.n_freqs
    n, hid = s.channels, s.hidden
    head_dim = s.attn_channels * f // s.heads
    cap = max_attn_frames if max_attn_frames is not None else 256
    zeros = lambda *shape: np.zeros(shape, dtype=DTYPE)
    blocks = [
        _BlockState(
            qkv_ctx=zeros(3, f + 2, n), gate_ctx=zeros(3, f, n), seg_h=zeros(s.t_width, f, hid),
            keys=zeros(s.heads, head_dim, cap), values=zeros(s.heads, head_dim, cap),
            h=zeros(f, hid), c=zeros(f, hid), next_h=zeros(f, hid), next_c=zeros(f, hid),
            cm=tuple(zeros(f, hid) for _ in range(4)),
        )
        for _ in range(s.blocks)
    ]
    return StreamState(
        plan=plan,
        pending=np.zeros(0, dtype=np.float64),
        enc_ctx=zeros(3, f + 2, 2),
        dec_ctx=zeros(3, f + 2, n),
        ola=np.zeros((s.n_speakers, plan.win), dtype=np.float64),
        ola_weight=np.zeros(plan.win, dtype=np.float64),
        blocks=blocks,
        counters=np.zeros((s.blocks, 3), dtype=np.int64),
        max_attn_frames=max_attn_frames,
    )


def _reserve_kv(state, n_new):
    """Grow uncapped attention caches so ``n_new`` more frames fit."""
    if state.max_attn_frames is not None:
        return
    for i, bs in enumerate(state.blocks):
        need = state.n_keys(i) + n_new
        capacity = bs.keys.shape[2]
        if need <= capacity:
            continue
        new_cap = max(2 * capacity, 1 << (need - 1).bit_length())
        pad = ((0, 0), (0, 0), (0, new_cap - capacity))
        bs.keys, bs.values = np.pad(bs.keys, pad), np.pad(bs.values, pad)
        state.block_arrays = None


def _check_usable(state):
    if state.poisoned:
        raise NonFiniteError("stream state is poisoned by an earlier non-finite value")
    if state.flushed:
        raise RuntimeError("stream already flushed")


def _run_frames(state, samples):
    """Process every complete frame in ``pending + samples``; return the finished output."""
    plan = state.plan
    s = plan.cfg.sep
    buf = np.concatenate([state.pending, samples])
    n_frames = (buf.shape[0] - plan.win) // plan.hop + 1 if buf.shape[0] >= plan.win else 0
    out = np.empty((state.n_speakers, n_frames * plan.hop), dtype=DTYPE)
    if n_frames:
        _reserve_kv(state, n_frames)
        if state.block_arrays is None:
            state.block_arrays = _typed_list(b.as_tuple() for b in state.blocks)
        done = _kernels.stream_frames(
            buf, n_frames, plan.hop, out, plan.ana_re, plan.ana_im, plan.syn_re, plan.syn_im,
            state.ola, state.ola_weight, plan.window_sq, WIN_SUM_FLOOR,
            state.enc_ctx, plan.enc_kernel, plan.enc_bias, *plan.enc_norm,
            plan.block_params, state.block_arrays, state.counters, plan.cm,
            state.dec_ctx, plan.dec_kernel, plan.dec_bias, plan.relu,
            s.f_width, s.f_stride, s.t_width, s.heads, nn.LN_EPS,
            -1 if state.max_attn_frames is None else state.max_attn_frames)
        if done < 0:
            state.poisoned = True
            raise NonFiniteError(f"non-finite values produced in streaming frame {state.frames - done - 1}")
        state.frames += n_frames
    state.pending = buf[n_frames * plan.hop:].copy()
    state.emitted += out.shape[1]
    return out


def stream_push(state, samples):
    """Consume ``samples``; return the ``(C, n)`` output samples that became final."""
    _check_usable(state)
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if not np.isfinite(x).all():
        raise ValueError("input samples must be finite")
    # round through float32 so the stream sees exactly what the offline pass sees
    x = x.astype(DTYPE).astype(np.float64)
    state.consumed += x.shape[0]
    return _run_frames(state, x)


def stream_flush(state, total_len=None):
    """Zero-pad to whole frames and emit the rest so the output totals ``total_len`` samples.

    ``total_len`` defaults to the number of consumed samples; a larger value
    appends that many zeros first. A second flush returns an empty array.
    """
    if state.poisoned:
        raise NonFiniteError("stream state is poisoned by an earlier non-finite value")
    if state.flushed:
        return np.zeros((state.n_speakers, 0), dtype=DTYPE)
    plan = state.plan
    total = state.consumed if total_len is None else int(total_len)
    if total < state.consumed:
        raise ValueError(f"total_len {total} is shorter than the {state.consumed} samples consumed")
    padded = plan.cfg.stft.padded_length(total)
    head = _run_frames(state, np.zeros(padded - state.consumed))
    state.consumed = total
    rest = total - state.emitted
    tail = normalize_ola(state.ola[:, :rest], state.ola_weight[:rest]).astype(DTYPE)
    state.emitted += rest
    state.flushed = True
    return np.concatenate([head, tail], axis=1)


def stream_separate(mix, model, chunks=None, max_attn_frames=None):
    """Feed ``mix`` through a fresh stream in pushes of the given sizes and flush.

    ``chunks`` is a sequence of push lengths (the remainder goes in a final
    push) or ``None`` for a single push.
    """
    mix = np.asarray(mix, dtype=DTYPE).reshape(-1)
    state = stream_init(model, max_attn_frames)
    outs, pos = [], 0
    for n in chunks or ():
        outs.append(stream_push(state, mix[pos:pos + n]))
        pos += n
    outs.append(stream_push(state, mix[pos:]))
    outs.append(stream_flush(state, mix.shape[0]))
    return np.concatenate(outs, axis=1)


def emitted_count(consumed, win_len, hop):
    """Samples per speaker that exist after ``consumed`` pushed samples."""
    if consumed < win_len:
        return 0
    return hop * ((consumed - win_len + hop) // hop)


def warm_up():
    """Compile (or load from numba's on-disk cache) every kernel by running a tiny model."""
    cfg = ModelConfig(preset="custom", sep=SeparatorConfig(channels=4, blocks=2, hidden=4, heads=4))
    model = init_weights(cfg, 0)
    x = np.random.default_rng(0).standard_normal(160).astype(DTYPE)
    separate_offline(x, model)
    stream_separate(x, model, chunks=[70])
