"""Parameter and multiply-accumulate accounting next to the published figures."""

from .config import PUBLISHED_TABLE, resolve_config
from .weights import count_params

CAVEAT = ("sub-band widths/strides (W1, S1, W2, S2) and the attention channel count E are "
          "unpublished; the presets use this package's defaults, so counts are diagnostic")


def _frames(cfg, seconds):
    n = int(round(seconds * cfg.sample_rate))
    return 0 if n <= 0 else cfg.stft.n_frames(max(n, cfg.stft.win_len))


def estimate_macs(cfg, seconds=1.0, breakdown=False):
    """Analytic multiply-accumulates of one offline pass over ``seconds`` of audio.

    Counts every conv, deconv, LSTM and attention product (norms, activations
    and the FFTs are excluded). Attention is quadratic in the frame count
    ``T``: causal scores and value sums cost ``D * T * (T + 1)`` per block.
    With ``breakdown`` a dict of parts is returned; its ``blocks`` entry is
    linear in the block count.
    """
    cfg = resolve_config(cfg)
    s = cfg.sep
    n_t = _frames(cfg, seconds)
    f, n, h, e = cfg.n_freqs, s.channels, s.hidden, s.attn_channels
    c2 = 2 * s.n_speakers
    n_fseg = (f + (s.f_stride - (f - s.f_width) % s.f_stride) % s.f_stride - s.f_width) // s.f_stride + 1
    lstm = lambda n_in: n_in * 4 * h + h * 4 * h
    per_frame_block = (
        n_fseg * (lstm(s.f_width * n) + h * n * s.f_width)      # F-Local
        + f * lstm(n) + f * s.t_width * h * n                     # T-Local (deconv amortised per frame)
        + 3 * f * e * n * 9 + f * e * n                           # Q/K/V convs, projection
        + 2 * f * n * 9 + 3 * f * n * n                           # gated conv
    )
    n_seg = -(-n_t // s.t_width)
    parts = {
        "encoder": n_t * f * n * 2 * 9,
        "blocks": s.blocks * (n_t * per_frame_block + e * f * n_t * (n_t + 1)),
        "cache_memory": (s.blocks - 1) * n_seg * f * 2 * lstm(h),
        "decoder": n_t * f * n * c2 * 9,
    }
    parts["total"] = sum(parts.values())
    return parts if breakdown else parts["total"]


def accounting_report(cfg):
    """Lines comparing counted parameters and MACs/s with the published table."""
    cfg = resolve_config(cfg)
    params = count_params(cfg)
    macs = estimate_macs(cfg, 1.0) / 1e9
    lines = [f"params: {params} ({params / 1e6:.3f} M)", f"MACs: {macs:.2f} G/s"]
    ref = PUBLISHED_TABLE.get(cfg.preset)
    if ref:
        lines[0] += f"  paper: {ref['params_m']} M  ratio {params / 1e6 / ref['params_m']:.2f}"
        lines[1] += f"  paper: {ref['macs_g_per_s']} G/s  ratio {macs / ref['macs_g_per_s']:.2f}"
    lines.append(f"note: {CAVEAT}")
    return lines


__all__ = ["CAVEAT", "accounting_report", "count_params", "estimate_macs"]
