"""Hann-windowed STFT / iSTFT and PCM16 WAV I/O.

Spectrograms are float32 arrays of shape ``(2, F, T)`` holding the real and
imaginary planes, with ``F = win_len // 2 + 1``. Framing never reads before
sample 0 (no center padding): frame ``t`` covers samples
``[t * hop, t * hop + win_len)``.
"""

import wave
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE

WIN_SUM_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 8000
    win_len: int = 64
    hop: int = 8
    window: str = "hann"

    def __post_init__(self):
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.win_len < 2 or self.hop < 1:
            raise ValueError("win_len must be >= 2 and hop >= 1")
        if self.hop > self.win_len or self.win_len % self.hop:
            raise ValueError(
                f"win_len ({self.win_len}) must be a multiple of hop ({self.hop})"
            )

    @property
    def n_freqs(self):
        return self.win_len // 2 + 1

    def padded_length(self, n_samples):
        """Length after right zero-padding so the last frame is complete."""
        if n_samples < self.win_len:
            raise ValueError(
                f"signal of {n_samples} samples is shorter than one window ({self.win_len})"
            )
        extra = (n_samples - self.win_len) % self.hop
        return n_samples + (self.hop - extra if extra else 0)

    def n_frames(self, n_samples):
        return (self.padded_length(n_samples) - self.win_len) // self.hop + 1


def hann_window(n):
    """Periodic Hann window ``0.5 * (1 - cos(2 pi k / n))``."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def analyze_frames(frames, cfg):
    """DFT of already-cut frames ``(T, win_len)`` -> spectrogram ``(2, F, T)``."""
    frames = np.asarray(frames, dtype=np.float64)
    spec = np.fft.rfft(frames * hann_window(cfg.win_len), n=cfg.win_len, axis=-1)
    return np.stack([spec.real.T, spec.imag.T]).astype(DTYPE)


def synthesize_frames(spec, cfg):
    """Windowed time-domain frames ``(T, win_len)`` from a ``(2, F, T)`` spectrogram."""
    spec = np.asarray(spec)
    if spec.ndim != 3 or spec.shape[0] != 2 or spec.shape[1] != cfg.n_freqs:
        raise ValueError(
            f"spectrogram shape {spec.shape} inconsistent with F={cfg.n_freqs}"
        )
    z = spec[0].astype(np.float64) + 1j * spec[1].astype(np.float64)
    frames = np.fft.irfft(z.T, n=cfg.win_len, axis=-1)
    return frames * hann_window(cfg.win_len)


def overlap_add(frames, hop):
    """Overlap-add ``(T, win)`` frames at ``hop``; ``win`` must be a multiple of ``hop``."""
    n_frames, win = frames.shape
    ratio = win // hop
    blocks = np.zeros((n_frames + ratio - 1, hop), dtype=np.float64)
    parts = frames.reshape(n_frames, ratio, hop)
    for r in range(ratio):
        blocks[r:r + n_frames] += parts[:, r]
    return blocks.reshape(-1)


def window_sum(n_frames, cfg):
    """Sum of squared synthesis windows covering each output sample."""
    w2 = hann_window(cfg.win_len) ** 2
    return overlap_add(np.broadcast_to(w2, (n_frames, cfg.win_len)), cfg.hop)


def normalize_ola(acc, wsum):
    return np.where(wsum > WIN_SUM_FLOOR, acc / np.maximum(wsum, WIN_SUM_FLOOR), 0.0)


def stft(signal, cfg=StftConfig()):
    """Analyse a 1-D waveform into a ``(2, F, T)`` spectrogram."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    padded = cfg.padded_length(x.shape[0])
    x = np.pad(x, (0, padded - x.shape[0]))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_len)[:: cfg.hop]
    return analyze_frames(frames, cfg)


def istft(spec, cfg=StftConfig(), out_len=None):
    """Inverse of :func:`stft` by window-sum-normalised overlap-add."""
    frames = synthesize_frames(spec, cfg)
    acc = overlap_add(frames, cfg.hop)
    y = normalize_ola(acc, window_sum(frames.shape[0], cfg))
    if out_len is not None:
        if out_len > y.shape[0]:
            raise ValueError(f"out_len {out_len} exceeds synthesised length {y.shape[0]}")
        y = y[:out_len]
    return y.astype(DTYPE)


def read_wav(path, expected_rate=None):
    """Read a mono PCM16 WAV file; returns ``(float32 samples, sample_rate)``."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            n = f.getnframes()
            raw = f.readframes(n)
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if len(raw) != 2 * n:
        raise ValueError(f"{path}: data chunk holds {len(raw)} bytes, header says {n} samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(DTYPE) / DTYPE(32768.0)
    return samples, rate


def to_pcm16(x):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate):
    pcm = to_pcm16(samples)
    if pcm.ndim != 1:
        raise ValueError(f"write_wav expects mono samples, got shape {pcm.shape}")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(pcm.tobytes())
