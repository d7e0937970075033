"""scikit-learn style wrapper around offline and streaming separation."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import resolve_config
from .separator import separate_offline
from .streaming import stream_separate
from .tensor import DTYPE
from .weights import init_weights, load


def check_waveform(x, name="waveform"):
    """Return ``x`` as a finite 1-D float32 array with at least one sample."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(x.dtype, np.number) or np.iscomplexobj(x):
        raise TypeError(f"{name} must be real-valued, got dtype {x.dtype}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_batch(X):
    """Return a list of 1-D float32 waveforms from ``(n, L)``, ``(L,)`` or a ragged list."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_waveform(row, f"X[{i}]") for i, row in enumerate(X)]
    if isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        return [check_waveform(X, "X")]
    if isinstance(X, (list, tuple)) or (isinstance(X, np.ndarray) and X.dtype == object):
        if len(X) == 0:
            raise ValueError("X holds no waveforms")
        if all(np.ndim(v) == 0 for v in X):
            return [check_waveform(np.asarray(X), "X")]
        return [check_waveform(v, f"X[{i}]") for i, v in enumerate(X)]
    raise ValueError(f"X must be a waveform or a batch of waveforms, got {type(X).__name__}")


def chunk_sizes(length, chunk):
    """Equal chunks of ``chunk`` samples with a shorter final chunk."""
    if chunk is None:
        return None
    chunk = int(chunk)
    if chunk < 1:
        raise ValueError(f"chunk must be a positive sample count, got {chunk}")
    sizes = [chunk] * (length // chunk)
    if length % chunk:
        sizes.append(length % chunk)
    return sizes


class TFACMSeparator(TransformerMixin, BaseEstimator):
    """Causal speech separator with random or loaded weights.

    Parameters
    ----------
    model : str or ModelConfig
        Preset name (``"small"`` or ``"large"``) or config file path.
    weights : str or None
        Path to a weights file matching ``model``; None draws random weights.
    seed : int
        Seed for random initialisation when ``weights`` is None.
    stream : bool
        Run the frame-by-frame streaming engine instead of the offline pass.
    chunk : int or None
        Samples per pushed chunk in streaming mode; None pushes whole inputs.
    max_attn_frames : int or None
        Attention cache cap in streaming mode; None keeps the full history.
    """

    def __init__(self, model="small", weights=None, seed=0, stream=False, chunk=None, max_attn_frames=None):
        self.model = model
        self.weights = weights
        self.seed = seed
        self.stream = stream
        self.chunk = chunk
        self.max_attn_frames = max_attn_frames

    def fit(self, X=None, y=None):
        """Build the network. No training happens; ``X`` and ``y`` are ignored."""
        cfg = resolve_config(self.model)
        if self.weights is not None:
            self.model_ = load(self.weights, cfg)
        else:
            self.model_ = init_weights(cfg, int(self.seed))
        self.config_ = self.model_.cfg
        self.n_speakers_ = self.config_.sep.n_speakers
        return self

    def separate(self, x):
        """Separate one waveform into ``(C, L)``."""
        check_is_fitted(self, "model_")
        x = check_waveform(x)
        if self.stream:
            return stream_separate(x, self.model_, chunk_sizes(len(x), self.chunk), self.max_attn_frames)
        return separate_offline(x, self.model_)

    def transform(self, X):
        """Separate a batch: ``(n, L)`` gives ``(n, C, L)``; ragged input gives a list."""
        check_is_fitted(self, "model_")
        waves = check_batch(X)
        outs = [self.separate(w) for w in waves]
        if len({o.shape for o in outs}) == 1:
            return np.stack(outs)
        return outs
