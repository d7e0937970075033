"""Causal time-frequency speech separation with a streaming inference engine."""

from .accounting import accounting_report, estimate_macs
from .config import PRESETS, ModelConfig, SeparatorConfig, resolve_config
from .dsp import StftConfig, istft, read_wav, stft, write_wav
from .estimator import TFACMSeparator, check_batch, check_waveform
from .metrics import EvalReport, evaluate_utterance, improvement_db, pit_resolve, si_snr_db, snr_db
from .separator import NonFiniteError, separate_offline
from .streaming import StreamState, stream_flush, stream_init, stream_push, stream_separate
from .weights import (BadMagicError, Model, ShapeMismatchError, TruncatedPayloadError, WeightFormatError,
                      count_params, init_weights, load, loads, save)

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "EvalReport", "Model", "ModelConfig", "NonFiniteError", "PRESETS", "SeparatorConfig",
    "ShapeMismatchError", "StftConfig", "StreamState", "TFACMSeparator", "TruncatedPayloadError",
    "WeightFormatError", "accounting_report", "check_batch", "check_waveform", "count_params",
    "estimate_macs", "evaluate_utterance", "improvement_db", "init_weights", "istft", "load", "loads",
    "pit_resolve", "read_wav", "resolve_config", "save", "separate_offline", "si_snr_db", "snr_db",
    "stft", "stream_flush", "stream_init", "stream_push", "stream_separate", "write_wav",
]
