"""Training objective and evaluation metrics: SNR, SI-SNR, uPIT and improvements.

All arithmetic is float64. dB values are clamped to ``[-CLAMP_DB, CLAMP_DB]``
so perfect or silent estimates stay finite.
"""

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

CLAMP_DB = 60.0
EPS = 1e-8
MAX_PIT_SPEAKERS = 8
METRICS = ("snr", "si_snr")


def _pair(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.ndim != 1 or est.shape != ref.shape:
        raise ValueError(f"expected equal-length 1-D signals, got {est.shape} and {ref.shape}")
    if not (np.isfinite(est).all() and np.isfinite(ref).all()):
        raise ValueError("signals must be finite")
    return est, ref


def _ratio_db(num, den):
    if den == 0.0:
        return -CLAMP_DB
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10(num / den)
    return float(np.clip(value, -CLAMP_DB, CLAMP_DB))


def snr_db(est, ref):
    """``10 log10(|ref|^2 / (|est - ref|^2 + eps |ref|^2))``, clamped.

    The guard is relative to the reference energy so the value does not
    depend on the overall signal scale.
    """
    est, ref = _pair(est, ref)
    power = float(np.dot(ref, ref))
    if power == 0.0:
        raise ValueError("reference signal is all zeros")
    err = est - ref
    return _ratio_db(power, float(np.dot(err, err)) + EPS * power)


def si_snr_db(est, ref):
    """Scale-invariant SNR of zero-mean signals, clamped.

    ``s = (<est, ref> / |ref|^2) ref`` and the value is
    ``10 log10(|s|^2 / (|est - s|^2 + eps |s|^2))``.
    """
    est, ref = _pair(est, ref)
    if not ref.any():
        raise ValueError("reference signal is all zeros")
    est = est - est.mean()
    ref = ref - ref.mean()
    power = float(np.dot(ref, ref))
    if power == 0.0:
        raise ValueError("reference signal is constant, nothing left after removing its mean")
    target = (np.dot(est, ref) / power) * ref
    noise = est - target
    t_pow = float(np.dot(target, target))
    return _ratio_db(t_pow, float(np.dot(noise, noise)) + EPS * t_pow)


_METRIC_FUNCS = {"snr": snr_db, "si_snr": si_snr_db}
_LOSSES = {"neg_snr": "snr", "neg_si_snr": "si_snr"}


def metric_fn(name):
    if name not in _METRIC_FUNCS:
        raise ValueError(f"unknown metric {name!r} (choose from {', '.join(METRICS)})")
    return _METRIC_FUNCS[name]


def _stack(x, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{what} must be (C, L), got shape {x.shape}")
    return x


def pit_resolve(ests, refs, metric="neg_si_snr"):
    """Utterance-level permutation search over all ``C!`` assignments.

    Returns ``(best_loss, perm)`` where ``ests[perm[c]]`` is matched with
    ``refs[c]`` and the loss is the mean of ``-metric`` over speakers. Ties go
    to the lexicographically smallest permutation.
    """
    if metric not in _LOSSES:
        raise ValueError(f"unknown loss {metric!r} (choose from {', '.join(_LOSSES)})")
    ests = _stack(ests, "ests")
    refs = _stack(refs, "refs")
    n_spk = refs.shape[0]
    if ests.shape != refs.shape:
        raise ValueError(f"speaker/length mismatch: ests {ests.shape}, refs {refs.shape}")
    if n_spk > MAX_PIT_SPEAKERS:
        raise ValueError(f"exhaustive search supports at most {MAX_PIT_SPEAKERS} speakers, got {n_spk}")
    fn = _METRIC_FUNCS[_LOSSES[metric]]
    # loss[i, c]: estimate i scored against reference c
    loss = np.array([[-fn(ests[i], refs[c]) for c in range(n_spk)] for i in range(n_spk)])
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n_spk)):
        value = float(np.mean([loss[perm[c], c] for c in range(n_spk)]))
        if value < best:
            best, best_perm = value, perm
    return best, best_perm


def improvement_db(est, ref, mix, metric="si_snr"):
    """``metric(est, ref) - metric(mix, ref)``."""
    fn = metric_fn(metric)
    return fn(est, ref) - fn(mix, ref)


@dataclass
class EvalRow:
    utt_id: str
    si_snr_i: float
    sdr_i: float
    perm: tuple


@dataclass
class EvalReport:
    """Per-utterance improvements and their means.

    ``sdr_i`` is the SNR-based improvement, not BSS-eval SDR.
    """

    rows: list = field(default_factory=list)
    sdr_label: str = "SDRi (SNR-based)"

    def add(self, row):
        self.rows.append(row)

    @property
    def mean_si_snr_i(self):
        return float(np.mean([r.si_snr_i for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_sdr_i(self):
        return float(np.mean([r.sdr_i for r in self.rows])) if self.rows else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["utt_id", "si_snr_i", "sdr_i", "perm"])
        for r in self.rows:
            writer.writerow([r.utt_id, f"{r.si_snr_i:.6f}", f"{r.sdr_i:.6f}", " ".join(map(str, r.perm))])
        writer.writerow(["mean", f"{self.mean_si_snr_i:.6f}", f"{self.mean_sdr_i:.6f}", ""])
        return buf.getvalue()


def evaluate_utterance(utt_id, ests, refs, mix, metric="si_snr"):
    """Resolve the permutation with ``metric`` and average both improvements over speakers."""
    metric_fn(metric)
    refs = _stack(refs, "refs")
    ests = _stack(ests, "ests")
    _, perm = pit_resolve(ests, refs, "neg_" + metric)
    mix = np.asarray(mix, dtype=np.float64)
    si = np.mean([improvement_db(ests[perm[c]], refs[c], mix, "si_snr") for c in range(refs.shape[0])])
    sd = np.mean([improvement_db(ests[perm[c]], refs[c], mix, "snr") for c in range(refs.shape[0])])
    return EvalRow(utt_id, float(si), float(sd), tuple(int(p) for p in perm))
