"""Seeded invariant suites behind ``tfacm verify``.

Each suite returns a :class:`SuiteReport` with one :class:`PropertyResult`
per checked property. A failing property records the seed of its first
counterexample.
"""

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp, metrics
from .separator import separate_offline
from .streaming import stream_separate
from .weights import init_weights

CAUSAL_TOL = 1e-5
STREAM_RTOL = 1e-4
STREAM_ATOL = 1e-5
CHUNK_TOL = 1e-6


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""
    failing_seed: int = None


@dataclass
class SuiteReport:
    suite: str
    properties: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(p.passed for p in self.properties)

    def lines(self):
        out = []
        for p in self.properties:
            line = f"[{'PASS' if p.passed else 'FAIL'}] {self.suite}: {p.name}"
            if p.detail:
                line += f" ({p.detail})"
            if p.failing_seed is not None:
                line += f" first failing seed={p.failing_seed}"
            out.append(line)
        return out


def _trial_seed(seed, trial):
    return int(seed) * 1_000_003 + int(trial)


def _property(name, failures, total, detail=""):
    """``failures`` is a list of seeds in trial order."""
    text = f"{total - len(failures)}/{total} trials"
    if detail:
        text += ", " + detail
    return PropertyResult(name, not failures, text, failures[0] if failures else None)


# ---- causality --------------------------------------------------------------

def latency(cfg):
    return cfg.stft.win_len - cfg.stft.hop


def grid_bound(n, cfg):
    """Samples ``[0, bound)`` cannot depend on inputs at or after ``n``.

    The last frame that ends before ``n`` fixes every sample up to its first
    sample, which it weights by the zero first window tap.
    """
    hop = cfg.stft.hop
    last = (n - cfg.stft.win_len) // hop          # last frame lying inside [0, n)
    return max(0, (last + 1) * hop + 1) if last >= 0 else 0


@dataclass
class CausalityTrial:
    seed: int
    preset: str
    prefix: int
    literal_diff: float     # max |difference| on [0, n - (win - hop))
    grid_diff: float        # max |difference| on [0, grid_bound(n))
    grid_end: int


def causality_trial(seed, preset, seconds=2.0, causal_attention=True, model=None):
    """Two inputs sharing a random prefix ``[0, n)``; compare the outputs."""
    rng = np.random.default_rng(seed)
    model = model or init_weights(preset, seed)
    cfg = model.cfg
    length = int(round(seconds * cfg.sample_rate))
    n = int(rng.integers(cfg.stft.win_len, length))
    a = rng.uniform(-1, 1, length).astype(np.float32)
    b = a.copy()
    b[n:] = rng.uniform(-1, 1, length - n).astype(np.float32)
    ya = separate_offline(a, model, causal_attention)
    yb = separate_offline(b, model, causal_attention)
    lit = max(0, n - latency(cfg))
    end = grid_bound(n, cfg)
    diff = np.abs(ya.astype(np.float64) - yb)
    return CausalityTrial(seed, preset, n, float(diff[:, :lit].max(initial=0.0)),
                          float(diff[:, :end].max(initial=0.0)), end)


def causality_preset(trial):
    """Preset used by trial ``trial``: every tenth trial uses ``large``."""
    return "large" if trial % 10 == 9 else "small"


def run_causality_trials(seed=0, trials=100, seconds=2.0, causal_attention=True, presets=None, model=None):
    """``model`` fixes the weights for every trial; otherwise each trial draws its own."""
    out = []
    for t in range(trials):
        preset = model.cfg.preset if model else presets or causality_preset(t)
        out.append(causality_trial(_trial_seed(seed, t), preset, seconds, causal_attention, model))
    return out


def suite_causality(seed=0, trials=100, seconds=2.0, control_trials=2, model=None):
    """Prefix-perturbation probes plus a mask-removed control.

    Weights are random per trial unless ``model`` is given.
    """
    start = time.perf_counter()
    report = SuiteReport("causality")
    records = run_causality_trials(seed, trials, seconds, model=model)
    bad = [r.seed for r in records if r.grid_diff > CAUSAL_TOL]
    worst = max((r.grid_diff for r in records), default=0.0)
    report.properties.append(_property(
        "outputs before the last complete frame ignore later input", bad, len(records),
        f"max diff {worst:.2e}, tol {CAUSAL_TOL:g}"))
    lit = [r.seed for r in records if r.literal_diff > CAUSAL_TOL]
    report.properties.append(PropertyResult(
        "latency bound win-hop on [0, n-56) (informational)", True,
        f"{len(records) - len(lit)}/{len(records)} trials hold; prefixes off the hop grid reach"
        " samples that read frames extending past n"))
    control = run_causality_trials(seed + 1, control_trials, seconds, causal_attention=False,
                                   presets="small", model=model)
    detected = [r for r in control if r.grid_diff > CAUSAL_TOL]
    report.properties.append(PropertyResult(
        "negative control: attention mask removed is detected", bool(detected),
        f"{len(detected)}/{len(control)} control trials flagged",
        None if detected else control[0].seed))
    report.seconds = time.perf_counter() - start
    return report


# ---- streaming ----------------------------------------------------------------

def random_partition(rng, total, max_chunk):
    sizes = []
    left = total
    while left > 0:
        k = int(min(left, rng.integers(1, max_chunk + 1)))
        sizes.append(k)
        left -= k
    return sizes


@dataclass
class StreamingTrial:
    seed: int
    equiv_ok: bool
    equiv_abs: float
    chunk_diff: float


def streaming_trial(seed, preset="small", min_seconds=1.0, max_seconds=4.0, model=None):
    rng = np.random.default_rng(seed)
    model = model or init_weights(preset, seed)
    cfg = model.cfg
    sr = cfg.sample_rate
    length = int(rng.integers(int(min_seconds * sr), int(max_seconds * sr) + 1))
    x = rng.uniform(-1, 1, length).astype(np.float32)
    offline = separate_offline(x, model)
    max_chunk = sr // 2
    s1 = stream_separate(x, model, random_partition(rng, length, max_chunk))
    s2 = stream_separate(x, model, random_partition(rng, length, max_chunk))
    diff = np.abs(s1.astype(np.float64) - offline)
    ok = s1.shape == offline.shape and bool(np.all(diff <= STREAM_ATOL + STREAM_RTOL * np.abs(offline)))
    return StreamingTrial(seed, ok, float(diff.max()), float(np.abs(s1 - s2).max()))


def run_streaming_trials(seed=0, trials=50, **kw):
    return [streaming_trial(_trial_seed(seed, t), **kw) for t in range(trials)]


def suite_streaming(seed=0, trials=50, **kw):
    start = time.perf_counter()
    report = SuiteReport("streaming")
    records = run_streaming_trials(seed, trials, **kw)
    report.properties.append(_property(
        "streaming output matches offline", [r.seed for r in records if not r.equiv_ok], len(records),
        f"max abs diff {max(r.equiv_abs for r in records):.2e}, rtol {STREAM_RTOL:g} atol {STREAM_ATOL:g}"))
    report.properties.append(_property(
        "any two chunk partitions agree", [r.seed for r in records if r.chunk_diff > CHUNK_TOL],
        len(records), f"max diff {max(r.chunk_diff for r in records):.2e}, tol {CHUNK_TOL:g}"))
    report.seconds = time.perf_counter() - start
    return report


# ---- dsp ----------------------------------------------------------------------

def roundtrip_error(seed, cfg=dsp.StftConfig()):
    """Max relative error of ``istft(stft(x))`` on samples covered by a full window sum."""
    rng = np.random.default_rng(seed)
    length = int(rng.integers(cfg.win_len, 4 * cfg.sample_rate))
    x = rng.uniform(-1, 1, length).astype(np.float32)
    y = dsp.istft(dsp.stft(x, cfg), cfg, length)
    cover = covered_mask(length, cfg)
    err = np.abs(y[cover] - x[cover].astype(np.float64))
    return float(err.max() / np.abs(x[cover]).max())


def covered_mask(length, cfg):
    """Samples whose squared-window sum reaches the steady-state value."""
    wsum = dsp.window_sum(cfg.n_frames(length), cfg)[:length]
    return wsum >= wsum.max() * (1 - 1e-9)


def cola_deviation(cfg=dsp.StftConfig()):
    """Max deviation of the hop-shifted Hann sum from its mean (analysis window)."""
    w = dsp.hann_window(cfg.win_len)
    total = w.reshape(-1, cfg.hop).sum(axis=0)
    return float(np.abs(total - total.mean()).max() / total.mean())


def suite_dsp(seed=0, trials=100):
    start = time.perf_counter()
    report = SuiteReport("dsp")
    errs = [(roundtrip_error(_trial_seed(seed, t)), _trial_seed(seed, t)) for t in range(trials)]
    bad = [s for e, s in errs if e > 1e-6]
    report.properties.append(_property("istft(stft(x)) round trip", bad, trials,
                                       f"max rel err {max(e for e, _ in errs):.2e}, tol 1e-6"))
    dev = cola_deviation()
    report.properties.append(PropertyResult("Hann COLA constant sum", dev <= 1e-6, f"deviation {dev:.2e}"))
    report.seconds = time.perf_counter() - start
    return report


# ---- loss ---------------------------------------------------------------------

def brute_force_pit(ests, refs, metric):
    """Reference search: score every permutation from scratch."""

    fn = metrics.metric_fn(metric)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(len(refs))):
        loss = float(np.mean([-fn(ests[perm[c]], refs[c]) for c in range(len(refs))]))
        if loss < best:
            best, best_perm = loss, perm
    return best, best_perm


def suite_loss(seed=0, trials=50):
    start = time.perf_counter()
    report = SuiteReport("loss")
    bad = []
    for t in range(trials):
        s = _trial_seed(seed, t)
        rng = np.random.default_rng(s)
        n_spk = 2 + t % 2
        refs = rng.standard_normal((n_spk, 256))
        ests = refs[rng.permutation(n_spk)] + 0.5 * rng.standard_normal((n_spk, 256))
        for metric in metrics.METRICS:
            if metrics.pit_resolve(ests, refs, "neg_" + metric) != brute_force_pit(ests, refs, metric):
                bad.append(s)
                break
    report.properties.append(_property("pit_resolve equals factorial search (C=2,3)", bad, trials))
    bad = []
    for t in range(trials):
        s = _trial_seed(seed, t)
        rng = np.random.default_rng(s)
        ref = rng.standard_normal(128)
        alpha = float(rng.uniform(0.01, 100)) * (1 if t % 2 else -1)
        if metrics.si_snr_db(alpha * ref, ref) != metrics.CLAMP_DB:
            bad.append(s)
    report.properties.append(_property("si_snr(alpha * ref, ref) hits the clamp", bad, trials))
    hand = metrics.snr_db([1, 0, 0, 0], [1, 0, 0, 1])
    report.properties.append(PropertyResult(
        "snr hand case 10 log10(2)", abs(hand - 10 * np.log10(2)) <= 1e-6, f"{hand:.7f} dB"))
    report.seconds = time.perf_counter() - start
    return report


SUITES = {
    "causality": suite_causality,
    "streaming": suite_streaming,
    "dsp": suite_dsp,
    "loss": suite_loss,
}
