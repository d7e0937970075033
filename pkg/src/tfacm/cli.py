"""``tfacm`` command line: separate, verify, metrics, bench and info.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
``TFACM_THREADS`` caps the BLAS thread pools.
"""

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dsp, metrics, verify
from .accounting import accounting_report, estimate_macs
from .config import resolve_config
from .separator import separate_offline
from .streaming import stream_flush, stream_init, stream_push, warm_up
from .weights import WeightFormatError, count_params, init_weights, load

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unusable files; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _model(args):
    try:
        cfg = resolve_config(args.model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if getattr(args, "weights", None):
        return load(args.weights, cfg)
    return init_weights(cfg, args.seed)


def _chunk_samples(chunk_ms, sample_rate):
    n = int(round(chunk_ms * sample_rate / 1000.0))
    if n < 1:
        raise UsageError(f"--chunk-ms {chunk_ms} is shorter than one sample")
    return n


def _stream(x, model, chunk, on_push=None):
    state = stream_init(model)
    outs = []
    for pos in range(0, len(x), chunk):
        outs.append(stream_push(state, x[pos:pos + chunk]))
        if on_push:
            on_push(state)
    outs.append(stream_flush(state, len(x)))
    if on_push:
        on_push(state)
    return np.concatenate(outs, axis=1)


def cmd_separate(args):
    model = _model(args)
    rate = model.cfg.sample_rate
    x, _ = dsp.read_wav(args.input, expected_rate=rate)
    if args.stream:
        y = _stream(x, model, _chunk_samples(args.chunk_ms, rate))
    else:
        y = separate_offline(x, model)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for c, channel in enumerate(y, 1):
        path = out_dir / f"{stem}_spk{c}.wav"
        dsp.write_wav(path, channel, rate)
        print(path)
    return EXIT_OK


def cmd_verify(args):
    kw = {"seed": args.seed}
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError("--trials must be positive")
        kw["trials"] = args.trials
    if args.suite in ("causality", "streaming") and (args.weights or args.model):
        args.model = args.model or "small"
        kw["model"] = _model(args)
    report = verify.SUITES[args.suite](**kw)
    for line in report.lines():
        print(line)
    print(f"suite {args.suite}: {'PASS' if report.passed else 'FAIL'} in {report.seconds:.1f} s")
    return EXIT_OK if report.passed else EXIT_FAIL


def _speaker_files(directory, stem):
    files = sorted(Path(directory).glob(f"{stem}_spk*.wav"))
    return {int(p.stem.rsplit("_spk", 1)[1]): p for p in files if p.stem.rsplit("_spk", 1)[1].isdigit()}


def cmd_metrics(args):
    for d in (args.est_dir, args.ref_dir, args.mix_dir):
        if not Path(d).is_dir():
            raise UsageError(f"not a directory: {d}")
    stems = sorted(p.stem for p in Path(args.mix_dir).glob("*.wav"))
    if not stems:
        raise UsageError(f"no mixtures in {args.mix_dir}")
    report = metrics.EvalReport()
    problems = []
    for stem in stems:
        est, ref = _speaker_files(args.est_dir, stem), _speaker_files(args.ref_dir, stem)
        if not ref or set(est) != set(ref) or sorted(ref) != list(range(1, len(ref) + 1)):
            problems.append(f"{stem}: estimates {sorted(est)} vs references {sorted(ref)}")
            continue
        mix, rate = dsp.read_wav(Path(args.mix_dir) / f"{stem}.wav")
        ests = [dsp.read_wav(est[c], rate)[0] for c in sorted(est)]
        refs = [dsp.read_wav(ref[c], rate)[0] for c in sorted(ref)]
        if any(len(s) != len(mix) for s in ests + refs):
            problems.append(f"{stem}: signal lengths differ from the mixture")
            continue
        report.add(metrics.evaluate_utterance(stem, np.stack(ests), np.stack(refs), mix, args.metric))
    if problems:
        raise UsageError("unmatched files:\n  " + "\n  ".join(problems))
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"# sdr_i column: {report.sdr_label}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args):
    model = _model(args)
    cfg = model.cfg
    if args.seconds <= 0:
        raise UsageError("--seconds must be positive")
    x = np.random.default_rng(args.seed).uniform(-1, 1, int(args.seconds * cfg.sample_rate)).astype(np.float32)
    peak = [0]

    def track(state):
        peak[0] = max(peak[0], state.nbytes())

    times = []
    for _ in range(args.repeat):
        start = time.perf_counter()
        if args.stream:
            _stream(x, model, _chunk_samples(args.chunk_ms, cfg.sample_rate), track)
        else:
            separate_offline(x, model)
        times.append(time.perf_counter() - start)
    best = min(times)
    print(f"model: {cfg.preset}  mode: {'stream' if args.stream else 'offline'}  audio: {args.seconds:g} s")
    print(f"rtf: {best / args.seconds:.4f}  ({1000 * best / args.seconds:.2f} ms per audio second, best of {args.repeat})")
    if args.stream:
        print(f"peak stream state: {peak[0]} bytes")
    print(f"params: {count_params(cfg)}")
    print(f"macs: {estimate_macs(cfg, args.seconds) / args.seconds / 1e9:.2f} G/s")
    return EXIT_OK


def cmd_info(args):
    try:
        cfg = resolve_config(args.model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(cfg.dumps())
    for line in accounting_report(cfg):
        print(line)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="tfacm", description="Causal time-frequency speech separation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("separate", help="separate a mono WAV into one file per speaker")
    s.add_argument("--model", default="small", help="preset name or config file")
    s.add_argument("--weights", help="weights file (random weights from --seed when omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--in", dest="input", required=True, help="input WAV (mono PCM16)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--stream", action="store_true", help="use the streaming engine")
    s.add_argument("--chunk-ms", type=float, default=20.0, help="streaming push size")
    s.set_defaults(func=cmd_separate)

    v = sub.add_parser("verify", help="run a seeded invariant suite")
    v.add_argument("--suite", required=True, choices=sorted(verify.SUITES))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int)
    v.add_argument("--model", help="fix the weights to this preset or config (causality, streaming)")
    v.add_argument("--weights", help="weights file to certify (causality, streaming)")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("metrics", help="PIT-resolved SI-SNRi and SNR-based SDRi as CSV")
    m.add_argument("--est-dir", required=True, help="holds <stem>_spk<k>.wav estimates")
    m.add_argument("--ref-dir", required=True, help="holds <stem>_spk<k>.wav references")
    m.add_argument("--mix-dir", required=True, help="holds <stem>.wav mixtures")
    m.add_argument("--metric", choices=metrics.METRICS, default="si_snr", help="metric resolving the permutation")
    m.add_argument("--out", help="also write the CSV here")
    m.set_defaults(func=cmd_metrics)

    b = sub.add_parser("bench", help="wall-clock real-time factor and model size")
    b.add_argument("--model", default="small")
    b.add_argument("--weights")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--seconds", type=float, default=10.0)
    b.add_argument("--stream", action="store_true")
    b.add_argument("--chunk-ms", type=float, default=20.0)
    b.add_argument("--repeat", type=int, default=3, help="report the fastest of this many runs")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("info", help="resolved config, parameter and MAC counts")
    i.add_argument("--model", default="small")
    i.set_defaults(func=cmd_info)
    return p


def _thread_limit():
    value = os.environ.get("TFACM_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"TFACM_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"TFACM_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "repeat", 1) < 1:
            raise UsageError("--repeat must be positive")
        limit = _thread_limit()
        if args.command in ("separate", "verify", "bench"):
            warm_up()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        print(f"tfacm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, WeightFormatError) as exc:
        print(f"tfacm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
