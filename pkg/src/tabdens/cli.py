"""Command-line entry point.

Subcommands: train, density, sample-joint, calibrate, summarize,
report-params.  Every run is seedable; when --seed is omitted a fresh seed is
drawn and logged to stderr so the run stays reconstructible.  Exit codes:
0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import inference as inf
from . import training as trn
from .data import FeatureRegistry, load_csv, split_rows
from .errors import TabdensError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract here is exit 1.
    def error(self, message):
        raise _UsageError(message)


def parse_condition_flags(pairs: list[str], registry: FeatureRegistry) -> list[tuple[str, float]]:
    """NAME=VALUE strings to ordered, validated (name, value) pairs."""
    out = []
    for raw in pairs:
        if "=" not in raw:
            raise _UsageError(f"condition {raw!r} is not NAME=VALUE")
        name, text = raw.split("=", 1)
        name = name.strip()
        registry.id_of(name)
        try:
            value = float(text)
        except ValueError:
            raise _UsageError(f"condition {raw!r}: cannot parse value {text!r}") from None
        out.append((name, value))
    return out


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":", 1)
        return float(lo), float(hi)
    except ValueError:
        raise _UsageError(f"range {text!r} is not LO:HI") from None


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = int(np.random.SeedSequence().entropy) % 2**63
        print(f"seed: {seed}", file=sys.stderr)
    return seed


def _build_parser() -> _Parser:
    parser = _Parser(prog="tabdens", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a CSV dataset")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(trn.PRESETS))
    p.add_argument("--dataset", help="CSV file with a header row")
    p.add_argument("--checkpoint", help="where to write the trained model")
    p.add_argument("--seed", type=int)

    def query_flags(p, with_n=True):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--request", action="append", required=True,
                       help="feature to estimate (repeatable where ordered)")
        p.add_argument("--cond", action="append", default=[], metavar="NAME=VALUE")
        if with_n:
            p.add_argument("--n", type=int, default=1024, help="samples to draw")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("density", help="estimate one conditional density")
    query_flags(p)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--range", metavar="LO:HI")
    p.add_argument("--out", help="histogram TSV path (stdout when omitted)")
    p.add_argument("--plot", action="store_true", help="also render a PNG next to --out")

    p = sub.add_parser("summarize", help="print median and robust spread")
    query_flags(p)

    p = sub.add_parser("sample-joint", help="sequential multi-feature sampling")
    query_flags(p)
    p.add_argument("--out", help="joint-sample TSV path (stdout when omitted)")
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("calibrate", help="quantile calibration on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True,
                   help="the training CSV; the held-out split is recomputed")
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--n", type=int, default=256, help="chains per trial")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report-params", help="parameter counts per stage")
    p.add_argument("--checkpoint", required=True)
    return parser


def _cmd_train(args) -> int:
    overrides = dict(parse_config_values(args.config)) if args.config else {}
    preset = args.preset or overrides.pop("preset", None)
    for key in ("dataset", "checkpoint", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if "seed" not in overrides:
        overrides["seed"] = _resolve_seed(None)
    config = trn.make_config(preset, **overrides)
    if config.dataset is None:
        raise _UsageError("train needs --dataset (or a dataset key in --config)")
    ckpt = trn.train(config)
    final = ckpt.history[-1][2] if ckpt.history else float("nan")
    print(f"trained {config.epochs} epochs, final mean loss {final:.4f}")
    if config.checkpoint:
        print(f"checkpoint: {config.checkpoint}")
    return 0


def parse_config_values(path) -> dict:
    return trn.parse_config_file(path)


def _plot_path(out: str) -> str:
    stem = out.rsplit(".", 1)[0] if "." in out.rsplit("/", 1)[-1] else out
    return stem + ".png"


def _cmd_density(args) -> int:
    ckpt = trn.load_checkpoint(args.checkpoint)
    conditions = parse_condition_flags(args.cond, ckpt.registry)
    if len(args.request) != 1:
        raise _UsageError("density takes exactly one --request")
    rng = np.random.default_rng(_resolve_seed(args.seed))
    est = inf.estimate_density(ckpt, conditions, args.request[0], args.n, rng)
    rng_range = _parse_range(args.range) if args.range else None
    text = inf.export_histogram(est, args.bins, rng_range, args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(f"wrote {args.out}")
        if args.plot:
            from . import plots
            left, right, density = inf.read_histogram(args.out)
            png = _plot_path(args.out)
            plots.plot_density(est, left, right, density, png)
            print(f"wrote {png}")
    print(f"median\t{est.median!r}", file=sys.stderr)
    print(f"robust_std\t{est.robust_std!r}", file=sys.stderr)
    return 0


def _cmd_summarize(args) -> int:
    ckpt = trn.load_checkpoint(args.checkpoint)
    conditions = parse_condition_flags(args.cond, ckpt.registry)
    if len(args.request) != 1:
        raise _UsageError("summarize takes exactly one --request")
    rng = np.random.default_rng(_resolve_seed(args.seed))
    est = inf.estimate_density(ckpt, conditions, args.request[0], args.n, rng)
    print(f"request\t{est.feature}")
    for name, value in est.conditions:
        print(f"condition\t{name}={value!r}")
    print(f"n\t{est.samples.size}")
    print(f"median\t{est.median!r}")
    print(f"robust_std\t{est.robust_std!r}")
    return 0


def _cmd_sample_joint(args) -> int:
    ckpt = trn.load_checkpoint(args.checkpoint)
    conditions = parse_condition_flags(args.cond, ckpt.registry)
    rng = np.random.default_rng(_resolve_seed(args.seed))
    draws = inf.sequential_joint_sample_batch(ckpt, args.request, conditions,
                                              rng, n_draws=args.n)
    lines = ["\t".join(args.request)]
    for row in draws:
        lines.append("\t".join(repr(float(v)) for v in row))
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
        if args.plot:
            from . import plots
            png = _plot_path(args.out)
            plots.plot_joint(draws, args.request, png)
            print(f"wrote {png}")
    return 0


def _cmd_calibrate(args) -> int:
    ckpt = trn.load_checkpoint(args.checkpoint)
    table = load_csv(args.dataset)
    fraction = float(ckpt.config.get("holdout_fraction", 0.1))
    split_seed = int(ckpt.config.get("seed", 0))
    _, test_idx = split_rows(table.n_rows, fraction, split_seed)
    rng = np.random.default_rng(_resolve_seed(args.seed))
    report = inf.calibration_sweep(ckpt, table.values[test_idx], rng,
                                   trials=args.trials, n_samples=args.n,
                                   bins=args.bins, threads=args.threads)
    text = inf.format_calibration_report(report)
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
        if args.plot:
            from . import plots
            png = _plot_path(args.out)
            plots.plot_calibration(report, png)
            print(f"wrote {png}")
    return 0


def _cmd_report_params(args) -> int:
    ckpt = trn.load_checkpoint(args.checkpoint)
    sys.stdout.write(trn.format_parameter_report(trn.parameter_report(ckpt)))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "density": _cmd_density,
    "summarize": _cmd_summarize,
    "sample-joint": _cmd_sample_joint,
    "calibrate": _cmd_calibrate,
    "report-params": _cmd_report_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TabdensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
