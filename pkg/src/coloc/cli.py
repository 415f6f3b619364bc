"""``coloc`` command line: calibrate, run, eval, compare."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .calibration import (
    DEFAULT_SAMPLES_PER_POINT,
    read_calibration_csv,
    run_calibration_campaign,
    write_calibration_csv,
)
from .geometry import CANONICAL_PAIRS, RangingPair, Shape
from .harness import (
    ExperimentError,
    compare_runs,
    default_error_model,
    load_run,
    read_summary_csv,
    run_experiment,
    summarize,
)
from .twr import RangingEngine, load_noise_config

log = logging.getLogger("coloc")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pairs(text: str) -> list[RangingPair]:
    if text == "all":
        return list(CANONICAL_PAIRS)
    out = []
    for item in text.split(","):
        tag, sep, anchor = item.strip().partition(":")
        if not sep or not tag.isdigit() or not anchor.isdigit():
            raise argparse.ArgumentTypeError(f"pairs must be 'all' or tag:anchor,..., got {item!r}")
        out.append(RangingPair(int(tag), int(anchor)))
    return out


def _noise(args):
    base = default_error_model(seed=args.seed)
    if args.noise:
        error, clocks = load_noise_config(args.noise, base)
    else:
        error, clocks = base, {}
    if args.sigma is not None:
        error = replace(error, gaussian_sigma=args.sigma)
    return error, clocks


def cmd_calibrate(args) -> int:
    error, clocks = _noise(args)
    engine = RangingEngine(error=error, clocks=clocks)
    models = [run_calibration_campaign(p, engine, args.ref, args.samples) for p in args.pairs]
    write_calibration_csv(args.out, models)
    for m in models:
        print(f"{m.pair.label}: m_c={m.slope:.6f} q_c={m.intercept:.6f} m residual_rms={m.residual_rms:.2e} m")
    return 0


def _print_summary(summary, stream=sys.stdout) -> None:
    print(f"{'config':<14}{'node':>5}{'rmse_m':>10}{'max_m':>10}{'median_m':>10}", file=stream)
    for node, st in sorted(summary.nodes.items()):
        print(f"{summary.config:<14}{node:>5}{st.rmse:>10.4f}{st.max_error:>10.4f}{st.box.median:>10.4f}",
              file=stream)
    print(f"{summary.config:<14}{'mean':>5}{summary.mean_rmse:>10.4f}"
          f"   (excluding node 0: {summary.mean_rmse_excluding_origin:.4f})", file=stream)


def cmd_run(args) -> int:
    error, clocks = _noise(args)
    calib = read_calibration_csv(args.calib) if args.calib else None
    _record, summary = run_experiment(
        shape=args.shape, scale=args.scale, duration=args.duration, rate=args.rate,
        error=error, clocks=clocks, calibration=calib, seed=args.seed,
        out_dir=args.out, transport=args.transport, listen=args.listen,
    )
    _print_summary(summary)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    run = load_run(args.dir)
    summary = summarize(run)
    _print_summary(summary)
    stored = Path(args.dir) / "summary.csv"
    if stored.exists():
        rows = read_summary_csv(stored)
        for node, st in summary.nodes.items():
            row = rows.get((summary.config, str(node)))
            if row is None or abs(float(row["rmse_m"]) - st.rmse) > 1e-12:
                print(f"summary.csv disagrees with poses.csv for node {node}", file=sys.stderr)
                return 1
    return 0


def cmd_compare(args) -> int:
    report = compare_runs(load_run(args.dir_a), load_run(args.dir_b))
    names = {"A": args.dir_a, "B": args.dir_b, "tie": "tie", "none": "no dominance"}
    for node, cmp_ in sorted(report.nodes.items()):
        print(f"node {node}: {names[cmp_.verdict]}")
        qa = " ".join(f"{v:.4f}" for v in cmp_.quantiles_a)
        qb = " ".join(f"{v:.4f}" for v in cmp_.quantiles_b)
        print(f"  A deciles: {qa}\n  B deciles: {qb}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coloc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def noise_opts(p):
        p.add_argument("--noise", type=Path, help="noise/bias/clock config file")
        p.add_argument("--sigma", type=float, help="override gaussian range noise (m)")
        p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("calibrate", help="run calibration campaigns and write calib CSV")
    p.add_argument("--pairs", type=_pairs, default="all", help="'all' or tag:anchor list")
    p.add_argument("--ref", type=_floats, default=[1.0, 2.0, 3.0, 4.0], help="reference distances (m)")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES_PER_POINT)
    p.add_argument("--out", type=Path, required=True)
    noise_opts(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="simulate a static campaign and evaluate it")
    p.add_argument("--shape", choices=[s.value for s in Shape], default="square")
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--calib", type=Path)
    p.add_argument("--transport", choices=["inproc", "loopback"], default="inproc")
    p.add_argument("--listen", default="127.0.0.1:0", help="loopback server address host:port")
    p.add_argument("--out", type=Path, required=True)
    noise_opts(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="recompute the error summary of a run directory")
    p.add_argument("dir", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="CDF dominance between two run directories")
    p.add_argument("dir_a", type=Path)
    p.add_argument("dir_b", type=Path)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ExperimentError, OSError, ValueError, RuntimeError) as exc:
        print(f"coloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
