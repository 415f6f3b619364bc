"""Static-geometry positioning campaigns and their error statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bus import Bus, LoopbackSink, ranging_topic, serve_stream
from .calibration import CalibrationModel, read_calibration_csv
from .geometry import (
    FrameConvention,
    NodeId,
    Position2D,
    RangingPair,
    Shape,
    canonical_geometry,
    canonical_topology,
    format_geometry,
    load_geometry,
)
from .solver import PoseEstimate, SolverConfig, SolverError, estimate_poses, read_poses_csv, write_poses_csv
from .twr import (
    DEFAULT_PAIR_BIAS,
    ClockModel,
    ErrorModel,
    RangeMeasurement,
    RangingEngine,
    TransportError,
    run_ranging_schedule,
    write_measurements_csv,
)

DECILES = tuple(round(0.1 * k, 1) for k in range(1, 10))
NODES = (0, 1, 2, 3)


class ExperimentError(RuntimeError):
    pass


def euclidean_error(estimate: Position2D, truth: Position2D) -> float:
    return math.hypot(estimate.x - truth.x, estimate.y - truth.y)


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


@dataclass(frozen=True)
class NodeErrorStats:
    rmse: float
    max_error: float
    cdf: np.ndarray  # sorted error samples
    box: BoxStats

    @property
    def cdf_probabilities(self) -> np.ndarray:
        n = len(self.cdf)
        return np.arange(1, n + 1) / n


@dataclass(frozen=True)
class ErrorSummary:
    config: str
    nodes: Mapping[NodeId, NodeErrorStats]

    @property
    def mean_rmse(self) -> float:
        """Row mean over all nodes, node 0's zero included."""
        return float(np.mean([s.rmse for s in self.nodes.values()]))

    @property
    def mean_rmse_excluding_origin(self) -> float:
        return float(np.mean([s.rmse for n, s in self.nodes.items() if n != 0]))


@dataclass
class RunRecord:
    config: dict
    truth: dict[NodeId, Position2D]
    poses: list[PoseEstimate] = field(default_factory=list)
    measurements: list[RangeMeasurement] = field(default_factory=list)
    # position maps, used when a run is reloaded from disk without diagnostics
    positions: list[tuple[float, dict[NodeId, Position2D]]] | None = None

    def epoch_positions(self) -> list[tuple[float, Mapping[NodeId, Position2D]]]:
        if self.positions is not None:
            return self.positions
        return [(p.epoch, p.positions) for p in self.poses]

    @property
    def name(self) -> str:
        return str(self.config.get("shape", "run"))


def node_errors(run: RunRecord) -> dict[NodeId, np.ndarray]:
    epochs = run.epoch_positions()
    out = {}
    for node in sorted(run.truth):
        truth = run.truth[node]
        out[node] = np.array([euclidean_error(pos[node], truth) for _t, pos in epochs])
    return out


def box_stats(errors: np.ndarray) -> BoxStats:
    q1, med, q3 = np.percentile(errors, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = errors[(errors >= lo_fence) & (errors <= hi_fence)]
    outliers = np.sort(errors[(errors < lo_fence) | (errors > hi_fence)])
    return BoxStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                    tuple(float(v) for v in outliers))


def summarize(run: RunRecord) -> ErrorSummary:
    errs = node_errors(run)
    if not run.epoch_positions():
        raise ExperimentError("cannot summarize a run with no epochs")
    nodes = {}
    for node, e in errs.items():
        nodes[node] = NodeErrorStats(
            rmse=math.sqrt(float(np.mean(e * e))),
            max_error=float(e.max()),
            cdf=np.sort(e),
            box=box_stats(e),
        )
    return ErrorSummary(run.name, nodes)


# -- running ------------------------------------------------------------------


def group_epochs(measurements: Sequence[RangeMeasurement]):
    """Bucket ranges by epoch timestamp, in time order."""
    epochs: dict[float, dict[RangingPair, float]] = {}
    for m in measurements:
        epochs.setdefault(m.timestamp, {})[m.pair] = m.distance
    return sorted(epochs.items())


def apply_calibrations(epochs, calibration: Mapping[RangingPair, CalibrationModel] | None):
    if not calibration:
        return epochs
    out = []
    for t, meas in epochs:
        out.append((t, {p: calibration[p].apply(d) if p in calibration else d for p, d in meas.items()}))
    return out


def _collect_inproc(topology, positions, engine, rate, duration):
    received: list[RangeMeasurement] = []
    run_ranging_schedule(topology, positions, engine, rate, duration, received.append)
    return received


def _collect_loopback(topology, positions, engine, rate, duration, listen="127.0.0.1:0", timeout=30.0):
    bus = Bus()
    tags = topology.tags
    n_expected = {t: len(topology.pairs_for_tag(t)) * math.floor(rate * duration + 1e-9) for t in tags}
    subs = {t: bus.subscribe(ranging_topic(t), maxsize=None) for t in tags}
    server = serve_stream(bus, listen)
    try:
        with LoopbackSink(server.address, tags) as sink:
            run_ranging_schedule(topology, positions, engine, rate, duration, sink)
        for t, sub in subs.items():
            if not sub.wait_for(n_expected[t], timeout):
                raise TransportError(
                    f"tag {t}: received {sub.received} of {n_expected[t]} measurements"
                )
    finally:
        server.close()
    received = []
    for t in tags:
        received.extend(subs[t].drain())
    return received


def default_error_model(sigma: float = 0.02, seed: int = 42) -> ErrorModel:
    return ErrorModel(gaussian_sigma=sigma, pair_bias=dict(DEFAULT_PAIR_BIAS), seed=seed)


def run_experiment(
    shape: Shape | str = Shape.SQUARE,
    scale: float = 2.0,
    duration: float = 120.0,
    rate: float = 10.0,
    error: ErrorModel | None = None,
    clocks: Mapping[NodeId, ClockModel] | None = None,
    calibration: Mapping[RangingPair, CalibrationModel] | str | Path | None = None,
    seed: int = 42,
    out_dir: str | Path | None = None,
    transport: str = "inproc",
    solver: SolverConfig | None = None,
    listen: str = "127.0.0.1:0",
) -> tuple[RunRecord, ErrorSummary]:
    """Simulate one static campaign, estimate poses and evaluate them.

    ``seed`` overrides the error model's seed. With ``out_dir`` set, all
    run files are written there (see :func:`write_run`).
    """
    shape = Shape(shape)
    truth = canonical_geometry(shape, scale)
    topology = canonical_topology()
    error = replace(error or default_error_model(), seed=seed)
    engine = RangingEngine(error=error, clocks=dict(clocks or {}))
    if isinstance(calibration, (str, Path)):
        calibration = read_calibration_csv(calibration)
    solver = solver or SolverConfig()

    config = {
        "shape": shape.value,
        "scale": scale,
        "rate_hz": rate,
        "duration_s": duration,
        "seed": seed,
        "transport": transport,
        "noise": {
            "gaussian_sigma": error.gaussian_sigma,
            "outlier_prob": error.outlier_prob,
            "outlier_sigma": error.outlier_sigma,
            "pair_bias": {p.label: list(v) for p, v in sorted(error.pair_bias.items())},
        },
        "clocks": {str(n): [c.offset, c.drift, c.tick_resolution] for n, c in sorted(engine.clocks.items())},
        "calibration": None if not calibration else {
            p.label: [m.slope, m.intercept] for p, m in sorted(calibration.items())
        },
        "solver": {
            "max_iterations": solver.max_iterations,
            "gradient_tolerance": solver.gradient_tolerance,
            "step_tolerance": solver.step_tolerance,
            "initial_damping": solver.initial_damping,
        },
    }

    if transport == "inproc":
        received = _collect_inproc(topology, truth, engine, rate, duration)
    elif transport == "loopback":
        received = _collect_loopback(topology, truth, engine, rate, duration, listen)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    record = RunRecord(config=config, truth=truth, measurements=received)
    epochs = apply_calibrations(group_epochs(received), calibration)
    try:
        # estimate epoch by epoch so a failure keeps the poses solved so far
        prev = None
        for t, meas in epochs:
            prev = estimate_poses(meas, solver, prev, epoch=t)
            record.poses.append(prev)
    except SolverError as exc:
        if out_dir is not None:
            write_run(out_dir, record, None)
        raise ExperimentError(f"{shape.value} run failed at epoch {len(record.poses)}: {exc}") from exc

    summary = summarize(record)
    if out_dir is not None:
        write_run(out_dir, record, summary)
    return record, summary


# -- persistence ----------------------------------------------------------------

SUMMARY_HEADER = ("config", "node", "rmse_m", "max_err_m", "median_m", "q1_m", "q3_m")


def write_summary_csv(path, summaries: Sequence[ErrorSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            for node, st in sorted(s.nodes.items()):
                w.writerow([s.config, node, repr(st.rmse), repr(st.max_error),
                            repr(st.box.median), repr(st.box.q1), repr(st.box.q3)])
            w.writerow([s.config, "mean", repr(s.mean_rmse), "", "", "", ""])
            w.writerow([s.config, "mean_excl0", repr(s.mean_rmse_excluding_origin), "", "", "", ""])


def read_summary_csv(path) -> dict[tuple[str, str], dict]:
    with open(path, newline="") as fh:
        return {(r["config"], r["node"]): r for r in csv.DictReader(fh)}


def write_run(out_dir, record: RunRecord, summary: ErrorSummary | None) -> Path:
    """Persist a run: config, truth geometry, ranges, poses and plot data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(record.config, indent=2, sort_keys=True) + "\n")
    (out / "geometry.txt").write_text(format_geometry(canonical_topology(), record.truth))
    write_measurements_csv(out / "measurements.csv", record.measurements)
    write_poses_csv(out / "poses.csv", record.poses)
    if summary is None:
        return out
    write_summary_csv(out / "summary.csv", [summary])
    with open(out / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "error_m", "cum_prob"])
        for node, st in sorted(summary.nodes.items()):
            for e, p in zip(st.cdf, st.cdf_probabilities):
                w.writerow([node, repr(float(e)), repr(float(p))])
    with open(out / "box.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "median_m", "q1_m", "q3_m", "whisker_low_m", "whisker_high_m", "n_outliers"])
        for node, st in sorted(summary.nodes.items()):
            b = st.box
            w.writerow([node, repr(b.median), repr(b.q1), repr(b.q3),
                        repr(b.whisker_low), repr(b.whisker_high), len(b.outliers)])
    with open(out / "x_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch_time_s", "node", "x_m", "x_true_m"])
        for t, pos in record.epoch_positions():
            for node in sorted(pos):
                w.writerow([repr(t), node, repr(pos[node].x), repr(record.truth[node].x)])
    return out


def load_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    config = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    _topo, truth = load_geometry(run_dir / "geometry.txt")
    problems = FrameConvention().check(truth)
    if problems:
        raise ExperimentError(f"{run_dir}: ground truth violates frame convention: {problems}")
    positions = read_poses_csv(run_dir / "poses.csv")
    return RunRecord(config=config, truth=truth, positions=positions)


# -- comparison -----------------------------------------------------------------


@dataclass(frozen=True)
class NodeComparison:
    node: NodeId
    quantiles_a: tuple[float, ...]
    quantiles_b: tuple[float, ...]
    verdict: str  # "A", "B", "tie" or "none"


@dataclass(frozen=True)
class DominanceReport:
    quantile_levels: tuple[float, ...]
    nodes: Mapping[NodeId, NodeComparison]

    def dominates(self, which: str, nodes: Sequence[NodeId]) -> bool:
        return all(self.nodes[n].verdict == which for n in nodes)


def _verdict(qa: np.ndarray, qb: np.ndarray) -> str:
    if np.array_equal(qa, qb):
        return "tie"
    if np.all(qa <= qb):
        return "A"
    if np.all(qb <= qa):
        return "B"
    return "none"


def compare_runs(run_a: RunRecord, run_b: RunRecord, levels: Sequence[float] = DECILES) -> DominanceReport:
    """Quantile-by-quantile comparison of per-node error distributions.

    Verdict ``"A"`` means run A's error quantiles are all at or below run
    B's, with at least one strictly below (A's empirical CDF dominates).
    """
    if run_a.truth != run_b.truth:
        raise ExperimentError("runs use different geometries")
    ea, eb = node_errors(run_a), node_errors(run_b)
    if any(len(ea[n]) != len(eb[n]) for n in ea):
        raise ExperimentError("runs have different numbers of epochs")
    levels = tuple(levels)
    nodes = {}
    for node in sorted(ea):
        qa = np.quantile(ea[node], levels)
        qb = np.quantile(eb[node], levels)
        nodes[node] = NodeComparison(node, tuple(map(float, qa)), tuple(map(float, qb)), _verdict(qa, qb))
    return DominanceReport(levels, nodes)

