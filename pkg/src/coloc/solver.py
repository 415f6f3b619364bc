"""Relative pose estimation by per-node nonlinear least squares.

With node 0 at the origin and node 1 at ``(d10, 0)``, every other node is
placed by minimising the sum of squared range residuals to those two
anchors. The minimiser is a Levenberg-Marquardt style damped Gauss-Newton
method written out for the two-unknown case, with exact curvature where it
helps and reflection across the anchor line to keep the seeded mirror
solution.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_2d_float, check_consistent_columns, check_nonnegative
from .geometry import (
    AXIS_NODE,
    CANONICAL_PAIRS,
    ORIGIN_NODE,
    NodeId,
    Position2D,
    RangingPair,
)

MIN_BASELINE = 0.01  # m
COLD_SEED_OFFSET = 0.1  # m, perpendicular offset of the fallback seed
_EYE2 = np.eye(2)


class SolverError(RuntimeError):
    pass


class SingularPointError(SolverError):
    """Jacobian requested at a point coincident with an anchor."""


class NumericalFailure(SolverError):
    pass


class DegenerateBaselineError(SolverError):
    pass


class IncompleteEpochError(SolverError):
    pass


@dataclass(frozen=True)
class ResidualSystem:
    unknown: NodeId
    anchor_positions: tuple[Position2D, Position2D]
    measured: tuple[float, float]

    def __post_init__(self):
        a0, a1 = self.anchor_positions
        if a0 == a1:
            raise SolverError("anchors must be distinct")
        if min(self.measured) < 0:
            raise SolverError("measured distances must be >= 0")

    @property
    def _arrays(self):
        a = np.array([[p.x, p.y] for p in self.anchor_positions])
        return a, np.asarray(self.measured, dtype=float)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.gradient_tolerance > 0 and self.step_tolerance > 0 and self.initial_damping > 0):
            raise ValueError("tolerances and damping must be > 0")


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    converged: bool
    reason: str
    cost: float
    gradient_norm: float
    cost_history: tuple[float, ...] = ()

    @property
    def residual_norm(self) -> float:
        return math.sqrt(self.cost)


@dataclass(frozen=True)
class PoseEstimate:
    positions: Mapping[NodeId, Position2D]
    residual_norm: float
    iterations: int
    converged: bool
    epoch: float = 0.0
    diagnostics: Mapping[NodeId, SolveDiagnostics] = field(default_factory=dict)


def _residuals(anchors: np.ndarray, measured: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.hypot(p[0] - anchors[:, 0], p[1] - anchors[:, 1]) - measured


def residuals(system: ResidualSystem, candidate: Position2D) -> np.ndarray:
    """Range residuals ``|candidate - anchor_i| - d_i`` for anchors 0 and 1."""
    a, d = system._arrays
    return _residuals(a, d, np.array([candidate.x, candidate.y]))


def _jacobian(anchors: np.ndarray, p: np.ndarray) -> np.ndarray:
    diff = p[None, :] - anchors
    rho = np.hypot(diff[:, 0], diff[:, 1])
    if np.any(rho == 0):
        raise SingularPointError(f"candidate ({p[0]}, {p[1]}) coincides with an anchor")
    return diff / rho[:, None]


def jacobian(system: ResidualSystem, candidate: Position2D) -> np.ndarray:
    a, _ = system._arrays
    return _jacobian(a, np.array([candidate.x, candidate.y]))


def _hessian(anchors, measured, p, J, r):
    """Damping base matrix: exact Hessian of half the cost when positive
    definite, else the Gauss-Newton term ``J^T J``.

    The curvature term matters when the range circles do not meet: the
    minimum then sits on the anchor baseline, where ``J^T J`` is nearly
    singular and pure Gauss-Newton crawls.
    """
    A = J.T @ J
    rho = np.hypot(p[0] - anchors[:, 0], p[1] - anchors[:, 1])
    w = r / rho
    # sum_i w_i (I - u_i u_i^T), with u_i the Jacobian rows
    H = A + w.sum() * _EYE2 - (J.T * w) @ J
    if H[0, 0] > 0 and H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0] > 0:
        return H
    return A


def _geodesic_correction(anchors, x, J, M, step):
    """Half the geodesic acceleration of ``step``, or zero if it is too large.

    Range residuals bend along circles; the second directional derivative
    ``(|v|^2 - (u_i . v)^2) / rho_i`` lets a step follow a curved valley
    instead of cutting across it.
    """
    rho = np.hypot(x[0] - anchors[:, 0], x[1] - anchors[:, 1])
    proj = J @ step
    curvature = (step @ step - proj * proj) / rho
    accel = np.linalg.solve(M, -(J.T @ curvature))
    if 2.0 * np.linalg.norm(accel) > 0.75 * np.linalg.norm(step):
        return 0.0 * step
    return 0.5 * accel


def _solve(anchors, measured, x0, config: SolverConfig):
    x = np.array(x0, dtype=float)
    r = _residuals(anchors, measured, x)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite cost at initial guess")
    history = [cost]
    lam = config.initial_damping
    reason = "max_iterations"
    gnorm = math.inf
    it = 0

    def tiny(step):
        return float(np.linalg.norm(step)) <= config.step_tolerance * (1.0 + float(np.linalg.norm(x)))

    # The cost is symmetric about the anchor line; iterates that cross it are
    # reflected back so the solve stays on the seed's side (no mirror jumps).
    base = anchors[1] - anchors[0]
    unit_normal = np.array([-base[1], base[0]]) / float(np.hypot(*base))
    side = np.sign(float(unit_normal @ (x - anchors[0])))

    def trial(step):
        x_new = x + step
        offset = float(unit_normal @ (x_new - anchors[0]))
        if side and np.sign(offset) == -side:
            x_new = x_new - 2.0 * offset * unit_normal
        r_new = _residuals(anchors, measured, x_new)
        c = float(r_new @ r_new)
        if not math.isfinite(c):
            raise NumericalFailure(f"non-finite cost at iteration {it}")
        return x_new, r_new, c

    while True:
        J = _jacobian(anchors, x)
        g = J.T @ r
        gnorm = float(np.linalg.norm(g))
        H = _hessian(anchors, measured, x, J, r)
        if gnorm <= config.gradient_tolerance:
            # small gradient: keep going only while an undamped step still pays
            reason = "gradient"
            if it >= config.max_iterations or cost == 0.0:
                break
            try:
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                break
            if tiny(step):
                break
            x_new, r_new, cost_new = trial(step)
            if not cost_new < cost:
                break
            it += 1
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            continue
        if it >= config.max_iterations:
            reason = "max_iterations"
            break
        it += 1
        accepted = False
        while True:
            M = H + lam * _EYE2
            step = np.linalg.solve(M, -g)
            if tiny(step):
                reason = "step"
                break
            step = step + _geodesic_correction(anchors, x, J, M, step)
            x_new, r_new, cost_new = trial(step)
            if cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / 10.0, 1e-12)
                history.append(cost)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    diag = SolveDiagnostics(
        iterations=it,
        converged=reason != "max_iterations",
        reason=reason,
        cost=cost,
        gradient_norm=gnorm,
        cost_history=tuple(history),
    )
    return x, diag


def solve_node(
    system: ResidualSystem, initial_guess: Position2D, config: SolverConfig | None = None
) -> tuple[Position2D, SolveDiagnostics]:
    """Minimise the two-range cost for one node from ``initial_guess``.

    Stops on a small cost gradient (once an undamped step no longer lowers
    the cost) or a negligible step, both counted as converged, or when
    ``max_iterations`` is reached. Rejected steps raise the damping tenfold
    and accepted ones lower it tenfold; only cost-decreasing steps are
    accepted. Steps carry a geodesic-acceleration correction so they bend
    along the range circles. Iterates never leave the side of the anchor
    line the guess starts on.
    """
    config = config or SolverConfig()
    a, d = system._arrays
    x, diag = _solve(a, d, (initial_guess.x, initial_guess.y), config)
    return Position2D(float(x[0]), float(x[1])), diag


def circle_intersection_oracle(system: ResidualSystem) -> list[Position2D]:
    """Closed-form intersection of the two range circles.

    Returns 0, 1 (tangent) or 2 points; with two points the first lies to
    the left of the directed baseline anchor0 -> anchor1 (``y > 0`` in the
    relative frame) and the second is its mirror image.
    """
    (x0, y0), (x1, y1) = ((p.x, p.y) for p in system.anchor_positions)
    r0, r1 = system.measured
    dx, dy = x1 - x0, y1 - y0
    base = math.hypot(dx, dy)
    if base > r0 + r1 or base < abs(r0 - r1):
        return []
    along = (r0 * r0 - r1 * r1 + base * base) / (2 * base)
    h2 = r0 * r0 - along * along
    ux, uy = dx / base, dy / base
    mx, my = x0 + along * ux, y0 + along * uy
    if h2 <= 0:
        return [Position2D(mx, my)]
    h = math.sqrt(h2)
    # left normal of the baseline is (-uy, ux)
    return [Position2D(mx - h * uy, my + h * ux), Position2D(mx + h * uy, my - h * ux)]


def cold_seed(system: ResidualSystem) -> Position2D:
    """Upper circle-intersection point, else baseline midpoint nudged upward."""
    pts = circle_intersection_oracle(system)
    if pts:
        return pts[0]
    a0, a1 = system.anchor_positions
    dx, dy = a1.x - a0.x, a1.y - a0.y
    base = math.hypot(dx, dy)
    return Position2D(
        (a0.x + a1.x) / 2 - COLD_SEED_OFFSET * dy / base,
        (a0.y + a1.y) / 2 + COLD_SEED_OFFSET * dx / base,
    )


def estimate_poses(
    measurements: Mapping[RangingPair, float],
    config: SolverConfig | None = None,
    previous: PoseEstimate | None = None,
    epoch: float = 0.0,
) -> PoseEstimate:
    """One epoch of relative positioning for the canonical four-node network."""
    config = config or SolverConfig()
    missing = [p.label for p in CANONICAL_PAIRS if p not in measurements]
    if missing:
        raise IncompleteEpochError(f"epoch {epoch}: missing {', '.join(missing)}")
    d10 = float(measurements[CANONICAL_PAIRS[0]])
    if not d10 >= MIN_BASELINE:
        raise DegenerateBaselineError(f"d10 = {d10} m is below {MIN_BASELINE} m")

    origin = Position2D(0.0, 0.0)
    axis = Position2D(d10, 0.0)
    positions = {ORIGIN_NODE: origin, AXIS_NODE: axis}
    diagnostics = {}
    for node in (2, 3):
        system = ResidualSystem(
            node,
            (origin, axis),
            (float(measurements[RangingPair(node, 0)]), float(measurements[RangingPair(node, 1)])),
        )
        guess = None
        if previous is not None:
            prev_diag = previous.diagnostics.get(node)
            if prev_diag is None or prev_diag.converged:
                guess = previous.positions.get(node)
        if guess is None:
            guess = cold_seed(system)
        positions[node], diagnostics[node] = solve_node(system, guess, config)
    cost = sum(d.cost for d in diagnostics.values())
    return PoseEstimate(
        positions=positions,
        residual_norm=math.sqrt(cost),
        iterations=max(d.iterations for d in diagnostics.values()),
        converged=all(d.converged for d in diagnostics.values()),
        epoch=float(epoch),
        diagnostics=diagnostics,
    )


def estimate_sequence(
    epochs: Iterable[tuple[float, Mapping[RangingPair, float]]],
    config: SolverConfig | None = None,
    warm_start: bool = True,
) -> list[PoseEstimate]:
    out: list[PoseEstimate] = []
    prev = None
    for t, meas in epochs:
        est = estimate_poses(meas, config, prev if warm_start else None, epoch=t)
        out.append(est)
        prev = est
    return out


# -- persistence ---------------------------------------------------------------

POSE_HEADER = ("epoch_time_s", "node", "x_m", "y_m", "residual_norm", "converged", "iterations")


def write_poses_csv(path: str | Path, poses: Iterable[PoseEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_HEADER)
        for est in poses:
            for node, pos in sorted(est.positions.items()):
                d = est.diagnostics.get(node)
                w.writerow([
                    repr(est.epoch), node, repr(pos.x), repr(pos.y),
                    repr(d.residual_norm) if d else "0.0",
                    int(d.converged) if d else 1,
                    d.iterations if d else 0,
                ])


def read_poses_csv(path: str | Path) -> list[tuple[float, dict[NodeId, Position2D]]]:
    """Per-epoch position maps, in file order."""
    epochs: dict[float, dict[NodeId, Position2D]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["epoch_time_s"])
            epochs.setdefault(t, {})[int(row["node"])] = Position2D(float(row["x_m"]), float(row["y_m"]))
    return list(epochs.items())


# -- estimator -----------------------------------------------------------------


class RelativePoseEstimator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`estimate_poses`.

    Rows of ``X`` are epochs; columns are the ranges ``d10, d20, d21, d30,
    d31`` in metres. ``predict`` returns ``(n_epochs, 8)`` coordinates laid out
    as ``x0, y0, x1, y1, x2, y2, x3, y3``. Rows are processed in order and,
    with ``warm_start``, each solve is seeded from the previous epoch.
    """

    def __init__(self, max_iterations=50, gradient_tolerance=1e-10, step_tolerance=1e-12,
                 initial_damping=1e-3, warm_start=True):
        self.max_iterations = max_iterations
        self.gradient_tolerance = gradient_tolerance
        self.step_tolerance = step_tolerance
        self.initial_damping = initial_damping
        self.warm_start = warm_start

    def _config(self):
        return SolverConfig(self.max_iterations, self.gradient_tolerance,
                            self.step_tolerance, self.initial_damping)

    def fit(self, X, y=None):
        X = check_nonnegative(as_2d_float(X))
        check_consistent_columns(X, len(CANONICAL_PAIRS))
        self._config()
        self.n_features_in_ = X.shape[1]
        self.pairs_ = CANONICAL_PAIRS
        return self

    def estimate(self, X, epochs: Sequence[float] | None = None) -> list[PoseEstimate]:
        X = check_nonnegative(as_2d_float(X))
        check_consistent_columns(X, len(CANONICAL_PAIRS))
        times = range(len(X)) if epochs is None else epochs
        rows = ((float(t), dict(zip(CANONICAL_PAIRS, map(float, row)))) for t, row in zip(times, X))
        return estimate_sequence(rows, self._config(), self.warm_start)

    def predict(self, X):
        return poses_to_array(self.estimate(X))

    transform = predict

    def score(self, X, y):
        """Negative RMS Euclidean node error against true coordinates ``y``."""
        pred = self.predict(X).reshape(len(X), -1, 2)
        truth = np.asarray(y, dtype=float).reshape(pred.shape)
        err = np.hypot(*(pred - truth).transpose(2, 0, 1))
        return -float(np.sqrt(np.mean(err**2)))


def poses_to_array(poses: Sequence[PoseEstimate], nodes=(0, 1, 2, 3)) -> np.ndarray:
    out = np.empty((len(poses), 2 * len(nodes)))
    for i, est in enumerate(poses):
        for j, node in enumerate(nodes):
            p = est.positions[node]
            out[i, 2 * j], out[i, 2 * j + 1] = p.x, p.y
    return out
