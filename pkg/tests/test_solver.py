import math

import numpy as np
import pytest

from coloc.geometry import CANONICAL_PAIRS, FrameConvention, Position2D, RangingPair, canonical_geometry, true_distances
from coloc.geometry import canonical_topology
from coloc.solver import (
    DegenerateBaselineError,
    IncompleteEpochError,
    ResidualSystem,
    SingularPointError,
    SolverConfig,
    SolverError,
    circle_intersection_oracle,
    cold_seed,
    estimate_poses,
    estimate_sequence,
    jacobian,
    read_poses_csv,
    residuals,
    solve_node,
    write_poses_csv,
)

O, X2 = Position2D(0.0, 0.0), Position2D(2.0, 0.0)


def system(d0, d1, anchors=(O, X2), node=2):
    return ResidualSystem(node, anchors, (d0, d1))


def gdop(anchors, p):
    diff = np.asarray(p)[None, :] - np.array([[a.x, a.y] for a in anchors])
    J = diff / np.linalg.norm(diff, axis=1)[:, None]
    return math.sqrt(np.trace(np.linalg.inv(J.T @ J)))


# -- residuals & jacobian ---------------------------------------------------


def test_residual_examples():
    s = ResidualSystem(2, (Position2D(2, 0), Position2D(0, 2)), (math.sqrt(8), 2.0))
    assert residuals(s, Position2D(2, 2)) == pytest.approx([2 - math.sqrt(8), 0.0], abs=1e-15)
    sq = system(math.sqrt(8), 2.0)
    assert residuals(sq, Position2D(2, 2)) == pytest.approx([0.0, 0.0], abs=1e-15)


def test_jacobian_rows_are_unit_vectors():
    J = jacobian(system(1, 1), Position2D(2, 2))
    assert J == pytest.approx(np.array([[1 / math.sqrt(2), 1 / math.sqrt(2)], [0.0, 1.0]]))


def test_jacobian_singular_at_anchor():
    with pytest.raises(SingularPointError):
        jacobian(system(1, 1), Position2D(0.0, 0.0))


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(200):
        a = [Position2D(*rng.uniform(-5, 5, 2)) for _ in range(2)]
        p = rng.uniform(-5, 5, 2)
        if min(math.dist(p, (q.x, q.y)) for q in a) < 0.1:
            continue
        s = ResidualSystem(2, tuple(a), tuple(rng.uniform(0, 5, 2)))
        J = jacobian(s, Position2D(*p))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (residuals(s, Position2D(*(p + e))) - residuals(s, Position2D(*(p - e)))) / (2 * h)
            assert np.abs(J[:, k] - fd).max() < 1e-6


# -- solve_node -------------------------------------------------------------


def test_solve_square_node2():
    pos, diag = solve_node(system(math.sqrt(8), 2.0), Position2D(1.5, 1.5))
    assert math.dist((pos.x, pos.y), (2, 2)) < 1e-9
    assert diag.converged


def test_agrees_with_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 300:
        base = rng.uniform(0.2, 10)
        p = np.array([rng.uniform(-5, 15), rng.uniform(0.05, 10)])
        d0, d1 = math.hypot(*p), math.hypot(p[0] - base, p[1])
        s = system(d0, d1, (O, Position2D(base, 0.0)))
        upper = circle_intersection_oracle(s)[0]
        pos, diag = solve_node(s, cold_seed(s) if rng.random() < 0.5 else Position2D(base / 2, 0.1))
        assert diag.converged
        assert math.dist((pos.x, pos.y), (upper.x, upper.y)) < 1e-9
        checked += 1


def test_oracle_cases():
    assert circle_intersection_oracle(system(1.0, 1.0)) == [Position2D(1.0, 0.0)]
    assert circle_intersection_oracle(system(0.5, 0.5)) == []
    assert circle_intersection_oracle(system(5.0, 1.0)) == []
    up, down = circle_intersection_oracle(system(math.sqrt(2), math.sqrt(2)))
    assert (up.x, up.y) == pytest.approx((1.0, 1.0))
    assert (down.x, down.y) == pytest.approx((1.0, -1.0))


def test_disjoint_circles_converge_between_them():
    # 0.6 + 0.6 < 2: best fit is on the baseline, halfway along the gap
    pos, diag = solve_node(system(0.6, 0.6), cold_seed(system(0.6, 0.6)))
    assert diag.converged
    assert pos.x == pytest.approx(1.0, abs=1e-6)
    assert abs(pos.y) < 1e-4
    assert diag.cost == pytest.approx(2 * 0.4**2, rel=1e-6)


def test_noisy_solutions_within_gdop_band():
    rng = np.random.default_rng(3)
    sigma, inside, trials = 0.02, 0, 1000
    for _ in range(trials):
        truth = np.array([rng.uniform(-1, 3), rng.uniform(0.5, 3)])
        d0 = math.hypot(*truth) + rng.normal(0, sigma)
        d1 = math.hypot(truth[0] - 2, truth[1]) + rng.normal(0, sigma)
        s = system(d0, d1)
        pos, _ = solve_node(s, cold_seed(s))
        inside += math.dist((pos.x, pos.y), truth) <= 3 * gdop((O, X2), truth) * sigma
    assert inside >= 0.99 * trials


def test_monotone_descent():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s = system(*rng.uniform(0.5, 4, 2))
        _pos, diag = solve_node(s, Position2D(*rng.uniform(-3, 3, 2)))
        hist = np.array(diag.cost_history)
        assert np.all(np.diff(hist) <= 0)
        assert hist[-1] == pytest.approx(diag.cost)


def test_iterates_stay_on_seed_side():
    s = system(math.sqrt(2), math.sqrt(2))
    below, _ = solve_node(s, Position2D(0.3, -0.05))
    above, _ = solve_node(s, Position2D(0.3, 0.05))
    assert (below.x, below.y) == pytest.approx((1.0, -1.0), abs=1e-9)
    assert (above.x, above.y) == pytest.approx((1.0, 1.0), abs=1e-9)


def test_max_iterations_reported():
    _pos, diag = solve_node(system(3.0, 2.5), Position2D(-4, 9), SolverConfig(max_iterations=1))
    assert not diag.converged
    assert diag.reason == "max_iterations"
    assert diag.iterations == 1


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(initial_damping=0)
    with pytest.raises(SolverError):
        ResidualSystem(2, (O, O), (1, 1))


# -- estimate_poses ---------------------------------------------------------


@pytest.mark.parametrize("shape", ["square", "rectangle", "quadrilateral"])
def test_exact_geometries(shape):
    truth = canonical_geometry(shape, 2.0)
    est = estimate_poses(true_distances(truth, canonical_topology()))
    assert est.converged
    for n, p in truth.items():
        assert math.dist((p.x, p.y), (est.positions[n].x, est.positions[n].y)) < 1e-9
    assert FrameConvention().check(est.positions) == []


def test_frame_invariants_under_noise():
    rng = np.random.default_rng(9)
    truth = true_distances(canonical_geometry("square"), canonical_topology())
    prev = None
    for k in range(200):
        meas = {p: d + rng.normal(0, 0.05) for p, d in truth.items()}
        est = estimate_poses(meas, previous=prev, epoch=k / 10)
        assert est.positions[0] == Position2D(0.0, 0.0)
        assert est.positions[1].y == 0.0 and est.positions[1].x == meas[RangingPair(1, 0)]
        assert est.positions[2].y > 0 and est.positions[3].y > 0
        prev = est


def test_degenerate_baseline_and_incomplete_epoch():
    meas = true_distances(canonical_geometry("square"), canonical_topology())
    with pytest.raises(DegenerateBaselineError):
        estimate_poses({**meas, RangingPair(1, 0): 0.001})
    with pytest.raises(IncompleteEpochError, match="d31"):
        estimate_poses({p: d for p, d in meas.items() if p != RangingPair(3, 1)})


def test_warm_start_only_from_converged_previous():
    from coloc.solver import PoseEstimate, SolveDiagnostics

    meas = true_distances(canonical_geometry("square"), canonical_topology())
    mirrored = {0: O, 1: X2, 2: Position2D(2.0, -2.0), 3: Position2D(0.0, -2.0)}

    def previous(converged):
        diag = SolveDiagnostics(5, converged, "gradient" if converged else "max_iterations", 0.0, 0.0)
        return PoseEstimate(mirrored, 0.0, 5, converged, 0.0, {2: diag, 3: diag})

    warm = estimate_poses(meas, previous=previous(True))
    assert math.dist((warm.positions[2].x, warm.positions[2].y), (2.0, -2.0)) < 1e-9
    cold = estimate_poses(meas, previous=previous(False))
    assert math.dist((cold.positions[2].x, cold.positions[2].y), (2.0, 2.0)) < 1e-9
    assert math.dist((cold.positions[3].x, cold.positions[3].y), (0.0, 2.0)) < 1e-9


def test_pose_csv_round_trip(tmp_path):
    meas = true_distances(canonical_geometry("rectangle"), canonical_topology())
    poses = estimate_sequence([(k / 10, meas) for k in range(3)])
    path = tmp_path / "poses.csv"
    write_poses_csv(path, poses)
    back = read_poses_csv(path)
    assert [t for t, _ in back] == [0.0, 0.1, 0.2]
    assert back[1][1] == dict(poses[1].positions)
    assert len(path.read_text().splitlines()) == 1 + 3 * 4


def test_all_pairs_in_canonical_order():
    assert [p.label for p in CANONICAL_PAIRS] == ["d10", "d20", "d21", "d30", "d31"]


def test_short_baseline_far_target_converges():
    # 0.52 m baseline, target 14 m away: a long curved cost valley
    base = 0.5232709770387212
    p = (13.94651346, 2.33884477)
    s = system(math.hypot(*p), math.hypot(p[0] - base, p[1]), (O, Position2D(base, 0.0)))
    pos, diag = solve_node(s, Position2D(base / 2, 0.1))
    assert diag.converged
    assert math.dist((pos.x, pos.y), p) < 1e-7
