"""Hardware-free UWB cooperative relative localization.

Simulated double-sided two-way ranging, per-couple linear calibration,
nonlinear least-squares relative positioning, a binary acquisition
protocol and a campaign harness.
"""

__version__ = "0.1.0"

from .calibration import (
    CalibrationModel,
    CalibrationSample,
    LinearRangeCalibrator,
    apply_calibration,
    fit_linear,
    run_calibration_campaign,
)
from .geometry import (
    CANONICAL_PAIRS,
    DeviceRole,
    FrameConvention,
    NetworkTopology,
    Position2D,
    RangingPair,
    Shape,
    canonical_geometry,
    canonical_topology,
    true_distances,
    validate_topology,
)
from .harness import compare_runs, euclidean_error, run_experiment, summarize
from .solver import (
    PoseEstimate,
    RelativePoseEstimator,
    ResidualSystem,
    SolverConfig,
    circle_intersection_oracle,
    estimate_poses,
    jacobian,
    residuals,
    solve_node,
)
from .twr import (
    SPEED_OF_LIGHT,
    ClockModel,
    ErrorModel,
    RangeMeasurement,
    RangingEngine,
    TwrExchange,
    measure_range,
    run_ranging_schedule,
    simulate_exchange,
    tof_estimate,
)
