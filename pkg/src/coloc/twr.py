"""Double-sided two-way ranging simulator.

Event times of the poll/response/final exchange are generated in a global
time base, mapped through each node's clock and combined with the
asymmetric DS-TWR estimator, which cancels clock offset and first-order
drift. Timestamp arithmetic is done in ``numpy.longdouble`` so that the
ideal-clock round trip is exact far below a picometre.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .geometry import (
    GeometryError,
    NetworkTopology,
    NodeId,
    Position2D,
    RangingPair,
    iter_directives,
    true_distances,
)

SPEED_OF_LIGHT = 299_792_458.0  # m/s

DEFAULT_TICK = 15.65e-12
DEFAULT_REPLY_DELAY1 = 300e-6
DEFAULT_REPLY_DELAY2 = 250e-6

NOMINAL_QUALITY = 100
OUTLIER_QUALITY = 40

_LD = np.longdouble


class TransportError(RuntimeError):
    """A measurement sink or socket failed."""


@dataclass(frozen=True)
class ClockModel:
    offset: float = 0.0
    drift: float = 0.0
    tick_resolution: float = DEFAULT_TICK

    def __post_init__(self):
        if not abs(self.drift) < 1e-3:
            raise ValueError(f"|drift| must be < 1e-3, got {self.drift}")
        if self.tick_resolution < 0:
            raise ValueError("tick_resolution must be >= 0")

    @classmethod
    def ideal(cls) -> "ClockModel":
        return cls(0.0, 0.0, 0.0)

    def local(self, t):
        """Map global time(s) to this clock's (quantized) reading."""
        t = np.asarray(t, dtype=_LD)
        reading = (t + _LD(self.offset)) * (_LD(1) + _LD(self.drift))
        if self.tick_resolution > 0:
            tick = _LD(self.tick_resolution)
            reading = np.round(reading / tick) * tick
        return reading


@dataclass(frozen=True)
class TwrExchange:
    """Four local-clock durations of one exchange (scalars or equal-shape arrays)."""

    t_round1: object
    t_reply1: object
    t_round2: object
    t_reply2: object


@dataclass(frozen=True)
class ErrorModel:
    gaussian_sigma: float = 0.02
    pair_bias: Mapping[RangingPair, tuple[float, float]] = field(default_factory=dict)
    outlier_prob: float = 0.0
    outlier_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0 or self.outlier_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if not 0 <= self.outlier_prob < 1:
            raise ValueError("outlier_prob must be in [0, 1)")
        for pair, (m, _q) in self.pair_bias.items():
            if not m > 0:
                raise ValueError(f"bias slope for {pair} must be > 0")

    def bias(self, pair: RangingPair) -> tuple[float, float]:
        return self.pair_bias.get(pair, (1.0, 0.0))


# Default systematic error per canonical couple, in the range of typical
# DW1000-class calibration curves (slope ~1 +/- 2 %, intercept 0.2-0.5 m).
DEFAULT_PAIR_BIAS = {
    RangingPair(1, 0): (1.012, 0.31),
    RangingPair(2, 0): (0.991, 0.42),
    RangingPair(2, 1): (1.005, 0.27),
    RangingPair(3, 0): (1.018, 0.36),
    RangingPair(3, 1): (0.987, 0.23),
}


@dataclass(frozen=True)
class RangeMeasurement:
    pair: RangingPair
    distance: float
    timestamp: float
    sequence: int
    quality: int = NOMINAL_QUALITY


def tof_estimate(exchange: TwrExchange):
    """Asymmetric DS-TWR time of flight.

    ``(Tround1*Tround2 - Treply1*Treply2) / (Tround1 + Tround2 + Treply1 + Treply2)``,
    evaluated in extended precision and returned as float64.
    """
    r1 = np.asarray(exchange.t_round1, dtype=_LD)
    p1 = np.asarray(exchange.t_reply1, dtype=_LD)
    r2 = np.asarray(exchange.t_round2, dtype=_LD)
    p2 = np.asarray(exchange.t_reply2, dtype=_LD)
    den = r1 + r2 + p1 + p2
    if np.any(~(den > 0)):
        raise ValueError("DS-TWR denominator must be positive")
    tof = (r1 * r2 - p1 * p2) / den
    out = tof.astype(np.float64)
    return float(out) if out.ndim == 0 else out


def simulate_exchange(
    true_distance,
    initiator_clock: ClockModel,
    responder_clock: ClockModel,
    reply_delay1: float = DEFAULT_REPLY_DELAY1,
    reply_delay2: float = DEFAULT_REPLY_DELAY2,
    start_time=0.0,
) -> TwrExchange:
    """Synthesize the four durations of a poll/response/final exchange.

    Reply delays are scheduled on the replying device's own clock, so in
    global time they last ``delay / (1 + drift)``. ``true_distance`` and
    ``start_time`` broadcast.

    Events are simulated relative to ``start_time`` so that durations keep
    full precision late in a run; each clock contributes only its sub-tick
    phase at the start, which leaves quantization identical to reading
    :meth:`ClockModel.local` at absolute times.
    """
    d = np.asarray(true_distance, dtype=_LD)
    if np.any(d < 0):
        raise ValueError("true_distance must be >= 0")
    if not (reply_delay1 > 0 and reply_delay2 > 0):
        raise ValueError("reply delays must be > 0")
    tof = d / _LD(SPEED_OF_LIGHT)
    A, B = initiator_clock, responder_clock
    start = np.asarray(start_time, dtype=_LD) + np.zeros_like(tof)

    t_poll_tx = np.zeros_like(tof)
    t_poll_rx = t_poll_tx + tof
    t_resp_tx = t_poll_rx + _LD(reply_delay1) / (_LD(1) + _LD(B.drift))
    t_resp_rx = t_resp_tx + tof
    t_final_tx = t_resp_rx + _LD(reply_delay2) / (_LD(1) + _LD(A.drift))
    t_final_rx = t_final_tx + tof

    a0, a3, a4 = (_relative_reading(A, start, t) for t in (t_poll_tx, t_resp_rx, t_final_tx))
    b1, b2, b5 = (_relative_reading(B, start, t) for t in (t_poll_rx, t_resp_tx, t_final_rx))
    return TwrExchange(
        t_round1=a3 - a0,
        t_reply1=b2 - b1,
        t_round2=b5 - b2,
        t_reply2=a4 - a3,
    )


def _relative_reading(clock: ClockModel, start, rel):
    # local(start + rel) minus a tick-aligned reference near local(start)
    scale = _LD(1) + _LD(clock.drift)
    if clock.tick_resolution > 0:
        tick = _LD(clock.tick_resolution)
        base = (start + _LD(clock.offset)) * scale
        phase = base - np.floor(base / tick) * tick
        return np.round((phase + rel * scale) / tick) * tick
    return rel * scale


def _draw_words(seed: int, stream: int, pair: RangingPair, sequences: np.ndarray) -> np.ndarray:
    """Four uint64 words per sequence number, a pure function of all inputs.

    Philox is counter based: block ``s`` of a keyed stream does not depend on
    which other blocks are drawn, so batches and single draws agree.
    """
    key = np.random.SeedSequence([seed & (2**64 - 1), stream, pair.tag, pair.anchor]).generate_state(
        2, np.uint64
    )
    seq = np.asarray(sequences, dtype=np.int64)
    if seq.size == 0:
        return np.empty((0, 4), dtype=np.uint64)
    if seq.min() < 0:
        raise ValueError("sequence numbers must be non-negative")
    lo, hi = int(seq.min()), int(seq.max())
    counter = np.array([lo, 0, 0, 0], dtype=np.uint64)
    gen = np.random.Philox(key=key, counter=counter)
    block = gen.random_raw(4 * (hi - lo + 1)).reshape(-1, 4)
    return block[seq - lo]


def _unit(words: np.ndarray) -> np.ndarray:
    # 53-bit uniform on (0, 1]
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


@dataclass(frozen=True)
class RangingEngine:
    """Measurement generator binding an error model to per-node clocks.

    ``stream`` separates independent uses of one seed (e.g. calibration
    campaigns vs. positioning runs).
    """

    error: ErrorModel = field(default_factory=ErrorModel)
    clocks: Mapping[NodeId, ClockModel] = field(default_factory=dict)
    reply_delay1: float = DEFAULT_REPLY_DELAY1
    reply_delay2: float = DEFAULT_REPLY_DELAY2
    stream: int = 0

    def clock(self, node: NodeId) -> ClockModel:
        return self.clocks.get(node, ClockModel())

    def with_stream(self, stream: int) -> "RangingEngine":
        return replace(self, stream=stream)

    def measure_batch(self, pair: RangingPair, true_distance, sequences, start_times=0.0):
        """Vectorised core of :func:`measure_range`; returns ``(distances, qualities)``."""
        seq = np.atleast_1d(np.asarray(sequences, dtype=np.int64))
        ex = simulate_exchange(
            np.broadcast_to(np.asarray(true_distance, dtype=np.float64), seq.shape),
            self.clock(pair.tag),
            self.clock(pair.anchor),
            self.reply_delay1,
            self.reply_delay2,
            start_time=np.broadcast_to(np.asarray(start_times, dtype=np.float64), seq.shape),
        )
        raw = SPEED_OF_LIGHT * np.atleast_1d(tof_estimate(ex))

        err = self.error
        m, q = err.bias(pair)
        dist = m * raw + q
        quality = np.full(seq.shape, NOMINAL_QUALITY, dtype=np.int64)
        if err.gaussian_sigma > 0 or err.outlier_prob > 0:
            w = _draw_words(err.seed, self.stream, pair, seq)
            u1, u2, u3 = _unit(w[:, 0]), _unit(w[:, 1]), _unit(w[:, 2])
            radius = np.sqrt(-2.0 * np.log(u1))
            z_main = radius * np.cos(2 * math.pi * u2)
            dist = dist + err.gaussian_sigma * z_main
            if err.outlier_prob > 0:
                z_out = radius * np.sin(2 * math.pi * u2)
                hit = u3 <= err.outlier_prob
                dist = np.where(hit, dist + err.outlier_sigma * z_out, dist)
                quality[hit] = OUTLIER_QUALITY
        return np.maximum(dist, 0.0), quality

    def run_schedule(self, topology, positions, rate, duration, sink):
        return run_ranging_schedule(topology, positions, self, rate, duration, sink)


def measure_range(
    pair: RangingPair,
    true_distance: float,
    error: ErrorModel,
    clocks: Mapping[NodeId, ClockModel],
    sequence: int,
    timestamp: float = 0.0,
    stream: int = 0,
) -> RangeMeasurement:
    """One noisy tag->anchor range; deterministic in (seed, stream, pair, sequence)."""
    if true_distance < 0:
        raise ValueError("true_distance must be >= 0")
    engine = RangingEngine(error=error, clocks=clocks, stream=stream)
    d, q = engine.measure_batch(pair, true_distance, [sequence], timestamp)
    return RangeMeasurement(pair, float(d[0]), float(timestamp), int(sequence), int(q[0]))


def run_ranging_schedule(
    topology: NetworkTopology,
    positions: Mapping[NodeId, Position2D],
    engine: RangingEngine,
    rate: float,
    duration: float,
    sink: Callable[[RangeMeasurement], object],
) -> int:
    """Emit one measurement per pair per epoch, round-robin, to ``sink``.

    Epoch ``k`` starts at ``k / rate``; pair ``i`` of ``n`` ranges in slot
    ``i`` of the epoch. Measurements carry the epoch start as timestamp and
    global sequence number ``k * n + i``. Returns the number of epochs.
    """
    if not rate > 0 or not duration > 0:
        raise ValueError("rate and duration must be > 0")
    n_epochs = math.floor(rate * duration + 1e-9)
    pairs = list(topology.pairs)
    n = len(pairs)
    truth = true_distances(positions, topology)
    k = np.arange(n_epochs)
    epoch_times = k / rate
    slot = 1.0 / (rate * n)

    columns = []
    for i, pair in enumerate(pairs):
        seq = k * n + i
        d, q = engine.measure_batch(pair, truth[pair], seq, epoch_times + i * slot)
        columns.append((seq, d, q))

    for e in range(n_epochs):
        t = float(e / rate)
        for i, pair in enumerate(pairs):
            seq, d, q = columns[i]
            m = RangeMeasurement(pair, float(d[e]), t, int(seq[e]), int(q[e]))
            try:
                sink(m)
            except Exception as exc:
                raise TransportError(f"sink failed at seq {m.sequence}: {exc}") from exc
    return n_epochs


# -- configuration & CSV ----------------------------------------------------


def parse_noise_config(text: str, base: ErrorModel | None = None):
    """Parse ``noise``/``bias``/``clock`` lines into ``(ErrorModel, clocks)``.

    ``noise <key> <value>`` sets ``sigma``, ``outlier_prob``, ``outlier_sigma``
    or ``seed``; ``bias <tag> <anchor> <m> <q>``;
    ``clock <id> <offset_s> <drift_ppm> [tick_s]``.
    """
    base = base or ErrorModel()
    fields = {
        "sigma": "gaussian_sigma",
        "gaussian_sigma": "gaussian_sigma",
        "outlier_prob": "outlier_prob",
        "outlier_sigma": "outlier_sigma",
        "seed": "seed",
    }
    updates: dict = {}
    bias: dict = {}
    clocks: dict = {}
    for lineno, tok in iter_directives(text):
        try:
            if tok[0] == "noise" and len(tok) == 3 and tok[1] in fields:
                name = fields[tok[1]]
                updates[name] = int(tok[2]) if name == "seed" else float(tok[2])
            elif tok[0] == "bias" and len(tok) == 5:
                bias[RangingPair(int(tok[1]), int(tok[2]))] = (float(tok[3]), float(tok[4]))
            elif tok[0] == "clock" and len(tok) in (4, 5):
                tick = float(tok[4]) if len(tok) == 5 else DEFAULT_TICK
                clocks[int(tok[1])] = ClockModel(float(tok[2]), float(tok[3]) / 1e6, tick)
            else:
                raise GeometryError(f"unrecognised directive {' '.join(tok)!r}")
        except ValueError as exc:
            raise GeometryError(f"line {lineno}: {exc}") from None
    if bias:
        updates["pair_bias"] = bias
    try:
        return replace(base, **updates), clocks
    except ValueError as exc:
        raise GeometryError(f"noise config: {exc}") from None


def load_noise_config(path: str | Path, base: ErrorModel | None = None):
    return parse_noise_config(Path(path).read_text(), base)


MEASUREMENT_HEADER = ("seq", "epoch_time_s", "tag", "anchor", "distance_m", "quality")


def write_measurements_csv(path: str | Path, measurements: Iterable[RangeMeasurement]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_HEADER)
        for m in measurements:
            w.writerow([m.sequence, repr(m.timestamp), m.pair.tag, m.pair.anchor, repr(m.distance), m.quality])


def read_measurements_csv(path: str | Path) -> list[RangeMeasurement]:
    with open(path, newline="") as fh:
        return [
            RangeMeasurement(
                RangingPair(int(r["tag"]), int(r["anchor"])),
                float(r["distance_m"]),
                float(r["epoch_time_s"]),
                int(r["seq"]),
                int(r["quality"]),
            )
            for r in csv.DictReader(fh)
        ]
