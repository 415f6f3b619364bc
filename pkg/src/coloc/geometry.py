"""Nodes, device roles, ranging topology and the relative coordinate frame.

Node 0 is pinned at the origin and node 1 on the positive x axis; every
position map produced here honours that convention exactly.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

NodeId = int

ORIGIN_NODE: NodeId = 0
AXIS_NODE: NodeId = 1


class GeometryError(ValueError):
    """Invalid geometry or topology input."""


class DeviceRole(enum.Enum):
    ANCHOR = "A"
    TAG = "T"


@dataclass(frozen=True, order=True)
class RangingPair:
    """Ordered (tag, anchor) couple; ``d_xy`` means tag ``x``, anchor ``y``."""

    tag: NodeId
    anchor: NodeId

    @property
    def label(self) -> str:
        return f"d{self.tag}{self.anchor}"

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite position ({self.x}, {self.y})")

    def distance_to(self, other: "Position2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class NetworkTopology:
    nodes: Mapping[NodeId, frozenset]
    pairs: tuple[RangingPair, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "nodes", {int(k): frozenset(v) for k, v in sorted(self.nodes.items())}
        )
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def roles(self, node: NodeId) -> frozenset:
        return self.nodes.get(node, frozenset())

    def pair_count(self, node: NodeId) -> int:
        return sum(node in (p.tag, p.anchor) for p in self.pairs)

    @property
    def tags(self) -> list[NodeId]:
        return sorted({p.tag for p in self.pairs})

    def pairs_for_tag(self, tag: NodeId) -> list[RangingPair]:
        return [p for p in self.pairs if p.tag == tag]


@dataclass(frozen=True)
class FrameConvention:
    origin_node: NodeId = ORIGIN_NODE
    axis_node: NodeId = AXIS_NODE

    def check(self, positions: Mapping[NodeId, Position2D]) -> list[str]:
        """Return the list of convention violations (empty if none).

        The checks are exact: the origin must be bitwise ``(0, 0)`` and the
        axis node must have ``y == 0`` and ``x > 0``.
        """
        problems = []
        o = positions.get(self.origin_node)
        a = positions.get(self.axis_node)
        if o is None or o.x != 0.0 or o.y != 0.0:
            problems.append(f"node {self.origin_node} not at origin")
        if a is None or a.y != 0.0 or not a.x > 0.0:
            problems.append(f"node {self.axis_node} not on +x axis")
        return problems


CANONICAL_PAIRS = (
    RangingPair(1, 0),
    RangingPair(2, 0),
    RangingPair(2, 1),
    RangingPair(3, 0),
    RangingPair(3, 1),
)


def canonical_topology() -> NetworkTopology:
    """Four-node quadrilateral network; node 1 carries both an anchor and a tag."""
    A, T = DeviceRole.ANCHOR, DeviceRole.TAG
    nodes = {0: {A}, 1: {A, T}, 2: {T}, 3: {T}}
    return NetworkTopology(nodes=nodes, pairs=CANONICAL_PAIRS)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


def validate_topology(topology: NetworkTopology) -> ValidationReport:
    violations = []
    seen = set()
    for p in topology.pairs:
        if p.tag == p.anchor:
            violations.append(f"self-pair {p.label}")
        if p in seen:
            violations.append(f"duplicate pair {p.label}")
        seen.add(p)
        for node in (p.tag, p.anchor):
            if node not in topology.nodes:
                violations.append(f"pair {p.label} references unknown node {node}")
        if p.tag in topology.nodes and DeviceRole.TAG not in topology.roles(p.tag):
            violations.append(f"pair {p.label}: node {p.tag} has no tag device")
        if p.anchor in topology.nodes and DeviceRole.ANCHOR not in topology.roles(p.anchor):
            violations.append(f"pair {p.label}: node {p.anchor} has no anchor device")
    for node, roles in topology.nodes.items():
        if not roles:
            violations.append(f"node {node} has no device role")
        n = topology.pair_count(node)
        if n < 2:
            violations.append(f"node {node} underconstrained ({n} pair{'s' if n != 1 else ''})")
    return ValidationReport(tuple(violations))


class Shape(enum.Enum):
    SQUARE = "square"
    RECTANGLE = "rectangle"
    QUADRILATERAL = "quadrilateral"


# Unit-scale corners of the generic quadrilateral: convex, all sides unequal,
# no right angle. Frozen in tests/golden/quadrilateral_2m.txt.
_QUAD_UNIT = ((0.0, 0.0), (1.0, 0.0), (1.25, 0.9), (0.15, 0.65))


def canonical_geometry(shape: Shape | str, scale: float = 2.0) -> dict[NodeId, Position2D]:
    shape = Shape(shape)
    if not (scale > 0 and math.isfinite(scale)):
        raise GeometryError(f"scale must be positive, got {scale}")
    s = float(scale)
    if shape is Shape.SQUARE:
        pts = ((0.0, 0.0), (s, 0.0), (s, s), (0.0, s))
    elif shape is Shape.RECTANGLE:
        pts = ((0.0, 0.0), (s, 0.0), (s, s / 2), (0.0, s / 2))
    else:
        pts = tuple((x * s, y * s) for x, y in _QUAD_UNIT)
    return {i: Position2D(x, y) for i, (x, y) in enumerate(pts)}


def true_distances(
    positions: Mapping[NodeId, Position2D], topology: NetworkTopology
) -> dict[RangingPair, float]:
    out = {}
    for p in topology.pairs:
        try:
            a, b = positions[p.tag], positions[p.anchor]
        except KeyError as exc:
            raise GeometryError(f"no position for node {exc.args[0]} (pair {p.label})") from None
        out[p] = a.distance_to(b)
    return out


# -- text format -------------------------------------------------------------

_ROLE_CODES = {
    "A": frozenset({DeviceRole.ANCHOR}),
    "T": frozenset({DeviceRole.TAG}),
    "AT": frozenset({DeviceRole.ANCHOR, DeviceRole.TAG}),
    "TA": frozenset({DeviceRole.ANCHOR, DeviceRole.TAG}),
}


def iter_directives(text: str) -> Iterable[tuple[int, list[str]]]:
    """Yield ``(line_number, tokens)`` for each non-blank, non-comment line."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_geometry(text: str) -> tuple[NetworkTopology | None, dict[NodeId, Position2D]]:
    """Parse ``node``/``pair``/``pos`` lines; unknown keywords are rejected.

    Returns ``(topology, positions)``; topology is ``None`` when the text has
    no ``node`` or ``pair`` lines.
    """
    nodes: dict[NodeId, frozenset] = {}
    pairs: list[RangingPair] = []
    positions: dict[NodeId, Position2D] = {}
    for lineno, tok in iter_directives(text):
        try:
            kind = tok[0]
            if kind == "node" and len(tok) == 3:
                nodes[int(tok[1])] = _ROLE_CODES[tok[2].upper()]
            elif kind == "pair" and len(tok) == 3:
                pairs.append(RangingPair(int(tok[1]), int(tok[2])))
            elif kind == "pos" and len(tok) == 4:
                positions[int(tok[1])] = Position2D(float(tok[2]), float(tok[3]))
            else:
                raise GeometryError(f"unrecognised directive {' '.join(tok)!r}")
        except (KeyError, ValueError) as exc:
            raise GeometryError(f"line {lineno}: {exc}") from None
    topology = NetworkTopology(nodes, tuple(pairs)) if (nodes or pairs) else None
    return topology, positions


def format_geometry(
    topology: NetworkTopology | None, positions: Mapping[NodeId, Position2D] | None = None
) -> str:
    lines = []
    if topology is not None:
        for node, roles in topology.nodes.items():
            code = "".join(r.value for r in sorted(roles, key=lambda r: r.value))
            lines.append(f"node {node} {code}")
        lines.extend(f"pair {p.tag} {p.anchor}" for p in topology.pairs)
    for node, pos in sorted((positions or {}).items()):
        lines.append(f"pos {node} {pos.x!r} {pos.y!r}")
    return "\n".join(lines) + "\n"


def load_geometry(path: str | Path):
    return parse_geometry(Path(path).read_text())
