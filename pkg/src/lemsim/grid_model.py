"""Radial distribution network model, per-unit normalization, feeder file I/O.

All network quantities are stored in per-unit on (s_base MVA, v_base kV).
Feeder topology files carry physical units (ohms, MVA, kV); conversion
happens once at build time.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class GridModelError(ValueError):
    pass


class CycleDetected(GridModelError):
    pass


class Disconnected(GridModelError):
    pass


class MultipleSlack(GridModelError):
    pass


class NonPositiveBase(GridModelError):
    pass


class ZeroBase(GridModelError):
    pass


class UnknownNode(GridModelError):
    pass


# ANSI C84.1 service band, squared
DEFAULT_V_MIN_SQ = 0.95**2
DEFAULT_V_MAX_SQ = 1.05**2

_BIG = 1e9


@dataclass(frozen=True)
class Node:
    """A feeder node: the slack bus or one SMO bus, with static envelopes in pu."""

    id: int
    kind: str  # "slack" | "smo"
    v_min_sq: float = DEFAULT_V_MIN_SQ
    v_max_sq: float = DEFAULT_V_MAX_SQ
    # (lo, hi) envelopes for generation / load, real / reactive, in pu
    pg_bounds: tuple[float, float] = (0.0, _BIG)
    pl_bounds: tuple[float, float] = (0.0, _BIG)
    qg_bounds: tuple[float, float] = (-_BIG, _BIG)
    ql_bounds: tuple[float, float] = (-_BIG, _BIG)

    def __post_init__(self):
        if self.kind not in ("slack", "smo"):
            raise GridModelError(f"node {self.id}: bad kind {self.kind!r}")
        if not (0.0 < self.v_min_sq <= self.v_max_sq):
            raise GridModelError(f"node {self.id}: bad voltage box")
        for lo, hi in (self.pg_bounds, self.pl_bounds, self.qg_bounds, self.ql_bounds):
            if lo > hi:
                raise GridModelError(f"node {self.id}: bound lo > hi")


@dataclass(frozen=True)
class Line:
    """A branch oriented away from the slack node, impedances in pu."""

    from_node: int
    to_node: int
    r: float
    x: float
    s_max: float

    def __post_init__(self):
        if self.r < 0:
            raise GridModelError(f"line {self.from_node}->{self.to_node}: r < 0")
        if not (self.s_max > 0):
            raise GridModelError(f"line {self.from_node}->{self.to_node}: s_max <= 0")


@dataclass
class RadialNetwork:
    """Tree-structured feeder rooted at the slack node.

    Immutable after construction; safe to share across concurrent clearings.
    """

    nodes: dict[int, Node]
    lines: list[Line]
    s_base_mva: float
    v_base_kv: float
    slack: int = field(init=False)
    _children: dict[int, list[int]] = field(init=False, repr=False)
    _parent_line: dict[int, Line] = field(init=False, repr=False)

    def __post_init__(self):
        if self.s_base_mva <= 0 or self.v_base_kv <= 0:
            raise NonPositiveBase("bases must be positive")
        slacks = [n.id for n in self.nodes.values() if n.kind == "slack"]
        if len(slacks) > 1:
            raise MultipleSlack(f"slack nodes {slacks}")
        if not slacks:
            raise GridModelError("no slack node")
        self.slack = slacks[0]
        if len(self.lines) != len(self.nodes) - 1:
            raise CycleDetected(
                f"|lines|={len(self.lines)} != |nodes|-1={len(self.nodes) - 1}"
            )
        children: dict[int, list[int]] = {i: [] for i in self.nodes}
        parent_line: dict[int, Line] = {}
        for ln in self.lines:
            if ln.from_node not in self.nodes or ln.to_node not in self.nodes:
                raise UnknownNode(f"line {ln.from_node}->{ln.to_node} off-network")
            if ln.to_node in parent_line:
                raise CycleDetected(f"node {ln.to_node} has two parents")
            parent_line[ln.to_node] = ln
            children[ln.from_node].append(ln.to_node)
        # BFS from slack must reach every node (tree + count check => acyclic)
        seen = {self.slack}
        frontier = [self.slack]
        while frontier:
            nxt = []
            for u in frontier:
                for v in children[u]:
                    if v in seen:
                        raise CycleDetected(f"node {v} revisited")
                    seen.add(v)
                    nxt.append(v)
            frontier = nxt
        if len(seen) != len(self.nodes):
            missing = sorted(set(self.nodes) - seen)
            raise Disconnected(f"unreachable nodes {missing}")
        self._children = {i: sorted(c) for i, c in children.items()}
        self._parent_line = parent_line

    @property
    def s_base_kw(self) -> float:
        return self.s_base_mva * 1000.0

    def children(self, node: int) -> list[int]:
        if node not in self.nodes:
            raise UnknownNode(f"node {node}")
        return list(self._children[node])

    def parent_line(self, node: int) -> Line | None:
        """The line feeding `node`, None for the slack."""
        if node not in self.nodes:
            raise UnknownNode(f"node {node}")
        return self._parent_line.get(node)

    def depth_map(self) -> dict[int, int]:
        depth = {self.slack: 0}
        stack = [self.slack]
        while stack:
            u = stack.pop()
            for v in self._children[u]:
                depth[v] = depth[u] + 1
                stack.append(v)
        return depth

    def smo_nodes(self) -> list[int]:
        return sorted(i for i, n in self.nodes.items() if n.kind == "smo")


def to_per_unit(value: float, base: float) -> float:
    """value/base; ZeroBase if the base is not positive."""
    if base <= 0:
        raise ZeroBase(f"base {base}")
    return value / base


def to_physical(value_pu: float, base: float) -> float:
    if base <= 0:
        raise ZeroBase(f"base {base}")
    return value_pu * base


def z_base_ohm(v_base_kv: float, s_base_mva: float) -> float:
    """Impedance base kV^2/MVA."""
    if v_base_kv <= 0 or s_base_mva <= 0:
        raise ZeroBase("bases must be positive")
    return v_base_kv**2 / s_base_mva


def downstream_children(net: RadialNetwork, node: int) -> list[int]:
    """Children of `node` in tree orientation, sorted by id."""
    return net.children(node)


def build_feeder(spec: "FeederSpec") -> RadialNetwork:
    """Build a per-unit RadialNetwork from a physical-unit topology description."""
    if spec.s_base_mva <= 0 or spec.v_base_kv <= 0:
        raise NonPositiveBase("bases must be positive")
    zb = z_base_ohm(spec.v_base_kv, spec.s_base_mva)
    nodes = {}
    for rec in spec.nodes:
        nid, kind = rec[0], rec[1]
        if nid in nodes:
            raise GridModelError(f"duplicate node {nid}")
        if len(rec) >= 4:
            nodes[nid] = Node(id=nid, kind=kind, v_min_sq=rec[2], v_max_sq=rec[3])
        else:
            nodes[nid] = Node(id=nid, kind=kind)
    lines = [
        Line(
            from_node=f,
            to_node=t,
            r=to_per_unit(r_ohm, zb),
            x=to_per_unit(x_ohm, zb),
            s_max=to_per_unit(s_max_mva, spec.s_base_mva),
        )
        for f, t, r_ohm, x_ohm, s_max_mva in spec.lines
    ]
    return RadialNetwork(
        nodes=nodes, lines=lines, s_base_mva=spec.s_base_mva, v_base_kv=spec.v_base_kv
    )


@dataclass
class FeederSpec:
    """Physical-unit topology description.

    nodes: (id, kind[, v_min_sq, v_max_sq]);
    lines: (from, to, r_ohm, x_ohm, s_max_mva).
    """

    s_base_mva: float
    v_base_kv: float
    nodes: list[tuple]
    lines: list[tuple[int, int, float, float, float]]


def write_feeder_file(spec: FeederSpec, path: str) -> None:
    """One record per node (id, kind, optional voltage band in volts-squared
    pu), one per line (ids, ohms, MVA); physical units."""
    with open(path, "w") as fh:
        fh.write(f"base {spec.s_base_mva!r} {spec.v_base_kv!r}\n")
        for rec in spec.nodes:
            fh.write("node " + " ".join(str(x) for x in rec) + "\n")
        for f, t, r, x, s in spec.lines:
            fh.write(f"line {f} {t} {r!r} {x!r} {s!r}\n")


def read_feeder_file(path: str) -> FeederSpec:
    s_base = v_base = None
    nodes: list[tuple] = []
    lines: list[tuple[int, int, float, float, float]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "base":
                s_base, v_base = float(parts[1]), float(parts[2])
            elif tag == "node":
                rec = (int(parts[1]), parts[2])
                if len(parts) >= 5:
                    rec = rec + (float(parts[3]), float(parts[4]))
                nodes.append(rec)
            elif tag == "line":
                lines.append(
                    (
                        int(parts[1]),
                        int(parts[2]),
                        float(parts[3]),
                        float(parts[4]),
                        float(parts[5]),
                    )
                )
            else:
                raise GridModelError(f"{path}:{lineno}: unknown record {tag!r}")
    if s_base is None:
        raise GridModelError(f"{path}: missing base record")
    return FeederSpec(s_base_mva=s_base, v_base_kv=v_base, nodes=nodes, lines=lines)
