"""Metric graphs: edges carrying intervals [0, length], glued together at their nodes.

Points live on edges as ``GraphPoint(edge, coord)``; a point at coord 0 or at the edge length
is the tail or head node and compares equal to every coincident endpoint of an incident edge.
Distances are the shortest-path lengths along the edges.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Union

import networkx as nx
import numpy as np

from errors import DomainError, GraphDomainError
from models import EdgeRecord, GraphFile

logger = logging.getLogger(__name__)

NodeId = str
EdgeId = str
Location = Union[NodeId, tuple[EdgeId, float]]

EMBED_LENGTH_RTOL = 1e-9  # embed polyline length vs declared length
COORD_RTOL = 1e-12  # slack on [0, length] before a coordinate is rejected
TIE_RTOL = 1e-12  # relative slack when two geodesic lengths count as equal


@dataclass(frozen=True)
class Edge:
    id: EdgeId
    tail: NodeId
    head: NodeId
    length: float
    embed: tuple[tuple[float, ...], ...] | None = None

    @property
    def is_loop(self) -> bool:
        return self.tail == self.head

    def polyline(self) -> np.ndarray:
        if self.embed is None:
            raise DomainError(f"edge {self.id!r} has no embedding")
        return np.asarray(self.embed, dtype=float)

    def polyline_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.polyline(), axis=0), axis=1).sum())


@dataclass(frozen=True, order=True)
class GraphPoint:
    edge: EdgeId
    coord: float


@dataclass(frozen=True)
class Incidence:
    node: NodeId
    edge: EdgeId
    sign: int  # -1 at the tail (coord 0), +1 at the head (coord = length)


@dataclass(frozen=True)
class Segment:
    edge: EdgeId
    start: float
    end: float

    @property
    def length(self) -> float:
        return abs(self.end - self.start)


@dataclass(frozen=True)
class GraphPath:
    """Piecewise path along edges; consecutive segments meet at a node."""

    segments: tuple[Segment, ...] = ()

    @property
    def length(self) -> float:
        return float(sum(s.length for s in self.segments))

    @property
    def waypoints(self) -> list[GraphPoint]:
        if not self.segments:
            return []
        points = [GraphPoint(s.edge, s.start) for s in self.segments]
        last = self.segments[-1]
        points.append(GraphPoint(last.edge, last.end))
        return points

    @property
    def edge_sequence(self) -> tuple[EdgeId, ...]:
        return tuple(s.edge for s in self.segments)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class _SegmentTable:
    """Flattened embedded polylines used for nearest-point queries."""

    starts: np.ndarray  # (S, d)
    ends: np.ndarray  # (S, d)
    edge_ids: tuple[EdgeId, ...]  # per segment
    arc_offset: np.ndarray  # polyline arc length at segment start
    scale: np.ndarray  # declared length / polyline length, per segment


class MetricGraph:
    """Immutable metric graph (V, E, lengths) with optional planar or spatial embeddings."""

    def __init__(self, nodes: Iterable[NodeId], edges: Iterable[Edge]) -> None:
        edge_list = list(edges)
        node_list = list(dict.fromkeys(nodes))
        ids = [e.id for e in edge_list]
        if len(ids) != len(set(ids)):
            raise GraphDomainError("duplicate edge id")
        known = set(node_list)
        for e in edge_list:
            for node in (e.tail, e.head):
                if node not in known:
                    raise GraphDomainError(f"edge {e.id!r} references unknown node {node!r}")
        self._nodes: tuple[NodeId, ...] = tuple(node_list)
        self._edges: dict[EdgeId, Edge] = {e.id: e for e in sorted(edge_list, key=lambda e: e.id)}

    def __repr__(self) -> str:
        return f"MetricGraph(nodes={len(self._nodes)}, edges={len(self._edges)})"

    # Structure

    @property
    def nodes(self) -> tuple[NodeId, ...]:
        return self._nodes

    @property
    def edges(self) -> tuple[Edge, ...]:
        return tuple(self._edges.values())

    @property
    def edge_ids(self) -> tuple[EdgeId, ...]:
        return tuple(self._edges)

    def edge(self, edge_id: EdgeId) -> Edge:
        try:
            return self._edges[edge_id]
        except KeyError:
            raise GraphDomainError(f"unknown edge {edge_id!r}") from None

    @cached_property
    def node_index(self) -> dict[NodeId, int]:
        return {v: i for i, v in enumerate(self._nodes)}

    @cached_property
    def incidences(self) -> tuple[Incidence, ...]:
        items = []
        for e in self.edges:
            items.append(Incidence(e.tail, e.id, -1))
            items.append(Incidence(e.head, e.id, +1))
        return tuple(sorted(items, key=lambda inc: (self.node_index[inc.node], inc.edge, inc.sign)))

    def incident_edges(self, node: NodeId) -> list[Edge]:
        return [e for e in self.edges if node in (e.tail, e.head)]

    def orientation(self, node: NodeId, edge_id: EdgeId) -> int:
        """-1 if ``node`` is the tail of the edge, +1 if it is the head, 0 if not incident."""
        e = self.edge(edge_id)
        if node == e.tail:
            return -1
        if node == e.head:
            return 1
        return 0

    @property
    def has_embeddings(self) -> bool:
        return bool(self._edges) and all(e.embed is not None for e in self.edges)

    @property
    def dim(self) -> int:
        if not self.has_embeddings:
            raise DomainError("graph edges carry no embeddings")
        return len(self.edges[0].embed[0])  # type: ignore[index]

    def to_networkx(self) -> nx.MultiGraph:
        G = nx.MultiGraph()
        G.add_nodes_from(self._nodes)
        for e in self.edges:
            G.add_edge(e.tail, e.head, key=e.id, weight=e.length)
        return G

    # Validation

    @cached_property
    def validation(self) -> ValidationReport:
        return validate_graph(self)

    def require_valid(self) -> None:
        report = self.validation
        if not report.ok:
            raise GraphDomainError("invalid metric graph: " + "; ".join(report.violations))

    # Points

    def check_point(self, p: GraphPoint) -> GraphPoint:
        """Validate ``p`` against its edge; coordinates within rounding of an end are clamped."""
        e = self.edge(p.edge)
        c = float(p.coord)
        slack = COORD_RTOL * max(e.length, 1.0)
        if not math.isfinite(c) or c < -slack or c > e.length + slack:
            raise DomainError(f"coordinate {p.coord!r} outside [0, {e.length}] on edge {e.id!r}")
        c = min(max(c, 0.0), e.length)
        if c == p.coord:
            return p
        return GraphPoint(p.edge, c)

    def node_at(self, p: GraphPoint) -> NodeId | None:
        p = self.check_point(p)
        e = self.edge(p.edge)
        if p.coord == 0.0:
            return e.tail
        if p.coord == e.length:
            return e.head
        return None

    def locate(self, p: GraphPoint) -> Location:
        """Canonical hashable key: the NodeId for endpoints, (edge, coord) otherwise."""
        node = self.node_at(p)
        if node is not None:
            return node
        return (p.edge, float(p.coord))

    def points_equal(self, x: GraphPoint, y: GraphPoint) -> bool:
        return self.locate(x) == self.locate(y)

    def node_point(self, node: NodeId) -> GraphPoint:
        """A GraphPoint at ``node`` on its lowest-id incident edge."""
        for e in self.edges:
            if e.tail == node:
                return GraphPoint(e.id, 0.0)
            if e.head == node:
                return GraphPoint(e.id, e.length)
        raise GraphDomainError(f"node {node!r} has no incident edge")

    def embed_point(self, p: GraphPoint) -> np.ndarray:
        p = self.check_point(p)
        e = self.edge(p.edge)
        pts = e.polyline()
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = p.coord * cum[-1] / e.length
        k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
        t = 0.0 if seg[k] == 0 else (s - cum[k]) / seg[k]
        t = min(max(t, 0.0), 1.0)
        return pts[k] + t * (pts[k + 1] - pts[k])

    @cached_property
    def segment_table(self) -> _SegmentTable:
        if not self.has_embeddings:
            raise DomainError("graph edges carry no embeddings")
        starts, ends, owners, offsets, scales = [], [], [], [], []
        for e in self.edges:
            pts = e.polyline()
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            scale = e.length / seg.sum()
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            for k in range(len(seg)):
                starts.append(pts[k])
                ends.append(pts[k + 1])
                owners.append(e.id)
                offsets.append(cum[k])
                scales.append(scale)
        return _SegmentTable(
            starts=np.asarray(starts),
            ends=np.asarray(ends),
            edge_ids=tuple(owners),
            arc_offset=np.asarray(offsets),
            scale=np.asarray(scales),
        )

    # Distances

    @cached_property
    def node_distances(self) -> np.ndarray:
        """All-pairs shortest-path lengths between nodes, in ``nodes`` order."""
        simple = nx.Graph()
        simple.add_nodes_from(self._nodes)
        for e in self.edges:
            if e.is_loop:
                continue
            if simple.has_edge(e.tail, e.head):
                if e.length < simple[e.tail][e.head]["weight"]:
                    simple[e.tail][e.head]["weight"] = e.length
            else:
                simple.add_edge(e.tail, e.head, weight=e.length)
        return np.asarray(nx.floyd_warshall_numpy(simple, nodelist=list(self._nodes), weight="weight"))

    def _offsets(self, p: GraphPoint) -> tuple[tuple[int, float], tuple[int, float]]:
        p = self.check_point(p)
        e = self.edge(p.edge)
        idx = self.node_index
        return (idx[e.tail], p.coord), (idx[e.head], e.length - p.coord)

    def distance_matrix(self, xs: Sequence[GraphPoint], ys: Sequence[GraphPoint]) -> np.ndarray:
        """Pairwise graph distances; agrees with :func:`graph_distance` entry by entry."""
        self.require_valid()
        D = self.node_distances
        out = np.empty((len(xs), len(ys)))
        if len(ys) == 0:
            return out
        y_offsets = [self._offsets(y) for y in ys]
        y_nodes = np.array([[o[0][0], o[1][0]] for o in y_offsets], dtype=int)
        y_dist = np.array([[o[0][1], o[1][1]] for o in y_offsets], dtype=float)
        y_edges = np.array([y.edge for y in ys], dtype=object)
        y_coord = np.array([self.check_point(y).coord for y in ys], dtype=float)
        for i, x in enumerate(xs):
            (a1, d1), (a2, d2) = self._offsets(x)
            via = np.minimum(d1 + D[a1][y_nodes] + y_dist, d2 + D[a2][y_nodes] + y_dist).min(axis=1)
            same = y_edges == x.edge
            if same.any():
                direct = np.abs(y_coord[same] - self.check_point(x).coord)
                via[same] = np.minimum(via[same], direct)
            out[i] = via
        return out

    def diameter_bound(self) -> float:
        """Upper bound on the distance between any two points of the graph."""
        D = self.node_distances
        finite = D[np.isfinite(D)]
        longest = max((e.length for e in self.edges), default=0.0)
        return float((finite.max() if finite.size else 0.0) + longest)

    # Edits

    def edited(self, remove: Iterable[EdgeId] = (), add: Iterable[Edge] = ()) -> MetricGraph:
        """New graph with ``remove`` deleted and ``add`` inserted; nodes are kept."""
        drop = set(remove)
        for eid in drop:
            self.edge(eid)
        extra = list(add)
        kept = [e for e in self.edges if e.id not in drop]
        clash = {e.id for e in kept} & {e.id for e in extra}
        if clash:
            raise GraphDomainError(f"added edge id(s) already present: {sorted(clash)}")
        new_nodes = list(self._nodes)
        for e in extra:
            for node in (e.tail, e.head):
                if node not in new_nodes:
                    new_nodes.append(node)
        return MetricGraph(new_nodes, kept + extra)

    # Serialization

    def to_record(self) -> GraphFile:
        return GraphFile(
            nodes=list(self._nodes),
            edges=[
                EdgeRecord(
                    id=e.id,
                    tail=e.tail,
                    head=e.head,
                    length=e.length,
                    embed=[list(pt) for pt in e.embed] if e.embed is not None else None,
                )
                for e in self.edges
            ],
        )

    @classmethod
    def from_record(cls, record: GraphFile) -> MetricGraph:
        edges = [
            Edge(
                id=r.id,
                tail=r.tail,
                head=r.head,
                length=float(r.length),
                embed=tuple(tuple(float(c) for c in pt) for pt in r.embed) if r.embed is not None else None,
            )
            for r in record.edges
        ]
        return cls(record.nodes, edges)


def validate_graph(g: MetricGraph) -> ValidationReport:
    """Report violations of the metric-graph invariants; a valid graph yields an empty report.

    Checks positivity of lengths, reversed duplicates ((v, w) and (w, v) both present),
    embedding lengths, and connectivity.
    """
    violations: list[str] = []
    if not g.nodes:
        violations.append("empty graph: no nodes")
    for e in g.edges:
        if not (math.isfinite(e.length) and e.length > 0):
            violations.append(f"edge {e.id!r}: non-positive length {e.length}")
        elif e.embed is not None:
            poly = e.polyline_length()
            if abs(poly - e.length) > EMBED_LENGTH_RTOL * e.length:
                violations.append(
                    f"edge {e.id!r}: embed length {poly:.12g} differs from declared length {e.length:.12g}"
                )

    seen: set[tuple[NodeId, NodeId]] = set()
    pairs = {(e.tail, e.head) for e in g.edges if not e.is_loop}
    for tail, head in sorted(pairs):
        if (head, tail) in pairs and (head, tail) not in seen:
            violations.append(f"reversed duplicate: ({tail}, {head}) and ({head}, {tail})")
            seen.add((tail, head))

    if g.nodes:
        components = list(nx.connected_components(g.to_networkx()))
        if len(components) > 1:
            parts = ", ".join("{" + ", ".join(sorted(c)) + "}" for c in components)
            violations.append(f"not connected: {len(components)} components {parts}")
    return ValidationReport(violations)


def _cut_name(edge_id: EdgeId, coord: float) -> tuple[str, EdgeId, float]:
    return ("pt", edge_id, coord)


def _auxiliary_graph(g: MetricGraph, points: Sequence[GraphPoint]) -> tuple[nx.MultiGraph, list[Any]]:
    """Graph nodes plus the given points, with the edges holding them split at the points."""
    aux = nx.MultiGraph()
    aux.add_nodes_from(g.nodes)
    cuts: dict[EdgeId, set[float]] = {}
    terminals: list[Any] = []
    for raw in points:
        p = g.check_point(raw)
        node = g.node_at(p)
        if node is not None:
            terminals.append(node)
            continue
        cuts.setdefault(p.edge, set()).add(p.coord)
        terminals.append(_cut_name(p.edge, p.coord))
    for e in g.edges:
        stops: list[tuple[Any, float]] = [(e.tail, 0.0)]
        stops += [(_cut_name(e.id, c), c) for c in sorted(cuts.get(e.id, ()))]
        stops.append((e.head, e.length))
        for k, ((u, cu), (v, cv)) in enumerate(itertools.pairwise(stops)):
            aux.add_edge(u, v, key=(e.id, k), weight=cv - cu, edge=e.id, lo=cu, hi=cv, lo_node=u, hi_node=v)
    return aux, terminals


def graph_distance(g: MetricGraph, x: GraphPoint, y: GraphPoint) -> float:
    """Shortest-path distance between two points of the metric graph."""
    g.require_valid()
    aux, (s, t) = _auxiliary_graph(g, [x, y])
    if s == t:
        return 0.0
    return float(nx.dijkstra_path_length(aux, s, t, weight="weight"))


def _cheapest_pieces(aux: nx.MultiGraph, u: Any, v: Any) -> list[dict[str, Any]]:
    data = aux.get_edge_data(u, v)
    w_min = min(attrs["weight"] for attrs in data.values())
    return [attrs for _, attrs in sorted(data.items()) if attrs["weight"] <= w_min * (1.0 + TIE_RTOL)]


def _near_shortest_node_paths(aux: nx.MultiGraph, s: Any, t: Any) -> Iterator[list[Any]]:
    """Simple node paths from s to t whose length matches the optimum up to TIE_RTOL.

    An edge uv is kept when d(s, u) + w(uv) + d(v, t) is within the slack, so branches whose
    lengths differ only by summation order are all reported.
    """
    from_s = nx.single_source_dijkstra_path_length(aux, s, weight="weight")
    to_t = nx.single_source_dijkstra_path_length(aux, t, weight="weight")
    limit = from_s[t] * (1.0 + TIE_RTOL)
    stack: list[list[Any]] = [[s]]
    while stack:
        path = stack.pop()
        u = path[-1]
        if u == t:
            yield path
            continue
        for v in sorted(aux.neighbors(u), key=str, reverse=True):
            if v in path:
                continue
            w = min(attrs["weight"] for attrs in aux.get_edge_data(u, v).values())
            if from_s[u] + w + to_t[v] <= limit:
                stack.append([*path, v])


def _piece_segment(u: Any, attrs: dict[str, Any]) -> Segment:
    if u == attrs["lo_node"]:
        return Segment(attrs["edge"], attrs["lo"], attrs["hi"])
    return Segment(attrs["edge"], attrs["hi"], attrs["lo"])


def _merge_segments(segments: list[Segment]) -> tuple[Segment, ...]:
    merged: list[Segment] = []
    for seg in segments:
        if merged and merged[-1].edge == seg.edge and merged[-1].end == seg.start:
            merged[-1] = Segment(seg.edge, merged[-1].start, seg.end)
        else:
            merged.append(seg)
    return tuple(merged)


def shortest_path(g: MetricGraph, x: GraphPoint, y: GraphPoint) -> GraphPath:
    """A shortest path from x to y; among ties, the lexicographically smallest edge-id sequence."""
    g.require_valid()
    aux, (s, t) = _auxiliary_graph(g, [x, y])
    if s == t:
        return GraphPath()
    best: tuple[tuple[EdgeId, ...], tuple[Segment, ...]] | None = None
    for nodes in _near_shortest_node_paths(aux, s, t):
        hops = list(itertools.pairwise(nodes))
        for choice in itertools.product(*(_cheapest_pieces(aux, u, v) for u, v in hops)):
            segments = _merge_segments([_piece_segment(u, attrs) for (u, _), attrs in zip(hops, choice, strict=True)])
            key = tuple(seg.edge for seg in segments)
            if best is None or key < best[0]:
                best = (key, segments)
    assert best is not None
    return GraphPath(best[1])


def geodesic_multiplicity(
    g: MetricGraph,
    x: GraphPoint,
    y: GraphPoint | Sequence[GraphPoint],
    tol: float = 1e-9,
) -> int:
    """Number of distinct simple paths from x whose length is within ``tol`` of the optimum.

    ``y`` may be a single point or a set of candidate targets; with a set, paths to every
    target attaining the minimal distance are counted (the "all endpoints at distance r" query).
    A count above 1 flags branching or non-unique geodesics.
    """
    g.require_valid()
    targets = [y] if isinstance(y, GraphPoint) else list(y)
    if not targets:
        raise DomainError("geodesic_multiplicity needs at least one target")
    aux, terminals = _auxiliary_graph(g, [x, *targets])
    source, ends = terminals[0], list(dict.fromkeys(terminals[1:]))
    if source in ends:
        return 1
    lengths = nx.single_source_dijkstra_path_length(aux, source, weight="weight")
    best = min(lengths.get(t, math.inf) for t in ends)
    count = 0
    for t in ends:
        if lengths.get(t, math.inf) > best + tol:
            continue
        for path in nx.all_simple_edge_paths(aux, source, t):
            total = sum(aux.edges[u, v, k]["weight"] for u, v, k in path)
            if total <= best + tol:
                count += 1
    logger.debug(f"geodesic multiplicity from {x} to {len(ends)} target(s): {count}")
    return max(count, 1)


def load_graph(path: str | Path) -> MetricGraph:
    record = GraphFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    return MetricGraph.from_record(record)


def dump_graph(g: MetricGraph, path: str | Path) -> None:
    Path(path).write_text(g.to_record().model_dump_json(indent=2, exclude_none=True) + "\n", encoding="utf-8")


__all__ = [
    "NodeId",
    "EdgeId",
    "Location",
    "Edge",
    "GraphPoint",
    "Incidence",
    "Segment",
    "GraphPath",
    "ValidationReport",
    "MetricGraph",
    "validate_graph",
    "graph_distance",
    "shortest_path",
    "geodesic_multiplicity",
    "load_graph",
    "dump_graph",
]
