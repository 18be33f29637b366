"""Discrete probability measures on metric graphs and in the ambient tube.

A measure is a finite list of atoms ``(location, weight)`` whose locations are either all
GraphPoints or all AmbientPoints. Grid densities enter as atoms at cell centres.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Hashable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Literal, Union

import numpy as np

from errors import DomainError
from graphcore import GraphPoint, MetricGraph
from models import AtomRecord, MeasureFile

if TYPE_CHECKING:
    from tube import TubeGrid

logger = logging.getLogger(__name__)

MASS_TOL = 1e-9
TIE_RTOL = 1e-12  # relative distance slack when deciding projection ties
SAMPLE_BATCH_LIMIT = 1000
THICKEN_RETRIES = 64


@dataclass(frozen=True)
class AmbientPoint:
    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        coords = tuple(float(c) for c in self.coords)
        if len(coords) not in (2, 3):
            raise DomainError(f"ambient points live in R^2 or R^3, got dimension {len(coords)}")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def of(cls, *xs: float) -> AmbientPoint:
        return cls(tuple(xs))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


Location = Union[GraphPoint, AmbientPoint]


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure with finitely many atoms; weights are read-only."""

    locations: tuple[Location, ...]
    weights: np.ndarray

    def __post_init__(self) -> None:
        locs = tuple(self.locations)
        w = np.array(self.weights, dtype=float, copy=True).reshape(-1)
        if not locs:
            raise DomainError("a measure needs at least one atom")
        if w.shape != (len(locs),):
            raise DomainError(f"{len(locs)} locations but {w.size} weights")
        if not np.all(np.isfinite(w)) or (w < 0).any():
            raise DomainError("weights must be finite and nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise DomainError(f"weights must sum to 1 (got {total:.12g})")
        kinds = {type(loc) for loc in locs}
        if len(kinds) != 1 or not kinds <= {GraphPoint, AmbientPoint}:
            raise DomainError("atom locations must be all GraphPoints or all AmbientPoints")
        if kinds == {AmbientPoint} and len({loc.dim for loc in locs}) != 1:  # type: ignore[union-attr]
            raise DomainError("ambient atoms must share one dimension")
        w.setflags(write=False)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, locations: Sequence[Location]) -> DiscreteMeasure:
        n = len(locations)
        return cls(tuple(locations), np.full(n, 1.0 / n) if n else np.empty(0))

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[Location, float]]) -> DiscreteMeasure:
        pairs = list(atoms)
        return cls(tuple(loc for loc, _ in pairs), np.array([w for _, w in pairs], dtype=float))

    @property
    def kind(self) -> Literal["graph", "ambient"]:
        return "graph" if isinstance(self.locations[0], GraphPoint) else "ambient"

    def __len__(self) -> int:
        return len(self.locations)

    def atoms(self) -> list[tuple[Location, float]]:
        return list(zip(self.locations, self.weights.tolist(), strict=True))

    def coordinates(self) -> np.ndarray:
        """(n, d) array of ambient coordinates."""
        if self.kind != "ambient":
            raise DomainError("coordinates() needs an ambient measure")
        return np.array([loc.coords for loc in self.locations], dtype=float)  # type: ignore[union-attr]

    def is_uniform(self, rtol: float = 1e-12) -> bool:
        return bool(np.allclose(self.weights, 1.0 / len(self), rtol=rtol, atol=0.0))


def pushforward(
    m: DiscreteMeasure,
    f: Callable[[Location], Location],
    key: Callable[[Location], Hashable] | None = None,
) -> DiscreteMeasure:
    """Image measure f#m; atoms whose images coincide (exactly, or under ``key``) merge."""
    slots: dict[Hashable, int] = {}
    locations: list[Location] = []
    weights: list[float] = []
    for loc, w in m.atoms():
        image = f(loc)
        k = key(image) if key is not None else image
        if k in slots:
            weights[slots[k]] += w
        else:
            slots[k] = len(locations)
            locations.append(image)
            weights.append(w)
    return DiscreteMeasure(tuple(locations), np.asarray(weights))


def project_to_graph(g: MetricGraph, x: AmbientPoint | np.ndarray) -> GraphPoint:
    """Closest point of the embedded graph; ties go to the lowest EdgeId, then the lowest coord."""
    table = g.segment_table
    p = x.array() if isinstance(x, AmbientPoint) else np.asarray(x, dtype=float)
    if p.shape != (table.starts.shape[1],):
        raise DomainError(f"point of dimension {p.size} cannot be projected onto a {table.starts.shape[1]}D embedding")
    d = table.ends - table.starts
    sq = np.einsum("ij,ij->i", d, d)
    safe = np.where(sq > 0, sq, 1.0)
    t = np.clip(np.einsum("ij,ij->i", p - table.starts, d) / safe, 0.0, 1.0)
    t = np.where(sq > 0, t, 0.0)
    closest = table.starts + t[:, None] * d
    dist = np.linalg.norm(p - closest, axis=1)
    best = float(dist.min())
    coords = (table.arc_offset + t * np.sqrt(sq)) * table.scale
    candidates = np.flatnonzero(dist <= best + TIE_RTOL * max(best, 1.0))
    k = min(candidates, key=lambda i: (table.edge_ids[i], coords[i]))
    edge = g.edge(table.edge_ids[k])
    return GraphPoint(edge.id, float(min(max(coords[k], 0.0), edge.length)))


def project_measure(m: DiscreteMeasure, g: MetricGraph) -> DiscreteMeasure:
    """Push an ambient measure onto the graph; atoms landing on the same graph point merge."""
    if m.kind != "ambient":
        raise DomainError("project_measure needs an ambient measure")
    return pushforward(m, lambda x: project_to_graph(g, x), key=g.locate)  # type: ignore[arg-type]


def lift_to_ambient(m: DiscreteMeasure, g: MetricGraph) -> DiscreteMeasure:
    """Map every graph atom to its embedded coordinates."""
    if m.kind != "graph":
        raise DomainError("lift_to_ambient needs a graph measure")
    if not g.has_embeddings:
        raise DomainError("lift_to_ambient needs a graph with embedded edges")
    return pushforward(m, lambda p: AmbientPoint(tuple(g.embed_point(p))))  # type: ignore[arg-type]


def sample_graph_measure(
    g: MetricGraph,
    n: int,
    seed: int,
    edges: Sequence[str] | None = None,
) -> DiscreteMeasure:
    """n atoms of weight 1/n, uniform with respect to length on the chosen edges."""
    if n < 1:
        raise DomainError("n must be at least 1")
    chosen = [g.edge(eid) for eid in (edges or g.edge_ids)]
    rng = np.random.default_rng(seed)
    lengths = np.array([e.length for e in chosen])
    picks = rng.choice(len(chosen), size=n, p=lengths / lengths.sum())
    fractions = rng.uniform(0.0, 1.0, size=n)
    points = [GraphPoint(chosen[k].id, float(u * chosen[k].length)) for k, u in zip(picks, fractions, strict=True)]
    return DiscreteMeasure.uniform(points)


def sample_tube_measure(
    tube: TubeGrid,
    n: int,
    seed: int,
    profile: Literal["uniform", "graph-biased"] = "uniform",
) -> DiscreteMeasure:
    """n atoms of weight 1/n drawn by rejection against the tube mask; deterministic per seed.

    ``uniform`` draws in the bounding box of the raster. ``graph-biased`` draws a point uniformly
    by length on the graph, lifts it, and adds a Gaussian offset of scale epsilon/3.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    if not tube.mask.any():
        raise DomainError("cannot sample from an empty tube")
    rng = np.random.default_rng(seed)
    lo, hi = tube.bounds()
    batch = max(2 * n, 64)
    accepted: list[np.ndarray] = []
    count = 0
    for _ in range(SAMPLE_BATCH_LIMIT):
        if profile == "uniform":
            cand = rng.uniform(lo, hi, size=(batch, tube.dim))
        elif profile == "graph-biased":
            anchors = sample_graph_measure(tube.graph, batch, int(rng.integers(2**31)))
            base = np.array([tube.graph.embed_point(p) for p in anchors.locations])  # type: ignore[arg-type]
            cand = base + rng.normal(scale=tube.epsilon / 3.0, size=base.shape)
        else:
            raise DomainError(f"unknown sampling profile {profile!r}")
        keep = cand[tube.contains_many(cand)]
        accepted.append(keep)
        count += len(keep)
        if count >= n:
            break
    else:
        raise DomainError(f"rejection sampling accepted only {count} of {n} points")
    pts = np.concatenate(accepted)[:n]
    logger.debug(f"sampled {n} tube points with profile {profile}")
    return DiscreteMeasure.uniform([AmbientPoint(tuple(p)) for p in pts])


def thicken_measure(
    m: DiscreteMeasure,
    g: MetricGraph,
    tube: TubeGrid,
    seed: int,
    radius: float | None = None,
) -> DiscreteMeasure:
    """Lift a graph measure and jitter every atom uniformly in a ball of radius epsilon.

    Jittered points outside the mask are redrawn; the lifted point itself is the fallback,
    and it always lies in the mask. As epsilon shrinks the result converges to the lift.
    """
    if m.kind != "graph":
        raise DomainError("thicken_measure needs a graph measure")
    r = tube.epsilon if radius is None else radius
    rng = np.random.default_rng(seed)
    locations: list[Location] = []
    for loc in m.locations:
        base = g.embed_point(loc)  # type: ignore[arg-type]
        point = base
        for _ in range(THICKEN_RETRIES):
            direction = rng.normal(size=base.shape)
            norm = float(np.linalg.norm(direction))
            if norm == 0.0:
                continue
            cand = base + direction / norm * r * rng.uniform() ** (1.0 / base.size)
            if tube.contains(cand):
                point = cand
                break
        locations.append(AmbientPoint(tuple(point)))
    return DiscreteMeasure(tuple(locations), m.weights)


def load_measure(path: str | Path) -> DiscreteMeasure:
    record = MeasureFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    if record.kind == "graph":
        locs: list[Location] = [GraphPoint(a.edge, float(a.coord)) for a in record.atoms]  # type: ignore[arg-type]
    else:
        locs = [AmbientPoint(tuple(a.coords)) for a in record.atoms]  # type: ignore[arg-type]
    return DiscreteMeasure(tuple(locs), np.array([a.weight for a in record.atoms]))


def dump_measure(m: DiscreteMeasure, path: str | Path) -> None:
    atoms = []
    for loc, w in m.atoms():
        if isinstance(loc, GraphPoint):
            atoms.append(AtomRecord(weight=w, edge=loc.edge, coord=loc.coord))
        else:
            atoms.append(AtomRecord(weight=w, coords=list(loc.coords)))
    record = MeasureFile(kind=m.kind, atoms=atoms)
    Path(path).write_text(record.model_dump_json(indent=2, exclude_none=True) + "\n", encoding="utf-8")


__all__ = [
    "AmbientPoint",
    "Location",
    "DiscreteMeasure",
    "pushforward",
    "project_to_graph",
    "project_measure",
    "lift_to_ambient",
    "sample_graph_measure",
    "sample_tube_measure",
    "thicken_measure",
    "load_measure",
    "dump_measure",
]
