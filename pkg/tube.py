"""Epsilon-tubes around embedded graphs, rasterized on a uniform grid.

The tube is the set of points within distance epsilon of the embedded polylines. Its raster
is an 8-neighbour (2D) or 26-neighbour (3D) grid graph carrying two weightings: Euclidean
step length, used for the action cost (geodesic length squared), and squared increments,
used to reproduce pixel-stencil trajectories.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Literal

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from config import config
from errors import DomainError, ResolutionError
from graphcore import MetricGraph, geodesic_multiplicity
from measures import AmbientPoint, DiscreteMeasure, project_to_graph, sample_graph_measure
from static_ot import CostMatrix, Coupling, TubeCost, build_cost_matrix

logger = logging.getLogger(__name__)

Metric = Literal["length", "pixel"]

RASTER_CHUNK = 65536  # cell centres per distance evaluation batch
DIJKSTRA_CHUNK = 8  # sources per Dijkstra call
BACKTRACK_RTOL = 1e-9
KINK_RTOL = 1.0  # slope mismatch over 2 * length; 8-neighbour anisotropy alone gives 4(sqrt(2) - 1) * length
ENDPOINT_DISC = 3.0  # corridor test ignores cells within this many h of x and y


@dataclass(frozen=True, eq=False)
class GridGraph:
    """Mask cells as vertices (lexicographic cell order) with stencil-neighbour edges."""

    cells: np.ndarray  # (N, d) integer cell indices
    index: np.ndarray  # raster-shaped, vertex id or -1
    length_weights: csr_matrix  # h * |offset|
    pixel_weights: csr_matrix  # h^2 * |offset|^2

    @property
    def size(self) -> int:
        return int(self.cells.shape[0])

    def weights(self, metric: Metric = "length") -> csr_matrix:
        if metric == "length":
            return self.length_weights
        if metric == "pixel":
            return self.pixel_weights
        raise DomainError(f"unknown grid metric {metric!r}")


def build_grid_graph(mask: np.ndarray, h: float) -> GridGraph:
    cells = np.argwhere(mask)
    n = len(cells)
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[tuple(cells.T)] = np.arange(n)
    shape = np.array(mask.shape)
    rows, cols, lengths, pixels = [], [], [], []
    for offset in itertools.product((-1, 0, 1), repeat=mask.ndim):
        if not any(offset):
            continue
        nb = cells + np.asarray(offset)
        inside = np.all((nb >= 0) & (nb < shape), axis=1)
        j = np.full(n, -1, dtype=np.int64)
        j[inside] = index[tuple(nb[inside].T)]
        ok = np.flatnonzero(j >= 0)
        norm2 = float(sum(o * o for o in offset))
        rows.append(ok)
        cols.append(j[ok])
        lengths.append(np.full(len(ok), h * math.sqrt(norm2)))
        pixels.append(np.full(len(ok), h * h * norm2))
    r, c = np.concatenate(rows), np.concatenate(cols)
    return GridGraph(
        cells=cells,
        index=index,
        length_weights=csr_matrix((np.concatenate(lengths), (r, c)), shape=(n, n)),
        pixel_weights=csr_matrix((np.concatenate(pixels), (r, c)), shape=(n, n)),
    )


@dataclass(frozen=True, eq=False)
class TubeGrid:
    h: float
    origin: np.ndarray
    mask: np.ndarray
    epsilon: float
    graph: MetricGraph

    @property
    def dim(self) -> int:
        return int(self.mask.ndim)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.mask.shape)

    @property
    def cell_count(self) -> int:
        return int(self.mask.sum())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + np.asarray(self.shape) * self.h

    @cached_property
    def grid(self) -> GridGraph:
        g = build_grid_graph(self.mask, self.h)
        logger.debug(f"grid graph: {g.size} vertices, {g.length_weights.nnz} stencil edges")
        return g

    def centers(self, vertices: np.ndarray | Sequence[int]) -> np.ndarray:
        return self.origin + (self.grid.cells[np.asarray(vertices, dtype=int)] + 0.5) * self.h

    def snap_many(self, points: np.ndarray) -> np.ndarray:
        """Grid vertex of the cell containing each point, or -1 outside the mask."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise DomainError(f"{pts.shape[1]}D points on a {self.dim}D tube")
        idx = np.floor((pts - self.origin) / self.h).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        out[inside] = self.grid.index[tuple(idx[inside].T)]
        return out

    def snap(self, point: AmbientPoint | np.ndarray) -> int | None:
        p = point.array() if isinstance(point, AmbientPoint) else point
        v = int(self.snap_many(p)[0])
        return None if v < 0 else v

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        return self.snap_many(points) >= 0

    def contains(self, point: AmbientPoint | np.ndarray) -> bool:
        return self.snap(point) is not None


def _distance_to_polylines(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    d = ends - starts
    sq = np.einsum("ij,ij->i", d, d)
    rel = points[:, None, :] - starts[None, :, :]
    t = np.einsum("nsk,sk->ns", rel, d) / np.where(sq > 0, sq, 1.0)
    t = np.clip(t, 0.0, 1.0)
    nearest = starts[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.linalg.norm(points[:, None, :] - nearest, axis=2).min(axis=1)


def rasterize(g: MetricGraph, epsilon: float, h: float) -> TubeGrid:
    """Cells whose centres lie within ``epsilon`` of the embedded graph.

    Raises:
        ResolutionError: h > epsilon / 2, or the mask is not a single connected component.
    """
    if epsilon <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if h <= 0 or h > epsilon / 2:
        raise ResolutionError(f"grid spacing h={h} must lie in (0, epsilon/2] for epsilon={epsilon}")
    if not g.has_embeddings:
        raise DomainError("rasterize needs a graph with embedded edges")
    table = g.segment_table
    pts = np.vstack([table.starts, table.ends])
    pad = epsilon + 2 * h
    origin = pts.min(axis=0) - pad
    shape = tuple(int(k) for k in np.ceil((pts.max(axis=0) + pad - origin) / h))
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    for lo in range(0, total, RASTER_CHUNK):
        idx = np.stack(np.unravel_index(np.arange(lo, min(lo + RASTER_CHUNK, total)), shape), axis=1)
        centers = origin + (idx + 0.5) * h
        flat[lo : lo + len(idx)] = _distance_to_polylines(centers, table.starts, table.ends) <= epsilon
    mask = flat.reshape(shape)
    _, components = ndimage.label(mask, structure=np.ones((3,) * mask.ndim))
    if components != 1:
        raise ResolutionError(f"tube mask has {components} connected components at h={h}, epsilon={epsilon}")
    logger.info(f"rasterized tube: epsilon={epsilon} h={h} shape={shape} cells={int(mask.sum())}")
    return TubeGrid(h=float(h), origin=origin, mask=mask, epsilon=float(epsilon), graph=g)


def _dijkstra_rows(tg: TubeGrid, sources: np.ndarray, metric: Metric) -> dict[int, np.ndarray]:
    W = tg.grid.weights(metric)
    chunks = [sources[k : k + DIJKSTRA_CHUNK] for k in range(0, len(sources), DIJKSTRA_CHUNK)]
    with ThreadPoolExecutor(max_workers=min(config.max_workers, max(len(chunks), 1))) as pool:
        blocks = list(pool.map(lambda chunk: np.atleast_2d(dijkstra(W, directed=True, indices=chunk)), chunks))
    rows: dict[int, np.ndarray] = {}
    for chunk, block in zip(chunks, blocks, strict=True):
        for s, row in zip(chunk.tolist(), block, strict=True):
            rows[s] = row
    return rows


def geodesic_length_matrix(tg: TubeGrid, xs: np.ndarray, ys: np.ndarray, metric: Metric = "length") -> np.ndarray:
    """Grid geodesic values between snapped points; +inf outside the mask or when unreachable."""
    sx, sy = tg.snap_many(xs), tg.snap_many(ys)
    out = np.full((len(sx), len(sy)), np.inf)
    sources = np.unique(sx[sx >= 0])
    if sources.size == 0:
        return out
    rows = _dijkstra_rows(tg, sources, metric)
    ok_y = sy >= 0
    for i, s in enumerate(sx.tolist()):
        if s >= 0:
            out[i, ok_y] = rows[s][sy[ok_y]]
    return out


def _pair_value(tg: TubeGrid, x: AmbientPoint | np.ndarray, y: AmbientPoint | np.ndarray, metric: Metric) -> float:
    sx, sy = tg.snap(x), tg.snap(y)
    if sx is None or sy is None:
        return math.inf
    if sx == sy:
        return 0.0
    lo, hi = min(sx, sy), max(sx, sy)
    return float(dijkstra(tg.grid.weights(metric), directed=True, indices=lo)[hi])


def tube_cost(tg: TubeGrid, x: AmbientPoint | np.ndarray, y: AmbientPoint | np.ndarray) -> float:
    """Action cost: squared grid-geodesic length between the snapped points."""
    length = _pair_value(tg, x, y, "length")
    return length * length if math.isfinite(length) else math.inf


def pixel_cost(tg: TubeGrid, x: AmbientPoint | np.ndarray, y: AmbientPoint | np.ndarray) -> float:
    """Shortest path under the squared-increment stencil weights."""
    return _pair_value(tg, x, y, "pixel")


def tube_cost_matrix(tg: TubeGrid, src: DiscreteMeasure, dst: DiscreteMeasure) -> CostMatrix:
    return build_cost_matrix(src, dst, TubeCost(tg), p=2.0)


# Trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    cells: tuple[int, ...]  # grid vertices from source to target
    points: np.ndarray  # cell centres
    source: int
    target: int
    mass: float

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def _backtrack(W: csr_matrix, dist: np.ndarray, source: int, target: int) -> list[int]:
    """Predecessor chain from target to source; the lowest-index tight neighbour wins ties."""
    if not math.isfinite(dist[target]):
        raise DomainError(f"grid vertex {target} is unreachable from {source}")
    path = [target]
    v = target
    while v != source:
        lo, hi = W.indptr[v], W.indptr[v + 1]
        nbrs, w = W.indices[lo:hi], W.data[lo:hi]
        tight = np.abs(dist[nbrs] + w - dist[v]) <= BACKTRACK_RTOL * max(1.0, dist[v])
        tight &= dist[nbrs] < dist[v]
        v = int(nbrs[tight].min())
        path.append(v)
    path.reverse()
    return path


def extract_trajectories(
    tg: TubeGrid,
    coupling: Coupling,
    src: DiscreteMeasure,
    dst: DiscreteMeasure,
    metric: Metric = "length",
) -> list[Trajectory]:
    """One grid geodesic per positive-mass coupling entry, in entry order."""
    sx = tg.snap_many(src.coordinates())
    sy = tg.snap_many(dst.coordinates())
    entries = coupling.support()
    for i, j, _ in entries:
        if sx[i] < 0 or sy[j] < 0:
            raise DomainError(f"coupling entry ({i}, {j}) has an atom outside the tube mask")
    sources = np.unique([sx[i] for i, _, _ in entries]).astype(np.int64)
    rows = _dijkstra_rows(tg, sources, metric) if sources.size else {}
    W = tg.grid.weights(metric)
    out = []
    for i, j, m in entries:
        cells = _backtrack(W, rows[int(sx[i])], int(sx[i]), int(sy[j]))
        out.append(Trajectory(tuple(cells), tg.centers(cells), source=i, target=j, mass=m))
    return out


# Gradient check


@dataclass(frozen=True)
class GradientCheck:
    numeric: np.ndarray
    predicted: np.ndarray  # -2 * initial velocity of the constant-speed geodesic
    discrepancy: float
    conclusive: bool
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "numeric": self.numeric.tolist(),
            "predicted": self.predicted.tolist(),
            "discrepancy": self.discrepancy,
            "conclusive": self.conclusive,
            "reason": self.reason,
        }


def _corridor_components(
    tg: TubeGrid, dx: np.ndarray, dy: np.ndarray, length: float, x: np.ndarray, y: np.ndarray
) -> int:
    slack = 2 * tg.h * math.sqrt(tg.dim)
    near = dx + dy <= length + slack
    centers = tg.centers(np.arange(tg.grid.size))
    radius = ENDPOINT_DISC * tg.h
    near &= np.linalg.norm(centers - x, axis=1) > radius
    near &= np.linalg.norm(centers - y, axis=1) > radius
    raster = np.zeros(tg.shape, dtype=bool)
    raster[tuple(tg.grid.cells[near].T)] = True
    _, count = ndimage.label(raster, structure=np.ones((3,) * tg.dim))
    return int(count)


def cost_gradient_check(
    tg: TubeGrid,
    x: AmbientPoint | np.ndarray,
    y: AmbientPoint | np.ndarray,
    fd_step: float | None = None,
) -> GradientCheck:
    """Compare central differences of the tube cost in x with -2 times the geodesic's initial velocity.

    The comparison is only meaningful for a unique geodesic. The result is flagged inconclusive
    when the difference stencil leaves the tube, the graph has several shortest routes between the
    projected endpoints, the near-geodesic corridor splits, or the one-sided differences disagree.
    """
    xa = x.array() if isinstance(x, AmbientPoint) else np.asarray(x, dtype=float)
    ya = y.array() if isinstance(y, AmbientPoint) else np.asarray(y, dtype=float)
    step = 4 * tg.h if fd_step is None else float(fd_step)
    zero = np.zeros(tg.dim)

    def inconclusive(reason: str) -> GradientCheck:
        logger.info(f"gradient check inconclusive: {reason}")
        return GradientCheck(zero, zero, math.nan, False, reason)

    sx, sy = tg.snap(xa), tg.snap(ya)
    if sx is None or sy is None:
        return inconclusive("endpoint outside the tube")
    basis = np.eye(tg.dim) * step
    if not tg.contains_many(np.vstack([xa + basis, xa - basis])).all():
        return inconclusive("difference stencil leaves the tube")

    g = tg.graph
    if geodesic_multiplicity(g, project_to_graph(g, xa), project_to_graph(g, ya), tol=2 * tg.h) > 1:
        return inconclusive("several shortest routes between the projected endpoints")

    W = tg.grid.length_weights
    dist_x = dijkstra(W, directed=True, indices=sx)
    dist_y = dijkstra(W, directed=True, indices=sy)
    length = float(dist_x[sy])
    if _corridor_components(tg, dist_x, dist_y, length, xa, ya) > 1:
        return inconclusive("near-geodesic corridor splits")

    base = tube_cost(tg, xa, ya)
    numeric = np.empty(tg.dim)
    for k in range(tg.dim):
        fwd = tube_cost(tg, xa + basis[k], ya)
        bwd = tube_cost(tg, xa - basis[k], ya)
        one_sided = ((fwd - base) / step, (base - bwd) / step)
        numeric[k] = (fwd - bwd) / (2 * step)
        if abs(one_sided[0] - one_sided[1]) > KINK_RTOL * max(abs(numeric[k]), 2 * length):
            return inconclusive(f"one-sided differences disagree along axis {k}")

    path = tg.centers(_backtrack(W, dist_x, sx, sy))
    if len(path) < 2:
        predicted = zero.copy()
    else:
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])
        reach = min(length, max(2 * step, 4 * tg.h))
        k = int(min(np.searchsorted(arc, reach - 1e-12), len(path) - 1))
        chord = path[k] - path[0]
        predicted = -2.0 * length * chord / np.linalg.norm(chord)
    discrepancy = float(np.linalg.norm(numeric - predicted))
    return GradientCheck(numeric, predicted, discrepancy, True)


# Sandwich bounds


@dataclass(frozen=True)
class SandwichReport:
    epsilon: float
    h: float
    K: float
    K_fitted: bool
    slack: float
    n_pairs: int
    upper_fraction: float
    lower_fraction: float
    worst_upper: float  # max of c_eps - (c0 + 2 eps^2 + slack)
    worst_lower: float  # max of (c0 - K eps^2 - slack) - c_eps

    @property
    def fraction(self) -> float:
        return min(self.upper_fraction, self.lower_fraction)

    def to_dict(self) -> dict[str, Any]:
        out = dict(self.__dict__)
        out["K_source"] = "fitted" if self.K_fitted else "given"
        return out


def _pair_costs(tg: TubeGrid, n_pairs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    g = tg.graph
    pts = sample_graph_measure(g, 2 * n_pairs, seed)
    lifted = np.array([g.embed_point(p) for p in pts.locations])  # type: ignore[arg-type]
    xs, ys = lifted[:n_pairs], lifted[n_pairs:]
    lengths = geodesic_length_matrix(tg, xs, ys)
    c_eps = np.diag(lengths) ** 2
    px = [project_to_graph(g, x) for x in xs]
    py = [project_to_graph(g, y) for y in ys]
    c0 = np.diag(g.distance_matrix(px, py)) ** 2
    return c_eps, c0


def sandwich_report(tg: TubeGrid, n_pairs: int = 200, seed: int = 0, K: float | None = None) -> SandwichReport:
    """Check c0(P x, P y) - K eps^2 - slack <= c_eps(x, y) <= c0(P x, P y) + 2 eps^2 + slack on lifted pairs.

    slack is 4 h times the graph diameter bound. Without ``K`` the constant is fitted as the
    smallest value satisfying the lower bound on a separate calibration sample (seed + 1).
    """
    eps2 = tg.epsilon**2
    slack = 4 * tg.h * tg.graph.diameter_bound()
    fitted = K is None
    if K is None:
        cal_eps, cal_0 = _pair_costs(tg, n_pairs, seed + 1)
        K = max(0.0, float(np.max((cal_0 - cal_eps - slack) / eps2)))
    c_eps, c0 = _pair_costs(tg, n_pairs, seed)
    upper = c_eps - (c0 + 2 * eps2 + slack)
    lower = (c0 - K * eps2 - slack) - c_eps
    report = SandwichReport(
        epsilon=tg.epsilon,
        h=tg.h,
        K=K,
        K_fitted=fitted,
        slack=slack,
        n_pairs=n_pairs,
        upper_fraction=float(np.mean(upper <= 0)),
        lower_fraction=float(np.mean(lower <= 0)),
        worst_upper=float(upper.max()),
        worst_lower=float(lower.max()),
    )
    logger.info(
        f"sandwich eps={tg.epsilon}: K={K:.4g} "
        f"upper={report.upper_fraction:.3f} lower={report.lower_fraction:.3f}"
    )
    return report


# Export


def export_raster(tg: TubeGrid, stem: str | Path) -> tuple[Path, Path]:
    """Write the mask as a portable graymap plus a JSON header; 3D masks are projected along z."""
    stem = Path(stem)
    mask = tg.mask if tg.dim == 2 else tg.mask.any(axis=2)
    image = np.where(mask.T[::-1], 255, 0).astype(np.uint8)
    pgm = stem.with_suffix(".pgm")
    header = stem.with_suffix(".json")
    Image.fromarray(image).save(pgm)
    meta = {
        "h": tg.h,
        "origin": tg.origin.tolist(),
        "epsilon": tg.epsilon,
        "shape": list(tg.shape),
        "dim": tg.dim,
        "cells": tg.cell_count,
        "projection": None if tg.dim == 2 else "z",
    }
    header.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return pgm, header


__all__ = [
    "Metric",
    "GridGraph",
    "TubeGrid",
    "Trajectory",
    "GradientCheck",
    "SandwichReport",
    "build_grid_graph",
    "rasterize",
    "geodesic_length_matrix",
    "tube_cost",
    "pixel_cost",
    "tube_cost_matrix",
    "extract_trajectories",
    "cost_gradient_check",
    "sandwich_report",
    "export_raster",
]
