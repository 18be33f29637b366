"""Dynamic transport on metric graphs: continuity equations on edge grids and the p-action.

Densities live at cell centres of a uniform grid on every edge, fluxes at cell faces, and node
masses (reservoir variants) at the graph nodes. Time is split into ``steps`` intervals of [0, 1]:
densities and node masses at the T + 1 levels, fluxes on the T intervals.

The minimal action is computed with a first-order primal-dual iteration: the affine continuity
and endpoint constraints are handled by exact projection, the perspective integrand by its
per-cell proximal map.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.special import exprel, rel_entr

from config import config
from errors import ConvergenceError, DomainError
from graphcore import EdgeId, GraphPoint, MetricGraph
from measures import DiscreteMeasure, Location

logger = logging.getLogger(__name__)

Variant = Literal["kirchhoff", "reservoir-net", "reservoir-per-edge"]
VARIANTS: tuple[str, ...] = ("kirchhoff", "reservoir-net", "reservoir-per-edge")
Potential = Callable[[EdgeId, np.ndarray], np.ndarray]

MASS_TOL = 1e-8
DENSITY_FLOOR = 1e-12  # minimum density where the proximal step leaves a nonzero flux
NEWTON_MAX = 80
PROJECTION_REG = 1e-12  # relative diagonal shift of A A^T


# Grids and states


@dataclass(frozen=True)
class EdgeGrid:
    edge: EdgeId
    n_cells: int
    dx: float
    cells: slice  # into the flat cell vector
    faces: slice  # into the flat face vector; n_cells + 1 faces

    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dx


class NetworkGrid:
    """Uniform cells on every edge of a metric graph, flattened in edge-id order."""

    def __init__(self, graph: MetricGraph, cells_per_edge: int | None = None, dx: float | None = None) -> None:
        graph.require_valid()
        if (cells_per_edge is None) == (dx is None):
            raise DomainError("give exactly one of cells_per_edge and dx")
        if cells_per_edge is not None and cells_per_edge < 1:
            raise DomainError("cells_per_edge must be at least 1")
        if dx is not None and dx <= 0:
            raise DomainError("dx must be positive")
        self.graph = graph
        grids = []
        c0 = f0 = 0
        for e in graph.edges:
            if cells_per_edge is not None:
                n = cells_per_edge
            else:
                n = max(1, int(round(e.length / dx)))  # type: ignore[operator]
            grids.append(EdgeGrid(e.id, n, e.length / n, slice(c0, c0 + n), slice(f0, f0 + n + 1)))
            c0 += n
            f0 += n + 1
        self.edge_grids: tuple[EdgeGrid, ...] = tuple(grids)
        self.n_cells = c0
        self.n_faces = f0
        self.n_nodes = len(graph.nodes)
        self.cell_dx = np.concatenate([np.full(eg.n_cells, eg.dx) for eg in grids])
        self.cell_edge = np.concatenate([np.full(eg.n_cells, k) for k, eg in enumerate(grids)])
        self.left_face = np.concatenate([eg.faces.start + np.arange(eg.n_cells) for eg in grids])
        self.right_face = self.left_face + 1

        node_index = graph.node_index
        inc_node, inc_face, inc_cell, inc_sign = [], [], [], []
        for eg in grids:
            e = graph.edge(eg.edge)
            inc_node += [node_index[e.tail], node_index[e.head]]
            inc_face += [eg.faces.start, eg.faces.stop - 1]
            inc_cell += [eg.cells.start, eg.cells.stop - 1]
            inc_sign += [-1, 1]
        self.inc_node = np.asarray(inc_node, dtype=int)
        self.inc_face = np.asarray(inc_face, dtype=int)
        self.inc_cell = np.asarray(inc_cell, dtype=int)
        self.inc_sign = np.asarray(inc_sign, dtype=float)
        self.n_incidences = len(inc_node)

    def __repr__(self) -> str:
        return f"NetworkGrid(edges={len(self.edge_grids)}, cells={self.n_cells})"

    def edge_grid(self, edge_id: EdgeId) -> EdgeGrid:
        for eg in self.edge_grids:
            if eg.edge == edge_id:
                return eg
        raise DomainError(f"unknown edge {edge_id!r}")

    def cell_points(self) -> list[GraphPoint]:
        return [GraphPoint(eg.edge, float(x)) for eg in self.edge_grids for x in eg.centers()]

    def cell_values(self, f: Potential) -> np.ndarray:
        """Evaluate f(edge, coords) at every cell centre."""
        return np.concatenate([np.asarray(f(eg.edge, eg.centers()), dtype=float).reshape(-1) for eg in self.edge_grids])

    def masses(self, state: NetworkState) -> np.ndarray:
        return state.rho * self.cell_dx

    def state_from_density(self, f: Potential, gamma: Sequence[float] | None = None) -> NetworkState:
        """State proportional to f on the cells (and ``gamma`` on the nodes), scaled to unit mass."""
        rho = np.maximum(self.cell_values(f), 0.0)
        g = np.zeros(self.n_nodes) if gamma is None else np.asarray(gamma, dtype=float)
        total = float(np.dot(rho, self.cell_dx) + g.sum())
        if total <= 0:
            raise DomainError("density has no mass")
        return NetworkState(self, rho / total, g / total)

    def uniform_state(self) -> NetworkState:
        return self.state_from_density(lambda _e, x: np.ones_like(x))

    def to_measure(self, state: NetworkState) -> DiscreteMeasure:
        """Atoms at cell centres and nodes carrying the state's masses; empty cells are dropped."""
        locations: list[Location] = []
        weights: list[float] = []
        for point, m in zip(self.cell_points(), self.masses(state), strict=True):
            if m > 0:
                locations.append(point)
                weights.append(float(m))
        for node, g in zip(self.graph.nodes, state.gamma, strict=True):
            if g > 0:
                locations.append(self.graph.node_point(node))
                weights.append(float(g))
        w = np.asarray(weights)
        return DiscreteMeasure(tuple(locations), w / w.sum())

    def cell_measure(self, rho: np.ndarray) -> DiscreteMeasure:
        """Atoms at every cell centre, including empty cells."""
        m = np.maximum(np.asarray(rho, dtype=float), 0.0) * self.cell_dx
        return DiscreteMeasure(tuple(self.cell_points()), m / m.sum())


@dataclass(frozen=True, eq=False)
class NetworkState:
    grid: NetworkGrid
    rho: np.ndarray
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        rho = np.array(self.rho, dtype=float).reshape(-1)
        gamma = np.array(self.gamma, dtype=float).reshape(-1)
        if gamma.size == 0:
            gamma = np.zeros(self.grid.n_nodes)
        if rho.shape != (self.grid.n_cells,) or gamma.shape != (self.grid.n_nodes,):
            raise DomainError(f"state shapes {rho.shape}/{gamma.shape} do not match {self.grid}")
        if (rho < 0).any() or (gamma < 0).any():
            raise DomainError("densities and node masses must be nonnegative")
        total = float(np.dot(rho, self.grid.cell_dx) + gamma.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise DomainError(f"state must carry unit mass (got {total:.12g})")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "gamma", gamma)

    @property
    def total_mass(self) -> float:
        return float(np.dot(self.rho, self.grid.cell_dx) + self.gamma.sum())

    @property
    def masses(self) -> np.ndarray:
        """Cell masses followed by node masses."""
        return np.concatenate([self.rho * self.grid.cell_dx, self.gamma])

    def rho_on(self, edge_id: EdgeId) -> np.ndarray:
        return self.rho[self.grid.edge_grid(edge_id).cells]


@dataclass(frozen=True, eq=False)
class DynamicField:
    """Space-time field: densities at T + 1 levels, fluxes on T intervals of [0, horizon]."""

    grid: NetworkGrid
    steps: int
    rho: np.ndarray  # (T + 1, cells)
    flux: np.ndarray  # (T, faces)
    gamma: np.ndarray  # (T + 1, nodes)
    node_flux: np.ndarray | None = None  # (T, incidences), edge -> node
    variant: str = "kirchhoff"
    horizon: float = 1.0

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def masses(self) -> np.ndarray:
        return self.rho @ self.grid.cell_dx + self.gamma.sum(axis=1)

    def state(self, level: int) -> NetworkState:
        rho = np.maximum(self.rho[level], 0.0)
        gamma = np.maximum(self.gamma[level], 0.0)
        total = float(np.dot(rho, self.grid.cell_dx) + gamma.sum())
        return NetworkState(self.grid, rho / total, gamma / total)

    def edge_view(self, level: int, edge_id: EdgeId) -> tuple[np.ndarray, np.ndarray]:
        """Densities and face fluxes of one edge (fluxes of the interval starting at ``level``)."""
        eg = self.grid.edge_grid(edge_id)
        return self.rho[level, eg.cells], self.flux[min(level, self.steps - 1), eg.faces]


@dataclass(frozen=True)
class ActionSpec:
    p: float = 2.0
    variant: Variant = "kirchhoff"

    def __post_init__(self) -> None:
        if not math.isfinite(self.p) or self.p < 1:
            raise DomainError(f"p must be finite and >= 1, got {self.p}")
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}; choose one of {VARIANTS}")

    @property
    def reservoir(self) -> bool:
        return self.variant != "kirchhoff"


# Continuity residuals


@dataclass(frozen=True)
class ContinuityResidual:
    edge: np.ndarray  # (T, cells)
    node: np.ndarray  # (T, nodes)
    coupling: np.ndarray  # (T, incidences); empty for Kirchhoff

    def vector(self) -> np.ndarray:
        return np.concatenate([self.edge.ravel(), self.node.ravel(), self.coupling.ravel()])

    def max_abs(self) -> float:
        v = self.vector()
        return float(np.abs(v).max()) if v.size else 0.0


def discrete_continuity_residual(f: DynamicField, variant: str | None = None) -> ContinuityResidual:
    """Forward-in-time, centred-in-space residuals; all zero exactly when the field is feasible.

    Edge cells: (rho^{k+1} - rho^k) / dt + (j_right - j_left) / dx.
    Kirchhoff nodes: (gamma^{k+1} - gamma^k) / dt - sum of n * j at the incident faces.
    Reservoir nodes: (gamma^{k+1} - gamma^k) / dt - sum of the boundary fluxes, and per incidence
    the boundary flux minus n * j at the face.
    """
    grid, T = f.grid, f.steps
    kind = variant or f.variant
    if kind not in VARIANTS:
        raise DomainError(f"unknown variant {kind!r}")
    expected = {
        "rho": (T + 1, grid.n_cells),
        "flux": (T, grid.n_faces),
        "gamma": (T + 1, grid.n_nodes),
    }
    for name, shape in expected.items():
        if getattr(f, name).shape != shape:
            raise DomainError(f"{name} has shape {getattr(f, name).shape}, expected {shape}")
    if kind != "kirchhoff" and (f.node_flux is None or f.node_flux.shape != (T, grid.n_incidences)):
        raise DomainError(f"reservoir fields need node_flux of shape {(T, grid.n_incidences)}")

    dt = f.dt
    edge = np.diff(f.rho, axis=0) / dt + (f.flux[:, grid.right_face] - f.flux[:, grid.left_face]) / grid.cell_dx
    face_in = f.flux[:, grid.inc_face] * grid.inc_sign  # edge -> node, read off the faces
    gamma_rate = np.diff(f.gamma, axis=0) / dt
    if kind == "kirchhoff":
        node = gamma_rate - _sum_to_nodes(grid, face_in)
        coupling = np.zeros((T, 0))
    else:
        assert f.node_flux is not None
        node = gamma_rate - _sum_to_nodes(grid, f.node_flux)
        coupling = f.node_flux - face_in
    return ContinuityResidual(edge=edge, node=node, coupling=coupling)


def _sum_to_nodes(grid: NetworkGrid, per_incidence: np.ndarray) -> np.ndarray:
    out = np.zeros((per_incidence.shape[0], grid.n_nodes))
    np.add.at(out.T, grid.inc_node, per_incidence.T)
    return out


# Perspective function


def perspective_h(a: Any, b: Any, p: float = 2.0) -> Any:
    """|a|^p / b^(p-1) for b > 0, 0 at a = b = 0, +inf otherwise; vectorized."""
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        pos = b_arr > 0
        out = np.where(pos, np.abs(a_arr) ** p / np.where(pos, b_arr, 1.0) ** (p - 1), np.inf)
        out = np.where((b_arr == 0) & (a_arr == 0), 0.0, out)
    return float(out) if out.ndim == 0 else out


def _cardano_root(b0: np.ndarray, mu: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Largest real root of mu r^3 + (b0 + 2 mu) r - s."""
    P = (b0 + 2 * mu) / mu
    Q = -s / mu
    disc = (Q / 2) ** 2 + (P / 3) ** 3
    root = np.empty_like(P)
    real = disc >= 0
    sq = np.sqrt(np.where(real, disc, 0.0))
    root[real] = (np.cbrt(-Q / 2 + sq) + np.cbrt(-Q / 2 - sq))[real]
    trig = ~real
    if trig.any():
        Pt, Qt = P[trig], Q[trig]
        arg = np.clip((3 * Qt / (2 * Pt)) * np.sqrt(-3 / Pt), -1.0, 1.0)
        root[trig] = 2 * np.sqrt(-Pt / 3) * np.cos(np.arccos(arg) / 3)
    return root


def prox_perspective(a0: Any, b0: Any, mu: Any, p: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Proximal map of mu * h(., .) at (a0, b0), elementwise.

    For b > 0 the optimality conditions reduce to a scalar equation in r = |a| / b:
    mu (p-1) r^(p+1) + mu p r^(p-1) + b0 r - |a0| = 0 on r > r_min, solved by a safeguarded
    Newton iteration (Cardano start for p = 2). When it has no root the minimizer is (0, max(b0, 0)).
    For p = 1 the closure of h is used: soft-thresholding in a, b = max(b0, 0).
    """
    a0, b0, mu = (np.array(v, dtype=float) for v in np.broadcast_arrays(a0, b0, mu))
    shape = a0.shape
    a0, b0, mu = a0.ravel(), b0.ravel(), mu.ravel()
    if p == 1:
        a = np.sign(a0) * np.maximum(np.abs(a0) - mu, 0.0)
        return a.reshape(shape), np.maximum(b0, 0.0).reshape(shape)

    q = p - 1
    s = np.abs(a0)
    r_min = (np.maximum(-b0, 0.0) / (mu * q)) ** (1 / p)

    def phi(r: np.ndarray, b: np.ndarray, m: np.ndarray, t: np.ndarray) -> np.ndarray:
        return m * q * r ** (p + 1) + m * p * r**q + b * r - t

    def dphi(r: np.ndarray, b: np.ndarray, m: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return m * q * (p + 1) * r**p + m * p * q * r ** (q - 1) + b

    a = np.zeros_like(a0)
    b = np.maximum(b0, 0.0)
    active = phi(r_min, b0, mu, s) < 0
    if active.any():
        bb, mm, ss, lo = b0[active], mu[active], s[active], r_min[active]
        with np.errstate(over="ignore"):
            hi = np.maximum(lo, (ss / (mm * p)) ** (1 / q)) * (1 + 1e-12) + 1e-300
        hi = np.minimum(hi, 1e300)
        r = np.clip(_cardano_root(bb, mm, ss), lo, hi) if p == 2 else 0.5 * (lo + hi)
        for _ in range(NEWTON_MAX):
            f = phi(r, bb, mm, ss)
            lo = np.where(f < 0, r, lo)
            hi = np.where(f > 0, r, hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = r - f / dphi(r, bb, mm)
            bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
            nxt = np.where(bad, 0.5 * (lo + hi), step)
            done = np.abs(nxt - r) <= 1e-15 * (1 + r)
            r = nxt
            if done.all():
                break
        b_act = np.maximum(bb + mm * q * r**p, DENSITY_FLOOR)
        a[active] = np.sign(a0[active]) * r * b_act
        b[active] = b_act
    return a.reshape(shape), b.reshape(shape)


# Action minimization


@dataclass
class SolverOptions:
    max_iter: int = field(default_factory=lambda: config.GOT_PD_MAX_ITER)
    tol: float = field(default_factory=lambda: config.GOT_PD_TOL)
    check_every: int = 25
    raise_on_failure: bool = True
    power_iterations: int = 60


@dataclass(frozen=True, eq=False)
class ActionResult:
    value: float  # W_p, the p-th root of the action
    action: float
    field: DynamicField
    converged: bool
    iterations: int
    residuals: dict[str, float]
    log: list[dict[str, float]]
    rho_gradient: np.ndarray  # d action / d rho1, per cell
    gamma_gradient: np.ndarray  # d action / d gamma1, per node
    warm: tuple[np.ndarray, np.ndarray] | None = None


class _ActionProblem:
    """Constraint matrix A, averaging operator K and pair weights for one grid, horizon and variant."""

    def __init__(self, grid: NetworkGrid, steps: int, spec: ActionSpec) -> None:
        T, C, F, N, I = steps, grid.n_cells, grid.n_faces, grid.n_nodes, grid.n_incidences
        dt = 1.0 / T
        self.grid, self.steps, self.spec = grid, steps, spec
        res = spec.reservoir
        self.oJ = (T + 1) * C
        self.oG = self.oJ + T * F
        self.oB = self.oG + ((T + 1) * N if res else 0)
        self.n = self.oB + (T * I if res else 0)

        def R(k: Any, c: Any) -> Any:
            return np.asarray(k) * C + c

        def J(k: Any, f: Any) -> Any:
            return self.oJ + np.asarray(k) * F + f

        def G(k: Any, v: Any) -> Any:
            return self.oG + np.asarray(k) * N + v

        def B(k: Any, i: Any) -> Any:
            return self.oB + np.asarray(k) * I + i

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        nrow = 0

        def add(r: Any, c: Any, v: Any) -> None:
            r, c = np.broadcast_arrays(np.asarray(r), np.asarray(c))
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(np.broadcast_to(np.asarray(v, dtype=float), r.shape).ravel())

        cells = np.arange(C)
        self.rows_R0 = nrow + cells
        add(self.rows_R0, R(0, cells), 1.0)
        nrow += C
        self.rows_RT = nrow + cells
        add(self.rows_RT, R(T, cells), 1.0)
        nrow += C
        nodes = np.arange(N)
        if res:
            self.rows_G0 = nrow + nodes
            add(self.rows_G0, G(0, nodes), 1.0)
            nrow += N
            self.rows_GT = nrow + nodes
            add(self.rows_GT, G(T, nodes), 1.0)
            nrow += N

        # edge continuity in density units; the last row is implied by the others and the endpoints
        kk, cc = np.meshgrid(np.arange(T), cells, indexing="ij")
        kk, cc = kk.ravel()[:-1], cc.ravel()[:-1]
        r = nrow + np.arange(kk.size)
        ratio = dt / grid.cell_dx[cc]
        add(r, R(kk + 1, cc), 1.0)
        add(r, R(kk, cc), -1.0)
        add(r, J(kk, grid.right_face[cc]), ratio)
        add(r, J(kk, grid.left_face[cc]), -ratio)
        nrow += kk.size

        steps_ = np.arange(T)
        ki, ii = np.meshgrid(steps_, np.arange(I), indexing="ij")
        ki, ii = ki.ravel(), ii.ravel()
        if not res:
            add(nrow + ki * N + grid.inc_node[ii], J(ki, grid.inc_face[ii]), grid.inc_sign[ii])
            nrow += T * N
        else:
            kv, vv = np.meshgrid(steps_, nodes, indexing="ij")
            kv, vv = kv.ravel(), vv.ravel()
            add(nrow + kv * N + vv, G(kv + 1, vv), 1.0)
            add(nrow + kv * N + vv, G(kv, vv), -1.0)
            add(nrow + ki * N + grid.inc_node[ii], B(ki, ii), -dt)
            nrow += T * N
            add(nrow + ki * I + ii, B(ki, ii), 1.0)
            add(nrow + ki * I + ii, J(ki, grid.inc_face[ii]), -grid.inc_sign[ii])
            nrow += T * I
        self.A = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nrow, self.n)
        )
        self.AT = self.A.T.tocsr()
        AAT = (self.A @ self.AT).tocsc()
        reg = PROJECTION_REG * float(AAT.diagonal().max())
        self.lu = splu((AAT + reg * sparse.identity(nrow, format="csc")).tocsc())

        # averaging operator: pair m = (a_m, b_m) with weight w_m
        ka: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        kb: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        kc, cc2 = np.meshgrid(steps_, cells, indexing="ij")
        kc, cc2 = kc.ravel(), cc2.ravel()
        m = kc * C + cc2
        half = np.full(m.size, 0.5)
        ka += [(m, J(kc, grid.left_face[cc2]), half), (m, J(kc, grid.right_face[cc2]), half)]
        kb += [(m, R(kc, cc2), np.full(m.size, 0.5)), (m, R(kc + 1, cc2), np.full(m.size, 0.5))]
        weights = [dt * grid.cell_dx[cc2]]
        M = T * C
        if spec.variant == "reservoir-net":
            kv, vv = np.meshgrid(steps_, nodes, indexing="ij")
            kv, vv = kv.ravel(), vv.ravel()
            ka.append((M + ki * N + grid.inc_node[ii], B(ki, ii), np.ones(ki.size)))
            mv = M + kv * N + vv
            kb += [(mv, G(kv, vv), np.full(mv.size, 0.5)), (mv, G(kv + 1, vv), np.full(mv.size, 0.5))]
            weights.append(np.full(T * N, dt))
            M += T * N
        elif spec.variant == "reservoir-per-edge":
            mi = M + ki * I + ii
            ka.append((mi, B(ki, ii), np.ones(mi.size)))
            half_i = np.full(mi.size, 0.5)
            kb += [(mi, G(ki, grid.inc_node[ii]), half_i), (mi, G(ki + 1, grid.inc_node[ii]), half_i)]
            weights.append(np.full(T * I, dt))
            M += T * I
        self.M = M

        def assemble(parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> sparse.csr_matrix:
            r = np.concatenate([p_[0] for p_ in parts])
            c = np.concatenate([p_[1] for p_ in parts])
            v = np.concatenate([p_[2] for p_ in parts])
            return sparse.csr_matrix((v, (r, c)), shape=(M, self.n))

        self.K = sparse.vstack([assemble(ka), assemble(kb)]).tocsr()
        self.KT = self.K.T.tocsr()
        self.weights = np.concatenate(weights)
        self.weight_scale = float(self.weights.mean())

    def rhs(self, mu0: NetworkState, mu1: NetworkState) -> np.ndarray:
        b = np.zeros(self.A.shape[0])
        b[self.rows_R0] = mu0.rho
        b[self.rows_RT] = mu1.rho
        if self.spec.reservoir:
            b[self.rows_G0] = mu0.gamma
            b[self.rows_GT] = mu1.gamma
        return b

    def project(self, U: np.ndarray, b: np.ndarray) -> np.ndarray:
        for _ in range(2):
            U = U - self.AT @ self.lu.solve(self.A @ U - b)
        return U

    def null_component(self, x: np.ndarray) -> np.ndarray:
        return x - self.AT @ self.lu.solve(self.A @ x)

    def operator_norm(self, iterations: int) -> float:
        x = np.random.default_rng(0).standard_normal(self.n)
        norm = 1.0
        for _ in range(iterations):
            y = self.KT @ (self.K @ x)
            norm = float(np.linalg.norm(y))
            if norm == 0.0:
                return 1.0
            x = y / norm
        return math.sqrt(norm)

    def initial(self, mu0: NetworkState, mu1: NetworkState) -> np.ndarray:
        T = self.steps
        t = np.linspace(0.0, 1.0, T + 1)[:, None]
        U = np.zeros(self.n)
        U[: self.oJ] = ((1 - t) * mu0.rho + t * mu1.rho).ravel()
        if self.spec.reservoir:
            U[self.oG : self.oB] = ((1 - t) * mu0.gamma + t * mu1.gamma).ravel()
        return U

    def field(self, U: np.ndarray) -> DynamicField:
        g, T = self.grid, self.steps
        rho = np.maximum(U[: self.oJ].reshape(T + 1, g.n_cells), 0.0)
        flux = U[self.oJ : self.oG].reshape(T, g.n_faces)
        if self.spec.reservoir:
            gamma = np.maximum(U[self.oG : self.oB].reshape(T + 1, g.n_nodes), 0.0)
            node_flux = U[self.oB :].reshape(T, g.n_incidences)
        else:
            gamma, node_flux = np.zeros((T + 1, g.n_nodes)), None
        return DynamicField(g, T, rho, flux, gamma, node_flux, self.spec.variant)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def minimize_action(
    mu0: NetworkState,
    mu1: NetworkState,
    spec: ActionSpec,
    steps: int = 32,
    options: SolverOptions | None = None,
    warm_start: ActionResult | None = None,
) -> ActionResult:
    """Minimal p-action between two grid states, subject to the discrete continuity equations.

    Minimizes sum_k sum_cells dt dx h(j, rho) (plus dt h at the nodes for reservoir variants)
    over space-time fields that meet the endpoint states. Returns the p-th root of the optimum,
    the optimal field, the residual history, and the endpoint multipliers (the derivative of the
    action with respect to the final state), which drive the JKO descent.

    Raises:
        DomainError: the states live on different grids, carry different mass, or a Kirchhoff
            state carries node mass.
        ConvergenceError: the residuals stay above ``options.tol`` (unless raise_on_failure is False).
    """
    opts = options or SolverOptions()
    if mu0.grid is not mu1.grid:
        raise DomainError("endpoint states must share one NetworkGrid")
    if steps < 1:
        raise DomainError("steps must be at least 1")
    if abs(mu0.total_mass - mu1.total_mass) > MASS_TOL:
        raise DomainError(f"endpoint masses differ: {mu0.total_mass:.12g} vs {mu1.total_mass:.12g}")
    if not spec.reservoir and (mu0.gamma.any() or mu1.gamma.any()):
        raise DomainError("Kirchhoff states carry no node mass")

    prob = _ActionProblem(mu0.grid, steps, spec)
    b = prob.rhs(mu0, mu1)
    wn = prob.weights / prob.weight_scale
    M = prob.M
    if warm_start is not None and warm_start.warm is not None and warm_start.warm[0].size == prob.n:
        U, Y = warm_start.warm[0].copy(), warm_start.warm[1].copy()
    else:
        U, Y = prob.initial(mu0, mu1), np.zeros(2 * M)
    U = prob.project(U, b)
    L = prob.operator_norm(opts.power_iterations)
    tau = sigma = 0.99 / L
    U_bar = U.copy()
    V = prob.K @ U
    log: list[dict[str, float]] = []
    residuals = {"primal": math.inf, "dual": math.inf}
    converged = False
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        Z = Y + sigma * (prob.K @ U_bar)
        va, vb = prox_perspective(Z[:M] / sigma, Z[M:] / sigma, wn / sigma, spec.p)
        V = np.concatenate([va, vb])
        Y = Z - sigma * V
        U_new = prob.project(U - tau * (prob.KT @ Y), b)
        U_bar = 2 * U_new - U
        U = U_new
        if iteration % opts.check_every == 0 or iteration == opts.max_iter:
            residuals = {
                "primal": _rms(prob.null_component(prob.KT @ Y)),
                "dual": _rms(prob.K @ U - V),
            }
            action = float(np.sum(prob.weights * perspective_h(va, vb, spec.p)))
            log.append({"iteration": float(iteration), **residuals, "action": action})
            logger.debug(f"pd iteration {iteration}: primal={residuals['primal']:.3e} dual={residuals['dual']:.3e}")
            if max(residuals.values()) <= opts.tol:
                converged = True
                break

    va, vb = V[:M], V[M:]
    action = float(np.sum(prob.weights * perspective_h(va, vb, spec.p)))
    if not converged:
        msg = (
            f"primal-dual solver stopped after {iteration} iterations "
            f"(primal={residuals['primal']:.3e}, dual={residuals['dual']:.3e})"
        )
        if opts.raise_on_failure:
            raise ConvergenceError(msg, residuals)
        logger.warning(msg)
    lam = prob.lu.solve(prob.A @ (prob.KT @ Y)) * prob.weight_scale
    rho_grad = lam[prob.rows_RT]
    gamma_grad = lam[prob.rows_GT] if spec.reservoir else np.zeros(mu0.grid.n_nodes)
    logger.info(f"minimal action {action:.6g} after {iteration} iterations ({spec.variant}, p={spec.p})")
    return ActionResult(
        value=max(action, 0.0) ** (1.0 / spec.p),
        action=action,
        field=prob.field(U),
        converged=converged,
        iterations=iteration,
        residuals=residuals,
        log=log,
        rho_gradient=rho_grad,
        gamma_gradient=gamma_grad,
        warm=(U, Y),
    )


# Drift-diffusion with node reservoirs


@dataclass(frozen=True, eq=False)
class BoundaryRates:
    """Exchange rates per incidence: r(e, v) from the boundary cell into the node, r(v, e) back."""

    to_node: np.ndarray
    from_node: np.ndarray

    def __post_init__(self) -> None:
        to_node = np.asarray(self.to_node, dtype=float)
        from_node = np.asarray(self.from_node, dtype=float)
        if to_node.shape != from_node.shape:
            raise DomainError("rate arrays must have one entry per incidence")
        if (to_node < 0).any() or (from_node < 0).any():
            raise DomainError("exchange rates must be nonnegative")
        object.__setattr__(self, "to_node", to_node)
        object.__setattr__(self, "from_node", from_node)

    @classmethod
    def closed(cls, grid: NetworkGrid) -> BoundaryRates:
        return cls(np.zeros(grid.n_incidences), np.zeros(grid.n_incidences))


def _per_edge(grid: NetworkGrid, value: float | dict[EdgeId, float]) -> np.ndarray:
    if isinstance(value, dict):
        return np.array([float(value[eg.edge]) for eg in grid.edge_grids])
    return np.full(len(grid.edge_grids), float(value))


def _rate_matrix(
    grid: NetworkGrid,
    diffusion: np.ndarray,
    potential: np.ndarray,
    rates: BoundaryRates,
) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Transition rates on [cell masses, node masses] plus the interior face bookkeeping."""
    C = grid.n_cells
    rows, cols, vals = [], [], []
    faces, lefts, fwd, bwd = [], [], [], []
    for k, eg in enumerate(grid.edge_grids):
        cells = np.arange(eg.cells.start, eg.cells.stop)
        left, right = cells[:-1], cells[1:]
        delta = potential[right] - potential[left]
        base = diffusion[k] / eg.dx**2
        # Scharfetter-Gummel weights B(z) = z / (e^z - 1) keep exp(-P) stationary
        up = base / exprel(delta)
        down = base / exprel(-delta)
        rows += [left, right]
        cols += [right, left]
        vals += [up, down]
        faces.append(grid.right_face[left])
        lefts.append(left)
        fwd.append(up)
        bwd.append(down)
    inc_cells = grid.inc_cell
    inc_nodes = C + grid.inc_node
    rows += [inc_cells, inc_nodes]
    cols += [inc_nodes, inc_cells]
    vals += [rates.to_node / grid.cell_dx[inc_cells], rates.from_node]
    n = C + grid.n_nodes
    Q = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return Q, np.concatenate(faces), np.concatenate(lefts), np.concatenate(fwd), np.concatenate(bwd)


def simulate_drift_diffusion(
    initial: NetworkState,
    dt: float,
    steps: int,
    diffusion: float | dict[EdgeId, float] = 1.0,
    potential: Potential | None = None,
    rates: BoundaryRates | None = None,
) -> DynamicField:
    """Explicit finite-volume scheme for d_t rho = d d_x(d_x rho + rho d_x P) with node reservoirs.

    Mass moves between neighbouring cells with Scharfetter-Gummel rates, and between boundary
    cells and nodes with the exchange rates. The recorded fluxes satisfy the reservoir continuity
    equations exactly, up to rounding.

    Raises:
        DomainError: dt exceeds 0.5 dx^2 / max d, or dt times the largest exit rate exceeds 1.
    """
    grid = initial.grid
    if steps < 1:
        raise DomainError("steps must be at least 1")
    d = _per_edge(grid, diffusion)
    if (d < 0).any():
        raise DomainError("diffusion coefficients must be nonnegative")
    dx_min = min(eg.dx**2 / max(d[k], 1e-300) for k, eg in enumerate(grid.edge_grids))
    if dt <= 0 or dt > 0.5 * dx_min:
        raise DomainError(f"dt={dt} violates the explicit stability bound dt <= {0.5 * dx_min:.6g}")
    P = grid.cell_values(potential) if potential is not None else np.zeros(grid.n_cells)
    r = rates or BoundaryRates.closed(grid)
    if r.to_node.shape != (grid.n_incidences,):
        raise DomainError(f"rates need {grid.n_incidences} entries, one per incidence")
    Q, faces, left_cells, fwd, bwd = _rate_matrix(grid, d, P, r)
    exit_rate = np.asarray(Q.sum(axis=1)).ravel()
    if dt * exit_rate.max(initial=0.0) > 1.0:
        raise DomainError(f"dt={dt} makes the transition kernel negative (max exit rate {exit_rate.max():.6g})")
    QT = Q.T.tocsr()

    C = grid.n_cells
    x = initial.masses.copy()
    rho = np.empty((steps + 1, C))
    gamma = np.empty((steps + 1, grid.n_nodes))
    flux = np.zeros((steps, grid.n_faces))
    node_flux = np.zeros((steps, grid.n_incidences))
    rho[0], gamma[0] = x[:C] / grid.cell_dx, x[C:]
    for k in range(steps):
        m = x[:C]
        interior = fwd * m[left_cells] - bwd * m[left_cells + 1]
        flux[k, faces] = interior
        jbar = r.to_node * m[grid.inc_cell] / grid.cell_dx[grid.inc_cell] - r.from_node * x[C + grid.inc_node]
        node_flux[k] = jbar
        flux[k, grid.inc_face] = grid.inc_sign * jbar
        x = x + dt * (QT @ x - exit_rate * x)
        rho[k + 1], gamma[k + 1] = x[:C] / grid.cell_dx, x[C:]
    logger.debug(f"drift-diffusion: {steps} steps of dt={dt}, final mass {x.sum():.12f}")
    return DynamicField(grid, steps, rho, flux, gamma, node_flux, "reservoir-net", horizon=dt * steps)


def stationary_reference(
    grid: NetworkGrid,
    potential: Potential | None = None,
    omega: Sequence[float] | None = None,
) -> NetworkState:
    """Reference (omega, pi) with pi proportional to exp(-P) on the cells, normalized to unit mass."""
    P = grid.cell_values(potential) if potential is not None else np.zeros(grid.n_cells)
    pi = np.exp(-(P - P.min()))
    w = np.ones(grid.n_nodes) if omega is None else np.asarray(omega, dtype=float)
    if (w <= 0).any():
        raise DomainError("node reference weights must be positive")
    total = float(np.dot(pi, grid.cell_dx) + w.sum())
    return NetworkState(grid, pi / total, w / total)


def detailed_balance_rates(reference: NetworkState, kappa: float = 1.0) -> BoundaryRates:
    """r(e, v) = k sqrt(omega_v / pi_b), r(v, e) = k sqrt(pi_b / omega_v), so r(e, v) pi_b = r(v, e) omega_v."""
    grid = reference.grid
    pi_b = reference.rho[grid.inc_cell]
    omega = reference.gamma[grid.inc_node]
    if (pi_b <= 0).any() or (omega <= 0).any():
        raise DomainError("detailed balance needs a strictly positive reference")
    return BoundaryRates(kappa * np.sqrt(omega / pi_b), kappa * np.sqrt(pi_b / omega))


def relative_entropy(
    m: NetworkState | np.ndarray | Sequence[float],
    ref: NetworkState | np.ndarray | Sequence[float],
) -> float:
    """sum ref * eta(m / ref) with eta(r) = r log r - r + 1; +inf unless m << ref."""
    mv = m.masses if isinstance(m, NetworkState) else np.asarray(m, dtype=float)
    rv = ref.masses if isinstance(ref, NetworkState) else np.asarray(ref, dtype=float)
    if mv.shape != rv.shape:
        raise DomainError(f"relative entropy of shapes {mv.shape} and {rv.shape}")
    return float(np.sum(rel_entr(mv, rv) - mv + rv))


def free_energy(state: NetworkState, reference: NetworkState) -> float:
    """Relative entropy of the edge densities and node masses with respect to the reference."""
    return relative_entropy(state, reference)


__all__ = [
    "VARIANTS",
    "EdgeGrid",
    "NetworkGrid",
    "NetworkState",
    "DynamicField",
    "ActionSpec",
    "ContinuityResidual",
    "SolverOptions",
    "ActionResult",
    "BoundaryRates",
    "discrete_continuity_residual",
    "perspective_h",
    "prox_perspective",
    "minimize_action",
    "simulate_drift_diffusion",
    "stationary_reference",
    "detailed_balance_rates",
    "relative_entropy",
    "free_energy",
]
