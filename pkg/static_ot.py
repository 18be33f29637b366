"""Exact discrete optimal transport between finite measures.

Cost matrices are assembled from a cost handle (graph distance, tube geodesics or Euclidean
distance, raised to the power p), solved exactly, and certified with Kantorovich potentials.
Uniform equal-count instances go through a linear assignment solver; everything else goes
through the network simplex in POT.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal, Protocol

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from config import config
from errors import BoundViolationError, DomainError, GraphDomainError, InfeasibilityError, SolverError
from graphcore import Edge, EdgeId, GraphPoint, MetricGraph
from ids import atom_labels
from measures import DiscreteMeasure, Location
from models import CouplingEntryRecord, OTResultFile

if TYPE_CHECKING:
    from tube import TubeGrid

logger = logging.getLogger(__name__)

SENTINEL_FACTOR = 1e12  # infinite entries become SENTINEL_FACTOR * max finite |entry|
MASS_TOL = 1e-8
GAP_RTOL = 1e-6
BOUND_TOL = 1e-8
EXHAUSTIVE_SUPPORT = 8  # supports up to this size are checked over every cycle
ROW_CHUNK = 16


# Cost handles


class CostHandle(Protocol):
    name: str
    kind: Literal["graph", "ambient"]

    def distances(self, xs: Sequence[Location], ys: Sequence[Location]) -> np.ndarray: ...


@dataclass(frozen=True)
class GraphCost:
    graph: MetricGraph
    name: str = "graph"
    kind: Literal["graph", "ambient"] = "graph"

    def distances(self, xs: Sequence[Location], ys: Sequence[Location]) -> np.ndarray:
        return self.graph.distance_matrix(xs, ys)  # type: ignore[arg-type]


@dataclass(frozen=True)
class EuclideanCost:
    name: str = "euclidean"
    kind: Literal["graph", "ambient"] = "ambient"

    def distances(self, xs: Sequence[Location], ys: Sequence[Location]) -> np.ndarray:
        a = np.array([x.coords for x in xs], dtype=float)  # type: ignore[union-attr]
        b = np.array([y.coords for y in ys], dtype=float)  # type: ignore[union-attr]
        return np.asarray(cdist(a, b))


@dataclass(frozen=True)
class TubeCost:
    """Geodesic length inside the tube mask; with p = 2 this is the action cost."""

    tube: TubeGrid
    name: str = "tube"
    kind: Literal["graph", "ambient"] = "ambient"

    def distances(self, xs: Sequence[Location], ys: Sequence[Location]) -> np.ndarray:
        from tube import geodesic_length_matrix

        a = np.array([x.coords for x in xs], dtype=float)  # type: ignore[union-attr]
        b = np.array([y.coords for y in ys], dtype=float)  # type: ignore[union-attr]
        return geodesic_length_matrix(self.tube, a, b)


# Result types


@dataclass(frozen=True, eq=False)
class CostMatrix:
    values: np.ndarray
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()
    name: str = "custom"

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DomainError(f"cost matrix must be 2-dimensional, got shape {values.shape}")
        if np.isnan(values).any():
            raise DomainError("cost matrix contains NaN")
        if (values == -np.inf).any():
            raise DomainError("cost matrix contains -inf")
        rows = tuple(self.row_labels) or tuple(atom_labels("src", values.shape[0]))
        cols = tuple(self.col_labels) or tuple(atom_labels("dst", values.shape[1]))
        if (len(rows), len(cols)) != values.shape:
            raise DomainError(f"{len(rows)}x{len(cols)} labels for a {values.shape} cost matrix")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_labels", rows)
        object.__setattr__(self, "col_labels", cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True, eq=False)
class Coupling:
    """Sparse transport plan; ``value`` is the total cost of the listed entries."""

    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    value: float
    shape: tuple[int, int]

    @classmethod
    def from_dense(cls, plan: np.ndarray, c: CostMatrix) -> Coupling:
        rows, cols = np.nonzero(plan > 0)
        masses = plan[rows, cols]
        value = float(np.sum(masses * c.values[rows, cols])) if masses.size else 0.0
        return cls(rows.astype(int), cols.astype(int), masses.astype(float), value, c.shape)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, int, float]], c: CostMatrix) -> Coupling:
        items = list(entries)
        rows = np.array([i for i, _, _ in items], dtype=int)
        cols = np.array([j for _, j, _ in items], dtype=int)
        masses = np.array([m for _, _, m in items], dtype=float)
        value = float(np.sum(masses * c.values[rows, cols])) if items else 0.0
        return cls(rows, cols, masses, value, c.shape)

    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.masses.tolist(), strict=True))

    def support(self, threshold: float = 0.0) -> list[tuple[int, int, float]]:
        return [(i, j, m) for i, j, m in self.entries() if m > threshold]

    def dense(self) -> np.ndarray:
        plan = np.zeros(self.shape)
        np.add.at(plan, (self.rows, self.cols), self.masses)
        return plan

    def marginal_error(self, src: DiscreteMeasure, dst: DiscreteMeasure) -> float:
        plan = self.dense()
        return float(max(np.abs(plan.sum(axis=1) - src.weights).max(), np.abs(plan.sum(axis=0) - dst.weights).max()))


@dataclass(frozen=True, eq=False)
class DualCertificate:
    phi: np.ndarray
    psi: np.ndarray
    gap: float
    dual_value: float

    def feasibility_violation(self, c: CostMatrix) -> float:
        """Largest phi_i + psi_j - c_ij over finite entries (<= 0 when feasible)."""
        slack = self.phi[:, None] + self.psi[None, :] - c.values
        finite = c.finite
        return float(slack[finite].max()) if finite.any() else 0.0

    def slackness_violations(self, pi: Coupling, c: CostMatrix, mass_tol: float = 1e-10, tol: float = 1e-6) -> int:
        """Entries with mass above ``mass_tol`` where phi_i + psi_j differs from c_ij by more than ``tol``."""
        count = 0
        for i, j, m in pi.entries():
            if m > mass_tol and abs(self.phi[i] + self.psi[j] - c.values[i, j]) > tol:
                count += 1
        return count


@dataclass(frozen=True, eq=False)
class OTResult:
    cost: CostMatrix
    coupling: Coupling
    certificate: DualCertificate

    @property
    def value(self) -> float:
        return self.coupling.value

    def to_record(self, monotonicity: MonotonicityReport | None = None) -> OTResultFile:
        return OTResultFile(
            cost=self.cost.name,
            value=self.value,
            coupling=[CouplingEntryRecord(i=i, j=j, mass=m) for i, j, m in self.coupling.entries()],
            phi=self.certificate.phi.tolist(),
            psi=self.certificate.psi.tolist(),
            gap=self.certificate.gap,
            monotonicity=monotonicity.to_dict() if monotonicity is not None else None,
        )


@dataclass(frozen=True)
class CycleViolation:
    pairs: tuple[tuple[int, int], ...]
    excess: float  # sum along the plan minus sum along the shifted cycle
    gain: float  # excess times the smallest mass on the cycle


@dataclass
class MonotonicityReport:
    violations: list[CycleViolation] = field(default_factory=list)
    worst_margin: float = 0.0
    cycles_checked: int = 0
    exhaustive: bool = True
    delta: float = 1e-8

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "violations": len(self.violations),
            "worst_margin": self.worst_margin,
            "cycles_checked": self.cycles_checked,
            "exhaustive": self.exhaustive,
            "delta": self.delta,
        }


@dataclass(frozen=True)
class StabilityReport:
    ot_before: float
    ot_after: float
    bound_pi: float  # witness bound at the optimizers found
    bound_inf: float  # sup-norm over the atom-pair grid
    removed: tuple[EdgeId, ...] = ()
    added: tuple[EdgeId, ...] = ()

    @property
    def delta(self) -> float:
        return self.ot_after - self.ot_before

    def to_dict(self) -> dict[str, Any]:
        return {
            "removed": list(self.removed),
            "added": list(self.added),
            "ot_before": self.ot_before,
            "ot_after": self.ot_after,
            "delta": self.delta,
            "bound_pi": self.bound_pi,
            "bound_inf": self.bound_inf,
            "bound_inf_scope": "atom-pair grid",
        }


# Operations


def build_cost_matrix(src: DiscreteMeasure, dst: DiscreteMeasure, cost: CostHandle, p: float = 2.0) -> CostMatrix:
    """values[i, j] = d(x_i, y_j) ** p under the handle's distance; rows are assembled in parallel."""
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    if src.kind != dst.kind:
        raise DomainError(f"mixed location kinds: {src.kind} source, {dst.kind} target")
    if cost.kind != src.kind:
        raise DomainError(f"{cost.name} cost needs {cost.kind} measures, got {src.kind}")
    xs, ys = src.locations, dst.locations
    chunks = [xs[k : k + ROW_CHUNK] for k in range(0, len(xs), ROW_CHUNK)]
    with ThreadPoolExecutor(max_workers=min(config.max_workers, max(len(chunks), 1))) as pool:
        blocks = list(pool.map(lambda chunk: cost.distances(chunk, ys), chunks))
    dist = np.vstack(blocks)
    with np.errstate(over="ignore"):
        values = np.where(np.isfinite(dist), np.power(np.maximum(dist, 0.0), p), np.inf)
    name = cost.name if p == 1 else f"{cost.name}^{p:g}"
    return CostMatrix(values, tuple(atom_labels("src", len(xs))), tuple(atom_labels("dst", len(ys))), name)


def _assignment_potentials(W: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Potentials certifying the assignment row i -> cols[i], by Bellman-Ford on reduced costs."""
    n = W.shape[0]
    inv = np.empty(n, dtype=int)
    inv[cols] = np.arange(n)
    # psi_j <= psi_k + W[inv[k], j] - W[inv[k], k] for every column k
    reduced = W[inv, :] - W[inv, np.arange(n)][:, None]
    psi = np.zeros(n)
    for _ in range(n + 1):
        relaxed = np.minimum(psi, (psi[:, None] + reduced).min(axis=0))
        if np.array_equal(relaxed, psi):
            break
        psi = relaxed
    phi = W[np.arange(n), cols] - psi[cols]
    return phi, psi


def _c_transform_polish(M: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """phi = psi^c, then psi = phi^c, over finite entries; never lowers the dual value."""
    finite = np.isfinite(M)
    phi = np.where(finite, M - psi[None, :], np.inf).min(axis=1)
    phi = np.where(np.isfinite(phi), phi, 0.0)
    new_psi = np.where(finite, M - phi[:, None], np.inf).min(axis=0)
    new_psi = np.where(np.isfinite(new_psi), new_psi, psi)
    return phi, new_psi


def solve_ot(c: CostMatrix, src: DiscreteMeasure, dst: DiscreteMeasure) -> tuple[Coupling, DualCertificate]:
    """Optimal coupling and Kantorovich potentials for the cost matrix ``c``.

    Raises:
        InfeasibilityError: a positive-mass atom has only infinite costs, or no finite-cost plan exists.
        SolverError: the network simplex did not terminate optimally.
        BoundViolationError: the duality gap exceeds 1e-6 * (1 + |value|).
    """
    M = c.values
    a, b = src.weights, dst.weights
    if M.shape != (len(a), len(b)):
        raise DomainError(f"cost matrix {M.shape} does not match measures ({len(a)}, {len(b)})")
    finite = c.finite
    for i in np.flatnonzero(a > 0):
        if not finite[i].any():
            raise InfeasibilityError(f"source atom {c.row_labels[i]} has infinite cost to every target")
    for j in np.flatnonzero(b > 0):
        if not finite[:, j].any():
            raise InfeasibilityError(f"target atom {c.col_labels[j]} has infinite cost from every source")

    scale = max(float(np.abs(M[finite]).max()), 1.0)
    W = np.where(finite, M, SENTINEL_FACTOR * scale)

    if len(a) == len(b) and src.is_uniform() and dst.is_uniform():
        rows, cols = linear_sum_assignment(W)
        plan = np.zeros(M.shape)
        plan[rows, cols] = 1.0 / len(a)
        _, psi = _assignment_potentials(W, cols)
        logger.debug(f"assignment solve, n={len(a)}")
    else:
        ia, jb = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
        a_s = a[ia] / a[ia].sum()
        b_s = b[jb] / b[jb].sum()
        sub = np.ascontiguousarray(W[np.ix_(ia, jb)])
        G, log = ot.emd(a_s, b_s, sub, numItermax=config.GOT_OT_MAX_ITER, log=True)
        if log.get("result_code", 1) != 1:
            raise SolverError(f"network simplex failed: {log.get('warning')}")
        plan = np.zeros(M.shape)
        plan[np.ix_(ia, jb)] = np.asarray(G)
        psi = np.zeros(len(b))
        psi[jb] = np.asarray(log["v"], dtype=float)
        logger.debug(f"network simplex solve, {len(ia)}x{len(jb)} support")

    plan[plan < 0] = 0.0
    on_infinite = plan[~finite]
    if on_infinite.size and on_infinite.max() > 0:
        i, j = np.argwhere((plan > 0) & ~finite)[0]
        raise InfeasibilityError(f"no finite-cost plan: mass routed from {c.row_labels[i]} to {c.col_labels[j]}")

    phi, psi = _c_transform_polish(M, psi)
    pi = Coupling.from_dense(plan, c)
    dual = float(np.dot(a, phi) + np.dot(b, psi))
    gap = pi.value - dual
    if gap > GAP_RTOL * (1.0 + abs(pi.value)) or gap < -BOUND_TOL * (1.0 + abs(pi.value)):
        raise BoundViolationError(f"duality gap {gap:.3e} at value {pi.value:.6g}")
    return pi, DualCertificate(phi=phi, psi=psi, gap=gap, dual_value=dual)


def solve_transport(src: DiscreteMeasure, dst: DiscreteMeasure, cost: CostHandle, p: float = 2.0) -> OTResult:
    c = build_cost_matrix(src, dst, cost, p)
    pi, cert = solve_ot(c, src, dst)
    return OTResult(cost=c, coupling=pi, certificate=cert)


def wasserstein_p(g: MetricGraph, mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 1.0) -> float:
    """W_p under graph-distance costs: (min over couplings of sum d^p)^(1/p)."""
    result = solve_transport(mu, nu, GraphCost(g), p)
    return float(max(result.value, 0.0) ** (1.0 / p))


def _cycle_excess(pairs: Sequence[tuple[int, int, float]], M: np.ndarray) -> tuple[float, float]:
    lhs = sum(M[i, j] for i, j, _ in pairs)
    rhs = sum(M[pairs[k][0], pairs[(k + 1) % len(pairs)][1]] for k in range(len(pairs)))
    if not np.isfinite(rhs):
        return -np.inf, 0.0
    excess = float(lhs - rhs)
    return excess, excess * min(m for _, _, m in pairs)


def check_cyclical_monotonicity(
    pi: Coupling,
    c: CostMatrix,
    max_cycle: int = EXHAUSTIVE_SUPPORT,
    trials: int = 1000,
    delta: float = 1e-8,
    seed: int = 0,
) -> MonotonicityReport:
    """Look for cycles in spt(pi) along which re-routing lowers the cost by more than ``delta``.

    A cycle (x_1, y_1), ..., (x_L, y_L) violates monotonicity when
    sum c(x_i, y_i) > sum c(x_i, y_{i+1}) + delta. Supports of at most 8 pairs are checked over
    every cycle of length 2..max_cycle; larger supports are sampled ``trials`` times.
    The margin of a cycle is its excess weighted by the smallest plan mass on it.
    """
    M = c.values
    support = [(i, j, m) for i, j, m in pi.support() if np.isfinite(M[i, j])]
    k = len(support)
    top = min(max_cycle, k)
    report = MonotonicityReport(delta=delta, exhaustive=k <= EXHAUSTIVE_SUPPORT)
    worst = 0.0

    def visit(cycle: Sequence[tuple[int, int, float]]) -> None:
        nonlocal worst
        excess, gain = _cycle_excess(cycle, M)
        report.cycles_checked += 1
        if excess > delta:
            report.violations.append(CycleViolation(tuple((i, j) for i, j, _ in cycle), excess, gain))
            worst = max(worst, gain)

    if report.exhaustive:
        for length in range(2, top + 1):
            for combo in itertools.combinations(range(k), length):
                first, rest = combo[0], combo[1:]
                for order in itertools.permutations(rest):
                    visit([support[first], *(support[t] for t in order)])
    elif top >= 2:
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            length = int(rng.integers(2, top + 1))
            idx = rng.choice(k, size=length, replace=False)
            visit([support[t] for t in idx])

    report.worst_margin = worst
    if report.violations:
        logger.info(f"{len(report.violations)} monotonicity violation(s), worst margin {worst:.6g}")
    return report


def _rehome(m: DiscreteMeasure, g: MetricGraph, edited: MetricGraph, removed: set[EdgeId]) -> DiscreteMeasure:
    locations: list[Location] = []
    for loc in m.locations:
        assert isinstance(loc, GraphPoint)
        if loc.edge not in removed:
            locations.append(loc)
            continue
        node = g.node_at(loc)
        if node is None:
            raise DomainError(f"atom {loc} lies inside removed edge {loc.edge!r}")
        locations.append(edited.node_point(node))
    return DiscreteMeasure(tuple(locations), m.weights)


def stability_experiment(
    g: MetricGraph,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    remove: Iterable[EdgeId] = (),
    add: Iterable[Edge] = (),
    p: float = 2.0,
) -> StabilityReport:
    """Compare OT before and after editing the network, with the witness and sup-norm bounds.

    Asserts |OT_after - OT_before| <= bound_pi <= bound_inf (up to 1e-8), plus OT_after >= OT_before
    when edges are only removed and OT_after <= OT_before when edges are only added.

    Raises:
        GraphDomainError: the edited network is disconnected or otherwise invalid.
        DomainError: an atom sits in the interior of a removed edge.
        BoundViolationError: one of the asserted inequalities fails.
    """
    if mu.kind != "graph" or nu.kind != "graph":
        raise DomainError("stability_experiment needs graph measures")
    removed = tuple(remove)
    extra = tuple(add)
    edited = g.edited(removed, extra)
    report = edited.validation
    if not report.ok:
        edits = ", ".join([f"-{e}" for e in removed] + [f"+{e.id}" for e in extra])
        raise GraphDomainError(f"edit [{edits}] leaves an invalid network: {'; '.join(report.violations)}")

    mu_t = _rehome(mu, g, edited, set(removed))
    nu_t = _rehome(nu, g, edited, set(removed))
    before = solve_transport(mu_t, nu_t, GraphCost(g), p)
    after = solve_transport(mu_t, nu_t, GraphCost(edited), p)

    diff = np.abs(after.cost.values - before.cost.values)
    diff = np.where(np.isfinite(diff), diff, 0.0)
    witness = max(
        float(np.sum(before.coupling.dense() * diff)),
        float(np.sum(after.coupling.dense() * diff)),
    )
    bound_inf = float(diff.max()) if diff.size else 0.0
    out = StabilityReport(
        ot_before=before.value,
        ot_after=after.value,
        bound_pi=witness,
        bound_inf=bound_inf,
        removed=removed,
        added=tuple(e.id for e in extra),
    )
    if abs(out.delta) > witness + BOUND_TOL or witness > bound_inf + BOUND_TOL:
        raise BoundViolationError(
            f"stability bound failed: |delta|={abs(out.delta):.3e}, witness={witness:.3e}, sup={bound_inf:.3e}"
        )
    if removed and not extra and out.delta < -BOUND_TOL:
        raise BoundViolationError(f"removing {list(removed)} lowered the OT value by {-out.delta:.3e}")
    if extra and not removed and out.delta > BOUND_TOL:
        raise BoundViolationError(f"adding {[e.id for e in extra]} raised the OT value by {out.delta:.3e}")
    logger.info(f"stability {out.removed}/{out.added}: delta={out.delta:.6g} witness={witness:.6g} sup={bound_inf:.6g}")
    return out


__all__ = [
    "CostHandle",
    "GraphCost",
    "EuclideanCost",
    "TubeCost",
    "CostMatrix",
    "Coupling",
    "DualCertificate",
    "OTResult",
    "CycleViolation",
    "MonotonicityReport",
    "StabilityReport",
    "build_cost_matrix",
    "solve_ot",
    "solve_transport",
    "wasserstein_p",
    "check_cyclical_monotonicity",
    "stability_experiment",
]
