"""Energies on network grid states and the JKO minimizing-movement scheme.

Each JKO step minimizes W_p^p(rho, rho_prev) / (p tau^(p-1)) + E(rho) over unit-mass nonnegative
grid densities by projected gradient descent with backtracking. The transport term and its
gradient come either from the dynamic solver (endpoint multipliers) or from exact static transport
between cell-centre atoms (Kantorovich potential).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import pandas as pd
from scipy.special import xlogy

from dynamic_ot import (
    ActionResult,
    ActionSpec,
    NetworkGrid,
    NetworkState,
    Potential,
    SolverOptions,
    minimize_action,
    relative_entropy,
)
from errors import DomainError
from graphcore import EdgeId
from static_ot import GraphCost, solve_transport

logger = logging.getLogger(__name__)

EnergyKind = Literal["relative-entropy", "iso3", "log-entropy"]
Transport = Literal["dynamic", "static"]

LOG_FLOOR = 1e-12  # densities below this are treated as this in log-gradients
SIMPLEX_BISECTIONS = 200


@dataclass(frozen=True)
class PressureLaw:
    """Power-law pressure p(rho) = c * rho^kappa."""

    c: float = 1.0
    kappa: float = 2.0

    def __post_init__(self) -> None:
        if self.kappa < 1:
            raise DomainError(f"pressure exponent kappa must be >= 1, got {self.kappa}")
        if self.c <= 0:
            raise DomainError("pressure constant must be positive")

    def __call__(self, rho: Any) -> Any:
        return self.c * np.asarray(rho, dtype=float) ** self.kappa


@dataclass(frozen=True)
class PipeParameters:
    D: float = 1.0  # diameter
    lam: float = 2.0  # friction factor
    omega: float = 0.0  # inclination angle
    d: float = 0.0  # per-edge integration constant

    def __post_init__(self) -> None:
        if self.D <= 0 or self.lam <= 0:
            raise DomainError("pipe diameter and friction factor must be positive")

    @property
    def k(self) -> float:
        return 2 * self.D / self.lam


@dataclass(frozen=True)
class EnergySpec:
    kind: EnergyKind = "log-entropy"
    pipes: PipeParameters | dict[EdgeId, PipeParameters] = field(default_factory=PipeParameters)
    gravity: float = 9.81
    pressure: PressureLaw = field(default_factory=PressureLaw)
    reference: NetworkState | None = None
    potential: Potential | None = None
    interaction: Callable[[np.ndarray], np.ndarray] | None = None  # kernel of the graph distance
    entropy_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("relative-entropy", "iso3", "log-entropy"):
            raise DomainError(f"unknown energy kind {self.kind!r}")
        if self.kind == "relative-entropy" and self.reference is None:
            raise DomainError("relative-entropy energy needs a reference state")

    def pipe(self, edge_id: EdgeId) -> PipeParameters:
        if isinstance(self.pipes, dict):
            return self.pipes.get(edge_id, PipeParameters())
        return self.pipes


def iso3_entropy_density(rho: Any, pipe: PipeParameters, pressure: PressureLaw) -> Any:
    """F with F'' = (2D/lambda) p'(rho) / rho and F(0) = 0.

    kappa > 1: F = k c rho^kappa / (kappa - 1), so F'(0) = 0.
    kappa = 1: F = k c (rho log rho - rho), normalized by F'(1) = 0.
    """
    r = np.asarray(rho, dtype=float)
    if (r < 0).any():
        raise DomainError("density must be nonnegative")
    kc = pipe.k * pressure.c
    if pressure.kappa == 1:
        out = kc * (xlogy(r, r) - r)
    else:
        out = kc * r**pressure.kappa / (pressure.kappa - 1)
    return float(out) if out.ndim == 0 else out


def iso3_entropy_derivative(rho: Any, pipe: PipeParameters, pressure: PressureLaw) -> Any:
    r = np.asarray(rho, dtype=float)
    kc = pipe.k * pressure.c
    if pressure.kappa == 1:
        out = kc * np.log(np.maximum(r, LOG_FLOOR))
    else:
        out = kc * pressure.kappa * r ** (pressure.kappa - 1) / (pressure.kappa - 1)
    return float(out) if out.ndim == 0 else out


def _cell_coords(grid: NetworkGrid) -> np.ndarray:
    return np.concatenate([eg.centers() for eg in grid.edge_grids])


def _edge_params(spec: EnergySpec, grid: NetworkGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell slope term k g sin(omega) and constant d."""
    pipes = [spec.pipe(eg.edge) for eg in grid.edge_grids]
    slope = np.array([pp.k * spec.gravity * math.sin(pp.omega) for pp in pipes])[grid.cell_edge]
    d = np.array([pp.d for pp in pipes])[grid.cell_edge]
    return slope, d


def _per_edge_cells(
    fn: Callable[[Any, PipeParameters, PressureLaw], Any],
    spec: EnergySpec,
    grid: NetworkGrid,
    rho: np.ndarray,
) -> np.ndarray:
    parts = [np.atleast_1d(fn(rho[eg.cells], spec.pipe(eg.edge), spec.pressure)) for eg in grid.edge_grids]
    return np.concatenate(parts)


def _interaction_matrix(spec: EnergySpec, grid: NetworkGrid) -> np.ndarray | None:
    if spec.interaction is None:
        return None
    points = grid.cell_points()
    W = np.asarray(spec.interaction(grid.graph.distance_matrix(points, points)), dtype=float)
    return 0.5 * (W + W.T)


def energy(spec: EnergySpec, state: NetworkState) -> float:
    """Quadrature of the selected functional over the edge cells (plus node terms where they apply)."""
    grid = state.grid
    rho, dx = state.rho, grid.cell_dx
    if (rho < 0).any():
        raise DomainError("density must be nonnegative")
    if spec.kind == "relative-entropy":
        assert spec.reference is not None
        return relative_entropy(state, spec.reference)
    if spec.kind == "iso3":
        slope, d = _edge_params(spec, grid)
        x = _cell_coords(grid)
        F = _per_edge_cells(iso3_entropy_density, spec, grid, rho)
        return float(np.sum(dx * (F + slope * rho * x + d * rho)))
    total = spec.entropy_weight * float(np.sum(dx * xlogy(rho, rho)))
    total += spec.entropy_weight * float(np.sum(xlogy(state.gamma, state.gamma)))
    if spec.potential is not None:
        total += float(np.sum(dx * grid.cell_values(spec.potential) * rho))
    W = _interaction_matrix(spec, grid)
    if W is not None:
        m = rho * dx
        total += 0.5 * float(m @ W @ m)
    return total


def energy_gradient(spec: EnergySpec, state: NetworkState) -> np.ndarray:
    """First variation of the energy per cell (the L2 gradient with cell-width weights)."""
    grid = state.grid
    rho = state.rho
    if spec.kind == "relative-entropy":
        assert spec.reference is not None
        return np.log(np.maximum(rho, LOG_FLOOR) / np.maximum(spec.reference.rho, LOG_FLOOR))
    if spec.kind == "iso3":
        slope, d = _edge_params(spec, grid)
        x = _cell_coords(grid)
        dF = _per_edge_cells(iso3_entropy_derivative, spec, grid, rho)
        return dF + slope * x + d
    grad = spec.entropy_weight * (np.log(np.maximum(rho, LOG_FLOOR)) + 1.0)
    if spec.potential is not None:
        grad = grad + grid.cell_values(spec.potential)
    W = _interaction_matrix(spec, grid)
    if W is not None:
        grad = grad + W @ (rho * grid.cell_dx)
    return grad


def project_to_simplex(z: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Closest nonnegative rho with sum(rho dx) = 1 in the dx-weighted L2 norm: max(z - shift, 0)."""
    lo = float(z.min()) - 1.0 / float(dx.sum())
    hi = float(z.max())
    for _ in range(SIMPLEX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if np.dot(np.maximum(z - mid, 0.0), dx) > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    rho = np.maximum(z - 0.5 * (lo + hi), 0.0)
    return rho / np.dot(rho, dx)


@dataclass
class JkoOptions:
    time_steps: int = 16  # time levels of the inner dynamic problem
    max_outer: int = 20
    max_backtracks: int = 12
    initial_step: float | None = None
    armijo: float = 1e-4
    min_change: float = 1e-12
    inner: SolverOptions = field(default_factory=SolverOptions)


@dataclass(frozen=True, eq=False)
class JkoStep:
    state: NetworkState
    energy: float
    transport: float  # W_p(state, prev)
    objective: float
    iterations: int


def _transport_term(
    prev: NetworkState,
    cand: NetworkState,
    p: float,
    transport: Transport,
    opts: JkoOptions,
    warm: ActionResult | None,
) -> tuple[float, np.ndarray, ActionResult | None]:
    """W_p^p(cand, prev) and its L2 gradient with respect to cand's density."""
    grid = prev.grid
    if transport == "dynamic":
        res = minimize_action(prev, cand, ActionSpec(p, "kirchhoff"), opts.time_steps, opts.inner, warm)
        return res.action, res.rho_gradient / grid.cell_dx, res
    if transport == "static":
        result = solve_transport(grid.cell_measure(cand.rho), grid.cell_measure(prev.rho), GraphCost(grid.graph), p)
        return max(result.value, 0.0), result.certificate.phi.copy(), None
    raise DomainError(f"unknown transport evaluator {transport!r}")


def jko_step(
    prev: NetworkState,
    tau: float,
    p: float,
    spec: EnergySpec,
    transport: Transport = "dynamic",
    options: JkoOptions | None = None,
) -> JkoStep:
    """One minimizing-movement step from ``prev``.

    Descent starts at prev, where the objective equals E(prev), and only accepts strict
    improvements, so the returned objective never exceeds E(prev).
    """
    if tau <= 0:
        raise DomainError("tau must be positive")
    if p < 1:
        raise DomainError("p must be >= 1")
    if prev.gamma.any():
        raise DomainError("JKO steps run on Kirchhoff states without node mass")
    opts = options or JkoOptions()
    grid = prev.grid
    dx = grid.cell_dx
    coef = 1.0 / (p * tau ** (p - 1))

    cur = prev
    e_cur = energy(spec, prev)
    w_cur = 0.0
    obj_cur = e_cur
    grad_w = np.zeros(grid.n_cells)
    warm: ActionResult | None = None
    step = opts.initial_step
    iterations = 0
    for iterations in range(1, opts.max_outer + 1):
        g = energy_gradient(spec, cur) + coef * grad_w
        if step is None:
            spread = float(np.abs(g - np.dot(g, dx) / dx.sum()).max())
            step = 0.5 * max(float(cur.rho.max()), LOG_FLOOR) / max(spread, LOG_FLOOR)
        accepted = False
        for _ in range(opts.max_backtracks):
            rho = project_to_simplex(cur.rho - step * g, dx)
            change = rho - cur.rho
            if math.sqrt(float(np.dot(change * change, dx))) <= opts.min_change:
                break
            cand = NetworkState(grid, rho)
            w_p, grad_cand, res = _transport_term(prev, cand, p, transport, opts, warm)
            e_cand = energy(spec, cand)
            obj = coef * w_p + e_cand
            if obj < obj_cur and obj <= obj_cur + opts.armijo * float(np.dot(g * change, dx)):
                cur, e_cur, w_cur, obj_cur, grad_w = cand, e_cand, w_p, obj, grad_cand
                warm = res or warm
                step *= 2.0
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    logger.debug(f"jko step: {iterations} descent iterations, objective {obj_cur:.6g}, energy {e_cur:.6g}")
    return JkoStep(
        state=cur,
        energy=e_cur,
        transport=max(w_cur, 0.0) ** (1.0 / p),
        objective=obj_cur,
        iterations=iterations,
    )


@dataclass
class FlowResult:
    states: list[NetworkState]
    energies: list[float]
    transports: list[float]
    tau: float
    p: float

    def masses(self) -> list[float]:
        return [s.total_mass for s in self.states]

    def energy_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "step": np.arange(len(self.states)),
                "E": self.energies,
                "W_inner": [0.0, *self.transports],
                "mass": self.masses(),
            }
        )

    def trajectory_frame(self) -> pd.DataFrame:
        rows = []
        for k, s in enumerate(self.states):
            for eg in s.grid.edge_grids:
                for c, value in enumerate(s.rho[eg.cells]):
                    rows.append({"step": k, "edge": eg.edge, "cell": c, "rho": float(value)})
        return pd.DataFrame(rows, columns=["step", "edge", "cell", "rho"])


def run_flow(
    initial: NetworkState,
    tau: float,
    steps: int,
    p: float,
    spec: EnergySpec,
    transport: Transport = "dynamic",
    options: JkoOptions | None = None,
    progress: Callable[[int], None] | None = None,
) -> FlowResult:
    """Iterate jko_step ``steps`` times; steps = 0 returns just the initial state."""
    if steps < 0:
        raise DomainError("steps must be nonnegative")
    states = [initial]
    energies = [energy(spec, initial)]
    transports: list[float] = []
    for k in range(steps):
        out = jko_step(states[-1], tau, p, spec, transport, options)
        states.append(out.state)
        energies.append(out.energy)
        transports.append(out.transport)
        if progress is not None:
            progress(k + 1)
    return FlowResult(states=states, energies=energies, transports=transports, tau=tau, p=p)


__all__ = [
    "PressureLaw",
    "PipeParameters",
    "EnergySpec",
    "JkoOptions",
    "JkoStep",
    "FlowResult",
    "iso3_entropy_density",
    "iso3_entropy_derivative",
    "energy",
    "energy_gradient",
    "project_to_simplex",
    "jko_step",
    "run_flow",
]
