import numpy as np
import pytest

from dynamic_ot import NetworkGrid, NetworkState, SolverOptions
from errors import DomainError
from gradient_flow import (
    EnergySpec,
    JkoOptions,
    PipeParameters,
    PressureLaw,
    energy,
    energy_gradient,
    iso3_entropy_density,
    jko_step,
    project_to_simplex,
    run_flow,
)
from networks import path_network


def _bump_state(grid: NetworkGrid, center: float = 0.3, floor: float = 0.0):
    return grid.state_from_density(
        lambda e, x: floor + (np.exp(-0.5 * ((x - center) / 0.15) ** 2) if e == "e1" else np.zeros_like(x))
    )


def _tilt(e, x):
    return 2.0 * x if e == "e1" else 2.0 + 0.5 * x


# energy functionals


def test_iso3_quadratic_pressure_gives_square(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=10)
    spec = EnergySpec("iso3", pressure=PressureLaw(kappa=2.0))
    assert iso3_entropy_density(0.5, PipeParameters(), spec.pressure) == pytest.approx(0.25)
    assert energy(spec, grid.uniform_state()) == pytest.approx(1.0)


def test_iso3_linear_pressure_curvature():
    pipe, law = PipeParameters(), PressureLaw(kappa=1.0)
    h = 1e-4
    F = [iso3_entropy_density(0.5 + s * h, pipe, law) for s in (-1, 0, 1)]
    assert (F[0] - 2 * F[1] + F[2]) / h**2 == pytest.approx(2.0, rel=1e-4)
    assert iso3_entropy_density(0.0, pipe, law) == 0.0


@pytest.mark.parametrize("kappa", [1.0, 1.5, 3.0])
@pytest.mark.parametrize("rho", np.linspace(0.05, 2.0, 20).tolist())
def test_iso3_second_difference_is_positive(rho, kappa):
    pipe, law = PipeParameters(D=0.8, lam=1.2), PressureLaw(c=0.9, kappa=kappa)
    h = 1e-4
    F = [iso3_entropy_density(rho + s * h, pipe, law) for s in (-1, 0, 1)]
    curvature = (F[0] - 2 * F[1] + F[2]) / h**2
    assert curvature > 0.0
    assert curvature == pytest.approx(pipe.k * law.c * kappa * rho ** (kappa - 2), rel=1e-4)


def test_parameter_validation():
    with pytest.raises(DomainError):
        PressureLaw(kappa=0.5)
    with pytest.raises(DomainError):
        PressureLaw(c=0.0)
    with pytest.raises(DomainError):
        PipeParameters(D=0.0)
    with pytest.raises(DomainError, match="reference"):
        EnergySpec("relative-entropy")
    with pytest.raises(DomainError):
        EnergySpec("enthalpy")  # type: ignore[arg-type]


def _specs(grid: NetworkGrid) -> list[EnergySpec]:
    pipes = {"e1": PipeParameters(omega=0.3, d=0.2), "e2": PipeParameters(D=0.5, lam=1.5)}
    return [
        EnergySpec("log-entropy", potential=_tilt, interaction=lambda D: np.exp(-D)),
        EnergySpec("iso3", pipes=pipes, pressure=PressureLaw(c=0.7, kappa=1.5)),
        EnergySpec("iso3", pipes=pipes, pressure=PressureLaw(kappa=1.0)),
        EnergySpec("relative-entropy", reference=grid.uniform_state()),
    ]


@pytest.mark.parametrize("which", range(4))
def test_energy_gradient_matches_finite_differences(which):
    grid = NetworkGrid(path_network(), cells_per_edge=8)
    spec = _specs(grid)[which]
    state = _bump_state(grid, floor=0.5)
    dx = grid.cell_dx
    v = np.sin(np.arange(grid.n_cells) * 1.7)
    v -= np.dot(v, dx) / dx.sum()
    t = 1e-6
    plus = NetworkState(grid, state.rho + t * v)
    minus = NetworkState(grid, state.rho - t * v)
    numeric = (energy(spec, plus) - energy(spec, minus)) / (2 * t)
    predicted = float(np.dot(energy_gradient(spec, state) * v, dx))
    assert numeric == pytest.approx(predicted, rel=1e-5, abs=1e-8)


def test_energy_rejects_negative_density(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=4)
    with pytest.raises(DomainError):
        iso3_entropy_density(np.array([0.5, -0.1]), PipeParameters(), PressureLaw())
    assert energy(EnergySpec(), grid.uniform_state()) == pytest.approx(0.0, abs=1e-12)


# simplex projection


def test_projection_lands_on_simplex():
    dx = np.array([0.25, 0.25, 0.5, 0.5])
    z = np.array([3.0, -1.0, 0.4, 1.2])
    rho = project_to_simplex(z, dx)
    assert (rho >= 0).all()
    assert np.dot(rho, dx) == pytest.approx(1.0)
    shift = z - rho
    active = rho > 0
    np.testing.assert_allclose(shift[active], shift[active][0], atol=1e-9)
    assert (shift[~active] <= shift[active][0] + 1e-9).all()


def test_projection_is_shift_invariant():
    dx = np.full(5, 0.2)
    z = np.array([0.5, 1.5, 0.0, 2.0, 1.0])
    np.testing.assert_allclose(project_to_simplex(z, dx), project_to_simplex(z + 7.0, dx), atol=1e-9)
    feasible = np.ones(5)
    np.testing.assert_allclose(project_to_simplex(feasible, dx), feasible, atol=1e-9)


# JKO steps


def test_flat_energy_keeps_the_state(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=8)
    prev = _bump_state(grid)
    out = jko_step(prev, 0.1, 2.0, EnergySpec(entropy_weight=0.0), transport="static")
    assert out.state is prev
    assert out.transport == 0.0
    assert out.objective == pytest.approx(0.0)


def test_jko_preconditions(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=8)
    prev = _bump_state(grid)
    spec = EnergySpec()
    with pytest.raises(DomainError):
        jko_step(prev, 0.0, 2.0, spec)
    with pytest.raises(DomainError):
        jko_step(prev, 0.1, 0.5, spec)
    with_node = grid.state_from_density(lambda _e, x: np.ones_like(x), gamma=[0.2, 0.0])
    with pytest.raises(DomainError, match="node mass"):
        jko_step(with_node, 0.1, 2.0, spec)
    with pytest.raises(DomainError):
        jko_step(prev, 0.1, 2.0, spec, transport="teleport")  # type: ignore[arg-type]


def test_static_flow_decreases_energy():
    grid = NetworkGrid(path_network(), cells_per_edge=8)
    spec = EnergySpec(potential=_tilt)
    flow = run_flow(_bump_state(grid, 0.6, floor=0.05), 0.05, 3, 2.0, spec, "static", JkoOptions(max_outer=10))
    assert len(flow.states) == 4
    assert all(b <= a + 1e-12 for a, b in zip(flow.energies, flow.energies[1:], strict=False))
    assert flow.energies[-1] < flow.energies[0]
    np.testing.assert_allclose(flow.masses(), 1.0, atol=1e-9)
    assert all(w >= 0 for w in flow.transports)


def test_dynamic_step_does_not_raise_energy(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=8)
    prev = _bump_state(grid, floor=0.1)
    inner = SolverOptions(max_iter=3000, tol=1e-3, raise_on_failure=False)
    out = jko_step(prev, 0.05, 2.0, EnergySpec(), "dynamic", JkoOptions(time_steps=4, max_outer=3, inner=inner))
    assert out.objective <= energy(EnergySpec(), prev) + 1e-12
    assert out.energy <= out.objective + 1e-12
    assert out.state.total_mass == pytest.approx(1.0)


LOOSE_INNER = SolverOptions(max_iter=2000, tol=1e-3, raise_on_failure=False)


@pytest.mark.slow
def test_iso3_cubic_flow_on_two_edges_is_monotone():
    grid = NetworkGrid(path_network(), cells_per_edge=6)
    spec = EnergySpec("iso3", pressure=PressureLaw(kappa=2.0))
    opts = JkoOptions(time_steps=4, max_outer=4, inner=LOOSE_INNER)
    flow = run_flow(_bump_state(grid, 0.6, floor=0.05), 0.2, 10, 3.0, spec, "dynamic", opts)
    assert len(flow.states) == 11
    assert all(b <= a + 1e-6 for a, b in zip(flow.energies, flow.energies[1:], strict=False))
    np.testing.assert_allclose(flow.masses(), 1.0, atol=1e-9)
    assert all((s.rho >= 0).all() for s in flow.states)


@pytest.mark.slow
def test_iso3_cubic_flow_on_flat_pipe_approaches_constant(pipe):
    # with kappa = 2 and k = c = 1, E(rho) - E(uniform) is the squared L2 distance to the constant
    grid = NetworkGrid(pipe, cells_per_edge=8)
    spec = EnergySpec("iso3", pressure=PressureLaw(kappa=2.0))
    opts = JkoOptions(time_steps=4, max_outer=6, inner=LOOSE_INNER)
    flow = run_flow(_bump_state(grid, 0.3, floor=0.1), 1.0, 10, 3.0, spec, "dynamic", opts)
    flat = grid.uniform_state().rho
    gaps = [float(np.dot((s.rho - flat) ** 2, grid.cell_dx)) for s in flow.states]
    for gap, e in zip(gaps, flow.energies, strict=True):
        assert gap == pytest.approx(e - energy(spec, grid.uniform_state()), abs=1e-9)
    assert all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:], strict=False))
    assert gaps[-1] <= 0.25 * gaps[0]


def test_run_flow_edge_cases(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=8)
    start = _bump_state(grid)
    flow = run_flow(start, 0.1, 0, 2.0, EnergySpec(), "static")
    assert flow.states == [start]
    assert flow.transports == []
    with pytest.raises(DomainError):
        run_flow(start, 0.1, -1, 2.0, EnergySpec())


def test_flow_frames(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=6)
    seen: list[int] = []
    flow = run_flow(_bump_state(grid, floor=0.1), 0.1, 2, 2.0, EnergySpec(), "static", progress=seen.append)
    assert seen == [1, 2]
    frame = flow.energy_frame()
    assert list(frame.columns) == ["step", "E", "W_inner", "mass"]
    assert frame["W_inner"].iloc[0] == 0.0
    traj = flow.trajectory_frame()
    assert list(traj.columns) == ["step", "edge", "cell", "rho"]
    assert len(traj) == 3 * grid.n_cells
