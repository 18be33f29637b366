import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from errors import DomainError, GraphDomainError, InfeasibilityError
from graphcore import Edge, GraphPoint
from measures import AmbientPoint, DiscreteMeasure, sample_graph_measure
from networks import cycle_network, path_network, square_with_diagonal, y_network
from static_ot import (
    CostMatrix,
    Coupling,
    EuclideanCost,
    GraphCost,
    build_cost_matrix,
    check_cyclical_monotonicity,
    solve_ot,
    solve_transport,
    stability_experiment,
    wasserstein_p,
)


def _line_measure(*coords: float) -> DiscreteMeasure:
    return DiscreteMeasure.uniform([GraphPoint("e1", c) for c in coords])


def _permutation_oracle(M: np.ndarray) -> float:
    n = M.shape[0]
    return min(sum(M[i, s[i]] for i in range(n)) / n for s in itertools.permutations(range(n)))


def _lp_oracle(M: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    n, m = M.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(M.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


@pytest.fixture
def line():
    return path_network()


@pytest.fixture
def two_by_two(line):
    src = _line_measure(0.0, 1.0)
    dst = _line_measure(0.25, 0.75)
    return src, dst, build_cost_matrix(src, dst, GraphCost(line), p=2)


def test_two_diracs_on_one_edge(line):
    c = build_cost_matrix(_line_measure(0.2), _line_measure(0.9), GraphCost(line), p=2)
    assert c.shape == (1, 1)
    assert c.values[0, 0] == pytest.approx(0.49)
    assert c.name == "graph^2"
    assert c.row_labels == ("src:0",)


def test_cost_matrix_diagonal_is_zero_for_identical_measures(ygraph):
    m = sample_graph_measure(ygraph, 6, seed=11)
    c = build_cost_matrix(m, m, GraphCost(ygraph), p=2)
    np.testing.assert_allclose(np.diag(c.values), 0.0, atol=1e-12)


def test_mixed_kinds_rejected(line):
    ambient = DiscreteMeasure.uniform([AmbientPoint.of(0.0, 0.0)])
    with pytest.raises(DomainError, match="mixed location kinds"):
        build_cost_matrix(_line_measure(0.2), ambient, GraphCost(line))
    with pytest.raises(DomainError):
        build_cost_matrix(_line_measure(0.2), _line_measure(0.3), EuclideanCost())


def test_exponent_below_one_rejected(line):
    with pytest.raises(DomainError):
        build_cost_matrix(_line_measure(0.2), _line_measure(0.3), GraphCost(line), p=0.5)


def test_euclidean_cost():
    src = DiscreteMeasure.uniform([AmbientPoint.of(0.0, 0.0)])
    dst = DiscreteMeasure.uniform([AmbientPoint.of(3.0, 4.0)])
    assert build_cost_matrix(src, dst, EuclideanCost(), p=2).values[0, 0] == pytest.approx(25.0)


def test_cost_matrix_rejects_nan():
    with pytest.raises(DomainError):
        CostMatrix(np.array([[np.nan]]))


def test_identical_measures_give_identity_coupling(ygraph):
    m = sample_graph_measure(ygraph, 3, seed=2)
    result = solve_transport(m, m, GraphCost(ygraph), p=1)
    assert result.value == pytest.approx(0.0, abs=1e-12)
    assert sorted((i, j) for i, j, _ in result.coupling.support()) == [(0, 0), (1, 1), (2, 2)]


def test_two_by_two_line_instance(two_by_two):
    src, dst, c = two_by_two
    pi, cert = solve_ot(c, src, dst)
    assert pi.value == pytest.approx(0.0625)
    assert sorted((i, j) for i, j, _ in pi.support()) == [(0, 0), (1, 1)]
    assert pi.marginal_error(src, dst) <= 1e-8
    assert cert.gap == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_three_by_three_matches_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0.0, 2.0, size=(3, 3))
    m = _line_measure(0.1, 0.2, 0.3)
    pi, _ = solve_ot(CostMatrix(M), m, m)
    assert pi.value == pytest.approx(_permutation_oracle(M), abs=1e-12)


@pytest.mark.parametrize("n", [4, 5, 7])
def test_uniform_instances_match_permutation_oracle(ygraph, n):
    mu = sample_graph_measure(ygraph, n, seed=n)
    nu = sample_graph_measure(ygraph, n, seed=100 + n)
    result = solve_transport(mu, nu, GraphCost(ygraph), p=2)
    assert result.value == pytest.approx(_permutation_oracle(result.cost.values), abs=1e-10)


def test_general_weights_match_linear_program(ygraph):
    mu = DiscreteMeasure.from_atoms(
        [(GraphPoint("e1", 0.1), 0.5), (GraphPoint("e2", 0.3), 0.3), (GraphPoint("e3", 0.6), 0.2)]
    )
    nu = DiscreteMeasure.from_atoms([(GraphPoint("e1", 0.9), 0.25), (GraphPoint("e3", 0.2), 0.75)])
    result = solve_transport(mu, nu, GraphCost(ygraph), p=2)
    oracle = _lp_oracle(result.cost.values, mu.weights, nu.weights)
    assert result.value == pytest.approx(oracle, abs=1e-9)
    assert result.coupling.marginal_error(mu, nu) <= 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_duality_certificate(ygraph, seed):
    mu = sample_graph_measure(ygraph, 6, seed=seed)
    nu = sample_graph_measure(ygraph, 6, seed=seed + 50)
    result = solve_transport(mu, nu, GraphCost(ygraph), p=2)
    cert = result.certificate
    assert cert.feasibility_violation(result.cost) <= 1e-8
    assert cert.slackness_violations(result.coupling, result.cost) == 0
    assert cert.gap >= -1e-8
    assert cert.gap <= 1e-6 * (1 + abs(result.value))


def test_infeasible_row_names_the_atom():
    M = np.array([[np.inf, np.inf], [1.0, 2.0]])
    m = _line_measure(0.1, 0.2)
    with pytest.raises(InfeasibilityError, match="src:0"):
        solve_ot(CostMatrix(M), m, m)


def test_infinite_entries_avoided_when_possible():
    M = np.array([[np.inf, 1.0], [1.0, np.inf]])
    m = _line_measure(0.1, 0.2)
    pi, _ = solve_ot(CostMatrix(M), m, m)
    assert pi.value == pytest.approx(1.0)
    assert np.isfinite(pi.value)


@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
def test_wasserstein_two_diracs(line, p):
    assert wasserstein_p(line, _line_measure(0.2), _line_measure(0.9), p) == pytest.approx(0.7)


def test_wasserstein_identical_measures(ygraph):
    m = sample_graph_measure(ygraph, 5, seed=9)
    assert wasserstein_p(ygraph, m, m, 2) == pytest.approx(0.0, abs=1e-9)


def test_wasserstein_y_graph_matches_oracle(ygraph):
    mu = DiscreteMeasure.uniform(
        [GraphPoint("e1", 0.1), GraphPoint("e1", 0.6), GraphPoint("e2", 0.2), GraphPoint("e3", 0.5)]
    )
    nu = DiscreteMeasure.uniform(
        [GraphPoint("e2", 0.7), GraphPoint("e3", 0.1), GraphPoint("e3", 0.65), GraphPoint("e1", 0.9)]
    )
    D = ygraph.distance_matrix(list(mu.locations), list(nu.locations))
    expected = math.sqrt(_permutation_oracle(D**2))
    assert wasserstein_p(ygraph, mu, nu, 2) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_wasserstein_triangle_inequality(ygraph, seed):
    mu, sigma, nu = (sample_graph_measure(ygraph, 5, seed=seed * 3 + k) for k in range(3))
    direct = wasserstein_p(ygraph, mu, nu, 2)
    assert direct <= wasserstein_p(ygraph, mu, sigma, 2) + wasserstein_p(ygraph, sigma, nu, 2) + 1e-9


def test_single_pair_is_monotone(line):
    c = CostMatrix(np.array([[0.3]]))
    pi = Coupling.from_entries([(0, 0, 1.0)], c)
    report = check_cyclical_monotonicity(pi, c)
    assert report.ok
    assert report.worst_margin == 0.0


def test_crossing_coupling_violates_monotonicity(two_by_two):
    _, _, c = two_by_two
    crossing = Coupling.from_entries([(0, 1, 0.5), (1, 0, 0.5)], c)
    report = check_cyclical_monotonicity(crossing, c, max_cycle=2)
    assert not report.ok
    assert report.worst_margin == pytest.approx(0.5)
    assert report.to_dict()["violations"] == 1


def test_solver_output_is_monotone(two_by_two):
    src, dst, c = two_by_two
    pi, _ = solve_ot(c, src, dst)
    assert check_cyclical_monotonicity(pi, c).ok


@pytest.mark.parametrize("seed", range(3))
def test_optimal_plans_pass_exhaustive_check(ygraph, seed):
    mu = sample_graph_measure(ygraph, 7, seed=seed)
    nu = sample_graph_measure(ygraph, 7, seed=seed + 20)
    result = solve_transport(mu, nu, GraphCost(ygraph), p=2)
    report = check_cyclical_monotonicity(result.coupling, result.cost, delta=1e-8)
    assert report.exhaustive
    assert report.ok
    assert report.cycles_checked > 0


def test_large_supports_are_sampled(ygraph):
    mu = sample_graph_measure(ygraph, 12, seed=4)
    nu = sample_graph_measure(ygraph, 12, seed=5)
    result = solve_transport(mu, nu, GraphCost(ygraph), p=2)
    report = check_cyclical_monotonicity(result.coupling, result.cost, trials=200, seed=1)
    assert not report.exhaustive
    assert report.cycles_checked == 200
    assert report.ok


def test_result_record(two_by_two):
    src, dst, _ = two_by_two
    result = solve_transport(src, dst, GraphCost(path_network()), p=2)
    record = result.to_record(check_cyclical_monotonicity(result.coupling, result.cost))
    assert record.format == "otresult/1"
    assert record.value == pytest.approx(0.0625)
    assert len(record.coupling) == 2
    assert record.monotonicity is not None and record.monotonicity["violations"] == 0


def test_empty_edit_changes_nothing():
    g = cycle_network()
    mu = DiscreteMeasure.uniform([GraphPoint("e1", 0.5), GraphPoint("e3", 0.2)])
    nu = DiscreteMeasure.uniform([GraphPoint("e2", 0.5), GraphPoint("e4", 0.7)])
    report = stability_experiment(g, mu, nu)
    assert report.delta == 0.0
    assert report.bound_pi == 0.0
    assert report.bound_inf == 0.0


def _oracle_ot(g, mu, nu, p=2.0):
    D = g.distance_matrix(list(mu.locations), list(nu.locations))
    return _permutation_oracle(D**p)


def test_removing_central_edge_against_oracle():
    g = square_with_diagonal()
    mu = DiscreteMeasure.uniform(
        [GraphPoint("e1", 0.2), GraphPoint("e3", 0.4), GraphPoint("e1", 0.0), GraphPoint("e2", 0.5)]
    )
    nu = DiscreteMeasure.uniform(
        [GraphPoint("e4", 0.9), GraphPoint("e2", 1.0), GraphPoint("e2", 0.3), GraphPoint("e4", 0.1)]
    )
    report = stability_experiment(g, mu, nu, remove=["e5"])
    edited = g.edited(remove=["e5"])
    assert report.ot_before == pytest.approx(_oracle_ot(g, mu, nu), abs=1e-10)
    assert report.ot_after == pytest.approx(_oracle_ot(edited, mu, nu), abs=1e-10)
    assert report.ot_after >= report.ot_before - 1e-12
    assert abs(report.delta) <= report.bound_pi + 1e-8 <= report.bound_inf + 2e-8
    assert report.to_dict()["removed"] == ["e5"]


def test_adding_a_shortcut_lowers_cost():
    g = cycle_network()
    shortcut = Edge("e5", "a", "c", math.sqrt(2.0))
    mu = DiscreteMeasure.uniform([GraphPoint("e1", 0.0), GraphPoint("e1", 0.3)])
    nu = DiscreteMeasure.uniform([GraphPoint("e2", 1.0), GraphPoint("e4", 0.6)])
    report = stability_experiment(g, mu, nu, add=[shortcut])
    assert report.ot_after <= report.ot_before + 1e-12
    assert report.added == ("e5",)


def test_disconnecting_edit_rejected():
    g = path_network()
    m = _line_measure(0.1)
    with pytest.raises(GraphDomainError, match="invalid network"):
        stability_experiment(g, m, m, remove=["e2"])


def test_atom_inside_removed_edge_rejected():
    g = square_with_diagonal()
    mu = DiscreteMeasure.uniform([GraphPoint("e5", 0.3)])
    nu = DiscreteMeasure.uniform([GraphPoint("e1", 0.3)])
    with pytest.raises(DomainError, match="inside removed edge"):
        stability_experiment(g, mu, nu, remove=["e5"])


def test_atom_at_endpoint_of_removed_edge_is_rehomed():
    g = square_with_diagonal()
    mu = DiscreteMeasure.uniform([GraphPoint("e5", 0.0)])
    nu = DiscreteMeasure.uniform([GraphPoint("e2", 0.5)])
    report = stability_experiment(g, mu, nu, remove=["e5"])
    assert report.ot_after == pytest.approx(1.5**2)


def test_y_network_unchanged_by_unrelated_addition():
    g = y_network()
    mu = DiscreteMeasure.uniform([GraphPoint("e1", 0.1)])
    nu = DiscreteMeasure.uniform([GraphPoint("e1", 0.8)])
    report = stability_experiment(g, mu, nu, add=[Edge("e4", "u", "d", 1.0)])
    assert report.delta == pytest.approx(0.0, abs=1e-12)
