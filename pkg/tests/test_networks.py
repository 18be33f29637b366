import numpy as np
import pytest

from errors import DomainError
from graphcore import validate_graph
from networks import BUILTIN_NETWORKS, builtin_network, embedded_edge


@pytest.mark.parametrize("name", sorted(BUILTIN_NETWORKS))
def test_builtin_networks_are_valid_and_embedded(name):
    g = builtin_network(name)
    assert validate_graph(g).ok
    assert g.has_embeddings
    assert g.dim == 2


@pytest.mark.parametrize("name", sorted(BUILTIN_NETWORKS))
def test_builtin_edges_are_axis_or_diagonal(name):
    for e in builtin_network(name).edges:
        if name == "triangle":
            continue
        dx, dy = np.abs(np.diff(e.polyline(), axis=0))[0]
        assert dx == pytest.approx(0.0) or dy == pytest.approx(0.0) or dx == pytest.approx(dy)


def test_embedded_edge_length_is_polyline_length():
    e = embedded_edge("e", "u", "v", [(0.0, 0.0), (3.0, 4.0)])
    assert e.length == pytest.approx(5.0)
    assert e.polyline_length() == pytest.approx(e.length)


def test_unknown_network_rejected():
    with pytest.raises(DomainError, match="unknown network"):
        builtin_network("moebius")


def test_figure_network_has_two_target_ends():
    g = builtin_network("figure1")
    leaves = [v for v in g.nodes if len(g.incident_edges(v)) == 1]
    assert sorted(leaves) == ["s", "t1", "t2"]
