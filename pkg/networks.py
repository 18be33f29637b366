"""Built-in embedded networks used by the experiments and the test-suite.

All networks are planar and their edges are straight or diagonal (multiples of 45 degrees),
which the 8-neighbour tube grids resolve without directional bias.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence

import numpy as np

from errors import DomainError
from graphcore import Edge, MetricGraph

Coord = tuple[float, ...]


def embedded_edge(edge_id: str, tail: str, head: str, polyline: Sequence[Coord]) -> Edge:
    """Edge whose declared length is the length of its polyline."""
    pts = np.asarray(polyline, dtype=float)
    length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
    return Edge(edge_id, tail, head, length, tuple(tuple(float(c) for c in pt) for pt in pts))


def _network(positions: dict[str, Coord], links: Sequence[tuple[str, str, str]]) -> MetricGraph:
    edges = [embedded_edge(eid, u, v, [positions[u], positions[v]]) for eid, u, v in links]
    return MetricGraph(list(positions), edges)


def single_pipe(length: float = 1.0) -> MetricGraph:
    return _network({"a": (0.0, 0.0), "b": (length, 0.0)}, [("e1", "a", "b")])


def l_pipe(arm: float = 0.5) -> MetricGraph:
    """Two arms meeting at a right angle at the origin."""
    return _network(
        {"p": (arm, 0.0), "c": (0.0, 0.0), "q": (0.0, arm)},
        [("e1", "c", "p"), ("e2", "c", "q")],
    )


def y_network() -> MetricGraph:
    """Horizontal stem of length 1 splitting into two symmetric 45-degree arms."""
    return _network(
        {"o": (0.0, 0.0), "j": (1.0, 0.0), "u": (1.5, 0.5), "d": (1.5, -0.5)},
        [("e1", "o", "j"), ("e2", "j", "u"), ("e3", "j", "d")],
    )


def cycle_network(side: float = 1.0) -> MetricGraph:
    """Square loop: the opposite corners a and c are joined by two routes of equal length."""
    return _network(
        {"a": (0.0, 0.0), "b": (side, 0.0), "c": (side, side), "d": (0.0, side)},
        [("e1", "a", "b"), ("e2", "b", "c"), ("e3", "a", "d"), ("e4", "d", "c")],
    )


def path_network() -> MetricGraph:
    return _network(
        {"a": (0.0, 0.0), "b": (1.0, 0.0), "c": (2.0, 0.0)},
        [("e1", "a", "b"), ("e2", "b", "c")],
    )


def triangle_network() -> MetricGraph:
    return _network(
        {"a": (0.0, 0.0), "b": (1.0, 0.0), "c": (0.5, math.sqrt(3.0) / 2.0)},
        [("e1", "a", "b"), ("e2", "b", "c"), ("e3", "a", "c")],
    )


def square_with_diagonal() -> MetricGraph:
    """Square loop plus one diagonal; deleting the diagonal keeps the network connected."""
    return _network(
        {"a": (0.0, 0.0), "b": (1.0, 0.0), "c": (1.0, 1.0), "d": (0.0, 1.0)},
        [("e1", "a", "b"), ("e2", "b", "c"), ("e3", "a", "d"), ("e4", "d", "c"), ("e5", "a", "c")],
    )


def figure1_network() -> MetricGraph:
    """Reconstruction of the trajectory-figure network (the original geometry is not published).

    Mass enters at the lower-left node ``s``, branches at ``a`` into an upper and a lower
    corridor, and the corridors merge again at ``d`` through the diagonal ``c``-``d``. The two
    right-hand ends ``t1`` and ``t2`` host the target accumulations.
    """
    return _network(
        {
            "s": (0.0, 0.0),
            "a": (0.5, 0.0),
            "b": (1.0, 0.5),
            "c": (1.0, 0.0),
            "d": (1.5, 0.5),
            "f": (1.5, 0.0),
            "t1": (2.0, 0.5),
            "t2": (2.0, 0.0),
        },
        [
            ("e1", "s", "a"),
            ("e2", "a", "b"),
            ("e3", "a", "c"),
            ("e4", "b", "d"),
            ("e5", "c", "f"),
            ("e6", "c", "d"),
            ("e7", "d", "t1"),
            ("e8", "f", "t2"),
        ],
    )


BUILTIN_NETWORKS: dict[str, Callable[[], MetricGraph]] = {
    "pipe": single_pipe,
    "l-pipe": l_pipe,
    "y": y_network,
    "cycle": cycle_network,
    "path": path_network,
    "triangle": triangle_network,
    "square-diagonal": square_with_diagonal,
    "figure1": figure1_network,
}


def builtin_network(name: str) -> MetricGraph:
    try:
        factory = BUILTIN_NETWORKS[name]
    except KeyError:
        raise DomainError(f"unknown network {name!r}; choose one of {sorted(BUILTIN_NETWORKS)}") from None
    return factory()


__all__ = [
    "BUILTIN_NETWORKS",
    "builtin_network",
    "embedded_edge",
    "single_pipe",
    "l_pipe",
    "y_network",
    "cycle_network",
    "path_network",
    "triangle_network",
    "square_with_diagonal",
    "figure1_network",
]
