import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cylidla.graphs import (GraphError, TransitionPowers, build_graph, graph_for_size,
                            lazy_transition_matrix, lazy_transition_row, load_edge_list,
                            max_pair_tv, mixing_time, quasi_regularity, stationary_distribution,
                            tv_distance)

from oracles import brute_mixing_time, complete_edges, cycle_edges, lazy_matrix


@pytest.mark.parametrize("family,params,N", [
    ("cycle", {"n": 5}, 5),
    ("complete", {"n": 2}, 2),
    ("torus", {"side": 3, "dim": 2}, 9),
    ("hypercube", {"dim": 3}, 8),
])
def test_families(family, params, N):
    G = build_graph(family, **params)
    assert G.N == N
    assert G.vertex_transitive
    assert np.isclose(stationary_distribution(G).sum(), 1.0)


def test_torus_degrees():
    G = build_graph("torus", side=4, dim=3)
    assert G.N == 64 and set(G.degrees) == {6}


@pytest.mark.parametrize("kwargs", [
    {"n": 1, "edges": []},
    {"n": 3, "edges": [(0, 1)]},
    {"n": 3, "edges": [(0, 0), (1, 2)]},
    {"n": 3, "edges": [(0, 3)]},
    {"n": 4, "edges": [(0, 1), (2, 3)]},
])
def test_custom_rejects_bad_graphs(kwargs):
    with pytest.raises(GraphError):
        build_graph("custom", **kwargs)


def test_symmetric_flag_requires_both_directions():
    with pytest.raises(GraphError, match="not symmetric"):
        build_graph("custom", n=2, edges=[(0, 1)], symmetric=True)
    G = build_graph("custom", n=2, edges=[(0, 1), (1, 0)], symmetric=True)
    assert G.adjacency == ((1,), (0,))


def test_unknown_family():
    with pytest.raises(GraphError):
        build_graph("petersen", n=10)
    with pytest.raises(GraphError):
        graph_for_size("torus", 10)


def test_edge_list_file(tmp_path):
    f = tmp_path / "path3.txt"
    f.write_text("# a path\n0 1\n1 2\n")
    G = load_edge_list(f)
    assert G.N == 3 and G.edges() == [(0, 1), (1, 2)]
    assert np.allclose(G.pi, [0.25, 0.5, 0.25])
    f.write_text("0 1 2\n")
    with pytest.raises(GraphError):
        load_edge_list(f)


def test_quasi_regularity_star():
    G = build_graph("custom", n=4, edges=[(0, 1), (0, 2), (0, 3)])
    q = quasi_regularity(G)
    # pi = (1/2, 1/6, 1/6, 1/6)
    assert q.delta == pytest.approx(4 / 6)
    assert q.delta_prime == pytest.approx(2.0)


def test_transition_matrix_matches_oracle():
    for n, edges in [(6, cycle_edges(6)), (5, complete_edges(5)), (4, [(0, 1), (1, 2), (1, 3)])]:
        G = build_graph("custom", n=n, edges=edges)
        assert np.allclose(lazy_transition_matrix(G), lazy_matrix(n, edges))
        assert np.allclose(lazy_transition_row(G, 1), lazy_matrix(n, edges)[1])


def test_tv_distance():
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


# Frozen oracle values; re-derived below by brute-force powers of the lazy matrix.
FROZEN_TAU_HALF = {("complete", 2): 1, ("complete", 4): 1, ("cycle", 8): 6, ("cycle", 16): 24}


@pytest.mark.parametrize("key,tau", FROZEN_TAU_HALF.items())
def test_exact_mixing_frozen_values(key, tau):
    family, n = key
    edges = complete_edges(n) if family == "complete" else cycle_edges(n)
    assert brute_mixing_time(lazy_matrix(n, edges), 0.5) == tau
    assert mixing_time(build_graph(family, n=n)).tau_half == tau


def test_exact_mixing_non_transitive_graph():
    edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (3, 4)]
    G = build_graph("custom", n=5, edges=edges)
    P = lazy_matrix(5, edges)
    prof = mixing_time(G, [0.5, 0.1, 0.01])
    for eps in (0.5, 0.1, 0.01):
        assert prof.tau[eps] == brute_mixing_time(P, eps)


def test_complete_graph_one_step_distance():
    prof = mixing_time(build_graph("complete", n=4))
    assert prof.distance(1) == pytest.approx(1 / 3)


def test_exact_mode_cap():
    with pytest.raises(ValueError, match="monte_carlo"):
        mixing_time(build_graph("cycle", n=10), mode="exact", cap=8)
    with pytest.raises(ValueError):
        mixing_time(build_graph("cycle", n=10), mode="nope")
    with pytest.raises(ValueError):
        mixing_time(build_graph("cycle", n=10), epsilon=1.5)


def test_mixing_profile_csv(tmp_path):
    prof = mixing_time(build_graph("cycle", n=6), [0.5, 0.1])
    path = tmp_path / "mix.csv"
    prof.write_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == "k,max_pair_tv"
    assert "epsilon,tau" in text
    assert prof.to_dict()["tau"]["0.5"] == prof.tau_half


@pytest.mark.parametrize("family,n", [("cycle", 12), ("hypercube", 16), ("complete", 6)])
def test_monte_carlo_agrees_with_exact(family, n):
    G = graph_for_size(family, n)
    grid = [0, 1, 2, 4, 8, 16]
    mc = mixing_time(G, 0.5, "monte_carlo", samples=4000, k_grid=grid, seed=11)
    P = lazy_matrix(G.N, G.edges())
    ref = np.array([max_pair_tv(np.linalg.matrix_power(P, k), False) for k in grid])
    assert np.all(np.abs(mc.max_distance_curve - ref) <= 3 * mc.standard_errors + 1e-12)


def test_transition_powers():
    G = build_graph("cycle", n=7)
    P = lazy_transition_matrix(G)
    tp = TransitionPowers(G, window=5)
    for s in (0, 1, 3, 5, 6, 13, 64, 1000):
        assert np.allclose(tp.matrix(s), np.linalg.matrix_power(P, s))
    assert np.allclose(tp.row(2, 9), np.linalg.matrix_power(P, 9)[2])
    with pytest.raises(ValueError):
        tp.matrix(-1)


def test_max_pair_tv_transitive_shortcut():
    P = lazy_transition_matrix(build_graph("cycle", n=9))
    M = np.linalg.matrix_power(P, 5)
    assert max_pair_tv(M, True) == pytest.approx(max_pair_tv(M, False))


@st.composite
def connected_graphs(draw):
    n = draw(st.integers(2, 9))
    # random spanning tree plus extra edges
    edges = [(draw(st.integers(0, v - 1)), v) for v in range(1, n)]
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=10))
    edges += [(u, v) for u, v in extra if u != v]
    return n, edges


@given(connected_graphs())
@settings(max_examples=40, deadline=None)
def test_random_graph_chain_properties(g):
    n, edges = g
    G = build_graph("custom", n=n, edges=edges)
    P = lazy_transition_matrix(G)
    pi = G.pi
    assert np.allclose(P.sum(axis=1), 1.0)
    assert np.allclose(pi @ P, pi)
    # reversibility
    F = pi[:, None] * P
    assert np.allclose(F, F.T)
    q = quasi_regularity(G)
    assert q.delta <= 1.0 + 1e-12 <= q.delta_prime + 2e-12
    assert math.isclose(pi.min() * n, q.delta)


@given(connected_graphs(), st.sampled_from([1, 2, 3]))
@settings(max_examples=25, deadline=None)
def test_tt_inequality_random_graphs(g, gamma):
    n, edges = g
    if n < 3:
        return
    G = build_graph("custom", n=n, edges=edges)
    eps = float(n) ** -gamma
    prof = mixing_time(G, eps)
    assert prof.tau[eps] <= math.ceil(3 * gamma * prof.tau_half * math.log(n))
