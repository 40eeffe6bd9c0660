from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cylidla.cluster import (ClusterError, ClusterState, comb_cluster, exit_distribution, grow,
                             idla_step, new_cluster, run_process, shifted_step)
from cylidla.graphs import build_graph
from cylidla.rng import make_rng
from cylidla.stats import tv_from_counts
from cylidla.walk import WalkMode

from oracles import arrival_law, lazy_matrix


def test_flat_cluster():
    G = build_graph("cycle", n=4)
    A = new_cluster(G)
    assert (A.h, A.k, A.size_above, A.excess) == (0, 0, 0, 0.0)
    assert A.occupied(2, 0) and A.occupied(0, -50) and not A.occupied(0, 1)
    A.check(connectivity=True)


def test_add_and_caches():
    G = build_graph("complete", n=3)
    A = new_cluster(G)
    A.add(0, 1)
    A.add(1, 1)
    assert (A.h, A.k, A.size_above) == (1, 0, 2)
    A.add(2, 1)
    assert A.k == 1 and A.level_counts() == (3,)
    A.add(0, 2)
    assert A.excess == pytest.approx(2 - 4 / 3)
    A.check(connectivity=True)
    with pytest.raises(ClusterError):
        A.add(0, 2)
    with pytest.raises(ClusterError):
        A.add(5, 3)


def test_explicit_init_validation():
    G = build_graph("cycle", n=5)
    with pytest.raises(ClusterError, match="connected"):
        new_cluster(G, [(0, 2)])
    with pytest.raises(ClusterError):
        new_cluster(G, [(0, 0)])
    with pytest.raises(ClusterError):
        new_cluster(G, "round")
    A = new_cluster(G, [(0, 1), (0, 2), (1, 2)])
    assert A.sites() == {(0, 1), (0, 2), (1, 2)}


def test_downshift():
    G = build_graph("complete", n=2)
    A = new_cluster(G, [(0, 1), (1, 1), (0, 2)])
    assert A.downshift() == 1
    assert (A.h, A.k, A.size_above, A.cumulative_shift) == (1, 0, 1, 1)
    assert A.occupied(0, 1) and not A.occupied(1, 1)
    A.check(connectivity=True)
    assert A.downshift() == 0


@pytest.mark.parametrize("family,n", [("cycle", 6), ("complete", 5), ("hypercube", 8)])
def test_growth_invariants(family, n):
    G = build_graph(family, **({"dim": 3} if family == "hypercube" else {"n": n}))
    mode = WalkMode.fastforward(G, 1e-3)
    tr = run_process("flat", G, 300, make_rng(1), mode, record_schedule=range(0, 301, 50))
    A = tr.final
    A.check(connectivity=True)
    assert A.size_above == 300 and A.t == 300
    assert [s.t for s in tr.stats] == list(range(0, 301, 50))
    assert all(s.size_above == s.t for s in tr.stats)
    assert all(s.excess >= 0 for s in tr.stats)


def test_shifted_and_unshifted_agree_up_to_shift():
    G = build_graph("cycle", n=6)
    mode = WalkMode.fastforward(G, 1e-3)
    a = run_process("flat", G, 500, make_rng(2), mode)
    b = run_process("flat", G, 500, make_rng(2), mode, shifted=True)
    A, B = a.final, b.final
    B.check()
    assert B.k == 0
    assert B.cumulative_shift == A.k
    assert A.h - A.k == B.h
    for y in range(1, B.h + 1):
        assert np.array_equal(A.level(y + A.k), B.level(y))


def test_step_functions():
    G = build_graph("cycle", n=4)
    mode = WalkMode.exact()
    A = new_cluster(G)
    A, site = idla_step(A, G, make_rng(3), mode)
    assert site.y == 1 and A.occupied(*site)
    B = new_cluster(G)
    total = 0
    for i in range(40):
        B, s = shifted_step(B, G, make_rng(4, i), mode)
        total += s
        assert B.k == 0
    assert B.cumulative_shift == total
    assert B.size_above + total * G.N == 40
    with pytest.raises(ClusterError):
        idla_step(A, build_graph("cycle", n=5), make_rng(0), mode)


def test_json_roundtrip(tmp_path):
    G = build_graph("torus", side=3, dim=2)
    A = run_process("flat", G, 200, make_rng(5), WalkMode.fastforward(G, 1e-3)).final
    B = ClusterState.from_json(A.to_json(), G)
    assert A.same_set(B) and B.cumulative_shift == A.cumulative_shift
    B.check(connectivity=True)
    with pytest.raises(ClusterError):
        ClusterState.from_json(A.to_json(), build_graph("cycle", n=4))


def test_copy_is_independent():
    G = build_graph("complete", n=3)
    A = new_cluster(G, [(0, 1)])
    B = A.copy()
    B.add(1, 1)
    assert A.size_above == 1 and B.size_above == 2


def test_comb_cluster_structure():
    G = build_graph("cycle", n=5)
    C = comb_cluster(G, bad_levels=3, spacing=4, holes=2)
    C.check(connectivity=True)
    assert C.h == 12 and C.k == 3
    assert [C.level_count(y) for y in (4, 8, 12)] == [3, 3, 3]
    assert C.level_count(5) == 5
    R = comb_cluster(G, 2, 3, 1, make_rng(0))
    R.check(connectivity=True)
    with pytest.raises(ClusterError):
        comb_cluster(G, 1, 1, holes=5)


def _python_idla(G, T, rng, returns):
    """Reference IDLA: release at (w, 0), w ~ pi, walk until the first empty site.

    Excursions below level 0 have infinite mean length, so a down step from
    level 0 is resolved by drawing the return vertex from the analytic law.
    """
    occ = set()
    for _ in range(T):
        v = int(rng.choice(G.N, p=G.pi))
        y = 0
        while y <= 0 or (v, y) in occ:
            u = rng.random()
            if u < 0.25:
                y += 1
            elif u < 0.5:
                if y > 0:
                    y -= 1
                else:
                    v = int(rng.choice(G.N, p=returns[v]))
            elif u >= 0.75:
                nb = G.adjacency[v]
                v = nb[int(rng.integers(len(nb)))]
        occ.add((v, y))
    return frozenset(occ)


def test_cluster_law_matches_reference_simulation():
    edges = [(0, 1), (1, 2)]
    G = build_graph("custom", n=3, edges=edges)
    # the path is not regular, so symmetrise P before taking the matrix function
    P = lazy_matrix(3, edges)
    d = np.sqrt(G.pi)
    S = d[:, None] * P / d[None, :]
    returns = np.array([arrival_law(S, v, 1) * d / d[v] for v in range(3)])
    T, size = 4, 3000
    rng = make_rng(6)
    ref = Counter(_python_idla(G, T, rng, returns) for _ in range(size))
    for mode in (WalkMode.exact(), WalkMode.fastforward(G, 1e-3)):
        ours = Counter()
        for i in range(size):
            A = new_cluster(G)
            grow(A, T, make_rng(7, i), mode)
            ours[frozenset(A.sites())] += 1
        tv, se = tv_from_counts(ref, ours)
        assert tv <= 3 * se + mode.epsilon


def test_exit_distribution_flat_is_stationary():
    G = build_graph("custom", n=4, edges=[(0, 1), (0, 2), (0, 3)])
    A = new_cluster(G)
    v, y, debt, aborted = exit_distribution(A, make_rng(8), WalkMode.fastforward(G, 1e-3), 20000)
    assert aborted == 0 and np.all(y == 1)
    tv, se = tv_from_counts(np.bincount(v, minlength=4), G.pi * 1e9)
    assert tv <= 3 * se


@given(st.integers(2, 6), st.integers(0, 60), st.integers(0, 2**32), st.booleans())
@settings(max_examples=25, deadline=None)
def test_random_growth_keeps_invariants(n, T, seed, shifted):
    G = build_graph("cycle" if n > 2 else "complete", n=n)
    A = new_cluster(G)
    grow(A, T, make_rng(seed), WalkMode.exact(), shifted=shifted)
    A.check(connectivity=True)
    assert A.size_above + A.cumulative_shift * n == T
