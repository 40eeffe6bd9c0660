import math

import numpy as np
import pytest

from cylidla.cluster import new_cluster
from cylidla.graphs import build_graph, lazy_transition_matrix
from cylidla.rng import make_rng
from cylidla.stats import tv_from_counts
from cylidla.walk import (ABORTED, EXITED, STOPPED, CylinderSite, WalkMode, WalkState,
                          exact_excursion_oracle, excursion_return_law, fast_forward_excursion,
                          first_passage_time, first_passage_times, hit_level, hit_level_many,
                          skeleton_return_oracle, walk_step, walk_until_exit)

from oracles import arrival_law, cycle_edges, lazy_matrix, passage_pmf


def test_first_passage_law_matches_catalan_pmf():
    rng = make_rng(1)
    t = first_passage_times(rng, 200_000)
    assert np.all(t % 2 == 1)
    for s in (1, 3, 5, 7, 9):
        p = passage_pmf(s)
        obs = np.mean(t == s)
        assert abs(obs - p) <= 4 * math.sqrt(p * (1 - p) / t.size)
    # heavy tail: P(T > 2j-1) = C(2j, j) / 4^j
    j = 200
    tail = math.comb(2 * j, j) / 4**j
    assert abs(np.mean(t > 2 * j - 1) - tail) <= 4 * math.sqrt(tail / t.size)


def test_first_passage_matches_direct_simulation():
    rng = make_rng(2)
    a = first_passage_times(rng, 40_000)
    b = skeleton_return_oracle(rng, 40_000)
    cap = 21
    ca = np.bincount(np.minimum(a, cap), minlength=cap + 1)
    cb = np.bincount(np.minimum(np.where(b < 0, cap, b), cap), minlength=cap + 1)
    tv, se = tv_from_counts(ca, cb)
    assert tv <= 3 * se + 0.01


def test_first_passage_levels_additive():
    rng = make_rng(3)
    x = [first_passage_time(rng, 2) for _ in range(2000)]
    assert all(v % 2 == 0 and v >= 2 for v in x)


def test_walk_step_moves():
    G = build_graph("cycle", n=5)
    rng = make_rng(4)
    s = WalkState(CylinderSite(0, 0))
    ups = downs = 0
    for _ in range(4000):
        t = walk_step(s, G, rng)
        dy = t.position.y - s.position.y
        ups += dy == 1
        downs += dy == -1
        assert t.steps_total == s.steps_total + 1
        if dy:
            assert t.position.v == s.position.v
        else:
            assert t.position.v in (s.position.v, 1, 4)
        s = WalkState(CylinderSite(0, 0), t.steps_total)
    assert abs(ups / 4000 - 0.25) < 0.03 and abs(downs / 4000 - 0.25) < 0.03


@pytest.mark.parametrize("n,levels,v", [(8, 3, 0), (5, 2, 1)])
def test_hit_level_arrival_matches_analytic_law(n, levels, v):
    G = build_graph("cycle", n=n)
    P = lazy_matrix(n, cycle_edges(n))
    law = arrival_law(P, v, levels)
    size = 20_000
    out_v, steps, aborted = hit_level_many(np.full(size, v), 0, levels, G, make_rng(5), step_cap=10**6)
    ok = out_v >= 0
    counts = np.bincount(out_v[ok], minlength=n)
    tv = 0.5 * np.abs(counts / ok.sum() - law).sum()
    se = 0.5 * math.sqrt(float((law * (1 - law)).sum()) / ok.sum())
    # censoring by the step cap is a tiny fraction of the mass
    assert aborted / size < 0.01
    assert tv <= 3 * se + aborted / size + 0.01


def test_hit_level_trivial_and_capped():
    G = build_graph("complete", n=3)
    assert hit_level((1, 4), 4, G, make_rng(0)) == (0, CylinderSite(1, 4))
    res = hit_level((0, 0), 50, G, make_rng(0), step_cap=10)
    assert res is None
    s, site = hit_level((2, 0), 1, G, make_rng(1))
    assert site.y == 1 and s >= 1


def test_fast_forward_excursion_law_matches_exact():
    G = build_graph("cycle", n=6)
    eps = 0.01
    mode = WalkMode.fastforward(G, eps)
    size = 60_000
    ff, resampled = excursion_return_law(2, G, mode, make_rng(6), size)
    ex, lengths = exact_excursion_oracle(2, G, make_rng(7), size)
    ok = ex >= 0
    tv, se = tv_from_counts(np.bincount(ff, minlength=6), np.bincount(ex[ok], minlength=6))
    # fast-forward error is at most eps plus censoring of the exact oracle
    assert tv <= eps + (~ok).mean() + 3 * se
    assert 0 < resampled < size


def test_fast_forward_excursion_state():
    G = build_graph("complete", n=4)
    mode = WalkMode.fastforward(G, 0.1)
    s = fast_forward_excursion(WalkState(CylinderSite(1, 3)), G, mode, make_rng(8))
    assert s.position.y == 3
    assert s.steps_vertical >= 2 and s.steps_vertical % 2 == 0
    assert s.steps_total == s.steps_vertical + s.steps_horizontal


def test_walk_until_exit_flat_cluster():
    G = build_graph("cycle", n=6)
    for mode in (WalkMode.exact(), WalkMode.fastforward(G, 1e-3)):
        A = new_cluster(G)
        res = walk_until_exit((3, 0), A, G, make_rng(9), mode)
        assert res.status == EXITED
        assert res.exit.y == 1 and not A.occupied(*res.exit)


def test_walk_until_exit_errors_and_stop_level():
    G = build_graph("cycle", n=6)
    A = new_cluster(G)
    with pytest.raises(ValueError):
        walk_until_exit((0, 1), A, G, make_rng(0))
    res = walk_until_exit((0, 0), A, G, make_rng(0), WalkMode.exact(), stop_level=0)
    assert res.status == STOPPED and res.exit.y == 0
    res = walk_until_exit((0, 0), A, G, make_rng(0), WalkMode.exact(step_cap=1), stop_level=None)
    assert res.status in (EXITED, ABORTED)


def test_lazy_matrix_power_consistency():
    # the horizontal marginal of the exact walk at one level is the lazy chain
    G = build_graph("cycle", n=5)
    assert np.allclose(lazy_transition_matrix(G), lazy_matrix(5, cycle_edges(5)))
