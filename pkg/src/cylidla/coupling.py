"""Couplings: maximal couplings, level crossings, coupled IDLA pairs, water levels.

The level-crossing coupling drives two walkers with one vertical skeleton.
Given the number ``s`` of horizontal steps taken before the skeleton first
reaches the target level, the two horizontal positions there are drawn from a
maximal coupling of the exact rows ``P^s(v, .)`` and ``P^s(v', .)``; if they
agree the walkers are glued from then on.  The horizontal paths in between
are never sampled since no exit law depends on them.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .abelian import InstructionStacks, _drop_vertex, _stack_walk
from .cluster import ClusterState, _settle, new_cluster, grow
from .graphs import BaseGraph, TransitionPowers, mixing_time, quasi_regularity
from .rng import derive_seed, make_rng
from .walk import (ABORTED, EXITED, STOPPED, ALL_OCCUPIED, CylinderSite, WalkMode, _Q,
                   _sample_pi, _walk, first_passage_times)


# -- maximal coupling ------------------------------------------------------

def maximal_coupling_sample(p, q, rng: np.random.Generator, size: int | None = None):
    """Draw ``(X, X', equal)`` with ``X ~ p``, ``X' ~ q`` and ``P(X != X') = TV(p, q)``.

    With probability ``sum min(p, q)`` both take one value from the
    normalised overlap; otherwise they come independently from the
    normalised residuals ``p - min`` and ``q - min``, whose supports are
    disjoint.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be vectors on the same vertex set")
    n = 1 if size is None else int(size)
    overlap = np.minimum(p, q)
    w = overlap.sum()
    same = rng.random(n) < w
    x = np.empty(n, dtype=np.int64)
    x2 = np.empty(n, dtype=np.int64)
    k = int(same.sum())
    if k:
        x[same] = x2[same] = _categorical(overlap / w, rng, k)
    if n - k:
        rp, rq = p - overlap, q - overlap
        x[~same] = _categorical(rp / rp.sum(), rng, n - k)
        x2[~same] = _categorical(rq / rq.sum(), rng, n - k)
    eq = x == x2
    if size is None:
        return int(x[0]), int(x2[0]), bool(eq[0])
    return x, x2, eq


def _categorical(p, rng, n):
    c = np.cumsum(p)
    return np.minimum(np.searchsorted(c, rng.random(n) * c[-1], side="right"), len(p) - 1)


# -- vertical skeleton ----------------------------------------------------

@dataclass(frozen=True)
class SkeletonProcess:
    """Vertical skeleton of a walk from ``start`` to the first visit of ``target``.

    ``jumps`` is the number of vertical moves and ``stays`` the number of
    horizontal (lazy) steps; ``tau_Y = jumps + stays`` is the hitting time
    and ``tau_X = stays`` the horizontal step count.  ``directions`` and
    ``sojourns`` are only filled by ``detailed`` sampling.
    """

    start: int
    target: int
    jumps: int
    stays: int
    directions: tuple[int, ...] | None = None
    sojourns: tuple[int, ...] | None = None

    @property
    def tau_Y(self) -> int:
        return self.jumps + self.stays

    @property
    def tau_X(self) -> int:
        return self.stays

    @classmethod
    def sample(cls, start: int, target: int, rng: np.random.Generator,
               detailed: bool = False, max_jumps: int = 10**7) -> "SkeletonProcess":
        if target <= start:
            raise ValueError("the skeleton climbs: need target > start")
        if detailed:
            return cls._sample_detailed(start, target, rng, max_jumps)
        jumps = int(first_passage_times(rng, target - start).sum())
        stays = _negative_binomial(jumps, rng)
        return cls(start, target, jumps, stays)

    @classmethod
    def _sample_detailed(cls, start, target, rng, max_jumps):
        y, dirs, soj = start, [], []
        while y < target:
            if len(dirs) >= max_jumps:
                raise RuntimeError("skeleton exceeded max_jumps")
            soj.append(int(rng.geometric(0.5)))  # sojourn length incl. the jump, mean 2
            d = 1 if rng.random() < 0.5 else -1
            dirs.append(d)
            y += d
        return cls(start, target, len(dirs), sum(soj) - len(soj), tuple(dirs), tuple(soj))


def _negative_binomial(n, rng):
    if n > 1 << 40:
        return n
    return int(rng.negative_binomial(n, 0.5)) if n else 0


# -- level-crossing coupling -------------------------------------------------

@dataclass(frozen=True)
class CouplingOutcome:
    sites: tuple[CylinderSite, CylinderSite]
    coupled: bool
    steps: int
    horizontal_steps: int
    failure: str | None = None


def level_crossing_coupled_pair(v: int, v2: int, y0: int, n: int, G: BaseGraph,
                                rng: np.random.Generator,
                                powers: TransitionPowers | None = None) -> CouplingOutcome:
    """Run two walkers from ``(v, y0)`` and ``(v2, y0)`` to level ``n`` on one skeleton."""
    if n <= y0:
        raise ValueError("target level must exceed the start level")
    powers = powers or TransitionPowers(G)
    sk = SkeletonProcess.sample(y0, n, rng)
    if v == v2:
        x = x2 = int(_categorical(powers.row(v, sk.stays), rng, 1)[0])
        eq = True
    else:
        x, x2, eq = maximal_coupling_sample(powers.row(v, sk.stays), powers.row(v2, sk.stays), rng)
    return CouplingOutcome(
        (CylinderSite(x, n), CylinderSite(x2, n)), eq, sk.tau_Y, sk.stays,
        None if eq else "arrival vertices differ",
    )


def coupled_arrivals(v, v2, y0: int, n: int, G: BaseGraph, rng: np.random.Generator,
                     powers: TransitionPowers | None = None):
    """Vectorised level crossings: arrival vertex arrays and the coupled mask."""
    powers = powers or TransitionPowers(G)
    v = np.asarray(v, dtype=np.int64)
    v2 = np.asarray(v2, dtype=np.int64)
    out, out2 = np.empty_like(v), np.empty_like(v2)
    for i in range(v.shape[0]):
        o = level_crossing_coupled_pair(int(v[i]), int(v2[i]), y0, n, G, rng, powers)
        out[i], out2[i] = o.sites[0].v, o.sites[1].v
    return out, out2, out == out2


@dataclass(frozen=True)
class Alignment:
    level: int
    mover: int  # 0 if the first walker climbed, 1 if the second, -1 if none
    skeleton: SkeletonProcess | None
    vertex: int | None


def mismatched_start_alignment(y: int, y2: int, rng: np.random.Generator,
                               G: BaseGraph | None = None, v: int | None = None,
                               powers: TransitionPowers | None = None) -> Alignment:
    """Lower walker climbs to the higher start level while the other waits.

    With ``G`` and ``v`` (the lower walker's vertex) the vertex at arrival is
    drawn from the exact ``s``-step row.
    """
    if y == y2:
        return Alignment(y, -1, None, v)
    lo, hi, mover = (y, y2, 0) if y < y2 else (y2, y, 1)
    sk = SkeletonProcess.sample(lo, hi, rng)
    vertex = None
    if G is not None and v is not None:
        powers = powers or TransitionPowers(G)
        vertex = int(_categorical(powers.row(v, sk.stays), rng, 1)[0])
    return Alignment(hi, mover, sk, vertex)


def crossing_depth(G: BaseGraph, gamma: float = 1.0, profile=None) -> int:
    """``ceil(10 * gamma * sqrt(tau) * log N)`` levels."""
    tau = (profile or mixing_time(G)).tau_half
    return math.ceil(10 * gamma * math.sqrt(tau) * math.log(G.N))


# -- coupled shifted IDLA -------------------------------------------------

@dataclass
class CoalescenceRecord:
    seed: int
    N: int
    family: str
    mode: str
    time: int | None
    budget: int
    tv_debt: float = 0.0
    stages_failed: int = 0
    slots_consumed: int = 0

    @property
    def censored(self) -> bool:
        return self.time is None

    def row(self) -> list:
        return [self.seed, self.N, self.family, self.mode,
                "censored" if self.time is None else self.time,
                self.tv_debt, self.stages_failed]


COALESCENCE_COLUMNS = ["seed", "N", "family", "mode", "coalescence_time_or_censored", "tv_debt", "stages_failed"]


def write_coalescence_csv(records: Sequence[CoalescenceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COALESCENCE_COLUMNS)
        w.writerows(r.row() for r in records)


def match_residues(A: ClusterState, A2: ClusterState, rng: np.random.Generator,
                   mode: WalkMode) -> int:
    """Advance ``A`` by shifted steps until ``|A| = |A2| (mod N)``; returns the step count.

    Shifted clusters can only coincide when their sizes agree mod ``N``.
    """
    r = (A2.size_above - A.size_above) % A.G.N
    if r:
        grow(A, r, rng, mode, shifted=True)
    return r


class _Audit:
    """Consumed stack slots per process; every walker must use a fresh layer."""

    def __init__(self):
        self.layers: set[int] = set()
        self.slots = 0

    def record(self, layer: int, counts: np.ndarray, topples: int) -> None:
        if layer in self.layers:
            raise AssertionError(f"stack layer {layer} used by two walkers of one process")
        if int(counts.sum()) != topples:
            raise AssertionError("consumed-count audit failed")
        self.layers.add(layer)
        self.slots += topples


def _stack_release(cluster: ClusterState, stacks: InstructionStacks, layer: int, audit: _Audit):
    """One shifted-IDLA step driven by stack layer ``layer`` (fresh counts)."""
    G = cluster.G
    cluster.reserve(2)
    counts = np.zeros((cluster.h + 2, G.N), dtype=np.int64)
    w = _drop_vertex(stacks.seed, layer, 0, G.pi_cdf)
    v, y, topples, resampled = _stack_walk(
        cluster.rows, cluster.base, cluster.h, 0, w, 0, stacks.seed, layer, counts,
        G.indptr, G.indices, G.pi_cdf, stacks.ff_steps, _Q, 10**9,
    )
    if topples < 0:
        raise RuntimeError("stack walker exceeded its toppling cap")
    audit.record(layer, counts, topples)
    cluster.k, cluster.h, cluster.size_above = (int(a) for a in _settle(
        cluster.rows, cluster.counts, cluster.base, cluster.h, cluster.k, cluster.size_above, v, y))
    cluster.t += 1
    cluster.tv_debt += resampled * stacks.epsilon
    cluster.downshift()


def _pair_release(A, A2, G, rng, mode, depth, powers):
    """One paired release: level crossing from ``-depth`` to 0, then same-seed walks."""
    w, w2 = _sample_pi(G.pi_cdf, rng.random()), _sample_pi(G.pi_cdf, rng.random())
    o = level_crossing_coupled_pair(w, w2, -depth, 0, G, rng, powers)
    seed = int(rng.integers(1 << 62))
    for c, site in ((A, o.sites[0]), (A2, o.sites[1])):
        walker = make_rng(seed)
        c.reserve(2)
        v, y, status, nv, nh, debt = _walk(
            c.rows, c.base, c.h, c.k, site.v, 0, G.indptr, G.indices, G.pi_cdf, _Q,
            mode.fast_forward, mode.ff_steps, mode.epsilon, ALL_OCCUPIED, mode.step_cap, walker,
        )
        if status == ABORTED:
            raise RuntimeError("walker exceeded its step cap in a coupled release")
        c.tv_debt += debt
        c.k, c.h, c.size_above = (int(a) for a in _settle(
            c.rows, c.counts, c.base, c.h, c.k, c.size_above, v, y))
        c.t += 1
        c.downshift()
    return o.coupled


def coupled_idla_pair(A0: ClusterState, A0b: ClusterState, G: BaseGraph, mode: str = "shared_stacks",
                      seed: int = 0, budget: int = 10**4, epsilon: float = 1e-3,
                      verify_after: int = 0, gamma: float = 1.0, family: str | None = None) -> CoalescenceRecord:
    """Run two coupled shifted-IDLA chains until their shifted clusters coincide.

    ``shared_stacks``: release ``t`` of both chains follows stack layer ``t``
    of one :class:`InstructionStacks`, in each chain's own shifted frame, so
    once the clusters agree they agree forever.  ``pairwise_maximal``: the
    walkers of release ``t`` start independently from ``pi`` at depth
    ``crossing_depth`` below the filled level, meet through a level-crossing
    coupling and are then driven by a common random stream.

    ``time`` is the number of releases before coalescence (``None`` when the
    budget runs out).  After coalescence ``verify_after`` more releases are
    run and checked to keep the clusters identical.
    """
    if mode not in ("shared_stacks", "pairwise_maximal"):
        raise ValueError(f"unknown coupling mode {mode!r}")
    for c in (A0, A0b):
        if c.k:
            raise ValueError("clusters must be shift-normalised")
    if A0.size_above % G.N != A0b.size_above % G.N:
        raise ValueError("cluster sizes differ mod N; pad with match_residues first")
    A, B = A0.copy(), A0b.copy()
    A.tv_debt = B.tv_debt = 0.0
    family = family or G.name
    failed = 0
    audits = (_Audit(), _Audit())
    if mode == "shared_stacks":
        stacks = InstructionStacks(seed, G, epsilon=epsilon)

        def release(t):
            _stack_release(A, stacks, t, audits[0])
            _stack_release(B, stacks, t, audits[1])
            return True
    else:
        rng = make_rng(seed)
        wmode = WalkMode.fastforward(G, epsilon)
        depth = crossing_depth(G, gamma)
        powers = TransitionPowers(G)

        def release(t):
            return _pair_release(A, B, G, rng, wmode, depth, powers)

    time = None
    if A.same_set(B):
        time = 0
    t = 0
    while time is None and t < budget:
        failed += not release(t)
        t += 1
        if A.same_set(B):
            time = t
    if time is not None:
        for _ in range(verify_after):
            release(t)
            t += 1
            if not A.same_set(B):
                raise AssertionError("coupled clusters separated after coalescence")
    return CoalescenceRecord(seed, G.N, family, mode, time, budget, A.tv_debt + B.tv_debt,
                             failed, audits[0].slots + audits[1].slots)


# -- water levels ---------------------------------------------------------

@dataclass
class FrozenField:
    """Frozen walkers (multiset of sites) with release and stage bookkeeping."""

    sites: Counter = field(default_factory=Counter)
    released: int = 0
    stage: int = 0

    def freeze(self, site) -> None:
        self.sites[CylinderSite(*site)] += 1

    @property
    def count(self) -> int:
        return sum(self.sites.values())

    def levels(self) -> Counter:
        out = Counter()
        for s, c in self.sites.items():
            out[s.y] += c
        return out


@dataclass
class WaterLevelRecord:
    stage_size: int
    stages: int
    filled: list[bool]
    settled: list[int]
    frozen: list[int]
    frozen_field: FrozenField
    cluster: ClusterState
    tv_debt: float

    @property
    def success(self) -> bool:
        """Whether every stage filled its level, i.e. the settled set is ``R_ell``."""
        return all(self.filled)

    @property
    def first_failure(self) -> int | None:
        for i, f in enumerate(self.filled):
            if not f:
                return i + 1
        return None

    def summary(self) -> dict:
        ff = self.first_failure
        return {
            "stage_size": self.stage_size, "stages": self.stages,
            "stages_filled": int(sum(self.filled)), "success": self.success,
            "first_failure": ff,
            # stages filled before the first failure: the conditional statistic
            "filled_before_failure": self.stages if ff is None else ff - 1,
            "frozen_total": self.frozen_field.count, "tv_debt": self.tv_debt,
        }


def coupon_constant(G: BaseGraph, gamma: float = 1.0) -> float:
    """``a = (gamma + 1) / delta``."""
    return (gamma + 1) / quasi_regularity(G).delta


def water_level_run(G: BaseGraph, T: int, gamma: float, rng: np.random.Generator,
                    a: float | None = None, mode: WalkMode | None = None,
                    stages: int | None = None, stage_size: int | None = None) -> WaterLevelRecord:
    """Staged release: stage ``k`` releases ``ceil(a N log N)`` walkers stopped at level ``k``.

    Walkers leave from the filled level, capped at ``k - 1`` (equivalent in
    law to level 0).  A
    walker reaching level ``k`` at an empty site settles; one reaching it at
    an occupied site is frozen there.  Failed stages are recorded and the run
    continues.  The number of stages is ``floor(T / (a N log N))`` unless
    given; ``stage_size`` overrides ``ceil(a N log N)``.
    """
    a = coupon_constant(G, gamma) if a is None else a
    mode = mode or WalkMode.fastforward(G)
    scale = a * G.N * math.log(G.N)
    m = math.ceil(scale) if stage_size is None else int(stage_size)
    ell = int(T // scale) if stages is None else stages
    cluster = new_cluster(G)
    frozen = FrozenField()
    filled, settled, froze = [], [], []
    debt = 0.0
    for k in range(1, ell + 1):
        frozen.stage = k
        cluster.reserve(2)
        s = f = 0
        for _ in range(m):
            w = _sample_pi(G.pi_cdf, rng.random())
            # never start on the stopping level itself
            y0 = min(cluster.k, k - 1)
            v, y, status, nv, nh, d = _walk(
                cluster.rows, cluster.base, cluster.h, y0, w, y0,
                G.indptr, G.indices, G.pi_cdf, _Q, mode.fast_forward, mode.ff_steps,
                mode.epsilon, k, mode.step_cap, rng,
            )
            debt += d
            frozen.released += 1
            if status == EXITED:
                cluster.k, cluster.h, cluster.size_above = (int(x) for x in _settle(
                    cluster.rows, cluster.counts, cluster.base, cluster.h, cluster.k,
                    cluster.size_above, v, y))
                s += 1
            elif status == STOPPED:
                frozen.freeze((v, y))
                f += 1
            else:
                raise RuntimeError("walker exceeded its step cap in a water-level stage")
        filled.append(cluster.level_count(k) == G.N)
        settled.append(s)
        froze.append(f)
    return WaterLevelRecord(m, ell, filled, settled, froze, frozen, cluster, debt)


def level_one_unfilled(G: BaseGraph, releases: int, rng: np.random.Generator,
                       mode: WalkMode | None = None) -> bool:
    """One coupon-collector trial: is level 1 still not full after ``releases`` walkers?"""
    rec = water_level_run(G, 0, 1.0, rng, mode=mode, stages=1, stage_size=releases)
    return not rec.filled[0]
