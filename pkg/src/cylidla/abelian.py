"""Stacks of instructions, toppling and IDLA as stabilization.

Every site ``x = (v, y)`` owns an infinite stack ``xi_x(1), xi_x(2), ...``
whose entries are drawn from the one-step law of the cylinder walk (a lazy
stay is a self-instruction).  Entry ``k`` is a pure function of
``(seed, layer, v, y, k)`` via the keyed hash in :mod:`cylidla.rng`, so
stacks are never materialised.

Levels below ``floor`` are never represented.  A "down" instruction at the
floor is a macro move: the whole excursion below the floor is resolved in
closed form (as in :mod:`cylidla.walk`) with randomness taken from the same
word, landing back on the floor.  This is still one fixed instruction per
stack slot, so the Abelian property holds exactly.
"""

from __future__ import annotations

import csv
import heapq
import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numba import njit, uint64

from .cluster import ClusterState, new_cluster
from .graphs import BaseGraph, mixing_time
from .rng import keyed_word, mix64, word_below, word_uniform
from .walk import DEFAULT_EPSILON, CylinderSite, _Q, _first_passage, _sample_pi

_LN2 = math.log(2.0)
_EXCURSION_SALT = uint64(0xD1B54A32D192ED03)
_DROP_SALT = 0x2545F4914F6CDD1D


class StabilizationError(RuntimeError):
    pass


class IllegalTopple(ValueError):
    pass


@njit(cache=True)
def _negbin_below(T, u, cap):
    """Inverse CDF of ``NegBin(T, 1/2)`` restricted to ``[0, cap]``; ``cap + 1`` means beyond."""
    logp = -T * _LN2
    acc = 0.0
    for h in range(cap + 1):
        acc += math.exp(logp)
        if u < acc:
            return h
        logp += math.log((T + h) / (h + 1.0)) - _LN2
    return cap + 1


@njit(cache=True)
def _keyed_excursion(w, v, indptr, indices, pi_cdf, ff_steps, q):
    """Excursion below the floor driven by a counter stream seeded with ``w``.

    Returns ``(v', resampled)``.
    """
    s = mix64(w ^ _EXCURSION_SALT)
    T = _first_passage(word_uniform(s), q)
    s = mix64(s + uint64(0x9E3779B97F4A7C15))
    H = _negbin_below(T, word_uniform(s), ff_steps)
    if H > ff_steps:
        s = mix64(s + uint64(0x9E3779B97F4A7C15))
        return _sample_pi(pi_cdf, word_uniform(s)), True
    for _ in range(H):
        s = mix64(s + uint64(0x9E3779B97F4A7C15))
        if s >> uint64(63):
            d = indptr[v + 1] - indptr[v]
            v = indices[indptr[v] + word_below(s, d)]
    return v, False


@njit(cache=True)
def _destination(seed, layer, floor, v, y, k, indptr, indices, pi_cdf, ff_steps, q):
    """Where instruction ``k`` (1-based) at ``(v, y)`` sends a particle."""
    w = keyed_word(seed, layer, v, y, k)
    kind = w >> uint64(62)
    if kind == 0:
        return v, y + 1, False
    if kind == 1:
        if y == floor:
            v2, resampled = _keyed_excursion(w, v, indptr, indices, pi_cdf, ff_steps, q)
            return v2, y, resampled
        return v, y - 1, False
    if kind == 2:
        return v, y, False
    d = indptr[v + 1] - indptr[v]
    return indices[indptr[v] + word_below(w, d)], y, False


@njit(cache=True)
def _drop_vertex(seed, layer, i, pi_cdf):
    return _sample_pi(pi_cdf, word_uniform(keyed_word(seed ^ _DROP_SALT, layer, i, 0, 0)))


@dataclass(frozen=True)
class InstructionStacks:
    """Keyed, re-derivable instruction stacks on ``G x Z`` above ``floor``.

    ``ff_steps`` is ``tau(epsilon)`` of the lazy base chain; it decides when
    an excursion below the floor is replayed exactly and when its exit is
    redrawn from ``pi`` (adding ``epsilon`` of total-variation debt).
    Consumption is tracked by the caller in an :class:`Odometer`.
    """

    seed: int
    G: BaseGraph
    floor: int = 0
    layer: int = 0
    epsilon: float = DEFAULT_EPSILON
    ff_steps: int = -1

    def __post_init__(self):
        if self.ff_steps < 0:
            object.__setattr__(self, "ff_steps", mixing_time(self.G, self.epsilon).tau[self.epsilon])

    def with_layer(self, layer: int) -> "InstructionStacks":
        return InstructionStacks(self.seed, self.G, self.floor, layer, self.epsilon, self.ff_steps)

    def word(self, v: int, y: int, k: int) -> int:
        return int(keyed_word(self.seed, self.layer, v, y, k))

    def instruction(self, v: int, y: int, k: int) -> CylinderSite:
        """Target of the ``k``-th instruction (``k >= 1``) at site ``(v, y)``."""
        if k < 1:
            raise ValueError("instructions are numbered from 1")
        if y < self.floor:
            raise ValueError(f"site {(v, y)} is below the stack floor {self.floor}")
        v2, y2, _ = _destination(self.seed, self.layer, self.floor, v, y, k,
                                 self.G.indptr, self.G.indices, self.G.pi_cdf, self.ff_steps, _Q)
        return CylinderSite(int(v2), int(y2))

    def prefix(self, v: int, y: int, length: int) -> list[CylinderSite]:
        return [self.instruction(v, y, k) for k in range(1, length + 1)]

    def drop_vertex(self, i: int) -> int:
        """Horizontal coordinate of the ``i``-th dropped particle, ``~ pi``."""
        return int(_drop_vertex(self.seed, self.layer, i, self.G.pi_cdf))


@dataclass
class Odometer:
    """Number of topplings (consumed instructions) per site."""

    counts: dict[CylinderSite, int] = field(default_factory=dict)

    def __getitem__(self, site) -> int:
        return self.counts.get(CylinderSite(*site), 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Odometer):
            return NotImplemented
        return {k: c for k, c in self.counts.items() if c} == {k: c for k, c in other.counts.items() if c}

    def total(self) -> int:
        return sum(self.counts.values())

    def rows(self) -> list[tuple[int, int, int]]:
        return sorted((s.v, s.y, c) for s, c in self.counts.items() if c)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["v", "y", "count"])
            w.writerows(self.rows())


@dataclass
class ParticleConfig:
    """Particle counts ``eta``; levels ``<= 0`` hold one extra implicit particle."""

    counts: dict[CylinderSite, int] = field(default_factory=dict)

    @classmethod
    def from_sites(cls, sites: Iterable) -> "ParticleConfig":
        cfg = cls()
        for s in sites:
            cfg.add(CylinderSite(*s))
        return cfg

    def add(self, site, n: int = 1) -> None:
        site = CylinderSite(*site)
        self.counts[site] = self.counts.get(site, 0) + n

    def load(self, site) -> int:
        site = CylinderSite(*site)
        return self.counts.get(site, 0) + (1 if site.y <= 0 else 0)

    def unstable(self, site) -> bool:
        return self.load(site) >= 2

    def unstable_sites(self) -> list[CylinderSite]:
        return sorted((s for s in self.counts if self.unstable(s)), key=lambda s: (s.y, s.v))

    def is_stable(self) -> bool:
        return not any(self.unstable(s) for s in self.counts)

    def total(self) -> int:
        return sum(self.counts.values())

    def occupied_above(self) -> frozenset[CylinderSite]:
        return frozenset(s for s, c in self.counts.items() if c and s.y > 0)

    def copy(self) -> "ParticleConfig":
        return ParticleConfig(dict(self.counts))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParticleConfig):
            return NotImplemented
        return {k: c for k, c in self.counts.items() if c} == {k: c for k, c in other.counts.items() if c}


def topple(config: ParticleConfig, site, stacks: InstructionStacks, odometer: Odometer) -> ParticleConfig:
    """Move one particle from an unstable ``site`` along its next instruction (in place)."""
    _topple(config, CylinderSite(*site), stacks, odometer)
    return config


def _topple(config, site, stacks, odometer):
    if not config.unstable(site):
        raise IllegalTopple(f"site {tuple(site)} is stable (load {config.load(site)})")
    k = odometer.counts.get(site, 0) + 1
    target = stacks.instruction(site.v, site.y, k)
    odometer.counts[site] = k
    config.counts[site] = config.counts.get(site, 0) - 1
    if config.counts[site] == 0:
        del config.counts[site]
    config.add(target)
    return target


_RANDOM_POLICY = re.compile(r"random\((-?\d+)\)")


def _policy(order_policy: str, seed):
    m = _RANDOM_POLICY.fullmatch(order_policy)
    if m:
        return "random", int(m.group(1))
    if order_policy not in ("fifo", "lifo", "random", "lowest_level_first"):
        raise ValueError(f"unknown order policy {order_policy!r}")
    if order_policy == "random" and seed is None:
        raise ValueError("random order policy needs a seed")
    return order_policy, seed


class _Frontier:
    """Pending unstable sites under one of the order policies."""

    def __init__(self, policy, seed):
        self.policy = policy
        self.rng = np.random.default_rng(seed) if policy == "random" else None
        self.items: list | deque = deque() if policy == "fifo" else []
        self.members: set = set()

    def push(self, s):
        if s in self.members:
            return
        self.members.add(s)
        if self.policy == "lowest_level_first":
            heapq.heappush(self.items, (s.y, s.v))
        else:
            self.items.append(s)

    def pop(self):
        if self.policy == "fifo":
            s = self.items.popleft()
        elif self.policy == "lifo":
            s = self.items.pop()
        elif self.policy == "random":
            i = int(self.rng.integers(len(self.items)))
            self.items[i], self.items[-1] = self.items[-1], self.items[i]
            s = self.items.pop()
        else:
            s = CylinderSite(*heapq.heappop(self.items)[::-1])
        self.members.discard(s)
        return s

    def __bool__(self):
        return bool(self.items)


def stabilize(config: ParticleConfig, stacks: InstructionStacks, order_policy: str = "fifo",
              seed: int | None = None, max_topples: int = 10**8,
              odometer: Odometer | None = None) -> tuple[ParticleConfig, Odometer]:
    """Topple unstable sites until none is left; returns ``(stable_config, odometer)``.

    ``order_policy`` is ``"fifo"``, ``"lifo"``, ``"lowest_level_first"`` or
    ``"random"`` (with ``seed``; ``"random(7)"`` is accepted too).  Under
    ``random`` one unstable site is chosen uniformly before every toppling.
    The input config is not modified.
    """
    policy, seed = _policy(order_policy, seed)
    cfg = config.copy()
    odo = Odometer(dict(odometer.counts)) if odometer else Odometer()
    frontier = _Frontier(policy, seed)
    for s in cfg.unstable_sites():
        frontier.push(s)
    n = 0
    while frontier:
        s = frontier.pop()
        t = _topple(cfg, s, stacks, odo)
        n += 1
        if n > max_topples:
            raise StabilizationError(f"no stable configuration after {max_topples} topplings")
        if cfg.unstable(s):
            frontier.push(s)
        if cfg.unstable(t):
            frontier.push(t)
    return cfg, odo


def drop_config(n: int, stacks: InstructionStacks) -> ParticleConfig:
    """``n`` particles on level 0 at vertices drawn from ``pi`` by the stacks' keyed stream."""
    cfg = ParticleConfig()
    for i in range(n):
        cfg.add((stacks.drop_vertex(i), 0))
    return cfg


def config_to_cluster(config: ParticleConfig, G: BaseGraph) -> ClusterState:
    if not config.is_stable():
        raise ValueError("configuration is not stable")
    return new_cluster(G, sorted(config.occupied_above(), key=lambda s: (s.y, s.v)))


def idla_via_stacks(n: int, stacks: InstructionStacks, order_policy: str = "fifo",
                    seed: int | None = None, fast: bool = False) -> ClusterState:
    """IDLA with ``n`` particles dropped at level 0 (``pi``-distributed), by stabilization.

    ``fast=True`` uses the compiled sequential path, which releases the
    particles one at a time; by the Abelian property the result is the same.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if stacks.floor != 0:
        raise ValueError("idla_via_stacks needs stacks with floor 0")
    if fast:
        occ, _, _ = stack_idla_arrays(n, stacks)
        return _cluster_from_rows(occ, stacks.G)
    stable, _ = stabilize(drop_config(n, stacks), stacks, order_policy, seed)
    return config_to_cluster(stable, stacks.G)


def _cluster_from_rows(occ, G):
    sites = [(int(v), y + 1) for y in range(occ.shape[0]) for v in np.flatnonzero(occ[y])]
    return new_cluster(G, sites)


@njit(cache=True)
def _stack_walk(rows, base, h, floor, v, y, seed, layer, counts,
                indptr, indices, pi_cdf, ff_steps, q, max_topples):
    """Follow the stacks from ``(v, y)`` until an empty site is reached.

    ``counts[y - floor, v]`` holds the instructions already consumed at each
    site (updated in place); ``rows`` uses the cluster layout of
    :mod:`cylidla.cluster`.  Returns ``(v, y, topples, resampled)`` with
    ``topples = -1`` if ``max_topples`` was exceeded.
    """
    topples = 0
    resampled = 0
    while True:
        if y <= base or (y <= h and rows[y - base - 1, v] != 0):
            if topples >= max_topples:
                return v, y, -1, resampled
            j = y - floor
            counts[j, v] += 1
            v, y, r = _destination(seed, layer, floor, v, y, counts[j, v],
                                   indptr, indices, pi_cdf, ff_steps, q)
            resampled += r
            topples += 1
        else:
            return v, y, topples, resampled


@njit(cache=True)
def _stack_idla(n, seed, layer, indptr, indices, pi_cdf, ff_steps, q, max_topples):
    N = indptr.shape[0] - 1
    rows = np.zeros((n + 1, N), dtype=np.uint8)
    counts = np.zeros((n + 2, N), dtype=np.int64)
    h = 0
    resampled = 0
    for i in range(n):
        w = _drop_vertex(seed, layer, i, pi_cdf)
        v, y, t, r = _stack_walk(rows, 0, h, 0, w, 0, seed, layer, counts,
                                 indptr, indices, pi_cdf, ff_steps, q, max_topples)
        if t < 0:
            return rows, counts, resampled, False
        resampled += r
        rows[y - 1, v] = 1
        if y > h:
            h = y
    return rows, counts, resampled, True


def stack_idla_arrays(n: int, stacks: InstructionStacks, max_topples: int = 10**9):
    """Compiled sequential stabilization: ``(occupancy rows, odometer array, resampled)``.

    ``occupancy[y - 1, v]`` for ``y >= 1``; ``odometer[y, v]`` for ``y >= 0``.
    """
    G = stacks.G
    rows, counts, resampled, ok = _stack_idla(n, stacks.seed, stacks.layer, G.indptr, G.indices,
                                              G.pi_cdf, stacks.ff_steps, _Q, max_topples)
    if not ok:
        raise StabilizationError(f"a particle exceeded {max_topples} topplings")
    return rows, counts, int(resampled)


def odometer_from_array(counts: np.ndarray, floor: int = 0) -> Odometer:
    ys, vs = np.nonzero(counts)
    return Odometer({CylinderSite(int(v), int(y) + floor): int(counts[y, v]) for y, v in zip(ys, vs)})
