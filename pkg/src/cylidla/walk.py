"""Simple random walk on the cylinder ``G x Z``.

Each step is vertical with probability 1/2 (up or down, equally likely) and
otherwise a lazy step of the base graph (stay with probability 1/2, else a
uniform neighbour).  The compiled kernel :func:`_walk` drives every
walk-until-something operation in the package.

Below a completely filled rectangle ``R_b`` nothing can happen to a walker,
but the excursion back to level ``b`` has infinite expected length.  In
fast-forward mode the kernel replaces such an excursion by its two
sufficient statistics: the number ``T`` of further vertical moves (sampled in
closed form from the first-passage law of the simple walk) and the number
``H`` of horizontal moves, ``NegBin(T, 1/2)``.  If ``H`` is at most
``tau(eps)`` the horizontal steps are replayed exactly; otherwise the
horizontal coordinate is redrawn from ``pi`` at a total-variation cost of at
most ``eps``, which is added to ``tv_debt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .graphs import BaseGraph, mixing_time

EXITED, STOPPED, ABORTED = 0, 1, 2
DEFAULT_STEP_CAP = 10**9
DEFAULT_EPSILON = 1e-3
ALL_OCCUPIED = 1 << 62
HUGE_PASSAGE = 1 << 59

# q[j] = P(T > 2j - 1) = C(2j, j) / 4**j for the first-passage time T from -1 to 0.
_TABLE_SIZE = 1 << 16


def _passage_tail_table(size):
    q = np.empty(size + 1)
    q[0] = 1.0
    for j in range(1, size + 1):
        q[j] = q[j - 1] * (2 * j - 1) / (2 * j)
    return q


_Q = _passage_tail_table(_TABLE_SIZE)


@njit(cache=True)
def _tail_asymptotic(j):
    x = 1.0 / j
    series = 1.0 - x / 8.0 + x * x / 128.0 + 5.0 * x**3 / 1024.0 - 21.0 * x**4 / 32768.0
    return series / math.sqrt(math.pi * j)


@njit(cache=True)
def _first_passage(u, q):
    """First-passage time of the simple +-1 walk to one level up, by inversion.

    ``T = 2J - 1`` with ``J`` the smallest ``j >= 1`` such that
    ``P(T > 2j - 1) <= u``.  Times beyond ``HUGE_PASSAGE`` are clamped.
    """
    size = q.shape[0] - 1
    if q[size] > u:
        lo = size
        hi = size * 2
        while _tail_asymptotic(hi) > u:
            lo = hi
            hi *= 2
            if hi >= HUGE_PASSAGE // 2:
                return HUGE_PASSAGE
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _tail_asymptotic(mid) > u:
                lo = mid
            else:
                hi = mid
        return 2 * hi - 1
    lo = 0
    hi = size
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if q[mid] > u:
            lo = mid
        else:
            hi = mid
    return 2 * hi - 1


@njit(cache=True)
def _sample_pi(pi_cdf, u):
    lo = 0
    hi = pi_cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if pi_cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def _lazy_steps(v, n, indptr, indices, rng):
    for _ in range(n):
        if rng.random() < 0.5:
            continue
        d = indptr[v + 1] - indptr[v]
        v = indices[indptr[v] + int(rng.random() * d)]
    return v


@njit(cache=True)
def _excursion(v, indptr, indices, pi_cdf, ff_steps, q, rng):
    """Excursion below the floor after the pending down move.

    Returns ``(v, T, H, resampled)``: ``T`` further vertical moves, ``H``
    horizontal moves, and whether ``v`` was redrawn from ``pi``.
    """
    T = _first_passage(rng.random(), q)
    if T > (1 << 40):
        H = T
    else:
        H = rng.negative_binomial(T, 0.5)
    if H <= ff_steps:
        return _lazy_steps(v, H, indptr, indices, rng), T, H, False
    return _sample_pi(pi_cdf, rng.random()), T, H, True


@njit(cache=True, inline="always")
def _occupied(rows, base, h, v, y):
    if y <= base:
        return True
    if y > h:
        return False
    return rows[y - base - 1, v] != 0


@njit(cache=True)
def _walk(rows, base, h, floor, v, y, indptr, indices, pi_cdf, q,
          fast_forward, ff_steps, eps, stop_level, step_cap, rng):
    """Walk from ``(v, y)`` until it leaves the cluster or reaches ``stop_level``.

    The cluster is ``{y' <= base} u {rows[y' - base - 1, v'] != 0}`` capped at
    height ``h``.  Exiting is checked before stopping, so a walker reaching
    ``stop_level`` at an empty site exits there.  With ``fast_forward`` the
    caller guarantees ``R_floor`` is inside the cluster.

    Returns ``(v, y, status, vertical, horizontal, debt)``.  The step cap
    applies to simulated moves; a fast-forwarded excursion costs
    ``1 + min(H, ff_steps)`` of them.
    """
    nv = 0
    nh = 0
    work = 0
    debt = 0.0
    while True:
        if work >= step_cap:
            return v, y, ABORTED, nv, nh, debt
        work += 1
        u = rng.random()
        if u < 0.25:
            y += 1
            nv += 1
        elif u < 0.5:
            if fast_forward and y == floor:
                v, T, H, resampled = _excursion(v, indptr, indices, pi_cdf, ff_steps, q, rng)
                nv += 1 + T
                nh += H
                if resampled:
                    debt += eps
                else:
                    work += H
                continue
            y -= 1
            nv += 1
        elif u < 0.75:
            nh += 1
            continue
        else:
            nh += 1
            d = indptr[v + 1] - indptr[v]
            v = indices[indptr[v] + int(rng.random() * d)]
        if not _occupied(rows, base, h, v, y):
            return v, y, EXITED, nv, nh, debt
        if y == stop_level:
            return v, y, STOPPED, nv, nh, debt


@njit(cache=True)
def _hit_level_batch(starts_v, starts_y, n, indptr, indices, step_cap, out_v, out_steps, rng):
    empty = np.zeros((0, 1), dtype=np.uint8)
    dummy_cdf = np.ones(1)
    q = np.ones(2)
    aborted = 0
    for i in range(starts_v.shape[0]):
        if starts_y[i] == n:
            out_v[i] = starts_v[i]
            out_steps[i] = 0
            continue
        v, y, status, nv, nh, _ = _walk(
            empty, ALL_OCCUPIED, ALL_OCCUPIED, 0, starts_v[i], starts_y[i],
            indptr, indices, dummy_cdf, q, False, 0, 0.0, n, step_cap, rng,
        )
        if status == ABORTED:
            out_v[i] = -1
            out_steps[i] = -1
            aborted += 1
        else:
            out_v[i] = v
            out_steps[i] = nv + nh
    return aborted


class CylinderSite(NamedTuple):
    v: int
    y: int


@dataclass
class WalkState:
    position: CylinderSite
    steps_total: int = 0
    steps_vertical: int = 0
    steps_horizontal: int = 0
    tv_debt: float = 0.0


@dataclass(frozen=True)
class WalkMode:
    """How walkers are simulated below a filled rectangle.

    ``fast_forward=False`` is the exact step-by-step walk.  ``ff_steps`` is
    ``tau(epsilon)`` for the lazy chain of the base graph.
    """

    fast_forward: bool = True
    epsilon: float = DEFAULT_EPSILON
    ff_steps: int = 0
    step_cap: int = DEFAULT_STEP_CAP

    @classmethod
    def exact(cls, step_cap: int = DEFAULT_STEP_CAP) -> "WalkMode":
        return cls(fast_forward=False, epsilon=0.0, ff_steps=0, step_cap=step_cap)

    @classmethod
    def fastforward(cls, G: BaseGraph, epsilon: float = DEFAULT_EPSILON,
                    step_cap: int = DEFAULT_STEP_CAP, profile=None) -> "WalkMode":
        if profile is None or epsilon not in profile.tau:
            profile = mixing_time(G, epsilon)
        return cls(fast_forward=True, epsilon=epsilon, ff_steps=profile.tau[epsilon], step_cap=step_cap)


def first_passage_time(rng: np.random.Generator, levels: int = 1) -> int:
    """Number of vertical moves for the simple walk to climb ``levels`` levels."""
    return int(sum(_first_passage(rng.random(), _Q) for _ in range(levels)))


@njit(cache=True)
def _first_passage_many(us, q):
    out = np.empty(us.shape[0], dtype=np.int64)
    for i in range(us.shape[0]):
        out[i] = _first_passage(us[i], q)
    return out


def first_passage_times(rng: np.random.Generator, size: int) -> np.ndarray:
    return _first_passage_many(rng.random(size), _Q)


def walk_step(state: WalkState, G: BaseGraph, rng: np.random.Generator) -> WalkState:
    """One step of the cylinder walk (no cluster involved)."""
    v, y = state.position
    u = rng.random()
    if u < 0.5:
        y += 1 if u < 0.25 else -1
        vert = 1
    else:
        vert = 0
        if u >= 0.75:
            nbrs = G.adjacency[v]
            v = nbrs[int(rng.random() * len(nbrs))]
    return WalkState(
        CylinderSite(v, y),
        state.steps_total + 1,
        state.steps_vertical + vert,
        state.steps_horizontal + 1 - vert,
        state.tv_debt,
    )


def hit_level(start, n: int, G: BaseGraph, rng: np.random.Generator,
              step_cap: int = DEFAULT_STEP_CAP):
    """Exact hitting time of level ``n`` and arrival site, or ``None`` if capped."""
    start = CylinderSite(*start)
    if start.y == n:
        return 0, start
    out_v = np.empty(1, dtype=np.int64)
    out_s = np.empty(1, dtype=np.int64)
    aborted = _hit_level_batch(
        np.array([start.v]), np.array([start.y]), n, G.indptr, G.indices,
        step_cap, out_v, out_s, rng,
    )
    if aborted:
        return None
    return int(out_s[0]), CylinderSite(int(out_v[0]), n)


def hit_level_many(start_v, start_y, n: int, G: BaseGraph, rng: np.random.Generator,
                   step_cap: int = DEFAULT_STEP_CAP):
    """Vectorised :func:`hit_level`; aborted samples carry ``-1``.

    Returns ``(arrival_vertices, steps, aborted_count)``.
    """
    start_v = np.asarray(start_v, dtype=np.int64)
    start_y = np.broadcast_to(np.asarray(start_y, dtype=np.int64), start_v.shape).copy()
    out_v = np.empty(start_v.shape[0], dtype=np.int64)
    out_s = np.empty(start_v.shape[0], dtype=np.int64)
    aborted = _hit_level_batch(start_v, start_y, n, G.indptr, G.indices, step_cap, out_v, out_s, rng)
    return out_v, out_s, int(aborted)


class WalkAborted(RuntimeError):
    """A walker exceeded its step cap."""


class WalkResult(NamedTuple):
    exit: CylinderSite | None
    status: int
    steps_vertical: int
    steps_horizontal: int
    tv_debt: float

    @property
    def steps(self) -> int:
        return self.steps_vertical + self.steps_horizontal


def walk_until_exit(start, cluster, G: BaseGraph, rng: np.random.Generator,
                    mode: WalkMode | None = None, stop_level: int | None = None) -> WalkResult:
    """Walk from ``start`` (inside ``cluster``) to its first site outside the cluster.

    With ``stop_level`` the walker also stops on reaching that level at an
    occupied site (status ``STOPPED``).  Fast-forwarding uses the cluster's
    filled height ``k`` as the floor.
    """
    start = CylinderSite(*start)
    if not cluster.occupied(*start):
        raise ValueError(f"walk must start inside the cluster, got {start}")
    mode = mode or WalkMode.fastforward(G)
    if mode.fast_forward and start.y < cluster.k:
        raise ValueError("fast-forward walks must start at or above the filled level")
    cluster.reserve(1)
    v, y, status, nv, nh, debt = _walk(
        cluster.rows, cluster.base, cluster.h, cluster.k, start.v, start.y,
        G.indptr, G.indices, G.pi_cdf, _Q,
        mode.fast_forward, mode.ff_steps, mode.epsilon,
        ALL_OCCUPIED if stop_level is None else stop_level, mode.step_cap, rng,
    )
    site = None if status == ABORTED else CylinderSite(int(v), int(y))
    return WalkResult(site, int(status), int(nv), int(nh), float(debt))


def fast_forward_excursion(state: WalkState, G: BaseGraph, mode: WalkMode,
                           rng: np.random.Generator) -> WalkState:
    """Resolve the excursion that starts with a down step from ``state``'s level.

    The walker returns to the same level; the step counters and ``tv_debt``
    are updated as in the kernel.
    """
    v, y = state.position
    v2, T, H, resampled = _excursion(v, G.indptr, G.indices, G.pi_cdf, mode.ff_steps, _Q, rng)
    return WalkState(
        CylinderSite(int(v2), y),
        state.steps_total + 1 + int(T) + int(H),
        state.steps_vertical + 1 + int(T),
        state.steps_horizontal + int(H),
        state.tv_debt + (mode.epsilon if resampled else 0.0),
    )


def excursion_return_law(v: int, G: BaseGraph, mode: WalkMode, rng: np.random.Generator,
                         size: int) -> tuple[np.ndarray, int]:
    """Returned horizontal coordinates of ``size`` fast-forwarded excursions from ``v``."""
    return _excursion_batch(v, size, G.indptr, G.indices, G.pi_cdf, mode.ff_steps, _Q, rng)


@njit(cache=True)
def _excursion_batch(v, size, indptr, indices, pi_cdf, ff_steps, q, rng):
    out = np.empty(size, dtype=np.int64)
    resampled = 0
    for i in range(size):
        w, T, H, r = _excursion(v, indptr, indices, pi_cdf, ff_steps, q, rng)
        out[i] = w
        resampled += r
    return out, resampled


@njit(cache=True)
def _exact_excursion_batch(v, size, indptr, indices, step_cap, rng):
    """Oracle: step-by-step excursion from ``(v, -1)`` back to level 0."""
    out = np.empty(size, dtype=np.int64)
    lengths = np.empty(size, dtype=np.int64)
    for i in range(size):
        w = v
        y = -1
        nv = 1
        steps = 0
        while y < 0 and steps < step_cap:
            steps += 1
            u = rng.random()
            if u < 0.25:
                y += 1
                nv += 1
            elif u < 0.5:
                y -= 1
                nv += 1
            elif u >= 0.75:
                d = indptr[w + 1] - indptr[w]
                w = indices[indptr[w] + int(rng.random() * d)]
        out[i] = w if y == 0 else -1
        lengths[i] = nv - 1 if y == 0 else -1
    return out, lengths


def exact_excursion_oracle(v: int, G: BaseGraph, rng: np.random.Generator, size: int,
                           step_cap: int = 10**7) -> tuple[np.ndarray, np.ndarray]:
    """Direct simulation of excursions below a floor, for validating the fast path.

    Returns the returned horizontal coordinates and the number of vertical
    moves after the initial down step (``-1`` for capped samples).
    """
    return _exact_excursion_batch(v, size, G.indptr, G.indices, step_cap, rng)


@njit(cache=True)
def _skeleton_return_batch(size, step_cap, rng):
    out = np.empty(size, dtype=np.int64)
    for i in range(size):
        y = -1
        t = 0
        while y < 0 and t < step_cap:
            y += 1 if rng.random() < 0.5 else -1
            t += 1
        out[i] = t if y == 0 else -1
    return out


def skeleton_return_oracle(rng: np.random.Generator, size: int, step_cap: int = 10**6) -> np.ndarray:
    """First-passage times of the +-1 walk from -1 to 0 by direct simulation."""
    return _skeleton_return_batch(size, step_cap, rng)
