"""IDLA clusters on ``G x Z`` and the (shifted) IDLA Markov chains.

A cluster is ``R_0`` plus finitely many sites above level 0.  Storage is a
window of dense occupancy rows: every level ``<= base`` is implicitly full
and ``rows[j]`` holds level ``base + 1 + j``.  The downshift is O(1) (it only
moves ``base``), and rows that fall below the filled height are dropped
lazily by :meth:`ClusterState.reserve`.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .graphs import BaseGraph
from .walk import ABORTED, ALL_OCCUPIED, CylinderSite, WalkMode, _Q, _sample_pi, _walk


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterStats:
    t: int
    h: int
    k: int
    size_above: int
    excess: float
    level_counts: tuple[int, ...]
    cumulative_shift: int = 0

    def to_dict(self) -> dict:
        return {
            "t": self.t, "h": self.h, "k": self.k, "size_above": self.size_above,
            "excess": self.excess, "cumulative_shift": self.cumulative_shift,
            "level_counts": list(self.level_counts),
        }


class ClusterState:
    """Occupied set of an IDLA cluster with cached ``h``, ``k`` and ``|A|``.

    Besides the occupancy the object accumulates walk diagnostics
    (``tv_debt``, ``aborted_steps``, ``walk_steps``) over the steps applied
    to it.
    """

    def __init__(self, G: BaseGraph, capacity: int = 16):
        self.G = G
        self.base = 0
        self.rows = np.zeros((max(capacity, 1), G.N), dtype=np.uint8)
        self.counts = np.zeros(self.rows.shape[0], dtype=np.int64)
        self.k = 0
        self.h = 0
        self.size_above = 0
        self.cumulative_shift = 0
        self.t = 0
        self.tv_debt = 0.0
        self.aborted_steps = 0
        self.walk_steps = 0.0

    @property
    def N(self) -> int:
        return self.G.N

    @property
    def excess(self) -> float:
        return self.h - self.size_above / self.G.N

    def occupied(self, v: int, y: int) -> bool:
        if y <= self.base:
            return True
        if y > self.h:
            return False
        return bool(self.rows[y - self.base - 1, v])

    def level_count(self, y: int) -> int:
        if y <= self.base:
            return self.G.N
        if y > self.h:
            return 0
        return int(self.counts[y - self.base - 1])

    def level_counts(self) -> tuple[int, ...]:
        """``(Z_1, ..., Z_h)`` with ``Z_y = |A n {level y}|``."""
        return tuple(self.level_count(y) for y in range(1, self.h + 1))

    def level(self, y: int) -> np.ndarray:
        if y <= self.base:
            return np.ones(self.G.N, dtype=bool)
        if y > self.h:
            return np.zeros(self.G.N, dtype=bool)
        return self.rows[y - self.base - 1].astype(bool)

    def sites(self) -> set[CylinderSite]:
        """Occupied sites above level 0."""
        return {CylinderSite(v, y) for y in range(1, self.h + 1) for v in np.flatnonzero(self.level(y))}

    def stats(self) -> ClusterStats:
        return ClusterStats(
            t=self.t, h=self.h, k=self.k, size_above=self.size_above,
            excess=self.excess, level_counts=self.level_counts(),
            cumulative_shift=self.cumulative_shift,
        )

    def key(self) -> tuple:
        """Canonical, hashable description of the occupied set."""
        body = b"".join(self.rows[y - self.base - 1].tobytes() for y in range(max(self.k, self.base) + 1, self.h + 1))
        return (self.k, self.h, body)

    def same_set(self, other: "ClusterState") -> bool:
        return self.key() == other.key()

    def copy(self) -> "ClusterState":
        c = ClusterState.__new__(ClusterState)
        c.__dict__.update(self.__dict__)
        c.rows = self.rows.copy()
        c.counts = self.counts.copy()
        return c

    # -- mutation ---------------------------------------------------------

    def reserve(self, extra: int) -> None:
        """Make room for ``extra`` new levels above ``h``; drop rows below ``k``."""
        drop = self.k - self.base
        if drop > 0 and (drop >= 32 or drop * 2 >= self.rows.shape[0]):
            self.rows = self.rows[drop:]
            self.counts = self.counts[drop:]
            self.base = self.k
        need = self.h - self.base + extra + 1
        cap = self.rows.shape[0]
        if need > cap:
            new_cap = max(need, 2 * cap)
            rows = np.zeros((new_cap, self.G.N), dtype=np.uint8)
            counts = np.zeros(new_cap, dtype=np.int64)
            rows[:cap] = self.rows
            counts[:cap] = self.counts
            self.rows, self.counts = rows, counts
        elif not self.rows.flags.c_contiguous:
            self.rows = np.ascontiguousarray(self.rows)
            self.counts = np.ascontiguousarray(self.counts)

    def add(self, v: int, y: int) -> None:
        """Occupy ``(v, y)``; the site must be empty and above level 0."""
        if not 0 <= v < self.G.N:
            raise ClusterError(f"vertex {v} out of range")
        if self.occupied(v, y):
            raise ClusterError(f"site {(v, y)} already occupied")
        self.reserve(max(0, y - self.h))
        self.k, self.h, self.size_above = _settle(
            self.rows, self.counts, self.base, self.h, self.k, self.size_above, v, y
        )

    def downshift(self) -> int:
        """Apply ``S``: shift down by the filled height.  Returns the shift."""
        s = self.k
        if s:
            self.base -= s
            self.h -= s
            self.size_above -= s * self.G.N
            self.cumulative_shift += s
            self.k = 0
        return s

    def check(self, connectivity: bool = False) -> None:
        """Recompute every cache from raw occupancy and compare."""
        N = self.G.N
        levels = range(1, self.h + 1)
        z = [int(self.level(y).sum()) for y in levels]
        size = sum(z)
        k = 0
        while k < self.h and z[k] == N:
            k += 1
        h = 0
        for y in levels:
            if z[y - 1]:
                h = y
        if self.h > max(self.base, 0) and z[-1] == 0:
            raise ClusterError("cached h is above the highest occupied level")
        for j, y in enumerate(range(self.base + 1, self.base + 1 + self.rows.shape[0])):
            if y > self.h and self.counts[j]:
                raise ClusterError(f"level {y} above h is not empty")
            if int(self.counts[j]) != int(self.rows[j].sum()):
                raise ClusterError(f"stale level count at row {j}")
        if (size, k, max(h, 0)) != (self.size_above, self.k, self.h):
            raise ClusterError(
                f"cache mismatch: cached (|A|={self.size_above}, k={self.k}, h={self.h}) "
                f"vs recomputed ({size}, {k}, {h})"
            )
        if size < k * N or self.excess < 0:
            raise ClusterError("size/excess invariant violated")
        if connectivity and not _connected(self):
            raise ClusterError("occupied set is not connected")

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "N": self.G.N,
            "k": self.k,
            "cumulative_shift": self.cumulative_shift,
            "levels": {
                str(y): [int(v) for v in np.flatnonzero(self.level(y))]
                for y in range(self.k + 1, self.h + 1)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, G: BaseGraph) -> "ClusterState":
        if int(d["N"]) != G.N:
            raise ClusterError(f"snapshot has N={d['N']} but graph has N={G.N}")
        k = int(d["k"])
        sites = [(v, y) for y in range(1, k + 1) for v in range(G.N)]
        sites += [(int(v), int(y)) for y, vs in d["levels"].items() for v in vs]
        c = new_cluster(G, sites)
        c.cumulative_shift = int(d.get("cumulative_shift", 0))
        return c

    @classmethod
    def from_json(cls, text: str, G: BaseGraph) -> "ClusterState":
        return cls.from_dict(json.loads(text), G)

    def __repr__(self) -> str:
        return f"ClusterState(N={self.G.N}, k={self.k}, h={self.h}, |A|={self.size_above})"


@njit(cache=True)
def _settle(rows, counts, base, h, k, size, v, y):
    j = y - base - 1
    rows[j, v] = 1
    counts[j] += 1
    size += 1
    if y > h:
        h = y
    N = rows.shape[1]
    while k < h and (k + 1 <= base or counts[k - base] == N):
        k += 1
    return k, h, size


def _connected(c: ClusterState) -> bool:
    """Every occupied site above 0 reaches ``R_0`` through occupied sites."""
    sites = c.sites()
    seen = {s for s in sites if s.y == 1}
    queue = deque(seen)
    while queue:
        v, y = queue.popleft()
        nbrs = [(w, y) for w in c.G.adjacency[v]] + [(v, y + 1), (v, y - 1)]
        for s in nbrs:
            s = CylinderSite(*s)
            if s in sites and s not in seen:
                seen.add(s)
                queue.append(s)
    return seen == sites


def new_cluster(G: BaseGraph, init="flat") -> ClusterState:
    """Cluster ``R_0`` (``init="flat"``) or ``R_0`` plus an explicit site list."""
    c = ClusterState(G)
    if isinstance(init, str):
        if init != "flat":
            raise ClusterError(f"unknown init {init!r}")
        return c
    sites = sorted({(int(v), int(y)) for v, y in init}, key=lambda s: (s[1], s[0]))
    for v, y in sites:
        if y < 1:
            raise ClusterError(f"explicit sites must lie above level 0, got {(v, y)}")
        c.add(v, y)
    if not _connected(c):
        raise ClusterError("explicit site set is not connected to R_0")
    return c


@njit(cache=True)
def _grow(rows, counts, base, h, k, size, n_steps, shift_each_step,
          indptr, indices, pi_cdf, q, fast_forward, ff_steps, eps, step_cap,
          release_zero, out_v, out_y, rng):
    """``n_steps`` IDLA releases; returns updated caches and diagnostics.

    Settled sites go to ``out_v/out_y`` (``y`` in the coordinates at the time
    of settling); failed (aborted) releases are marked with ``v = -1``.
    """
    debt = 0.0
    aborted = 0
    steps = 0.0  # fast-forwarded counts are heavy tailed; keep the total in float
    shift = 0
    for i in range(n_steps):
        w = _sample_pi(pi_cdf, rng.random())
        y0 = 0 if release_zero else k
        v, y, status, nv, nh, d = _walk(
            rows, base, h, k, w, y0, indptr, indices, pi_cdf, q,
            fast_forward, ff_steps, eps, ALL_OCCUPIED, step_cap, rng,
        )
        steps += nv + nh
        debt += d
        if status == ABORTED:
            aborted += 1
            out_v[i] = -1
            out_y[i] = 0
            continue
        out_v[i] = v
        out_y[i] = y
        k, h, size = _settle(rows, counts, base, h, k, size, v, y)
        if shift_each_step and k > 0:
            base -= k
            h -= k
            size -= k * rows.shape[1]
            shift += k
            k = 0
    return base, h, k, size, shift, debt, aborted, steps


def grow(cluster: ClusterState, n_steps: int, rng: np.random.Generator,
         mode: WalkMode, shifted: bool = False, release_zero: bool = False):
    """Apply ``n_steps`` IDLA releases in place; returns the settled sites.

    Batches are compiled end to end.  With ``shifted`` the downshift is
    applied after every step, so the returned levels are shift-normalised
    at the time of settling.
    """
    if shifted and cluster.k:
        raise ClusterError("shifted dynamics need a shift-normalised cluster (k = 0)")
    if release_zero and mode.fast_forward and cluster.k > 0:
        raise ClusterError("release from level 0 requires the exact walk mode")
    G = cluster.G
    out_v = np.empty(n_steps, dtype=np.int64)
    out_y = np.empty(n_steps, dtype=np.int64)
    done = 0
    while done < n_steps:
        batch = min(n_steps - done, 4096)
        cluster.reserve(batch + 1)
        if shifted and cluster.base < -64:
            cluster.reserve(batch + 1)
        base, h, k, size, shift, debt, aborted, steps = _grow(
            cluster.rows, cluster.counts, cluster.base, cluster.h, cluster.k, cluster.size_above,
            batch, shifted, G.indptr, G.indices, G.pi_cdf, _Q,
            mode.fast_forward, mode.ff_steps, mode.epsilon, mode.step_cap,
            release_zero, out_v[done:done + batch], out_y[done:done + batch], rng,
        )
        cluster.base, cluster.h, cluster.k, cluster.size_above = int(base), int(h), int(k), int(size)
        cluster.cumulative_shift += int(shift)
        cluster.tv_debt += float(debt)
        cluster.aborted_steps += int(aborted)
        cluster.walk_steps += float(steps)
        cluster.t += batch - int(aborted)
        if shifted:
            _drop_shifted_rows(cluster)
        done += batch
    return out_v, out_y


def _drop_shifted_rows(cluster: ClusterState) -> None:
    # rows for levels <= 0 are all full once the cluster is normalised
    drop = -cluster.base
    if drop > 0 and (drop >= 32 or 2 * drop >= cluster.rows.shape[0]):
        cluster.rows = np.ascontiguousarray(cluster.rows[drop:])
        cluster.counts = np.ascontiguousarray(cluster.counts[drop:])
        cluster.base = 0


def idla_step(cluster: ClusterState, G: BaseGraph, rng: np.random.Generator,
              mode: WalkMode | None = None):
    """One IDLA release from ``(w, k_A)``, ``w ~ pi``.  Mutates ``cluster``.

    Returns ``(cluster, settled)``; ``settled`` is ``None`` if the walker hit
    its step cap, in which case the cluster is unchanged.
    """
    _check_graph(cluster, G)
    mode = mode or WalkMode.fastforward(G)
    v, y = grow(cluster, 1, rng, mode)
    if v[0] < 0:
        return cluster, None
    return cluster, CylinderSite(int(v[0]), int(y[0]))


def shifted_step(cluster: ClusterState, G: BaseGraph, rng: np.random.Generator,
                 mode: WalkMode | None = None):
    """One shifted-IDLA step: release, settle, downshift.  Returns ``(cluster, shift)``."""
    _check_graph(cluster, G)
    if cluster.k:
        raise ClusterError("shifted_step needs a shift-normalised cluster (k = 0)")
    cluster, settled = idla_step(cluster, G, rng, mode)
    return cluster, cluster.downshift()


def _check_graph(cluster, G):
    if cluster.G is not G and cluster.G.adjacency != G.adjacency:
        raise ClusterError("cluster belongs to a different base graph")


@dataclass
class Trajectory:
    stats: list[ClusterStats]
    final: ClusterState
    tv_debt: float = 0.0
    aborted_steps: int = 0
    walk_steps: int = 0
    settled: list[tuple[int, int]] = field(default_factory=list)


def run_process(init, G: BaseGraph, T: int, rng: np.random.Generator,
                mode: WalkMode | None = None, record_schedule: Sequence[int] | None = None,
                shifted: bool = False, keep_sites: bool = False) -> Trajectory:
    """Run ``T`` steps of (shifted) IDLA and record stats at the scheduled times.

    ``init`` is ``"flat"``, a site list, or a :class:`ClusterState` (copied).
    The default schedule records only ``t = 0`` and ``t = T``.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    mode = mode or WalkMode.fastforward(G)
    cluster = init.copy() if isinstance(init, ClusterState) else new_cluster(G, init)
    if shifted:
        cluster.downshift()
    schedule = sorted({0, T} if record_schedule is None else {int(t) for t in record_schedule if 0 <= t <= T})
    stats = []
    settled = []
    cluster.t = 0
    now = 0
    for t in schedule:
        if t > now:
            v, y = grow(cluster, t - now, rng, mode, shifted=shifted)
            if keep_sites:
                settled.extend(zip(v.tolist(), y.tolist()))
            now = t
        stats.append(cluster.stats())
    if now < T:
        v, y = grow(cluster, T - now, rng, mode, shifted=shifted)
        if keep_sites:
            settled.extend(zip(v.tolist(), y.tolist()))
    return Trajectory(stats, cluster, cluster.tv_debt, cluster.aborted_steps, cluster.walk_steps, settled)


def comb_cluster(G: BaseGraph, bad_levels: int, spacing: int, holes: int = 1,
                 rng: np.random.Generator | None = None) -> ClusterState:
    """Tall filled column with ``bad_levels`` levels that each miss ``holes`` sites.

    Bad levels sit at heights ``spacing, 2*spacing, ...``; everything else up
    to the last bad level is full, so the cluster is connected as long as
    ``holes < N``.  Hole positions are random when ``rng`` is given.
    """
    if not 0 < holes < G.N:
        raise ClusterError("need 0 < holes < N")
    if bad_levels < 1 or spacing < 1:
        raise ClusterError("need bad_levels >= 1 and spacing >= 1")
    top = bad_levels * spacing
    c = ClusterState(G, capacity=top + 2)
    c.rows[:top] = 1
    bad = np.arange(spacing - 1, top, spacing)
    if rng is None:
        c.rows[np.ix_(bad, np.arange(holes))] = 0
    else:
        empty = np.argsort(rng.random((bad_levels, G.N)), axis=1)[:, :holes]
        c.rows[bad[:, None], empty] = 0
    c.counts[:top] = c.rows[:top].sum(axis=1)
    c.h = top
    c.size_above = int(c.counts[:top].sum())
    c.k = spacing - 1
    return c


@njit(cache=True)
def _exit_batch(rows, base, h, k, size, indptr, indices, pi_cdf, q,
                fast_forward, ff_steps, eps, step_cap, out_v, out_y, rng):
    debt = 0.0
    aborted = 0
    for i in range(size):
        w = _sample_pi(pi_cdf, rng.random())
        v, y, status, nv, nh, d = _walk(rows, base, h, k, w, k, indptr, indices, pi_cdf, q,
                                         fast_forward, ff_steps, eps, ALL_OCCUPIED, step_cap, rng)
        debt += d
        if status == ABORTED:
            aborted += 1
            out_v[i] = -1
            out_y[i] = 0
        else:
            out_v[i] = v
            out_y[i] = y
    return debt, aborted


def exit_distribution(cluster: ClusterState, rng: np.random.Generator, mode: WalkMode,
                      size: int):
    """Exit sites of ``size`` independent releases from ``cluster`` (left unchanged).

    Returns ``(v, y, tv_debt, aborted)``; aborted walkers carry ``v = -1``.
    """
    G = cluster.G
    cluster.reserve(1)
    out_v = np.empty(size, dtype=np.int64)
    out_y = np.empty(size, dtype=np.int64)
    debt, aborted = _exit_batch(cluster.rows, cluster.base, cluster.h, cluster.k, size,
                                G.indptr, G.indices, G.pi_cdf, _Q, mode.fast_forward,
                                mode.ff_steps, mode.epsilon, mode.step_cap, out_v, out_y, rng)
    return out_v, out_y, float(debt), int(aborted)
