"""Finite base graphs, their lazy random walk, and total-variation mixing times.

A :class:`BaseGraph` is the horizontal factor ``G`` of the cylinder ``G x Z``.
Everything the cylinder walk needs from ``G`` lives here: CSR adjacency
arrays for the compiled kernels, the stationary law ``deg(v) / 2|E|``, the
quasi-regularity constants, and the mixing profile of the lazy chain
(``P(v, v) = 1/2``), which is the chain whose mixing controls the horizontal
coordinate of the cylinder walk.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import product
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit

FAMILIES = ("cycle", "complete", "torus", "hypercube", "custom")
EXACT_VERTEX_CAP = 4096


class GraphError(ValueError):
    """Raised for malformed or disconnected base graphs."""


@dataclass(frozen=True, eq=False)
class BaseGraph:
    """Finite, connected, undirected simple graph.

    ``adjacency[v]`` is the sorted tuple of neighbours of ``v``.  Instances are
    immutable and hash by identity, so they can key caches safely.
    """

    adjacency: tuple[tuple[int, ...], ...]
    name: str = "custom"
    vertex_transitive: bool = False
    params: tuple = field(default=())

    def __post_init__(self):
        n = len(self.adjacency)
        if n < 2:
            raise GraphError(f"base graph needs at least 2 vertices, got {n}")
        for v, nbrs in enumerate(self.adjacency):
            if len(nbrs) == 0:
                raise GraphError(f"vertex {v} is isolated (graph is disconnected)")
            if len(set(nbrs)) != len(nbrs):
                raise GraphError(f"duplicate edge at vertex {v}")
            for w in nbrs:
                if not 0 <= w < n:
                    raise GraphError(f"neighbour {w} of vertex {v} out of range")
                if w == v:
                    raise GraphError(f"self-loop at vertex {v}")
                if v not in self.adjacency[w]:
                    raise GraphError(f"edge ({v}, {w}) is not symmetric")
        unreached = _unreachable(self.adjacency)
        if unreached:
            raise GraphError(
                f"graph is disconnected: vertices {sorted(unreached)[:10]} "
                "cannot be reached from vertex 0"
            )

    @property
    def N(self) -> int:
        return len(self.adjacency)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    @cached_property
    def edge_count(self) -> int:
        return int(self.degrees.sum()) // 2

    @cached_property
    def indptr(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.degrees))).astype(np.int64)

    @cached_property
    def indices(self) -> np.ndarray:
        return np.array([w for a in self.adjacency for w in a], dtype=np.int64)

    @cached_property
    def pi(self) -> np.ndarray:
        return stationary_distribution(self)

    @cached_property
    def pi_cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.pi)
        cdf[-1] = 1.0
        return cdf

    def edges(self) -> list[tuple[int, int]]:
        return [(v, w) for v, a in enumerate(self.adjacency) for w in a if v < w]

    def __repr__(self) -> str:
        return f"BaseGraph({self.name}, N={self.N}, |E|={self.edge_count})"


def _unreachable(adjacency) -> set[int]:
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in adjacency[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return set(range(len(adjacency))) - seen


def _from_edges(n: int, edges: Iterable[Sequence[int]], **kw) -> BaseGraph:
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for e in edges:
        u, w = int(e[0]), int(e[1])
        if not (0 <= u < n and 0 <= w < n):
            raise GraphError(f"edge ({u}, {w}) out of range for N={n}")
        if u == w:
            raise GraphError(f"self-loop at vertex {u}")
        nbrs[u].add(w)
        nbrs[w].add(u)
    return BaseGraph(tuple(tuple(sorted(s)) for s in nbrs), **kw)


def build_graph(family: str, **params) -> BaseGraph:
    """Build a named base graph.

    Families and their parameters:

    - ``cycle``: ``n`` (>= 3)
    - ``complete``: ``n`` (>= 2)
    - ``torus``: ``side`` (>= 3) and ``dim`` (default 2); ``N = side**dim``
    - ``hypercube``: ``dim`` (>= 1); ``N = 2**dim``
    - ``custom``: ``n`` and ``edges``, a list of ``(u, v)`` pairs. Pass
      ``symmetric=True`` to require every edge to be listed in both directions.
    """
    if family == "cycle":
        n = int(params["n"])
        if n < 3:
            raise GraphError("cycle needs n >= 3 (use complete for n = 2)")
        adj = tuple(tuple(sorted({(v - 1) % n, (v + 1) % n})) for v in range(n))
        return BaseGraph(adj, name=f"cycle{n}", vertex_transitive=True, params=(("n", n),))
    if family == "complete":
        n = int(params["n"])
        if n < 2:
            raise GraphError("complete graph needs n >= 2")
        adj = tuple(tuple(w for w in range(n) if w != v) for v in range(n))
        return BaseGraph(adj, name=f"complete{n}", vertex_transitive=True, params=(("n", n),))
    if family == "torus":
        side = int(params["side"])
        dim = int(params.get("dim", 2))
        if side < 3 or dim < 1:
            raise GraphError("torus needs side >= 3 and dim >= 1")
        coords = list(product(range(side), repeat=dim))
        index = {c: i for i, c in enumerate(coords)}
        adj = []
        for c in coords:
            nb = set()
            for axis in range(dim):
                for step in (-1, 1):
                    d = list(c)
                    d[axis] = (d[axis] + step) % side
                    nb.add(index[tuple(d)])
            adj.append(tuple(sorted(nb)))
        return BaseGraph(
            tuple(adj), name=f"torus{side}^{dim}", vertex_transitive=True,
            params=(("side", side), ("dim", dim)),
        )
    if family == "hypercube":
        dim = int(params["dim"])
        if dim < 1:
            raise GraphError("hypercube needs dim >= 1")
        n = 1 << dim
        adj = tuple(tuple(sorted(v ^ (1 << b) for b in range(dim))) for v in range(n))
        return BaseGraph(adj, name=f"hypercube{dim}", vertex_transitive=True, params=(("dim", dim),))
    if family == "custom":
        n = int(params["n"])
        edges = [tuple(e) for e in params["edges"]]
        if params.get("symmetric"):
            present = set(edges)
            missing = [(u, w) for u, w in edges if (w, u) not in present]
            if missing:
                raise GraphError(f"edge list is not symmetric: missing reverse of {missing[:5]}")
        return _from_edges(n, edges, name=params.get("name", "custom"))
    raise GraphError(f"unknown graph family {family!r}; expected one of {FAMILIES}")


def graph_for_size(family: str, n: int) -> BaseGraph:
    """Build a family member with exactly ``n`` vertices (CLI convenience)."""
    if family in ("cycle", "complete"):
        return build_graph(family, n=n)
    if family == "torus":
        side = math.isqrt(n)
        if side * side != n:
            raise GraphError(f"2-d torus needs a square vertex count, got {n}")
        return build_graph("torus", side=side, dim=2)
    if family == "hypercube":
        dim = n.bit_length() - 1
        if 1 << dim != n:
            raise GraphError(f"hypercube needs a power-of-two vertex count, got {n}")
        return build_graph("hypercube", dim=dim)
    raise GraphError(f"family {family!r} cannot be sized by vertex count")


def load_edge_list(path: str | Path, n: int | None = None) -> BaseGraph:
    """Read a ``u v`` per line, 0-indexed edge list. ``#`` starts a comment."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    if n is None:
        n = 1 + max(max(e) for e in edges) if edges else 0
    return build_graph("custom", n=n, edges=edges, name=Path(path).stem)


def stationary_distribution(G: BaseGraph) -> np.ndarray:
    return G.degrees / (2.0 * G.edge_count)


@dataclass(frozen=True)
class QuasiRegularity:
    delta: float
    delta_prime: float


def quasi_regularity(G: BaseGraph) -> QuasiRegularity:
    """Tightest ``(delta, delta')`` with ``delta/N <= pi(v) <= delta'/N``."""
    two_e = 2 * G.edge_count
    return QuasiRegularity(
        delta=G.N * int(G.degrees.min()) / two_e,
        delta_prime=G.N * int(G.degrees.max()) / two_e,
    )


def lazy_transition_row(G: BaseGraph, v: int) -> np.ndarray:
    row = np.zeros(G.N)
    row[v] = 0.5
    nbrs = list(G.adjacency[v])
    row[nbrs] += 0.5 / len(nbrs)
    return row


def lazy_transition_matrix(G: BaseGraph) -> np.ndarray:
    P = np.zeros((G.N, G.N))
    P[np.arange(G.N), np.arange(G.N)] = 0.5
    rows = np.repeat(np.arange(G.N), G.degrees)
    P[rows, G.indices] += 0.5 / G.degrees[rows]
    return P


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"index sets differ: shapes {p.shape} and {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


@njit(cache=True)
def _max_pair_tv(M, transitive):
    n = M.shape[0]
    best = 0.0
    last = 1 if transitive else n
    for i in range(last):
        for j in range(i + 1, n):
            s = 0.0
            for x in range(n):
                s += abs(M[i, x] - M[j, x])
            if s > best:
                best = s
    return 0.5 * best


def max_pair_tv(M: np.ndarray, transitive: bool = False) -> float:
    """``max_{v,v'} ||M[v] - M[v']||_TV``; with ``transitive`` only pairs ``(0, v')``."""
    return float(_max_pair_tv(np.ascontiguousarray(M, dtype=np.float64), transitive))


@dataclass
class MixingProfile:
    """Mixing times ``tau(eps)`` of the lazy chain plus the distance curve.

    ``max_distance_curve[i]`` is the max-pair TV distance at step
    ``curve_steps[i]``; for exact profiles ``curve_steps`` is ``0..K``.
    """

    epsilon_grid: list[float]
    tau: dict[float, int]
    method: str
    curve_steps: np.ndarray
    max_distance_curve: np.ndarray
    standard_errors: np.ndarray | None = None
    graph_name: str = ""

    @property
    def tau_half(self) -> int:
        return self.tau[0.5]

    def distance(self, k: int) -> float:
        idx = np.searchsorted(self.curve_steps, k)
        if idx >= len(self.curve_steps) or self.curve_steps[idx] != k:
            raise KeyError(f"step {k} not on the profile grid")
        return float(self.max_distance_curve[idx])

    def write_csv(self, path: str | Path) -> None:
        """Two tables in one file: ``k,max_pair_tv`` then ``epsilon,tau``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "max_pair_tv"] + (["se"] if self.standard_errors is not None else []))
            for i, k in enumerate(self.curve_steps):
                row = [int(k), repr(float(self.max_distance_curve[i]))]
                if self.standard_errors is not None:
                    row.append(repr(float(self.standard_errors[i])))
                w.writerow(row)
            w.writerow([])
            w.writerow(["epsilon", "tau"])
            for eps in self.epsilon_grid:
                w.writerow([repr(float(eps)), self.tau[eps]])

    def to_dict(self) -> dict:
        d = {
            "graph": self.graph_name,
            "method": self.method,
            "tau": {repr(float(e)): int(t) for e, t in self.tau.items()},
            "curve": [[int(k), float(x)] for k, x in zip(self.curve_steps, self.max_distance_curve)],
        }
        if self.standard_errors is not None:
            d["standard_errors"] = [float(s) for s in self.standard_errors]
        return d


def _epsilon_list(epsilon) -> list[float]:
    eps = [epsilon] if np.isscalar(epsilon) else list(epsilon)
    eps = sorted({float(e) for e in eps} | {0.5}, reverse=True)
    for e in eps:
        if not 0 < e < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {e}")
    return eps


def mixing_time(
    G: BaseGraph,
    epsilon=0.5,
    mode: str = "exact",
    *,
    samples: int = 4000,
    k_grid: Sequence[int] | None = None,
    seed=None,
    cap: int = EXACT_VERTEX_CAP,
    k_max: int = 10**7,
) -> MixingProfile:
    """TV mixing times of the lazy walk on ``G``.

    ``epsilon`` may be a single value or a grid; ``1/2`` is always included so
    that ``profile.tau_half`` is available.  Exact mode iterates ``P^k`` as a
    dense matrix and returns the exact infimum for every ``epsilon``.  Monte
    Carlo mode estimates the distance curve on ``k_grid`` (see
    :func:`_monte_carlo_profile`) and reports the first grid step whose
    estimate is at most ``epsilon``.
    """
    eps = _epsilon_list(epsilon)
    if mode == "exact":
        if G.N > cap:
            raise ValueError(
                f"exact mixing needs N <= {cap} (got N={G.N}); use mode='monte_carlo'"
            )
        return _exact_profile(G, tuple(eps), k_max)
    if mode == "monte_carlo":
        return _monte_carlo_profile(G, eps, samples, k_grid, seed)
    raise ValueError(f"unknown mixing mode {mode!r}")


@lru_cache(maxsize=256)
def _exact_profile_cached(G: BaseGraph, eps: tuple, k_max: int):
    P = lazy_transition_matrix(G)
    M = np.eye(G.N)
    curve = [max_pair_tv(M, G.vertex_transitive)]
    target = min(eps)
    while curve[-1] > target:
        if len(curve) > k_max:
            raise RuntimeError(f"{G!r} did not reach TV {target} within {k_max} steps")
        M = M @ P
        curve.append(max_pair_tv(M, G.vertex_transitive))
    curve = np.array(curve)
    tau = {e: int(np.argmax(curve <= e)) for e in eps}
    return tau, curve


def _exact_profile(G, eps, k_max) -> MixingProfile:
    tau, curve = _exact_profile_cached(G, eps, k_max)
    return MixingProfile(
        epsilon_grid=list(eps),
        tau=dict(tau),
        method="exact",
        curve_steps=np.arange(len(curve)),
        max_distance_curve=curve.copy(),
        graph_name=G.name,
    )


@njit(cache=True)
def _lazy_advance(pos, indptr, indices, rng):
    for i in range(pos.shape[0]):
        if rng.random() < 0.5:
            continue
        v = pos[i]
        d = indptr[v + 1] - indptr[v]
        pos[i] = indices[indptr[v] + int(rng.random() * d)]


def _monte_carlo_profile(G, eps, samples, k_grid, seed, stage1_factor=4) -> MixingProfile:
    """Two-stage Monte Carlo estimate of the max-pair TV curve.

    Stage one runs ``stage1_factor * samples`` walkers from every vertex and
    uses the plug-in empirical rows to pick the farthest pair ``(a, b)`` and
    the witness set ``A = {x : P_a(x) > P_b(x)}``.  Stage two runs an independent batch and
    reports ``P_a(A) - P_b(A)`` from ``samples`` walkers per vertex, which is
    unbiased for the witness-set gap and never exceeds the true distance in
    expectation, with its binomial standard error.
    """
    rng = np.random.default_rng(seed)
    if k_grid is None:
        k_grid = sorted({0, 1, 2, 4, 8, 16, 32, 64, 128, 256})
    k_grid = sorted({int(k) for k in k_grid})
    n = G.N
    s1 = stage1_factor * samples
    stage1 = np.repeat(np.arange(n), s1)
    stage2 = np.repeat(np.arange(n), samples)
    est, ses = [], []
    k_now = 0
    for k in k_grid:
        while k_now < k:
            _lazy_advance(stage1, G.indptr, G.indices, rng)
            _lazy_advance(stage2, G.indptr, G.indices, rng)
            k_now += 1
        rows1 = np.zeros((n, n))
        np.add.at(rows1, (np.repeat(np.arange(n), s1), stage1), 1.0 / s1)
        best, pair = -1.0, (0, 1)
        sources = range(1) if G.vertex_transitive else range(n)
        for a in sources:
            d = 0.5 * np.abs(rows1[a] - rows1).sum(axis=1)
            b = int(np.argmax(d))
            if d[b] > best:
                best, pair = d[b], (a, b)
        a, b = pair
        if a == b:
            b = (a + 1) % n
        witness = rows1[a] > rows1[b]
        pa = witness[stage2[a * samples:(a + 1) * samples]].mean()
        pb = witness[stage2[b * samples:(b + 1) * samples]].mean()
        est.append(pa - pb)
        ses.append(math.sqrt((pa * (1 - pa) + pb * (1 - pb)) / samples))
    est = np.array(est)
    tau = {}
    for e in eps:
        hit = np.nonzero(est <= e)[0]
        tau[e] = int(k_grid[hit[0]]) if len(hit) else -1
    return MixingProfile(
        epsilon_grid=list(eps),
        tau=tau,
        method="monte_carlo",
        curve_steps=np.array(k_grid),
        max_distance_curve=est,
        standard_errors=np.array(ses),
        graph_name=G.name,
    )


class TransitionPowers:
    """Exact rows of ``P^s`` for the lazy chain, computed on demand.

    Powers up to ``window`` are kept from iterated products (bounded by a
    memory budget); larger exponents are assembled by binary exponentiation
    from cached squares.  Extension is serialised by a lock so one instance
    can be shared read-mostly between threads.
    """

    def __init__(self, G: BaseGraph, window: int = 10**5, memory_bytes: int = 1 << 28):
        self.G = G
        self.P = lazy_transition_matrix(G)
        per = 8 * G.N * G.N
        self.window = max(1, min(window, memory_bytes // (2 * per)))
        self._powers = [np.eye(G.N), self.P]
        self._squares = [self.P]
        self._lock = threading.Lock()

    def matrix(self, s: int) -> np.ndarray:
        if s < 0:
            raise ValueError("negative power")
        if s < len(self._powers):
            return self._powers[s]
        if s <= self.window:
            with self._lock:
                while len(self._powers) <= s:
                    self._powers.append(self._powers[-1] @ self.P)
            return self._powers[s]
        return self._binary_power(s)

    def _binary_power(self, s: int) -> np.ndarray:
        with self._lock:
            while (1 << (len(self._squares) - 1)) < s:
                self._squares.append(self._squares[-1] @ self._squares[-1])
        out = None
        bit = 0
        while s:
            if s & 1:
                sq = self._squares[bit]
                out = sq if out is None else out @ sq
            s >>= 1
            bit += 1
        return out

    def row(self, v: int, s: int) -> np.ndarray:
        return self.matrix(s)[v]
