"""Summaries, standard errors and the pass rule shared by the experiments."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

Z99_ONE_SIDED = 2.3263478740408408


@dataclass(frozen=True)
class Check:
    """One declared check of an experiment.

    Statistical checks pass when ``value <= bound + 3 * se`` (one-sided);
    exact checks (``se is None``) need ``value <= bound``.  ``direction``
    ``">="`` flips the inequality.
    """

    name: str
    value: float
    bound: float
    se: float | None = None
    direction: str = "<="
    passed: bool = False

    @classmethod
    def make(cls, name, value, bound, se=None, direction="<=", slack=3.0) -> "Check":
        value, bound = float(value), float(bound)
        tol = 0.0 if se is None else slack * float(se)
        if direction == "<=":
            ok = value <= bound + tol
        elif direction == ">=":
            ok = value >= bound - tol
        elif direction == "<":
            ok = value < bound + tol
        elif direction == ">":
            ok = value > bound - tol
        elif direction == "==":
            ok = value == bound
        else:
            raise ValueError(f"unknown direction {direction!r}")
        return cls(name, value, bound, None if se is None else float(se), direction, bool(ok))

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        se = "" if self.se is None else f" (se {self.se:.3g})"
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.6g} {self.direction} {self.bound:.6g}{se}"


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.nan


def quantiles(x, qs=(0.5, 0.9, 0.99)) -> dict[str, float]:
    x = np.asarray(x, dtype=float)
    return {f"q{q:g}": float(np.quantile(x, q)) for q in qs} if x.size else {}


def tv_from_counts(a: Mapping | Sequence, b: Mapping | Sequence) -> tuple[float, float]:
    """Empirical TV distance between two samples given as count tables, with a standard error.

    The error treats cells as independent binomials:
    ``se = 0.5 * sqrt(sum_x var(p_x) + var(q_x))``.
    """
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        keys = sorted(set(a) | set(b), key=repr)
        ca = np.array([a.get(k, 0) for k in keys], dtype=float)
        cb = np.array([b.get(k, 0) for k in keys], dtype=float)
    else:
        ca, cb = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = ca.sum(), cb.sum()
    p, q = ca / na, cb / nb
    tv = 0.5 * float(np.abs(p - q).sum())
    se = 0.5 * math.sqrt(float((p * (1 - p)).sum() / na + (q * (1 - q)).sum() / nb))
    return tv, se


@dataclass(frozen=True)
class ScalingFit:
    sizes: tuple[int, ...]
    constants: tuple[float, ...]
    spread: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "constants": list(self.constants),
                "spread": self.spread, "flagged": self.flagged}


def scaling_fit(observations: Mapping[int, float], scale, max_spread: float = 3.0) -> ScalingFit:
    """Per-size constants ``observable / scale(N)`` and their max/min spread.

    ``scale`` is a callable or a mapping ``N -> predicted scale``.  A spread
    above ``max_spread`` is flagged.
    """
    sizes = tuple(sorted(observations))
    if len(sizes) < 3:
        raise ValueError("a scaling fit needs at least 3 sizes")
    sc = scale if callable(scale) else scale.__getitem__
    consts = tuple(float(observations[n]) / float(sc(n)) for n in sizes)
    lo, hi = min(consts), max(consts)
    if lo <= 0:
        spread = math.inf if hi > 0 else 1.0
    else:
        spread = hi / lo
    return ScalingFit(sizes, consts, spread, spread > max_spread)
