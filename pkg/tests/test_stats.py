import math

import numpy as np
import pytest

from cylidla.stats import Check, binomial_se, mean_se, quantiles, scaling_fit, tv_from_counts


def test_check_pass_rule():
    assert Check.make("a", 1.0, 0.9, se=0.05).passed          # within 3 SE
    assert not Check.make("a", 1.1, 0.9, se=0.05).passed
    assert not Check.make("a", 1.0, 0.9).passed               # exact check, no slack
    assert Check.make("a", 0.88, 0.9, se=0.01, direction=">=").passed
    assert Check.make("a", 3, 3, direction="==").passed
    assert not Check.make("a", 0.0, 0.0, direction="<").passed
    with pytest.raises(ValueError):
        Check.make("a", 0, 0, direction="~")
    line = Check.make("x", 1, 2, se=0.1).line()
    assert line.startswith("PASS x: 1 <= 2") and "se 0.1" in line


def test_summaries():
    assert mean_se([1, 2, 3]) == (2.0, pytest.approx(1 / math.sqrt(3)))
    assert mean_se([4]) == (4.0, 0.0)
    assert math.isnan(mean_se([])[0])
    assert binomial_se(0.5, 100) == 0.05
    assert quantiles(np.arange(101))["q0.5"] == 50.0


def test_tv_from_counts():
    tv, se = tv_from_counts({"a": 10, "b": 10}, {"a": 20})
    assert tv == 0.5 and se > 0
    tv, se = tv_from_counts([5, 5], [5, 5])
    assert tv == 0.0


def test_scaling_fit():
    fit = scaling_fit({8: 4.0, 16: 8.0, 32: 16.0}, lambda n: n)
    assert fit.constants == (0.5, 0.5, 0.5) and fit.spread == 1.0 and not fit.flagged
    fit = scaling_fit({8: 1.0, 16: 8.0, 32: 16.0}, {8: 8, 16: 16, 32: 32})
    assert fit.spread == pytest.approx(4.0) and fit.flagged
    assert scaling_fit({1: 0.0, 2: 0.0, 3: 0.0}, lambda n: 1).spread == 1.0
    assert scaling_fit({1: 0.0, 2: 1.0, 3: 1.0}, lambda n: 1).spread == math.inf
    with pytest.raises(ValueError):
        scaling_fit({8: 1.0, 16: 2.0}, lambda n: n)
