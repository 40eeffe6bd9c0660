import numpy as np
from hypothesis import given, strategies as st

from cylidla.rng import derive_seed, keyed_word, make_rng, name_key, word_below, word_uniform


def test_make_rng_reproducible_and_keyed():
    a = make_rng(5, 1, 2).random(4)
    assert np.array_equal(a, make_rng(5, 1, 2).random(4))
    assert not np.array_equal(a, make_rng(5, 1, 3).random(4))
    g = np.random.default_rng(0)
    assert make_rng(g) is g


def test_derive_seed_and_name_key():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert 0 <= derive_seed(1, 2) < 2**63
    assert derive_seed(1, 2) != derive_seed(1, 3)
    assert name_key("mixing") == name_key("mixing") != name_key("coupon")


def test_keyed_word_depends_on_every_key():
    base = keyed_word(1, 0, 2, 3, 4)
    assert base == keyed_word(1, 0, 2, 3, 4)
    for args in [(2, 0, 2, 3, 4), (1, 1, 2, 3, 4), (1, 0, 3, 3, 4), (1, 0, 2, -3, 4), (1, 0, 2, 3, 5)]:
        assert keyed_word(*args) != base


def test_keyed_words_look_uniform():
    u = np.array([word_uniform(np.uint64(keyed_word(7, 0, v, 0, k))) for v in range(50) for k in range(200)])
    assert abs(u.mean() - 0.5) < 3 * np.sqrt(1 / 12 / u.size)
    counts = np.histogram(u, bins=10, range=(0, 1))[0]
    expected = u.size / 10
    assert ((counts - expected) ** 2 / expected).sum() < 27.9  # chi2(9) 0.999 quantile


@given(st.integers(0, 2**63 - 1), st.integers(1, 1000))
def test_word_below_range(w, n):
    assert 0 <= word_below(np.uint64(w), n) < n
