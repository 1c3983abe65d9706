import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from uepmm import gf

P = gf.MERSENNE31


def _slow_matmul(a, b, p):
    return np.array([[sum(int(x) * int(y) for x, y in zip(row, col)) % p for col in b.T] for row in a], dtype=np.int64)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_matches_python_ints(r, k, c, seed):
    rng = np.random.default_rng(seed)
    a = gf.random_elements(rng, (r, k), P)
    b = gf.random_elements(rng, (k, c), P)
    np.testing.assert_array_equal(gf.matmul(a, b, P), _slow_matmul(a, b, P))


def test_inverse():
    for a in (1, 2, 12345, P - 1):
        assert a * gf.inv(a, P) % P == 1


def test_rref_rank_and_solution(rng):
    g = gf.random_elements(rng, (4, 4), P)
    x = gf.random_elements(rng, (4, 2), P)
    y = gf.matmul(g, x, P)
    R, piv, rhs = gf.rref(g, P, y)
    assert list(piv) == [0, 1, 2, 3]
    np.testing.assert_array_equal(R, np.eye(4, dtype=np.int64))
    np.testing.assert_array_equal(rhs, x)


def test_rank_deficient():
    g = np.array([[1, 2, 3], [2, 4, 6], [0, 0, 1]], dtype=np.int64)
    assert gf.rank(g, P) == 2
