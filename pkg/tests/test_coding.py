import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uepmm import gf
from uepmm.blockmat import build_class_profile, partition
from uepmm.coding import (
    CodedTask,
    EmptyWindowError,
    WindowDistribution,
    check_strategy,
    encode_blockrep,
    encode_class_window,
    encode_ew,
    encode_mds,
    encode_now,
    encode_uncoded,
    make_tasks,
    sample_pairs,
    sample_window,
    task_to_coefficient_row,
    worker_operands,
    worker_product,
    write_task_log,
)
from uepmm.decode import matrix_rank

P = gf.MERSENNE31


def _operands(rng, N, Pb, U=2, Q=3, M=4, modulus=None):
    if modulus is None:
        A, B = rng.normal(size=(N * U, M)), rng.normal(size=(M, Pb * Q))
    else:
        A, B = gf.random_elements(rng, (N * U, M), modulus), gf.random_elements(rng, (M, Pb * Q), modulus)
    return partition(A, N, U, "left"), partition(B, Pb, Q, "right")


def _combination(task, pa, pb, modulus=None):
    """Reference ``sum g[n,p] C_np`` built block by block."""
    As, Bs = pa.stacked(), pb.stacked()
    if modulus is None:
        return sum(task.coeffs[n, p] * (As[n] @ Bs[p]) for n, p in np.ndindex(task.coeffs.shape))
    out = np.zeros((As.shape[1], Bs.shape[2]), dtype=np.int64)
    for n, p in np.ndindex(task.coeffs.shape):
        out = gf.scale_add(out, int(task.coeffs[n, p]), gf.matmul(As[n], Bs[p], modulus), modulus)
    return out


def test_strategy_names():
    assert check_strategy("now-uep") == "NOW"
    assert check_strategy("blockrep") == "BLOCKREP"
    with pytest.raises(ValueError, match="NOW, EW, MDS, UNCODED, BLOCKREP"):
        check_strategy("bogus")


def test_window_distribution_validation():
    with pytest.raises(ValueError):
        WindowDistribution((0.5, 0.4))
    with pytest.raises(ValueError):
        WindowDistribution((1.2, -0.2))


def test_degenerate_window(three_level_profile, rng):
    dist = WindowDistribution((1.0, 0.0, 0.0))
    assert all(sample_window(dist, three_level_profile, rng)[0] == 1 for _ in range(200))


def test_class_frequencies(rng):
    dist = WindowDistribution((0.35, 0.35, 0.3))
    draws = dist.sample(rng, size=10**6)
    freq = np.bincount(draws, minlength=4)[1:] / draws.size
    np.testing.assert_allclose(freq, [0.35, 0.35, 0.3], atol=0.003)


def test_composite_pair_frequencies(three_level_profile, rng):
    dist = WindowDistribution((0.0, 1.0, 0.0))
    pairs = sample_pairs(dist, three_level_profile, 10**6, rng)
    share = sum(p == (1, 2) for p in pairs) / len(pairs)
    assert abs(share - 0.5) < 0.005
    assert set(pairs) == {(1, 2), (2, 1)}


def test_per_side_sampling(three_level_profile, rng):
    dist = WindowDistribution((0.35, 0.35, 0.3))
    side = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    l, pair = sample_window(dist, three_level_profile, rng, "per_side", side)
    assert pair == (1, 2) and l == 2


def test_now_supports(three_level_profile, rng):
    t = encode_now(three_level_profile, (1, 1), rng)
    assert np.count_nonzero(t.alpha) == 1 and np.count_nonzero(t.beta) == 1
    t = encode_now(three_level_profile, (1, 2), rng)
    assert t.support() == [(0, 1)]


def test_now_full_window_when_single_level(rng):
    prof = build_class_profile([1, 1, 1], [1, 1], 1)
    t = encode_now(prof, (1, 1), rng)
    assert np.all(t.alpha != 0) and np.all(t.beta != 0)


def test_ew_supports(three_level_profile, rng):
    t = encode_ew(three_level_profile, (3, 3), rng)
    assert np.all(t.coeffs != 0)
    t11 = encode_ew(three_level_profile, (1, 1), rng)
    assert t11.support() == encode_now(three_level_profile, (1, 1), rng).support()
    t21 = encode_ew(three_level_profile, (2, 1), rng)
    assert sorted(t21.support()) == [(0, 0), (1, 0)]


def test_empty_window():
    prof = build_class_profile([1, 1], [1, 1], 2)
    with pytest.raises(EmptyWindowError):
        encode_now(prof, (2, 2), np.random.default_rng(0))


def test_coefficient_rows():
    t = CodedTask(0, "NOW", np.outer([1.0, 0, 0], [0, 1.0, 0]), alpha=np.array([1.0, 0, 0]), beta=np.array([0, 1.0, 0]))
    row = task_to_coefficient_row(t)
    assert np.flatnonzero(row).tolist() == [1]
    t = CodedTask(0, "EW", np.outer([1.0, 1, 0], [1.0, 0, 0]))
    assert sorted(t.support()) == [(0, 0), (1, 0)]
    np.testing.assert_array_equal(task_to_coefficient_row(t)[[0, 3]], [1, 1])


@pytest.mark.parametrize("modulus", [None, P])
def test_outer_product_oracle(three_level_profile, rng, modulus):
    for _ in range(20):
        t = encode_ew(three_level_profile, (int(rng.integers(1, 4)), int(rng.integers(1, 4))), rng, modulus)
        ref = np.outer(t.alpha, t.beta)
        if modulus is None:
            np.testing.assert_allclose(t.coeffs, ref, rtol=0, atol=1e-12)
        else:
            np.testing.assert_array_equal(t.coeffs, ref % modulus)


def _all_tasks(profile, rng, modulus):
    g = (0.35, 0.35, 0.3)
    N, Pb = profile.N, profile.P
    yield from make_tasks("NOW", profile, 6, rng, g, modulus=modulus)
    yield from make_tasks("EW", profile, 6, rng, g, modulus=modulus)
    yield from make_tasks("NOW", profile, 4, rng, g, window="class", modulus=modulus)
    yield from make_tasks("EW", profile, 4, rng, g, window="class", modulus=modulus)
    yield from make_tasks("MDS", profile, 3, rng, modulus=modulus)
    yield from make_tasks("UNCODED", profile, N * Pb, rng, modulus=modulus)
    yield from make_tasks("BLOCKREP", profile, 2 * N * Pb, rng, modulus=modulus)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_worker_product_equals_combination_real(seed):
    rng = np.random.default_rng(seed)
    prof = build_class_profile([1, 2, 3], [1, 2, 3], 3)
    pa, pb = _operands(rng, 3, 3)
    for t in _all_tasks(prof, rng, None):
        ref = _combination(t, pa, pb)
        got = worker_product(t, pa, pb)
        assert np.linalg.norm(got - ref) <= 1e-9 * max(np.linalg.norm(ref), 1e-300)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_worker_product_equals_combination_prime(seed):
    rng = np.random.default_rng(seed)
    prof = build_class_profile([1, 2, 3], [1, 2, 3], 3)
    pa, pb = _operands(rng, 3, 3, modulus=P)
    for t in _all_tasks(prof, rng, P):
        np.testing.assert_array_equal(worker_product(t, pa, pb), _combination(t, pa, pb, P))


def test_class_window_operands_are_fat_and_tall(three_level_profile, rng):
    pa, pb = _operands(rng, 3, 3, U=2, Q=3, M=4)
    t = encode_class_window(three_level_profile, "EW", 3, rng)
    wa, wb = worker_operands(t, pa, pb)
    assert wa.shape == (2, 4 * 9) and wb.shape == (4 * 9, 3)


def test_now_touches_one_pair_ew_rectangle(rng):
    prof = build_class_profile([1, 1, 2, 3], [1, 2, 2], 3)
    for _ in range(50):
        a, b = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        t = encode_now(prof, (a, b), rng)
        rows, cols = np.nonzero(t.coeffs)
        assert set(prof.row_levels[rows]) == {a} and set(prof.col_levels[cols]) == {b}
        t = encode_ew(prof, (a, b), rng)
        want = np.outer(prof.row_levels <= a, prof.col_levels <= b)
        np.testing.assert_array_equal(t.coeffs != 0, want)


def test_mds_any_k_rank(rng):
    tasks = [encode_mds(3, 3, rng, P, w) for w in range(40)]
    G = np.array([t.coefficient_row() for t in tasks])
    for _ in range(1000):
        sel = rng.choice(40, size=9, replace=False)
        assert matrix_rank(G[sel], P) == 9


def test_uncoded_bijection_and_blockrep_twice():
    rows = np.array([encode_uncoded(3, 3, w).coefficient_row() for w in range(9)])
    np.testing.assert_array_equal(rows, np.eye(9))
    rows = np.array([encode_blockrep(3, 3, 18, w).coefficient_row() for w in range(18)])
    np.testing.assert_array_equal(rows.sum(axis=0), np.full(9, 2))
    assert np.all(rows.sum(axis=1) == 1)


def test_seeded_streams_reproducible(three_level_profile):
    a = make_tasks("EW", three_level_profile, 20, np.random.default_rng(3), (0.35, 0.35, 0.3))
    b = make_tasks("EW", three_level_profile, 20, np.random.default_rng(3), (0.35, 0.35, 0.3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.coeffs, y.coeffs)


def test_task_log(tmp_path, three_level_profile, rng):
    tasks = make_tasks("NOW", three_level_profile, 3, rng, (0.35, 0.35, 0.3))
    path = tmp_path / "tasks.csv"
    write_task_log(path, tasks)
    lines = path.read_text().splitlines()
    assert lines[0] == "worker,strategy,class,pair,support" and len(lines) == 4


def test_uncoded_wrong_worker_count(three_level_profile, rng):
    with pytest.raises(ValueError):
        make_tasks("UNCODED", three_level_profile, 8, rng)


def test_every_pair_window_nonempty():
    for N, Pb in itertools.product(range(1, 4), repeat=2):
        prof = build_class_profile(np.minimum(np.arange(1, N + 1), 3), np.minimum(np.arange(1, Pb + 1), 3), 3)
        for l in range(1, prof.L + 1):
            if prof.class_counts[l - 1]:
                assert prof.pairs_in_class(l)
