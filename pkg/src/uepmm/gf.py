"""Arithmetic over the prime field GF(p) on int64 numpy arrays.

All routines assume ``p < 2**31`` so that a product of two reduced residues
fits in a signed 64-bit integer.
"""

from __future__ import annotations

import numpy as np

MERSENNE31 = 2**31 - 1


def check_modulus(p: int) -> int:
    if not 2 <= p < 2**31:
        raise ValueError(f"prime modulus must lie in [2, 2**31), got {p}")
    return int(p)


def reduce(x, p: int) -> np.ndarray:
    return np.mod(np.asarray(x, dtype=np.int64), p)


def inv(a: int, p: int) -> int:
    a = int(a) % p
    if a == 0:
        raise ZeroDivisionError("zero has no inverse")
    return pow(a, p - 2, p)


def matmul(a, b, p: int) -> np.ndarray:
    """``a @ b mod p`` without int64 overflow (inner dimension up to 2**15)."""
    a = reduce(a, p)
    b = reduce(b, p)
    if a.shape[-1] > 1 << 15:
        raise ValueError("inner dimension too large for split multiplication")
    lo = b & 0xFFFF
    hi = b >> 16
    return ((((a @ hi) % p) << 16) + (a @ lo)) % p


def scale_add(acc, coeff: int, x, p: int) -> np.ndarray:
    """``acc + coeff * x mod p``."""
    return (acc + (int(coeff) % p) * reduce(x, p)) % p


def rref(g, p: int, rhs=None):
    """Reduced row echelon form of ``[g | rhs]`` over GF(p), pivoting on ``g`` only.

    Returns ``(R, pivots, rhs_out)`` where ``R`` keeps only the nonzero rows.
    """
    g = reduce(g, p).copy()
    r = None if rhs is None else reduce(rhs, p).reshape(len(g), -1).copy()
    rows, cols = g.shape
    pivots = []
    i = 0
    for j in range(cols):
        if i == rows:
            break
        nz = np.flatnonzero(g[i:, j])
        if nz.size == 0:
            continue
        k = i + nz[0]
        if k != i:
            g[[i, k]] = g[[k, i]]
            if r is not None:
                r[[i, k]] = r[[k, i]]
        f = inv(g[i, j], p)
        g[i] = (g[i] * f) % p
        if r is not None:
            r[i] = (r[i] * f) % p
        others = np.flatnonzero(g[:, j])
        others = others[others != i]
        if others.size:
            fac = g[others, j][:, None]
            g[others] = (g[others] - (fac * g[i][None, :]) % p) % p
            if r is not None:
                r[others] = (r[others] - (fac * r[i][None, :]) % p) % p
        pivots.append(j)
        i += 1
    R = g[:i]
    return R, pivots, (None if r is None else r[:i])


def rank(g, p: int) -> int:
    g = np.atleast_2d(g)
    if g.size == 0:
        return 0
    return len(rref(g, p)[1])


def random_nonzero(rng, size, p: int) -> np.ndarray:
    return rng.integers(1, p, size=size, dtype=np.int64)


def random_elements(rng, size, p: int) -> np.ndarray:
    return rng.integers(0, p, size=size, dtype=np.int64)
