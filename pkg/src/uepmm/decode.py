"""Recovery of sub-products from received coded products.

A received product is ``sum_k g[k] * C_k`` over the flattened sub-product
index ``k = n*P + p``. ``C_k`` is recoverable exactly when the unit vector
``e_k`` lies in the row space of the stacked coefficient rows ``G``; the
decoder extracts every such block, even inside an otherwise underdetermined
system, and leaves the rest at zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from uepmm import gf

DEFAULT_RTOL = 1e-10


@dataclass
class ReceivedSet:
    rows: np.ndarray  # (r, N*P) coefficient rows
    products: np.ndarray  # (r, U, Q)
    times: np.ndarray
    deadline: float = np.inf

    @classmethod
    def from_results(cls, tasks, products, times, deadline=np.inf, lag: int = 0) -> "ReceivedSet":
        """Keep results with ``time < deadline``, minus the ``lag`` latest of those."""
        times = np.asarray(times, dtype=float)
        order = np.argsort(times, kind="stable")
        keep = [i for i in order if times[i] < deadline]
        if lag:
            keep = keep[: max(len(keep) - lag, 0)]
        if not tasks:
            return cls(np.zeros((0, 0)), np.zeros((0, 0, 0)), np.zeros(0), deadline)
        K = tasks[0].coeffs.size
        rows = np.array([tasks[i].coefficient_row() for i in keep]).reshape(len(keep), K)
        prods = np.array([products[i] for i in keep])
        return cls(rows, prods, times[keep], deadline)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class DecodeReport:
    recovered: np.ndarray  # bool (N, P)
    estimate: np.ndarray  # (N*U, P*Q)
    rank: int

    def recovered_by_class(self, profile) -> np.ndarray:
        """Number of recovered sub-products in each class 1..L."""
        return np.bincount(profile.class_map[self.recovered], minlength=profile.L + 1)[1:]

    def class_decoded(self, profile) -> np.ndarray:
        """Whether every sub-product of each class was recovered."""
        return self.recovered_by_class(profile) == profile.class_counts

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["n", "p", "recovered"])
            for (n, p), r in np.ndenumerate(self.recovered):
                out.writerow([n + 1, p + 1, int(r)])


def _numerical_rank(s: np.ndarray, rtol: float) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def matrix_rank(g, modulus=None, rtol: float = DEFAULT_RTOL) -> int:
    g = np.atleast_2d(np.asarray(g))
    if g.size == 0:
        return 0
    if modulus is not None:
        return gf.rank(g, modulus)
    return _numerical_rank(np.linalg.svd(g.astype(float), compute_uv=False), rtol)


def recoverable(rows, target, modulus=None, rtol: float = DEFAULT_RTOL, shape=None) -> bool:
    """True iff ``e_target`` is in the row space of ``rows``: rank(G) == rank([G; e_target]).

    ``target`` is a flat index or an ``(n, p)`` pair (then ``shape=(N, P)`` is needed
    unless the rows are given as ``N x P`` matrices).
    """
    rows = np.asarray(rows)
    if rows.ndim == 3:
        shape = rows.shape[1:]
        rows = rows.reshape(len(rows), -1)
    rows = np.atleast_2d(rows)
    K = rows.shape[1]
    k = target if np.isscalar(target) else int(np.ravel_multi_index(tuple(target), shape))
    e = np.zeros((1, K), dtype=rows.dtype)
    e[0, k] = 1
    if len(rows) == 0:
        return False
    return matrix_rank(rows, modulus, rtol) == matrix_rank(np.vstack([rows, e]), modulus, rtol)


def _components(touch: np.ndarray) -> list[np.ndarray]:
    """Groups of unknowns linked through shared rows (``touch`` is rows x unknowns)."""
    K = touch.shape[1]
    parent = list(range(K))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for row in touch:
        idx = np.flatnonzero(row)
        r0 = find(idx[0]) if idx.size else None
        for j in idx[1:]:
            rj = find(j)
            if rj != r0:
                parent[rj] = r0
    used = touch.any(axis=0)
    groups: dict[int, list[int]] = {}
    for j in np.flatnonzero(used):
        groups.setdefault(find(j), []).append(j)
    return [np.array(g) for g in groups.values()]


def _solve_component_real(g, y, rtol):
    u, s, vt = np.linalg.svd(g, full_matrices=True)
    r = _numerical_rank(s, rtol)
    null = vt[r:]
    dist = np.sqrt(np.sum(null**2, axis=0)) if len(null) else np.zeros(g.shape[1])
    ok = dist <= np.sqrt(rtol)
    vals = None
    if ok.any() and y is not None:
        # min-norm solution; exact on every unknown whose unit vector is in the row space
        inv_s = np.zeros_like(s)
        inv_s[:r] = 1.0 / s[:r]
        pinv = (vt[: len(s)].T * inv_s) @ u[:, : len(s)].T
        vals = pinv[ok] @ y
    return ok, vals, r


def _solve_component_prime(g, y, p):
    R, piv, rhs = gf.rref(g, p, y)
    ok = np.zeros(g.shape[1], dtype=bool)
    sel = []
    for i, j in enumerate(piv):
        if np.count_nonzero(R[i]) == 1:
            ok[j] = True
            sel.append(i)
    vals = None if rhs is None or not sel else rhs[sel]
    return ok, vals, len(piv)


def recoverable_mask(rows, modulus=None, rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """Flat boolean mask of recoverable unknowns for the stacked coefficient rows."""
    rows = np.atleast_2d(np.asarray(rows))
    K = rows.shape[1]
    mask = np.zeros(K, dtype=bool)
    if rows.shape[0] == 0:
        return mask
    for comp in _components(rows != 0):
        sub = rows[:, comp]
        sub = sub[(sub != 0).any(axis=1)]
        if modulus is None:
            ok, _, _ = _solve_component_real(sub.astype(float), None, rtol)
        else:
            ok, _, _ = _solve_component_prime(sub, None, modulus)
        mask[comp[ok]] = True
    return mask


def decode(received: ReceivedSet, profile, modulus=None, rtol: float = DEFAULT_RTOL, block_shape=None) -> DecodeReport:
    """Assemble the estimate from everything recoverable; all other blocks stay zero.

    ``profile`` is a ClassProfile or an ``(N, P)`` tuple. ``block_shape=(U, Q)``
    is only needed when nothing was received.
    """
    N, P = (profile.N, profile.P) if hasattr(profile, "N") else tuple(profile)
    if len(received) and received.products.ndim == 3:
        U, Q = received.products.shape[1:]
    elif block_shape is not None:
        U, Q = block_shape
    else:
        raise ValueError("block_shape is required when no products were received")
    dtype = float if modulus is None else np.int64
    blocks = np.zeros((N * P, U, Q), dtype=dtype)
    mask = np.zeros(N * P, dtype=bool)
    total_rank = 0
    if len(received):
        G = received.rows
        Y = received.products.reshape(len(received), -1)
        for comp in _components(G != 0):
            sel = (G[:, comp] != 0).any(axis=1)
            g, y = G[sel][:, comp], Y[sel]
            if modulus is None:
                ok, vals, r = _solve_component_real(g.astype(float), y.astype(float), rtol)
            else:
                ok, vals, r = _solve_component_prime(g, y, modulus)
            total_rank += r
            if ok.any():
                mask[comp[ok]] = True
                blocks[comp[ok]] = vals.reshape(-1, U, Q)
    estimate = blocks.reshape(N, P, U, Q).transpose(0, 2, 1, 3).reshape(N * U, P * Q)
    return DecodeReport(mask.reshape(N, P), estimate, total_rank)


def loss(C, C_hat) -> float:
    """Squared Frobenius norm of ``C - C_hat``."""
    d = np.asarray(C, dtype=float) - np.asarray(C_hat, dtype=float)
    return float(np.sum(d * d))


def normalized_loss(C, C_hat, normalizer: float | None = None) -> float:
    """``loss / ||C||_F^2`` (or ``loss / normalizer`` when given)."""
    den = loss(C, 0 * np.asarray(C, dtype=float)) if normalizer is None else float(normalizer)
    num = loss(C, C_hat)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return num / den


def stack_rows(tasks: Sequence) -> np.ndarray:
    return np.array([t.coefficient_row() for t in tasks])
