"""Block partitioning, norm-based importance levels and product classes."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

LEFT = "left"
RIGHT = "right"


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BlockPartition:
    """A matrix cut into equal row blocks (left operand) or column blocks (right).

    For ``role == "left"`` the matrix is ``A`` of shape ``(N*U, M)`` and block
    ``n`` is ``A[n*U:(n+1)*U, :]``. For ``role == "right"`` it is ``B`` of shape
    ``(M, P*Q)`` and block ``p`` is ``B[:, p*Q:(p+1)*Q]``.
    """

    elements: np.ndarray
    nblocks: int
    block_size: int
    role: str = LEFT

    @property
    def inner(self) -> int:
        return self.elements.shape[1] if self.role == LEFT else self.elements.shape[0]

    # Short aliases: N/U for the left operand, P/Q for the right one.
    @property
    def N(self) -> int:
        return self.nblocks

    P = N

    @property
    def U(self) -> int:
        return self.block_size

    Q = U

    @property
    def M(self) -> int:
        return self.inner

    def block(self, i: int) -> np.ndarray:
        s = slice(i * self.block_size, (i + 1) * self.block_size)
        return self.elements[s, :] if self.role == LEFT else self.elements[:, s]

    def blocks(self) -> list[np.ndarray]:
        return [self.block(i) for i in range(self.nblocks)]

    def norms(self) -> np.ndarray:
        """Frobenius norm of every block."""
        if self.role == LEFT:
            b = self.elements.reshape(self.nblocks, self.block_size, -1)
        else:
            b = self.elements.reshape(self.inner, self.nblocks, self.block_size).transpose(1, 0, 2)
        return np.sqrt(np.sum(np.abs(b.astype(float)) ** 2, axis=(1, 2)))

    def stacked(self) -> np.ndarray:
        """Blocks as an array of shape ``(nblocks, U, M)`` or ``(nblocks, M, Q)``."""
        if self.role == LEFT:
            return self.elements.reshape(self.nblocks, self.block_size, self.inner)
        return self.elements.reshape(self.inner, self.nblocks, self.block_size).transpose(1, 0, 2)

    def assemble(self, blocks: Sequence[np.ndarray] | None = None) -> np.ndarray:
        blocks = self.blocks() if blocks is None else blocks
        return np.concatenate(list(blocks), axis=0 if self.role == LEFT else 1)


def partition(matrix, nblocks: int, block_size: int, role: str = LEFT) -> BlockPartition:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got shape {matrix.shape}")
    if role not in (LEFT, RIGHT):
        raise ValueError(f"role must be {LEFT!r} or {RIGHT!r}, got {role!r}")
    if nblocks < 1 or block_size < 1:
        raise DimensionMismatchError("block count and block size must be positive")
    axis = 0 if role == LEFT else 1
    if matrix.shape[axis] != nblocks * block_size:
        what = "rows" if role == LEFT else "columns"
        raise DimensionMismatchError(
            f"{role} matrix has {matrix.shape[axis]} {what}, "
            f"expected {nblocks} blocks x {block_size} = {nblocks * block_size}"
        )
    return BlockPartition(matrix, nblocks, block_size, role)


def classify_by_norm(part: BlockPartition | np.ndarray, S: int, thresholds: Sequence[float] | None = None) -> np.ndarray:
    """Assign each block an importance level in ``1..S`` (1 = largest norm).

    Without ``thresholds`` the blocks are ranked by descending Frobenius norm
    (stable in block index) and cut into ``S`` equal-count buckets. With
    ``thresholds`` (``S-1`` strictly decreasing positive values) a block gets
    level ``1 + #{thresholds > norm}``. Zero-norm blocks always land in level ``S``.

    ``part`` may also be a plain vector of block norms.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    norms = part.norms() if isinstance(part, BlockPartition) else np.asarray(part, dtype=float)
    n = len(norms)
    if thresholds is not None:
        thr = np.asarray(thresholds, dtype=float)
        if len(thr) != S - 1:
            raise ValueError(f"need {S - 1} thresholds for S={S}, got {len(thr)}")
        if np.any(thr <= 0) or np.any(np.diff(thr) >= 0):
            raise ValueError("thresholds must be positive and strictly decreasing")
        levels = 1 + np.sum(thr[None, :] > norms[:, None], axis=1)
    else:
        order = np.argsort(-norms, kind="stable")
        levels = np.empty(n, dtype=int)
        levels[order] = 1 + (np.arange(n) * S) // max(n, 1)
    levels = np.where(norms == 0, S, levels)
    return levels.astype(int)


def three_level_class_merge() -> dict[tuple[int, int], int]:
    """Three-level grouping: high x high, high x medium, everything else."""
    merge = {}
    for a in range(1, 4):
        for b in range(a, 4):
            merge[(a, b)] = 1 if (a, b) == (1, 1) else 2 if (a, b) == (1, 2) else 3
    return merge


def unordered_class_merge(S: int) -> dict[tuple[int, int], int]:
    """One class per unordered level pair, ordered by (a + b, min(a, b))."""
    pairs = sorted(((a, b) for a in range(1, S + 1) for b in range(a, S + 1)), key=lambda ab: (ab[0] + ab[1], ab[0]))
    return {ab: i + 1 for i, ab in enumerate(pairs)}


def default_class_merge(S: int) -> dict[tuple[int, int], int]:
    return three_level_class_merge() if S == 3 else unordered_class_merge(S)


def _key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


@dataclass
class ClassProfile:
    S: int
    row_levels: np.ndarray
    col_levels: np.ndarray
    class_of: dict[tuple[int, int], int]
    L: int
    class_counts: np.ndarray
    # (N, P) matrix of 1-based class indices for each sub-product
    class_map: np.ndarray
    class_variance_pairs: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.row_levels)

    @property
    def P(self) -> int:
        return len(self.col_levels)

    def level_counts(self, side: str = "rows") -> np.ndarray:
        """``n_A^s`` (rows) or ``n_B^s`` (cols) for s = 1..S."""
        lv = self.row_levels if side == "rows" else self.col_levels
        return np.bincount(lv, minlength=self.S + 1)[1:]

    def pair_class(self, a: int, b: int) -> int:
        return self.class_of[_key(a, b)]

    def pairs_in_class(self, l: int) -> list[tuple[tuple[int, int], int]]:
        """Ordered ``(row level, col level)`` pairs of class ``l`` that carry sub-products, with counts."""
        na, nb = self.level_counts("rows"), self.level_counts("cols")
        out = []
        for a in range(1, self.S + 1):
            for b in range(1, self.S + 1):
                if self.pair_class(a, b) == l and na[a - 1] * nb[b - 1] > 0:
                    out.append(((a, b), int(na[a - 1] * nb[b - 1])))
        return out

    def is_composite(self, l: int) -> bool:
        return len(self.pairs_in_class(l)) > 1


def build_class_profile(
    row_levels,
    col_levels,
    S: int,
    class_merge: Mapping[tuple[int, int], int] | None = None,
    row_variances=None,
    col_variances=None,
) -> ClassProfile:
    row_levels = np.asarray(row_levels, dtype=int)
    col_levels = np.asarray(col_levels, dtype=int)
    for lv in (row_levels, col_levels):
        if lv.size and (lv.min() < 1 or lv.max() > S):
            raise ValueError(f"levels must lie in 1..{S}")
    merge = default_class_merge(S) if class_merge is None else {_key(*k): int(v) for k, v in class_merge.items()}
    missing = [(a, b) for a in range(1, S + 1) for b in range(a, S + 1) if (a, b) not in merge]
    if missing:
        raise ValueError(f"class merge is incomplete, no class for level pairs {missing}")
    L = max(merge.values())
    if sorted(set(merge.values())) != list(range(1, L + 1)):
        raise ValueError("class indices must cover 1..L without gaps")
    class_map = np.array([[merge[_key(a, b)] for b in col_levels] for a in row_levels], dtype=int).reshape(
        len(row_levels), len(col_levels)
    )
    counts = np.bincount(class_map.ravel(), minlength=L + 1)[1:]
    var_pairs = None
    if row_variances is not None and col_variances is not None:
        ra = np.asarray(row_variances, dtype=float)
        cb = np.asarray(col_variances, dtype=float)
        var_pairs = np.stack(np.broadcast_arrays(ra[:, None], cb[None, :]), axis=-1)
    return ClassProfile(S, row_levels, col_levels, merge, L, counts, class_map, var_pairs)


def norm_permutation(matrix, axis: str | int = "rows") -> tuple[np.ndarray, np.ndarray]:
    """Permutation sorting rows (or columns) by descending Euclidean norm, and its inverse.

    Ties keep their original order. ``matrix[perm]`` (or ``matrix[:, perm]``) is
    sorted; indexing the sorted matrix with ``inv`` restores the original.
    """
    m = np.asarray(matrix, dtype=float)
    ax = {"rows": 0, "row": 0, 0: 0, "columns": 1, "cols": 1, "col": 1, 1: 1}[axis]
    norms = np.linalg.norm(m, axis=1 - ax)
    perm = np.argsort(-norms, kind="stable")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return perm, inv


def synthetic_matrices(row_variances, col_variances, U: int, Q: int, M: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean Gaussian ``A`` (NU x M) and ``B`` (M x PQ) with per-block variances."""
    sa = np.sqrt(np.repeat(np.asarray(row_variances, dtype=float), U))
    sb = np.sqrt(np.repeat(np.asarray(col_variances, dtype=float), Q))
    A = rng.standard_normal((len(sa), M)) * sa[:, None]
    B = rng.standard_normal((M, len(sb))) * sb[None, :]
    return A, B


# --- matrix files ---------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def read_matrix(path) -> np.ndarray:
    """Load a ``.csv`` (one row per line) or raw ``.bin`` float64 matrix."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != rows * cols:
        raise ValueError(f"{path}: header says {rows}x{cols} but body holds {body.size} values")
    return body.reshape(rows, cols).astype(float)


def write_matrix(path, matrix) -> None:
    path = Path(path)
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if path.suffix.lower() == ".csv":
        np.savetxt(path, m, delimiter=",", fmt="%.17g")
    else:
        path.write_bytes(_HEADER.pack(*m.shape) + m.astype("<f8").tobytes())
