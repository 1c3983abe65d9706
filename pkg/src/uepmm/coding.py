"""Random-linear-code encoders for the workers' coded operands.

Every task is described by its coefficient matrix ``g`` of shape ``(N, P)``:
the worker's returned product equals ``sum_{n,p} g[n, p] * C_np``. Two window
domains are supported:

``"pair"``
    Two-sided windows. A (row level, column level) pair is picked and the
    worker gets ``W_A = sum_n alpha_n A_n`` and ``W_B = sum_p beta_p B_p``, so
    ``g = outer(alpha, beta)`` is rank one. NOW uses exactly the blocks of the
    two levels, EW every block of that level or a more important one.

``"class"``
    Windows over product classes. NOW combines the sub-products of class
    ``l``; EW those of classes ``1..l``, each with its own random coefficient.
    The worker gets the fat matrix ``[g_1 A_n1, g_2 A_n2, ...]`` and the tall
    matrix ``[B_p1; B_p2; ...]`` so a single product yields the combination.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from uepmm import gf
from uepmm.blockmat import BlockPartition, ClassProfile

STRATEGIES = ("NOW", "EW", "MDS", "UNCODED", "BLOCKREP")
WINDOW_DOMAINS = ("pair", "class")
SAMPLING_MODES = ("class", "per_side")


class EmptyWindowError(ValueError):
    pass


def check_strategy(name: str) -> str:
    s = str(name).upper().replace("-", "").replace("_", "")
    aliases = {"NOWUEP": "NOW", "EWUEP": "EW", "BLCKREP": "BLOCKREP", "BLOCKREPETITION": "BLOCKREP"}
    s = aliases.get(s, s)
    if s not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; valid names: {', '.join(STRATEGIES)}")
    return s


@dataclass(frozen=True)
class WindowDistribution:
    """Window selection probabilities ``Gamma_1..Gamma_L``."""

    gamma: tuple[float, ...]

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 1 or g.size == 0:
            raise ValueError("gamma must be a non-empty vector")
        if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-12:
            raise ValueError(f"gamma must be a probability vector, got {tuple(g)}")
        object.__setattr__(self, "gamma", tuple(float(x) for x in g))

    @property
    def L(self) -> int:
        return len(self.gamma)

    @property
    def probs(self) -> np.ndarray:
        return np.asarray(self.gamma)

    def sample(self, rng, size=None):
        """1-based class index (or array of them)."""
        return rng.choice(self.L, size=size, p=self.probs) + 1


@dataclass
class CodedTask:
    worker: int
    strategy: str
    coeffs: np.ndarray
    cls: int | None = None
    pair: tuple[int, int] | None = None
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    modulus: int | None = None

    @property
    def rank_one(self) -> bool:
        return self.alpha is not None

    def coefficient_row(self) -> np.ndarray:
        """Flattened ``g`` with ``g[n*P + p]`` the weight of ``C_np``."""
        return self.coeffs.ravel()

    def support(self) -> list[tuple[int, int]]:
        return [tuple(int(i) for i in ix) for ix in np.argwhere(self.coeffs != 0)]


def task_to_coefficient_row(task: CodedTask) -> np.ndarray:
    return task.coefficient_row()


def _draw(rng, size, modulus):
    if modulus is None:
        return rng.uniform(-1.0, 1.0, size=size)
    return gf.random_nonzero(rng, size, modulus)


def _outer(alpha, beta, modulus):
    if modulus is None:
        return np.outer(alpha, beta)
    return (np.outer(alpha, beta) % modulus).astype(np.int64)


def _zeros(shape, modulus):
    return np.zeros(shape, dtype=float if modulus is None else np.int64)


def sample_window(
    dist: WindowDistribution,
    profile: ClassProfile,
    rng,
    mode: str = "class",
    side_gammas: tuple[Sequence[float], Sequence[float]] | None = None,
) -> tuple[int, tuple[int, int]]:
    """Pick a product class and one of its (row level, column level) pairs.

    In ``"class"`` mode the class comes from ``dist`` and the pair is drawn
    among the class's sub-product-bearing pairs with probability proportional
    to their sub-product counts. In ``"per_side"`` mode the row and column
    levels are drawn independently from ``side_gammas`` and the class follows.
    """
    if mode == "per_side":
        if side_gammas is None:
            raise ValueError("per_side sampling needs (row gamma, column gamma)")
        ga, gb = (np.asarray(g, dtype=float) for g in side_gammas)
        a = int(rng.choice(len(ga), p=ga)) + 1
        b = int(rng.choice(len(gb), p=gb)) + 1
        return profile.pair_class(a, b), (a, b)
    if mode != "class":
        raise ValueError(f"unknown sampling mode {mode!r}; valid: {SAMPLING_MODES}")
    l = int(dist.sample(rng))
    pairs = profile.pairs_in_class(l)
    if not pairs:
        raise EmptyWindowError(f"class {l} holds no sub-products")
    if len(pairs) == 1:
        return l, pairs[0][0]
    w = np.array([c for _, c in pairs], dtype=float)
    return l, pairs[int(rng.choice(len(pairs), p=w / w.sum()))][0]


def _rank_one_task(profile, pair, rng, modulus, worker, strategy, expanding):
    a, b = pair
    if not (1 <= a <= profile.S and 1 <= b <= profile.S):
        raise ValueError(f"level pair {pair} outside 1..{profile.S}")
    rows = profile.row_levels <= a if expanding else profile.row_levels == a
    cols = profile.col_levels <= b if expanding else profile.col_levels == b
    if not rows.any() or not cols.any():
        raise EmptyWindowError(f"{strategy} window for level pair {pair} is empty")
    alpha = _zeros(profile.N, modulus)
    beta = _zeros(profile.P, modulus)
    alpha[rows] = _draw(rng, int(rows.sum()), modulus)
    beta[cols] = _draw(rng, int(cols.sum()), modulus)
    return CodedTask(
        worker, strategy, _outer(alpha, beta, modulus), profile.pair_class(a, b), (a, b), alpha, beta, modulus
    )


def encode_now(profile: ClassProfile, pair, rng, modulus=None, worker: int = 0) -> CodedTask:
    """NOW task: alpha on the row blocks of level ``pair[0]``, beta on column level ``pair[1]``."""
    return _rank_one_task(profile, pair, rng, modulus, worker, "NOW", expanding=False)


def encode_ew(profile: ClassProfile, pair, rng, modulus=None, worker: int = 0) -> CodedTask:
    """EW task: alpha on row levels ``<= pair[0]``, beta on column levels ``<= pair[1]``."""
    return _rank_one_task(profile, pair, rng, modulus, worker, "EW", expanding=True)


def encode_class_window(profile: ClassProfile, strategy: str, l: int, rng, modulus=None, worker: int = 0) -> CodedTask:
    """Class-domain window: generic combination of sub-products in class ``l`` (NOW) or ``<= l`` (EW)."""
    strategy = check_strategy(strategy)
    if strategy == "NOW":
        mask = profile.class_map == l
    elif strategy == "EW":
        mask = profile.class_map <= l
    else:
        raise ValueError("class windows exist only for NOW and EW")
    if not mask.any():
        raise EmptyWindowError(f"{strategy} window for class {l} is empty")
    g = _zeros(mask.shape, modulus)
    g[mask] = _draw(rng, int(mask.sum()), modulus)
    return CodedTask(worker, strategy, g, l, None, None, None, modulus)


def encode_mds(N: int, P: int, rng, modulus=None, worker: int = 0) -> CodedTask:
    """Dense random rank-one code; any ``N*P`` tasks decode everything with high probability."""
    alpha = _draw(rng, N, modulus)
    beta = _draw(rng, P, modulus)
    return CodedTask(worker, "MDS", _outer(alpha, beta, modulus), None, None, alpha, beta, modulus)


def _unit_task(N, P, idx, worker, strategy, modulus):
    n, p = divmod(idx, P)
    alpha = _zeros(N, modulus)
    beta = _zeros(P, modulus)
    alpha[n] = 1
    beta[p] = 1
    return CodedTask(worker, strategy, _outer(alpha, beta, modulus), None, None, alpha, beta, modulus)


def encode_uncoded(N: int, P: int, worker: int, modulus=None) -> CodedTask:
    if not 0 <= worker < N * P:
        raise ValueError(f"uncoded needs exactly N*P = {N * P} workers; worker {worker} out of range")
    return _unit_task(N, P, worker, worker, "UNCODED", modulus)


def encode_blockrep(N: int, P: int, W: int, worker: int, modulus=None) -> CodedTask:
    """Round-robin replication: worker ``w`` computes sub-product ``w mod N*P``."""
    if W % (N * P):
        raise ValueError(f"block repetition needs W divisible by N*P = {N * P}, got W={W}")
    return _unit_task(N, P, worker % (N * P), worker, "BLOCKREP", modulus)


def make_tasks(
    strategy: str,
    profile: ClassProfile,
    W: int,
    rng,
    gamma: WindowDistribution | Sequence[float] | None = None,
    window: str = "pair",
    sampling: str = "class",
    side_gammas=None,
    modulus: int | None = None,
) -> list[CodedTask]:
    """Encode ``W`` worker tasks for one strategy, consuming ``rng`` in worker order."""
    strategy = check_strategy(strategy)
    N, P = profile.N, profile.P
    if strategy == "UNCODED":
        if W != N * P:
            raise ValueError(f"uncoded needs W = N*P = {N * P}, got {W}")
        return [encode_uncoded(N, P, w, modulus) for w in range(W)]
    if strategy == "BLOCKREP":
        return [encode_blockrep(N, P, W, w, modulus) for w in range(W)]
    if strategy == "MDS":
        return [encode_mds(N, P, rng, modulus, w) for w in range(W)]
    if window not in WINDOW_DOMAINS:
        raise ValueError(f"unknown window domain {window!r}; valid: {WINDOW_DOMAINS}")
    if gamma is None:
        raise ValueError(f"{strategy} needs a window distribution")
    dist = gamma if isinstance(gamma, WindowDistribution) else WindowDistribution(tuple(gamma))
    if dist.L != profile.L and sampling == "class":
        raise ValueError(f"gamma has {dist.L} entries but the profile has L={profile.L} classes")
    if window == "class":
        return _class_window_tasks(strategy, profile, W, rng, dist, modulus)
    if sampling == "per_side":
        pairs = [sample_window(dist, profile, rng, sampling, side_gammas)[1] for _ in range(W)]
    else:
        pairs = sample_pairs(dist, profile, W, rng)
    enc = encode_now if strategy == "NOW" else encode_ew
    return [enc(profile, pair, rng, modulus, w) for w, pair in enumerate(pairs)]


def sample_pairs(dist: WindowDistribution, profile: ClassProfile, W: int, rng) -> list[tuple[int, int]]:
    """``W`` independent class-mode draws of :func:`sample_window`, vectorized (pairs only)."""
    classes = dist.sample(rng, size=W)
    u = rng.random(W)
    table = {}
    for l in np.unique(classes):
        pairs = profile.pairs_in_class(int(l))
        if not pairs:
            raise EmptyWindowError(f"class {l} holds no sub-products")
        cum = np.cumsum([c for _, c in pairs], dtype=float)
        table[int(l)] = ([p for p, _ in pairs], cum / cum[-1])
    out = []
    for l, x in zip(classes, u):
        pairs, cum = table[int(l)]
        out.append(pairs[min(int(np.searchsorted(cum, x, side="right")), len(pairs) - 1)])
    return out


def _class_window_tasks(strategy, profile, W, rng, dist, modulus) -> list[CodedTask]:
    classes = dist.sample(rng, size=W)
    masks = {}
    for l in np.unique(classes):
        mask = profile.class_map == l if strategy == "NOW" else profile.class_map <= l
        if not mask.any():
            raise EmptyWindowError(f"{strategy} window for class {l} is empty")
        masks[int(l)] = mask
    support = np.array([masks[int(l)] for l in classes])
    G = _zeros(support.shape, modulus)
    G[support] = _draw(rng, int(support.sum()), modulus)
    return [CodedTask(w, strategy, G[w], int(l), None, None, None, modulus) for w, l in enumerate(classes)]


def worker_operands(task: CodedTask, part_a: BlockPartition, part_b: BlockPartition):
    """The fat ``W_A`` and tall ``W_B`` a worker receives for ``task``."""
    p = task.modulus
    As, Bs = part_a.stacked(), part_b.stacked()
    if task.rank_one:
        if p is None:
            return np.tensordot(task.alpha, As, axes=1), np.tensordot(task.beta, Bs, axes=1)
        wa = np.zeros(As.shape[1:], dtype=np.int64)
        for n in np.flatnonzero(task.alpha):
            wa = gf.scale_add(wa, task.alpha[n], As[n], p)
        wb = np.zeros(Bs.shape[1:], dtype=np.int64)
        for j in np.flatnonzero(task.beta):
            wb = gf.scale_add(wb, task.beta[j], Bs[j], p)
        return wa, wb
    idx = np.argwhere(task.coeffs != 0)
    if p is None:
        wa = np.concatenate([task.coeffs[n, j] * As[n] for n, j in idx], axis=1)
    else:
        wa = np.concatenate([(int(task.coeffs[n, j]) * As[n]) % p for n, j in idx], axis=1)
    wb = np.concatenate([Bs[j] for _, j in idx], axis=0)
    return wa, wb


def worker_product(task: CodedTask, part_a: BlockPartition, part_b: BlockPartition) -> np.ndarray:
    wa, wb = worker_operands(task, part_a, part_b)
    if task.modulus is None:
        return wa @ wb
    return gf.matmul(wa, wb, task.modulus)


def write_task_log(path, tasks: Sequence[CodedTask]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["worker", "strategy", "class", "pair", "support"])
        for t in tasks:
            pair = "" if t.pair is None else f"{t.pair[0]}-{t.pair[1]}"
            support = ";".join(f"{n + 1}:{p + 1}" for n, p in t.support())
            out.writerow([t.worker, t.strategy, "" if t.cls is None else t.cls, pair, support])
