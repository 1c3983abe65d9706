"""Monte Carlo experiment engine: encode, straggle, decode, score.

Every trial draws from its own generator seeded by ``(seed, strategy, trial)``
so results do not depend on how trials are spread across processes, and
aggregation always runs in trial order.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any

import numpy as np

from uepmm import analytics, gf
from uepmm.analytics import VarianceProfile
from uepmm.blockmat import (
    ClassProfile,
    build_class_profile,
    classify_by_norm,
    partition,
    read_matrix,
    synthetic_matrices,
)
from uepmm.coding import STRATEGIES, WindowDistribution, check_strategy, make_tasks, worker_product
from uepmm.decode import ReceivedSet, decode, recoverable_mask
from uepmm.latency import ExponentialLatency

log = logging.getLogger(__name__)

CSV_SCHEMA = "v1"
Z95 = 1.959963984540054


def _merge_to_keys(merge) -> dict[str, int] | None:
    if merge is None:
        return None
    return {f"{a}-{b}": int(v) for (a, b), v in merge.items()}


def _keys_to_merge(merge) -> dict[tuple[int, int], int] | None:
    if merge is None:
        return None
    out = {}
    for k, v in merge.items():
        a, b = (int(x) for x in (k.split("-") if isinstance(k, str) else k))
        out[(a, b)] = int(v)
    return out


@dataclass
class ExperimentConfig:
    name: str = "sim"
    strategies: list[str] = dc_field(default_factory=lambda: ["NOW", "EW", "MDS"])
    # matrices: synthetic Gaussian blocks unless matrix_a/matrix_b are given
    U: int = 5
    Q: int = 5
    M: int = 100
    level_variances: list[float] = dc_field(default_factory=lambda: [10.0, 1.0, 0.1])
    row_levels: list[int] = dc_field(default_factory=lambda: [1, 2, 3])
    col_levels: list[int] = dc_field(default_factory=lambda: [1, 2, 3])
    row_variances: list[float] | None = None
    col_variances: list[float] | None = None
    matrix_a: str | None = None
    matrix_b: str | None = None
    N: int | None = None
    P: int | None = None
    S: int | None = None
    class_merge: dict[str, int] | None = None
    # coding
    gamma: list[float] = dc_field(default_factory=lambda: [0.35, 0.35, 0.3])
    window: str = "pair"
    windows: dict[str, str] = dc_field(default_factory=dict)
    sampling: str = "class"
    side_gammas: list[list[float]] | None = None
    field: str = "real"
    modulus: int = gf.MERSENNE31
    # workers and latency
    W: int = 40
    workers: dict[str, int] = dc_field(default_factory=dict)
    rate: float = 0.25
    scale: float = 1.0
    scales: dict[str, float] = dc_field(default_factory=dict)
    packet_lag: dict[str, int] = dc_field(default_factory=dict)
    # sweep
    sweep: str = "deadline"
    deadlines: list[float] = dc_field(default_factory=lambda: [round(0.2 * i, 10) for i in range(14)])
    received: list[int] = dc_field(default_factory=list)
    analytic: list[str] = dc_field(default_factory=list)
    loss_estimator: str = "energy"
    trials: int = 10_000
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_profile(cls, profile: ClassProfile, variances: VarianceProfile, **kw) -> "ExperimentConfig":
        base = dict(
            U=variances.U,
            Q=variances.Q,
            M=variances.M,
            row_levels=[int(x) for x in profile.row_levels],
            col_levels=[int(x) for x in profile.col_levels],
            row_variances=[float(x) for x in variances.row_variances],
            col_variances=[float(x) for x in variances.col_variances],
            S=profile.S,
            class_merge=_merge_to_keys(profile.class_of),
        )
        base.update(kw)
        return cls.from_dict(base)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.strategies = [check_strategy(s) for s in self.strategies]
        self.analytic = [check_strategy(s) for s in self.analytic]
        for s in self.analytic:
            if s not in ("NOW", "MDS"):
                raise ValueError(f"no closed form for {s}; analytic strategies: NOW, MDS")
        if self.sweep not in ("deadline", "received"):
            raise ValueError(f"sweep must be 'deadline' or 'received', got {self.sweep!r}")
        if self.field not in ("real", "prime"):
            raise ValueError(f"field must be 'real' or 'prime', got {self.field!r}")
        if self.loss_estimator not in ("energy", "empirical"):
            raise ValueError("loss_estimator must be 'energy' or 'empirical'")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if (self.matrix_a is None) != (self.matrix_b is None):
            raise ValueError("give both matrix_a and matrix_b or neither")
        profile = self.profile()
        WindowDistribution(tuple(self.gamma))
        if len(self.gamma) != profile.L and any(s in ("NOW", "EW") for s in self.strategies):
            raise ValueError(f"gamma has {len(self.gamma)} entries, the class profile has L={profile.L}")
        for s in self.strategies:
            w = self.workers_for(s)
            k = profile.N * profile.P
            if s == "UNCODED" and w != k:
                raise ValueError(f"UNCODED needs N*P = {k} workers, got {w}")
            if s == "BLOCKREP" and w % k:
                raise ValueError(f"BLOCKREP needs a worker count divisible by N*P = {k}, got {w}")
            if s == "MDS" and w < k:
                raise ValueError(f"MDS needs at least N*P = {k} workers, got {w}")
        if self.sweep == "received" and self.received:
            for s in self.strategies:
                if max(self.received) > self.workers_for(s):
                    raise ValueError(f"received count {max(self.received)} exceeds the {self.workers_for(s)} workers of {s}")

    # -- derived quantities ----------------------------------------------

    @property
    def prime(self) -> int | None:
        return self.modulus if self.field == "prime" else None

    @property
    def synthetic(self) -> bool:
        return self.matrix_a is None

    def levels_S(self) -> int:
        if self.S is not None:
            return int(self.S)
        return len(self.level_variances)

    def fixed_matrices(self):
        if self.synthetic:
            return None
        return read_matrix(self.matrix_a), read_matrix(self.matrix_b)

    def profile(self) -> ClassProfile:
        S = self.levels_S()
        merge = _keys_to_merge(self.class_merge)
        if self.synthetic:
            return build_class_profile(self.row_levels, self.col_levels, S, merge)
        A, B = self.fixed_matrices()
        pa = partition(A, A.shape[0] // self.U, self.U, "left")
        pb = partition(B, B.shape[1] // self.Q, self.Q, "right")
        return build_class_profile(classify_by_norm(pa, S), classify_by_norm(pb, S), S, merge)

    def variances(self) -> VarianceProfile | None:
        if not self.synthetic:
            return None
        if self.row_variances is not None:
            return VarianceProfile(tuple(self.row_variances), tuple(self.col_variances), self.U, self.Q, self.M)
        return VarianceProfile.from_levels(self.level_variances, self.row_levels, self.col_levels, self.U, self.Q, self.M)

    def workers_for(self, strategy: str) -> int:
        s = check_strategy(strategy)
        if s in self.workers:
            return int(self.workers[s])
        if self.synthetic:
            k = len(self.row_levels) * len(self.col_levels)
        else:
            k = int(self.N) * int(self.P)
        if s == "UNCODED":
            return k
        if s == "BLOCKREP":
            return 2 * k
        return self.W

    def latency_for(self, strategy: str) -> ExponentialLatency:
        return ExponentialLatency(self.rate, float(self.scales.get(check_strategy(strategy), self.scale)))

    def lag_for(self, strategy: str) -> int:
        return int(self.packet_lag.get(check_strategy(strategy), 0))

    def window_for(self, strategy: str) -> str:
        return self.windows.get(check_strategy(strategy), self.window)

    def xs(self) -> list:
        return list(self.deadlines if self.sweep == "deadline" else self.received)


# -- one trial ------------------------------------------------------------


@dataclass
class TrialResult:
    losses: np.ndarray  # normalized loss per x value
    recovered: np.ndarray  # (len(xs), L) recovered sub-products per class
    max_rel_error: float  # worst relative error over recovered blocks


@dataclass
class _Setup:
    profile: ClassProfile
    energy: np.ndarray  # (N, P) block energies used by the energy estimator
    normalizer: float
    fixed: tuple | None


def _setup(cfg: ExperimentConfig) -> _Setup:
    profile = cfg.profile()
    fixed = cfg.fixed_matrices()
    if fixed is None:
        var = cfg.variances()
        energy = var.block_energy()
    else:
        A, B = fixed
        pa = partition(A, profile.N, cfg.U, "left")
        pb = partition(B, profile.P, cfg.Q, "right")
        C = (pa.stacked()[:, None] @ pb.stacked()[None, :])
        energy = np.sum(C**2, axis=(2, 3))
    return _Setup(profile, energy, float(energy.sum()), fixed)


def trial_rng(seed: int, strategy: str, trial: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STRATEGIES.index(check_strategy(strategy)), int(trial)])


def _matrices(cfg, setup, rng):
    p = cfg.prime
    if setup.fixed is not None:
        A, B = setup.fixed
        if p is not None:
            A, B = gf.reduce(np.rint(A), p), gf.reduce(np.rint(B), p)
    elif p is not None:
        N, P = setup.profile.N, setup.profile.P
        A = gf.random_elements(rng, (N * cfg.U, cfg.M), p)
        B = gf.random_elements(rng, (cfg.M, P * cfg.Q), p)
    else:
        var = cfg.variances()
        A, B = synthetic_matrices(var.row_variances, var.col_variances, cfg.U, cfg.Q, cfg.M, rng)
    pa = partition(A, setup.profile.N, cfg.U, "left")
    pb = partition(B, setup.profile.P, cfg.Q, "right")
    return pa, pb


def _true_blocks(pa, pb, p):
    As, Bs = pa.stacked(), pb.stacked()
    if p is None:
        return As[:, None] @ Bs[None, :]
    return np.array([[gf.matmul(a, b, p) for b in Bs] for a in As])


def _score(cfg, setup, tasks, products, order, count, blocks, cache):
    """Decode the first ``count`` results in ``order`` and return (loss, recovered per class, rel err)."""
    if count in cache:
        return cache[count]
    prof = setup.profile
    p = cfg.prime
    sel = order[:count]
    if count:
        rows = np.array([tasks[i].coefficient_row() for i in sel])
        prods = np.array([products[i] for i in sel])
    else:
        rows = np.zeros((0, prof.N * prof.P))
        prods = np.zeros((0, cfg.U, cfg.Q))
    rep = decode(ReceivedSet(rows, prods, np.zeros(count)), prof, modulus=p, block_shape=(cfg.U, cfg.Q))
    mask = rep.recovered
    est = rep.estimate.reshape(prof.N, cfg.U, prof.P, cfg.Q).transpose(0, 2, 1, 3)
    err = 0.0
    if mask.any():
        if p is None:
            diff = np.linalg.norm((est - blocks)[mask], axis=(1, 2))
            ref = np.maximum(np.linalg.norm(blocks[mask], axis=(1, 2)), np.finfo(float).tiny)
            err = float(np.max(diff / ref))
        else:
            err = 0.0 if np.array_equal(est[mask], blocks[mask]) else float("inf")
    if cfg.loss_estimator == "energy" or p is not None:
        value = float(setup.energy[~mask].sum() / setup.normalizer)
    else:
        d = est - blocks
        value = float(np.sum(d * d) / setup.normalizer)
    out = (value, rep.recovered_by_class(prof), err)
    cache[count] = out
    return out


def run_trial(cfg: ExperimentConfig, strategy: str, trial: int, setup: _Setup | None = None) -> TrialResult:
    """One pipeline execution evaluated at every x value of the sweep.

    Deadline sweeps reuse one arrival sample for all deadlines; received
    sweeps decode nested prefixes of one random task order.
    """
    strategy = check_strategy(strategy)
    setup = setup or _setup(cfg)
    prof = setup.profile
    rng = trial_rng(cfg.seed, strategy, trial)
    W = cfg.workers_for(strategy)
    p = cfg.prime
    pa, pb = _matrices(cfg, setup, rng)
    tasks = make_tasks(
        strategy,
        prof,
        W,
        rng,
        gamma=cfg.gamma,
        window=cfg.window_for(strategy),
        sampling=cfg.sampling,
        side_gammas=cfg.side_gammas,
        modulus=p,
    )
    xs = cfg.xs()
    if cfg.sweep == "deadline":
        times = cfg.latency_for(strategy).sample(W, rng)
        order = np.argsort(times, kind="stable")
        lag = cfg.lag_for(strategy)
        counts = [max(int(np.sum(times < t)) - lag, 0) for t in xs]
    else:
        order = rng.permutation(W)
        counts = [int(n) for n in xs]
    need = max(counts, default=0)
    blocks = _true_blocks(pa, pb, p)
    sel = [int(i) for i in order[:need]]
    if p is None and sel:
        # same value as worker_product, computed as one matmul over the true blocks
        G = np.array([tasks[i].coefficient_row() for i in sel])
        Y = (G @ blocks.reshape(len(G[0]), -1)).reshape(len(sel), cfg.U, cfg.Q)
        products = dict(zip(sel, Y))
    else:
        products = {i: worker_product(tasks[i], pa, pb) for i in sel}
    cache: dict = {}
    scored = [_score(cfg, setup, tasks, products, order, c, blocks, cache) for c in counts]
    losses = np.array([s[0] for s in scored])
    recovered = np.array([s[1] for s in scored]).reshape(len(xs), prof.L)
    err = max((s[2] for s in scored), default=0.0)
    return TrialResult(losses, recovered, err)


def _chunk(args):
    cfg, strategy, start, stop = args
    setup = _setup(cfg)
    out = np.empty((stop - start, len(cfg.xs())))
    worst = 0.0
    for i, trial in enumerate(range(start, stop)):
        res = run_trial(cfg, strategy, trial, setup)
        out[i] = res.losses
        worst = max(worst, res.max_rel_error)
    return out, worst


def _chunks(trials: int, threads: int):
    n = max(1, min(threads, trials))
    bounds = np.linspace(0, trials, n + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def trial_losses(cfg: ExperimentConfig, strategy: str) -> tuple[np.ndarray, float]:
    """``(trials x len(xs))`` per-trial normalized losses and the worst decode error seen."""
    jobs = [(cfg, strategy, a, b) for a, b in _chunks(cfg.trials, cfg.threads)]
    if len(jobs) == 1:
        results = [_chunk(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            results = list(pool.map(_chunk, jobs))
    losses = np.concatenate([r[0] for r in results], axis=0)
    worst = max(r[1] for r in results)
    if worst > 1e-4:  # ill-conditioned real-field systems lose a few digits
        log.warning("%s: recovered blocks deviate from the true product (max relative error %.3g)", strategy, worst)
    return losses, worst


def deadline_losses(cfg: ExperimentConfig, strategy: str) -> np.ndarray:
    return trial_losses(cfg.replace(sweep="deadline"), strategy)[0]


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(Z95 * v.std(ddof=1) / np.sqrt(v.size))


def received_loss_mc(strategy, profile, variances, gamma, n_received: int, trials: int = 10_000, seed: int = 0, **kw):
    cfg = ExperimentConfig.from_profile(
        profile,
        variances,
        strategies=[strategy],
        gamma=list(np.asarray(gamma, dtype=float)),
        sweep="received",
        received=[int(n_received)],
        trials=trials,
        seed=seed,
        **kw,
    )
    losses, _ = trial_losses(cfg, strategy)
    return mean_ci(losses[:, 0])


def class_decoding_mc(
    profile: ClassProfile,
    gamma,
    n_received: int,
    trials: int,
    seed: int = 0,
    strategy: str = "NOW",
    window: str = "pair",
    modulus: int | None = None,
    sampling: str = "class",
) -> np.ndarray:
    """Fraction of trials in which each class is fully recovered from ``n_received`` results.

    Only coefficient rows are simulated; the products never influence recoverability.
    """
    strategy = check_strategy(strategy)
    hits = np.zeros(profile.L)
    counts = profile.class_counts
    for trial in range(trials):
        rng = trial_rng(seed, strategy, trial)
        tasks = make_tasks(strategy, profile, n_received, rng, gamma=gamma, window=window, sampling=sampling, modulus=modulus)
        if not tasks:
            hits += counts == 0
            continue
        mask = recoverable_mask(np.array([t.coefficient_row() for t in tasks]), modulus).reshape(profile.N, profile.P)
        got = np.bincount(profile.class_map[mask], minlength=profile.L + 1)[1:]
        hits += got == counts
    return hits / trials


# -- sweeps ---------------------------------------------------------------


def _analytic(cfg: ExperimentConfig, strategy: str, x) -> float:
    prof = cfg.profile()
    var = cfg.variances()
    if cfg.sweep == "received":
        return analytics.loss_vs_received(strategy, prof, var, cfg.gamma, int(x))[0]
    lat = cfg.latency_for(strategy)
    W = cfg.workers_for(strategy)
    lag = cfg.lag_for(strategy)
    if strategy == "NOW":
        return analytics.expected_loss_now(cfg.gamma, prof, var, lat, W, float(x), lag)[1]
    return analytics.expected_loss_mds(prof.N * prof.P, lat, W, float(x), lag)


def run_sweep(cfg: ExperimentConfig) -> list[tuple]:
    """Rows ``(x, strategy, value, ci)`` in strategy-then-x order."""
    rows = []
    for s in cfg.strategies:
        if s in cfg.analytic:
            if not cfg.synthetic and s == "NOW":
                raise ValueError("the closed-form NOW loss needs a synthetic variance profile")
            rows += [(x, s, _analytic(cfg, s, x), 0.0) for x in cfg.xs()]
            continue
        losses, _ = trial_losses(cfg, s)
        for j, x in enumerate(cfg.xs()):
            m, ci = mean_ci(losses[:, j])
            rows.append((x, s, m, ci))
    return rows


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_sweep_csv(path, cfg: ExperimentConfig, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xname = "t" if cfg.sweep == "deadline" else "n_received"
    with open(path, "w", newline="") as fh:
        fh.write(f"# uepmm {cfg.sweep}-sweep {CSV_SCHEMA}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([xname, "strategy", "value", "ci"])
        for x, s, v, ci in rows:
            out.writerow([_fmt(x), s, _fmt(v), _fmt(ci)])
    return path
