"""Closed-form decoding probabilities and expected losses for NOW-UEP and MDS.

Time-domain curves average a conditional loss over the binomial number of
results received by the deadline. ``packet_lag`` evaluates the conditional
loss at ``max(w - lag, 0)`` received results instead of ``w``; ``lag=1`` is the
convention behind the reference UEP time curves (see README).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from uepmm.blockmat import ClassProfile
from uepmm.latency import arrival_pmf


@dataclass(frozen=True)
class VarianceProfile:
    """Per-block entry variances of synthetic ``A`` (rows) and ``B`` (columns)."""

    row_variances: tuple[float, ...]
    col_variances: tuple[float, ...]
    U: int
    Q: int
    M: int

    def __post_init__(self):
        for v in (self.row_variances, self.col_variances):
            if any(x <= 0 for x in v):
                raise ValueError("variances must be positive")

    @classmethod
    def from_levels(cls, level_variances, row_levels, col_levels, U, Q, M) -> "VarianceProfile":
        lv = np.asarray(level_variances, dtype=float)
        return cls(
            tuple(lv[np.asarray(row_levels) - 1]), tuple(lv[np.asarray(col_levels) - 1]), int(U), int(Q), int(M)
        )

    def block_energy(self) -> np.ndarray:
        """``E||C_np||_F^2 = M U Q var(A_n) var(B_p)`` as an ``(N, P)`` array."""
        return self.M * self.U * self.Q * np.outer(self.row_variances, self.col_variances)

    def total_energy(self) -> float:
        return float(self.block_energy().sum())


def class_energy(variances: VarianceProfile, profile: ClassProfile) -> np.ndarray:
    """Expected energy of every class, summed over its sub-products."""
    e = variances.block_energy()
    return np.array([e[profile.class_map == l].sum() for l in range(1, profile.L + 1)])


def now_decoding_bound(gamma, k, N: int) -> np.ndarray:
    """Upper bound on the probability that NOW class ``l`` decodes from ``N`` results.

    The multinomial sum of ``P(n) * 1(n_l >= k_l)`` only depends on the
    marginal of ``n_l``, which is ``Binomial(N, Gamma_l)``.
    """
    gamma = np.asarray(gamma, dtype=float)
    k = np.asarray(k, dtype=int)
    if N < 0:
        raise ValueError("N must be non-negative")
    return binom.sf(k - 1, N, gamma)


def conditional_loss_now(gamma, k, energy, n: int) -> float:
    """Normalized expected loss given ``n`` received results."""
    energy = np.asarray(energy, dtype=float)
    return float(np.sum((1.0 - now_decoding_bound(gamma, k, n)) * energy) / energy.sum())


def _lagged(values: np.ndarray, lag: int) -> np.ndarray:
    """``out[w] = values[max(w - lag, 0)]``."""
    idx = np.maximum(np.arange(len(values)) - lag, 0)
    return values[idx]


def expected_loss_now(gamma, profile: ClassProfile, variances: VarianceProfile, latency, W: int, t: float, packet_lag: int = 0):
    """Expected loss and normalized loss of NOW-UEP at deadline ``t``."""
    energy = class_energy(variances, profile)
    cond = np.array([conditional_loss_now(gamma, profile.class_counts, energy, w) for w in range(W + 1)])
    pmf = arrival_pmf(latency, W, t)
    normalized = float(pmf @ _lagged(cond, packet_lag))
    return normalized * energy.sum(), normalized


def expected_loss_mds(k: int, latency, W: int, t: float, packet_lag: int = 0) -> float:
    """Normalized loss of an MDS code needing ``k`` results: ``P(N(t) - lag < k)``."""
    if k > W:
        raise ValueError(f"MDS threshold k={k} exceeds W={W}")
    pmf = arrival_pmf(latency, W, t)
    cond = (np.arange(W + 1) < k).astype(float)
    return float(pmf @ _lagged(cond, packet_lag))


def loss_vs_received(strategy: str, profile: ClassProfile, variances: VarianceProfile, gamma, n_received: int, **mc):
    """Normalized loss after exactly ``n_received`` results, as ``(value, ci_halfwidth)``.

    NOW and MDS are exact; anything else is estimated by Monte Carlo, with
    ``mc`` forwarded to :func:`uepmm.simrun.received_loss_mc`.
    """
    from uepmm.coding import check_strategy

    s = check_strategy(strategy)
    if n_received < 0:
        raise ValueError("n_received must be non-negative")
    if s == "NOW":
        energy = class_energy(variances, profile)
        return conditional_loss_now(gamma, profile.class_counts, energy, n_received), 0.0
    if s == "MDS":
        return (1.0 if n_received < profile.N * profile.P else 0.0), 0.0
    from uepmm import simrun

    return simrun.received_loss_mc(s, profile, variances, gamma, n_received, **mc)


def ew_expected_loss_mc(gamma, profile: ClassProfile, variances: VarianceProfile, latency, W: int, t: float, trials: int, seed: int = 0, **kw):
    """Monte Carlo normalized EW-UEP loss at deadline ``t`` with its 95% half-width."""
    from uepmm import simrun

    cfg = simrun.ExperimentConfig.from_profile(
        profile,
        variances,
        strategies=["EW"],
        gamma=list(np.asarray(gamma, dtype=float)),
        W=W,
        rate=latency.rate,
        scale=latency.scale,
        deadlines=[t],
        trials=trials,
        seed=seed,
        **kw,
    )
    res = simrun.deadline_losses(cfg, "EW")
    return simrun.mean_ci(res[:, 0])
