"""Importance-sampling estimators built on log p~_B and log p_G.

All weight arithmetic stays in log space; weights are only exponentiated after
subtracting their log-sum-exp.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass
class EstimatorReport:
    Q_hat: float
    n: int
    empirical_variance: float
    ess: float
    logZ_hat: float | None = None

    def as_dict(self):
        return asdict(self)


def _log_weights(log_pG, log_ptB):
    logw = np.asarray(log_ptB, dtype=np.float64) - np.asarray(log_pG, dtype=np.float64)
    if logw.ndim != 1:
        raise ValueError("expected 1-D arrays of per-sample log densities")
    if logw.size < 2:
        raise ValueError("need at least two samples")
    if np.any(np.isnan(logw)) or not np.any(np.isfinite(logw)):
        raise FloatingPointError(
            "all importance weights vanish; pass log densities, not densities")
    return logw


def effective_sample_size(logw) -> float:
    """(sum w)^2 / sum w^2, computed from log weights."""
    logw = np.asarray(logw, dtype=np.float64)
    return float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw)))


def normalized_weights(logw) -> np.ndarray:
    """w_i / sum_j w_j."""
    logw = np.asarray(logw, dtype=np.float64)
    return np.exp(logw - logsumexp(logw))


def estimate_logZ(log_pG, log_ptB) -> float:
    """log mean exp(log p~_B - log p_G)."""
    logw = _log_weights(log_pG, log_ptB)
    return float(logsumexp(logw) - np.log(logw.size))


def reweighted_expectation(log_pG, log_ptB, f, log_Z=None) -> EstimatorReport:
    """Estimate E_B[f] from samples of p_G.

    Without ``log_Z`` the weights are self-normalized.  With a known ``log_Z``
    the plain unbiased estimator mean(f * p_B / p_G) is used.
    """
    logw = _log_weights(log_pG, log_ptB)
    n = logw.size
    f = np.broadcast_to(np.asarray(f, dtype=np.float64), (n,))
    ess = effective_sample_size(logw)
    logZ_hat = float(logsumexp(logw) - np.log(n))
    if log_Z is None:
        wt = normalized_weights(logw)
        q = float(np.sum(wt * f))
        # delta-method variance of the ratio estimator
        var = float(np.sum(wt * wt * (f - q) ** 2))
    else:
        g = f * np.exp(logw - log_Z)
        q = float(np.mean(g))
        var = float(np.var(g, ddof=1) / n)
    return EstimatorReport(Q_hat=q, n=n, empirical_variance=var, ess=ess, logZ_hat=logZ_hat)


def variance_loss(log_pG, log_ptB, f=None) -> float:
    """Mean of squared mean-normalized weights (times f^2 if given).

    With p~_B / p_G normalized to average 1, ``mean(w^2)`` estimates
    E_G[(p_B/p_G)^2] = exp(Renyi-2 divergence) = Var_G[p_B/p_G] + 1.
    """
    logw = _log_weights(log_pG, log_ptB)
    lw = logw - (logsumexp(logw) - np.log(logw.size))
    w2 = np.exp(2 * lw)
    if f is not None:
        w2 = w2 * np.asarray(f, dtype=np.float64) ** 2
    return float(np.mean(w2))


def free_energy_difference(log_pG, log_ptB, energy_B, energy_C) -> float:
    """Delta F_BC = -log E_B[exp(-(U_C - U_B))] with beta = 1.

    ``energy_C`` may be +inf (a restricted state); those samples contribute
    nothing.
    """
    logw = _log_weights(log_pG, log_ptB)
    du = np.asarray(energy_C, dtype=np.float64) - np.asarray(energy_B, dtype=np.float64)
    if np.any(np.isnan(du)):
        raise FloatingPointError("energy difference is NaN")
    lwn = logw - logsumexp(logw)
    log_q = logsumexp(lwn - du)
    if not np.isfinite(log_q):
        raise FloatingPointError("no sample has finite energy in state C")
    return float(-log_q)
