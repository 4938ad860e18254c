"""Minibatch-discretization pitfalls of KL training, and the control-variate fix.

* :func:`unconstrained_kl_flow` integrates the functional gradient flow
  dq/dt = p/q that follows from minimizing KL(p || q) without a mass
  constraint; its closed form is q(t) = sqrt(2 p t + q0^2).
* :func:`naive_minibatch_kl_grad` and :func:`normalized_minibatch_kl` contrast
  the unnormalized and the correctly normalized minibatch divergence.
* :class:`ControlVariate` and :func:`stabilized_gradient` implement the
  variance-reduced estimator of gradients of the form A = int f dq/dtheta,
  adding K * sum_i dq(x_i)/dtheta with the per-coordinate optimal K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class GridDensity:
    grid: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if np.any(self.q <= 0):
            raise ValueError("q must be positive everywhere")
        if np.any(self.p < 0):
            raise ValueError("p must be non-negative")


def unconstrained_kl_flow(density: GridDensity, T: float, dt: float) -> np.ndarray:
    """RK4 integration of dq/dt = p/q at every grid point, up to time T."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = density.p
    q = density.q.copy()
    steps = int(np.ceil(T / dt - 1e-12))
    h = T / steps if steps else 0.0

    def rate(v):
        return p / v

    for _ in range(steps):
        k1 = rate(q)
        k2 = rate(q + 0.5 * h * k1)
        k3 = rate(q + 0.5 * h * k2)
        k4 = rate(q + h * k3)
        q = q + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert np.all(q > 0)
    return q


def unconstrained_kl_closed_form(density: GridDensity, T: float) -> np.ndarray:
    return np.sqrt(2 * density.p * T + density.q**2)


def naive_minibatch_kl(log_pB, log_pG):
    """KL(p_B|m || p_G|m) = sum_i p_B(x_i) log(p_B(x_i) / p_G(x_i)), no normalization.

    ``log_pG`` may be a tape Value; ``log_pB`` is a constant.
    """
    pB = np.exp(np.asarray(log_pB, dtype=np.float64))
    if isinstance(log_pG, ad.Value):
        return ad.sum((np.asarray(log_pB) - log_pG) * pB)
    return float(np.sum(pB * (log_pB - np.asarray(log_pG))))


def naive_minibatch_kl_grad(x, log_pB, model, params) -> list[np.ndarray]:
    """Gradient of the unnormalized minibatch KL with respect to model params.

    Equal to -sum_i p_B(x_i) d log p_G(x_i) / dtheta: a descent step raises
    the p_B-weighted log-likelihood of the minibatch regardless of how the
    weights compare with p_G.
    """
    return ad.backward(naive_minibatch_kl(log_pB, model.log_prob(x, params)), params)


def normalized_minibatch_kl(log_pB, log_pG):
    """KL between the two distributions renormalized over the minibatch.

    Accepts arrays (returns a float) or a tape Value for ``log_pG``.
    """
    log_pB = np.asarray(log_pB, dtype=np.float64)
    lb = log_pB - np.logaddexp.reduce(log_pB)
    pb = np.exp(lb)
    if isinstance(log_pG, ad.Value):
        lg = log_pG - ad.logsumexp(log_pG)
        return ad.sum((lb - lg) * pb)
    log_pG = np.asarray(log_pG, dtype=np.float64)
    lg = log_pG - np.logaddexp.reduce(log_pG)
    return float(np.sum(pb * (lb - lg)))


# -- discrete surrogate with enumerable parameter derivatives ----------------


class CategoricalModel:
    """p_G = softmax(theta) over M states.

    Implements the slice of the flow interface the losses use (``params``,
    ``latent_energy``, ``log_prob``, ``base.log_norm``) so discrete oracles can
    run the same loss code.  Points are state indices.
    """

    class _Base:
        log_norm = 0.0

    base = _Base()

    def __init__(self, logits):
        self.params = [np.asarray(logits, dtype=np.float64).copy()]

    @property
    def size(self) -> int:
        return self.params[0].size

    def probs(self, theta=None):
        t = self.params[0] if theta is None else theta
        e = np.exp(t - t.max())
        return e / e.sum()

    def log_prob(self, x, params=None):
        idx = np.asarray(x, dtype=np.intp).ravel()
        if params is None:
            t = self.params[0]
            return t[idx] - np.logaddexp.reduce(t)
        (theta,) = params
        return ad.take(theta, idx, axis=0) - ad.logsumexp(theta)

    def latent_energy(self, x, params=None):
        lp = self.log_prob(x, params)
        return -lp

    def dq_dtheta(self) -> np.ndarray:
        """Jacobian J[x, j] = d p_G(x) / d theta_j (exact)."""
        p = self.probs()
        return np.diag(p) - np.outer(p, p)


@dataclass
class ControlVariate:
    """Running means for K*_j = -<(dq/dtheta_j)^2 f> / <(dq/dtheta_j)^2>."""

    n_params: int
    decay: float = 0.99
    sum_sq: np.ndarray = field(init=False)
    sum_sq_f: np.ndarray = field(init=False)
    updates: int = field(init=False, default=0)

    def __post_init__(self):
        self.sum_sq = np.zeros(self.n_params)
        self.sum_sq_f = np.zeros(self.n_params)

    @classmethod
    def exact(cls, dq: np.ndarray, f: np.ndarray, sampling_probs=None) -> ControlVariate:
        """Moments taken as exact expectations over all states."""
        cv = cls(dq.shape[1], decay=1.0)
        w = np.full(len(f), 1.0 / len(f)) if sampling_probs is None else sampling_probs
        cv.sum_sq = w @ dq**2
        cv.sum_sq_f = w @ (dq**2 * f[:, None])
        cv.updates = 1
        return cv

    def update(self, dq: np.ndarray, f: np.ndarray) -> None:
        """Fold one minibatch (rows = samples) into the running means."""
        sq = np.mean(dq**2, axis=0)
        sqf = np.mean(dq**2 * f[:, None], axis=0)
        if self.updates == 0:
            self.sum_sq, self.sum_sq_f = sq, sqf
        else:
            d = self.decay
            self.sum_sq = d * self.sum_sq + (1 - d) * sq
            self.sum_sq_f = d * self.sum_sq_f + (1 - d) * sqf
        self.updates += 1

    @property
    def K_star(self) -> np.ndarray:
        if self.updates == 0:
            raise RuntimeError("control variate used before any warm-up minibatch")
        out = np.zeros(self.n_params)
        ok = self.sum_sq >= 1e-30
        out[ok] = -self.sum_sq_f[ok] / self.sum_sq[ok]
        return out


def naive_gradient(dq: np.ndarray, f: np.ndarray) -> np.ndarray:
    """(1/n) sum_i dq_i f_i for a minibatch of per-sample derivatives."""
    return np.mean(dq * f[:, None], axis=0)


def stabilized_gradient(dq: np.ndarray, f: np.ndarray, cv: ControlVariate | np.ndarray) -> np.ndarray:
    """(1/n) [ sum_i dq_i f_i + K*  sum_i dq_i ], coefficient-wise in parameters.

    ``cv`` is a :class:`ControlVariate` or an explicit K vector.  K must not be
    estimated from the same minibatch, or the estimator picks up a bias.
    """
    K = cv.K_star if isinstance(cv, ControlVariate) else np.asarray(cv, dtype=np.float64)
    return np.mean(dq * f[:, None], axis=0) + K * np.mean(dq, axis=0)


def enumerate_minibatches(size: int, n: int) -> np.ndarray:
    """All ordered i.i.d. minibatches of n indices over ``size`` states."""
    grids = np.meshgrid(*[np.arange(size)] * n, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def estimator_moments(dq: np.ndarray, f: np.ndarray, n: int, K=None):
    """Exact mean and per-coordinate variance of the minibatch estimator under
    uniform i.i.d. sampling, by enumerating every minibatch."""
    batches = enumerate_minibatches(len(f), n)
    if K is None:
        K = np.zeros(dq.shape[1])
    est = np.mean(dq[batches] * f[batches][..., None], axis=1) + K * np.mean(dq[batches], axis=1)
    mean = est.mean(axis=0)
    return mean, ((est - mean) ** 2).mean(axis=0)


def variance_reduction_formula(dq: np.ndarray, f: np.ndarray, n: int) -> np.ndarray:
    """(1/n^2) (sum (dq)^2 f)^2 / sum (dq)^2 with the minibatch sums replaced by
    their expectations n * E[.] under uniform sampling."""
    e_sq = np.mean(dq**2, axis=0)
    e_sqf = np.mean(dq**2 * f[:, None], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        red = (n * e_sqf) ** 2 / (n * e_sq) / n**2
    return np.where(e_sq > 1e-30, red, 0.0)


@dataclass
class MassReport:
    mean_change: float
    std_error: float
    exact_expected: float
    naive_mean_change: float
    naive_std_error: float
    naive_exact_expected: float
    n_minibatches: int


def mass_preservation_check(
    dq: np.ndarray,
    f: np.ndarray,
    rng: np.random.Generator,
    n: int = 2,
    n_minibatches: int = 100_000,
    lr: float = 1e-3,
    K=None,
) -> MassReport:
    """Expected first-order change of the minibatch mass sum_i q(x_i) under one
    ascent step along sum_i dq_i (f_i + K).

    Per minibatch the change is lr * (sum_i dq_i) . (sum_i dq_i f_i + K * sum_i dq_i).
    Its expectation is n lr sum_j (E[dq_j^2 f] + K_j E[dq_j^2]), zero for K*.
    """
    M = len(f)
    if K is None:
        K = ControlVariate.exact(dq, f).K_star
    idx = rng.integers(0, M, size=(n_minibatches, n))
    s = dq[idx].sum(axis=1)
    sf = (dq[idx] * f[idx][..., None]).sum(axis=1)

    def stats(Kv):
        change = lr * np.sum(s * (sf + Kv * s), axis=1)
        return float(change.mean()), float(change.std(ddof=1) / np.sqrt(n_minibatches))

    e_sq = np.mean(dq**2, axis=0)
    e_sqf = np.mean(dq**2 * f[:, None], axis=0)
    mean_c, se_c = stats(K)
    mean_n, se_n = stats(np.zeros_like(K))
    return MassReport(
        mean_change=mean_c,
        std_error=se_c,
        exact_expected=float(n * lr * np.sum(e_sqf + K * e_sq)),
        naive_mean_change=mean_n,
        naive_std_error=se_n,
        naive_exact_expected=float(n * lr * np.sum(e_sqf)),
        n_minibatches=n_minibatches,
    )
