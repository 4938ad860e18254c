"""Training losses over minibatches.

Every loss is a per-sample mean and is written in terms of log p~_B = -U_B and
log p_G, so the unknown partition function only enters as an additive
constant.  Dropped constants, per loss:

* ``loss_klz``: log Z_N and the target entropy S_B (KL(q_F || q_N) minus both).
* ``loss_klx``: log Z_B and the base entropy S_N (KL(p_G || p_B) minus both).
* ``loss_klz_df``: same as ``loss_klz``; with raw weights the gradient is
  additionally scaled by Z_B, with self-normalized weights it is not.
* ``loss_l2_masked``: log Z_B cancels exactly in r - K.

Models passed here need ``latent_energy(x, params)`` and, for ``loss_klx``,
``generate(z, params)``; ``params`` are tape Values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad

logger = logging.getLogger(__name__)

KINDS = ("klz", "klx", "klz_df", "l2_masked")
WEIGHT_WARN_LOG = 30.0


@dataclass
class LossConfig:
    kind: str = "l2_masked"
    detach_K: bool = True
    apply_mask: bool = True
    self_normalize: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")

    @property
    def data_free(self) -> bool:
        return self.kind != "klz"


@dataclass
class Batch:
    """n points with whatever is known about them.  ``z`` is set for generated
    batches; logs are detached arrays."""

    x: np.ndarray
    log_ptB: np.ndarray | None = None
    log_pG: np.ndarray | None = None
    z: np.ndarray | None = None
    weights: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.x) < 1:
            raise ValueError("batch needs at least one point")
        for name in ("log_ptB", "log_pG"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise ad.NonFiniteError(f"batch {name} is not finite")

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def log_ratio(self) -> np.ndarray:
        """r = log p~_B - log p_G (differs from log p_B/p_G by log Z_B)."""
        return self.log_ptB - self.log_pG


def generated_batch(model, target, rng, n) -> Batch:
    """Sample from the model and detach everything."""
    z, x, log_pG = model.sample(rng, n)
    return Batch(x=x, z=z, log_pG=log_pG, log_ptB=-target.energy(x))


def loss_klz(batch: Batch, model, params) -> ad.Value:
    """mean[ U_N(F(x)) / (2 sigma^2) - log|det dF/dx| ] over data points."""
    return ad.mean(model.latent_energy(batch.x, params))


def loss_klx(z, model, target, params) -> ad.Value:
    """mean[ U_B(G(z)) - log|det dG/dz| ], differentiated through G."""
    x, logdet = model.generate(z, params)
    return ad.mean(target.energy_value(x) - logdet)


def importance_log_weights(batch: Batch, self_normalize: bool = True) -> np.ndarray:
    """Detached log(p~_B / p_G); optionally shifted so the weights average to 1."""
    logw = batch.log_ratio
    big = np.abs(logw) > WEIGHT_WARN_LOG
    if np.any(big):
        msg = f"{int(big.sum())} importance weights with |log w| > {WEIGHT_WARN_LOG:g}"
        batch.warnings.append(msg)
        logger.warning(msg)
    if self_normalize:
        logw = logw - (logsumexp(logw) - np.log(logw.size))
    return logw


def loss_klz_df(batch: Batch, model, params, self_normalize: bool = True) -> ad.Value:
    """Importance-weighted klz on a detached generated batch.

    The weight is a single detached ratio p~_B/p_G (the nested detach in the
    usual notation collapses to one).
    """
    w = np.exp(importance_log_weights(batch, self_normalize))
    batch.weights = w
    return ad.mean(model.latent_energy(batch.x, params) * w)


def loss_l2_masked(batch: Batch, model, params, cfg: LossConfig | None = None) -> ad.Value:
    """mean[ (r_i - K)_+^2 ] with K the batch mean of r, detached by default.

    Only log p_G(x_i) carries gradient; the points themselves are constants.
    ``apply_mask=False`` drops the positive part, ``detach_K=False``
    differentiates K as well.
    """
    cfg = cfg or LossConfig()
    # r = log p~_B - log p_G = log p~_B + latent_energy + log Z_N
    r = model.latent_energy(batch.x, params) + (batch.log_ptB + model.base.log_norm)
    K = ad.mean(r)
    if cfg.detach_K:
        K = ad.detach(K)
    dev = r - K
    if cfg.apply_mask:
        dev = ad.relu(dev)
    return ad.mean(ad.square(dev))


def track_K(batch: Batch) -> float:
    """Minibatch estimate of E_G[r] (= -KL(p_G || p_B) + log Z_B)."""
    return float(np.mean(batch.log_ratio))


def compute_loss(cfg: LossConfig, model, params, target=None, batch: Batch | None = None, z=None):
    if cfg.kind == "klz":
        return loss_klz(batch, model, params)
    if cfg.kind == "klx":
        return loss_klx(batch.z if z is None else z, model, target, params)
    if cfg.kind == "klz_df":
        return loss_klz_df(batch, model, params, cfg.self_normalize)
    return loss_l2_masked(batch, model, params, cfg)
