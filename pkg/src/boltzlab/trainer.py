"""Pre-training on data, data-free fine-tuning, and the evaluation diagnostics.

Diagnostics are computed on a fixed probe batch of latent points drawn once
per run, so successive records differ only through the parameters.  This
keeps traces such as the K estimate readable at a few thousand samples.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import estimators
from .flow import FlowModel, save_checkpoint
from .losses import Batch, LossConfig, compute_loss, generated_batch
from .pitfalls import ControlVariate
from .sampler import parallel_energy

PHASES = ("pretrain", "finetune")
DEFAULT_LR = {"pretrain": 1e-3, "finetune": 1e-4}
METRIC_FIELDS = ("iter", "loss_value", "minor_mode_fraction", "mean_UB", "K_estimate",
                 "ess", "logZ_hat", "grad_norm", "wall_ms")


class NumericalAbort(RuntimeError):
    """Training hit a non-finite value.  ``checkpoint`` holds the last good
    parameters (a model copy); ``dump`` describes the offending batch."""

    def __init__(self, msg, iteration, checkpoint, dump):
        super().__init__(msg)
        self.iteration = iteration
        self.checkpoint = checkpoint
        self.dump = dump


@dataclass
class TrainConfig:
    phase: str = "finetune"
    loss: LossConfig = field(default_factory=LossConfig)
    iters: int = 5000
    batch_size: int = 256
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float | None = None
    seed: int = 0
    eval_every: int = 10
    n_eval: int = 2000
    mode_threshold: float | None = None
    energy_cap_threshold: float = np.inf
    # fraction of ``iters`` actually run; 0.1 gives a partial pre-training
    partial_fraction: float = 1.0
    trick_enabled: bool = False
    trick_decay: float = 0.99
    record_time: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if isinstance(self.loss, str):
            self.loss = LossConfig(kind=self.loss)
        if self.phase == "pretrain" and self.loss.kind != "klz":
            self.loss = LossConfig(kind="klz")
        if self.phase == "finetune" and self.loss.kind == "klz":
            raise ValueError("fine-tuning is data-free; klz needs a dataset")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.phase]
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("eval_every and batch_size must be >= 1")
        if self.n_eval < 1000:
            raise ValueError("n_eval must be >= 1000")
        if not 0 < self.partial_fraction <= 1:
            raise ValueError("partial_fraction must be in (0, 1]")
        if self.trick_enabled and self.loss.kind not in ("klz_df", "l2_masked"):
            raise ValueError("the control-variate trick applies to klz_df and l2_masked")
        if self.trick_enabled and self.loss.kind == "l2_masked" and not self.loss.detach_K:
            raise ValueError("the control-variate trick needs a detached K")

    @property
    def steps(self) -> int:
        return int(round(self.iters * self.partial_fraction))


@dataclass
class MetricsRecord:
    iter: int
    loss_value: float | None
    minor_mode_fraction: float
    mean_UB: float
    K_estimate: float
    ess: float
    logZ_hat: float
    grad_norm: float | None
    wall_ms: float | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), allow_nan=True)


@dataclass
class TrainResult:
    model: FlowModel
    metrics: list

    def series(self, name) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.metrics], dtype=np.float64)


def write_metrics(records, path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_metrics(path) -> list:
    return [MetricsRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


# -- optimizers ------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


class SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        return [p - self.lr * g for p, g in zip(params, grads)]


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


# -- evaluation ------------------------------------------------------------------


def training_target(target, cfg: TrainConfig):
    """The target with the configured per-term energy cap applied."""
    if np.isfinite(cfg.energy_cap_threshold) and hasattr(target, "cap_threshold"):
        return dataclasses.replace(target, cap_threshold=cfg.energy_cap_threshold)
    return target


def resolve_threshold(target, mode_threshold):
    if mode_threshold is not None:
        return float(mode_threshold)
    return float(getattr(target, "saddle", 0.0))


def evaluate(model, target, n_eval: int = 2000, rng=None, z=None, mode_threshold=None,
             iteration: int = 0) -> MetricsRecord:
    """Diagnostics from n_eval generated points (or the given latent batch)."""
    if z is None:
        if n_eval < 1000:
            raise ValueError("n_eval must be >= 1000")
        z = model.base.sample(rng if rng is not None else np.random.default_rng(0), n_eval)
    x, logdet = model.generate(z)
    log_pG = model.base.log_prob(z) - logdet
    u = parallel_energy(target.energy, x)
    if mode_threshold is None and hasattr(target, "in_minor_mode"):
        minor = target.in_minor_mode(x)
    else:
        minor = x[:, 0] > resolve_threshold(target, mode_threshold)
    logw = -u - log_pG
    return MetricsRecord(
        iter=iteration,
        loss_value=None,
        minor_mode_fraction=float(np.mean(minor)),
        mean_UB=float(np.mean(u)),
        K_estimate=float(np.mean(logw)),
        ess=estimators.effective_sample_size(logw),
        logZ_hat=estimators.estimate_logZ(log_pG, -u),
        grad_norm=None,
    )


# -- training loops --------------------------------------------------------------


def _per_sample_coefficients(cfg: LossConfig, batch: Batch, latent_energy):
    """f_i such that the loss gradient is mean_i f_i * grad latent_energy_i."""
    if cfg.kind == "klz_df":
        return batch.weights
    r = latent_energy + batch.log_ptB
    dev = r - r.mean()
    if cfg.apply_mask:
        dev = np.maximum(dev, 0.0)
    return 2.0 * dev


def _trick_gradient(cfg: TrainConfig, model, values, batch, cv: ControlVariate):
    """Loss gradient with the control-variate correction K* mean_i grad log p_G.

    The correction has zero mean under p_G (score identity), so the estimate
    stays unbiased; K* comes from earlier minibatches only.
    """
    le = model.latent_energy(batch.x, values)
    per_sample = ad.per_sample_gradients(le, values)
    flat = np.stack([np.concatenate([g.ravel() for g in gs]) for gs in per_sample])
    f = _per_sample_coefficients(cfg.loss, batch, le.data)
    est = np.mean(flat * f[:, None], axis=0)
    if cv.updates:
        est = est + cv.K_star * np.mean(flat, axis=0)
    cv.update(flat, f)
    out, k = [], 0
    for p in model.params:
        out.append(est[k:k + p.size].reshape(p.shape))
        k += p.size
    return out


def _run(model: FlowModel, cfg: TrainConfig, target, next_batch, checkpoint_path=None,
         dump_path=None) -> TrainResult:
    ss = np.random.SeedSequence(cfg.seed)
    train_ss, probe_ss = ss.spawn(2)
    rng = np.random.Generator(np.random.Philox(train_ss))
    probe = model.base.sample(np.random.Generator(np.random.Philox(probe_ss)), cfg.n_eval)
    eval_target = training_target(target, cfg)
    opt = make_optimizer(cfg, model.params)
    cv = ControlVariate(model.n_params, cfg.trick_decay) if cfg.trick_enabled else None
    model = model.copy()
    last_good = model.params
    records = []
    steps = cfg.steps
    t0 = time.perf_counter()
    for it in range(steps + 1):
        batch = None
        try:
            tape = ad.Tape()
            values = tape.leaves(model.params)
            batch, z = next_batch(rng, model)
            loss = compute_loss(cfg.loss, model, values, eval_target, batch, z)
            if cv is not None:
                loss_value = float(loss.data)
                grads = _trick_gradient(cfg, model, values, batch, cv)
            else:
                loss_value = float(loss.data)
                grads = ad.backward(loss, values)
            if not np.isfinite(loss_value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise ad.NonFiniteError("non-finite loss or gradient")
        except (ad.NonFiniteError, FloatingPointError) as e:
            dump = {"iter": it, "error": str(e)}
            if batch is not None:
                dump["x"] = np.asarray(batch.x).tolist()
            model.params = last_good
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
            if dump_path is not None:
                Path(dump_path).write_text(json.dumps(dump))
            raise NumericalAbort(f"iteration {it}: {e}", it, model, dump) from e
        if it % cfg.eval_every == 0 or it == steps:
            rec = evaluate(model, eval_target, z=probe, mode_threshold=cfg.mode_threshold,
                           iteration=it)
            rec.loss_value = loss_value
            rec.grad_norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
            if cfg.record_time:
                rec.wall_ms = 1e3 * (time.perf_counter() - t0)
            records.append(rec)
        if it < steps:
            last_good = model.params
            model.params = opt.step(model.params, grads)
    return TrainResult(model=model, metrics=records)


def pretrain(model: FlowModel, dataset: np.ndarray, cfg: TrainConfig, target,
             checkpoint_path=None, dump_path=None) -> TrainResult:
    """Minimize klz over shuffled minibatches of ``dataset`` (epoch-wise
    permutations).  ``cfg.partial_fraction`` truncates the run."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValueError(f"dataset has shape {data.shape}, model dim is {model.dim}")
    if cfg.phase != "pretrain":
        cfg = dataclasses.replace(cfg, phase="pretrain", loss=LossConfig(kind="klz"))
    n = min(cfg.batch_size, len(data))
    state = {"perm": np.empty(0, dtype=np.intp), "pos": 0}

    def next_batch(rng, _model):
        if state["pos"] + n > len(state["perm"]):
            state["perm"] = rng.permutation(len(data))
            state["pos"] = 0
        idx = state["perm"][state["pos"]:state["pos"] + n]
        state["pos"] += n
        return Batch(x=data[idx]), None

    return _run(model, cfg, target, next_batch, checkpoint_path, dump_path)


def finetune(model: FlowModel, cfg: TrainConfig, target, checkpoint_path=None,
             dump_path=None) -> TrainResult:
    """Data-free training: every step draws fresh latent points."""
    if cfg.phase != "finetune":
        raise ValueError("finetune needs a finetune-phase config")
    train_target = training_target(target, cfg)

    def next_batch(rng, m):
        if cfg.loss.kind == "klx":
            return None, m.base.sample(rng, cfg.batch_size)
        return generated_batch(m, train_target, rng, cfg.batch_size), None

    return _run(model, cfg, target, next_batch, checkpoint_path, dump_path)
