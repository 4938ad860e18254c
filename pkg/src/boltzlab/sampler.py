"""Reference data by Metropolis-Hastings with parallel tempering.

Every temperature runs ``n_replicas`` independent chains side by side, so one
numpy call advances all of them.  Replica r of every temperature forms one
tempering ladder; swaps only happen within a ladder.  Samples come from the
T = 1 chains.

Randomness comes from numpy's Philox generator (a counter-based bit
generator), seeded explicitly, so datasets are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

LOW_SWAP_RATE = 0.05
DATASET_MAGIC = "# boltzlab-dataset"


def make_rng(seed: int) -> np.random.Generator:
    """The generator used everywhere in this package: Philox keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(seed))


def worker_count() -> int:
    """Workers for data-parallel energy evaluation, from BOLTZLAB_THREADS."""
    raw = os.environ.get("BOLTZLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"BOLTZLAB_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def parallel_energy(energy, x: np.ndarray, workers: int | None = None) -> np.ndarray:
    """Evaluate ``energy`` on row chunks of ``x``; identical to energy(x) for
    any worker count because energy is applied row-wise."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(x) < 2 * workers:
        return energy(x)
    chunks = np.array_split(x, workers)
    with ThreadPoolExecutor(workers) as pool:
        return np.concatenate(list(pool.map(energy, chunks)))


@dataclass
class PTConfig:
    temperatures: tuple = (1.0, 1.5848931924611136, 2.51188643150958,
                           3.9810717055349722, 6.309573444801933, 10.0)
    steps_per_exchange: int = 10
    proposal_std: tuple | None = None  # None: 0.5 * sqrt(T)
    total_samples: int = 100_000
    burn_in: int = 2000
    thinning: int = 20
    seed: int = 0
    n_replicas: int = 256
    swaps: bool = True

    def __post_init__(self):
        self.temperatures = tuple(float(t) for t in self.temperatures)
        if not self.temperatures or self.temperatures[0] != 1.0:
            raise ValueError("temperature ladder must start at 1")
        if np.any(np.diff(self.temperatures) <= 0):
            raise ValueError("temperature ladder must be strictly increasing")
        if self.proposal_std is not None:
            self.proposal_std = tuple(float(s) for s in self.proposal_std)
            if len(self.proposal_std) != len(self.temperatures):
                raise ValueError("one proposal_std per temperature")
            if min(self.proposal_std) <= 0:
                raise ValueError("proposal_std must be > 0")
        for name in ("steps_per_exchange", "total_samples", "thinning", "n_replicas"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    @staticmethod
    def geometric_ladder(n: int, t_max: float) -> tuple:
        return tuple(np.geomspace(1.0, t_max, n)) if n > 1 else (1.0,)

    @property
    def stds(self) -> np.ndarray:
        if self.proposal_std is None:
            return 0.5 * np.sqrt(np.asarray(self.temperatures))
        return np.asarray(self.proposal_std)

    def config_hash(self, target_id: str = "") -> str:
        blob = json.dumps({"target": target_id, **asdict(self)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _mh_update(x, u, energy, std, temperature, rng, propose=None):
    """One MH sweep given current energies; returns (x', u', accepted)."""
    if propose is None:
        y = x + std * rng.standard_normal(x.shape)
    else:
        y = propose(x, rng)
    uy = energy(y)
    log_a = -(uy - u) / temperature
    accept = np.log(rng.random(np.shape(u))) < log_a
    mask = accept.reshape(accept.shape + (1,) * (np.ndim(x) - np.ndim(u)))
    return np.where(mask, y, x), np.where(accept, uy, u), accept


def mh_step(x, energy, proposal_std, temperature, rng, propose=None):
    """Gaussian random-walk MH step for a batch of chains.

    ``x`` is (n, dim) with ``energy`` mapping rows to (n,) energies, or any
    array of states when a custom symmetric ``propose(x, rng)`` is given.
    Returns the new states and a per-chain acceptance flag.
    """
    if propose is None and not proposal_std > 0:
        raise ValueError("proposal_std must be > 0")
    x = np.asarray(x)
    x_new, _, accepted = _mh_update(x, energy(x), energy, proposal_std, temperature, rng, propose)
    return x_new, accepted


@dataclass
class PTResult:
    samples: np.ndarray
    acceptance: list
    swap_rates: list
    warnings: list = field(default_factory=list)

    def report(self) -> dict:
        return {"acceptance": self.acceptance, "swap_rates": self.swap_rates,
                "warnings": self.warnings}


def pt_run(cfg: PTConfig, energy, dim: int, x0=None) -> PTResult:
    """Parallel tempering; swaps between neighbors i, i+1 in index order."""
    rng = make_rng(cfg.seed)
    temps = np.asarray(cfg.temperatures)
    nT, R = len(temps), cfg.n_replicas
    stds = cfg.stds[:, None, None]
    tcol = temps[:, None]

    def flat_energy(v):
        return parallel_energy(energy, v.reshape(-1, dim)).reshape(v.shape[:-1])

    x = np.zeros((nT, R, dim)) if x0 is None else np.broadcast_to(x0, (nT, R, dim)).astype(np.float64)
    u = flat_energy(x)
    per_replica = -(-cfg.total_samples // R)
    n_steps = cfg.burn_in + per_replica * cfg.thinning
    accepted = np.zeros(nT)
    swap_acc = np.zeros(max(nT - 1, 0))
    swap_try = 0
    out = np.empty((per_replica, R, dim))
    k = 0
    for step in range(1, n_steps + 1):
        x, u, acc = _mh_update(x, u, flat_energy, stds, tcol, rng)
        accepted += acc.mean(axis=1)
        if cfg.swaps and nT > 1 and step % cfg.steps_per_exchange == 0:
            swap_try += 1
            for i in range(nT - 1):
                log_a = (1.0 / temps[i] - 1.0 / temps[i + 1]) * (u[i] - u[i + 1])
                sw = np.log(rng.random(R)) < log_a
                swap_acc[i] += sw.mean()
                xi, xj = x[i, sw].copy(), x[i + 1, sw].copy()
                x[i, sw], x[i + 1, sw] = xj, xi
                ui, uj = u[i, sw].copy(), u[i + 1, sw].copy()
                u[i, sw], u[i + 1, sw] = uj, ui
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == 0:
            out[k] = x[0]
            k += 1
    acc_rates = (accepted / n_steps).tolist()
    swap_rates = (swap_acc / swap_try).tolist() if swap_try else []
    warnings = []
    for i, r in enumerate(swap_rates):
        if r < LOW_SWAP_RATE:
            msg = (f"swap rate {r:.3f} between T={temps[i]:g} and T={temps[i + 1]:g} "
                   f"is below {LOW_SWAP_RATE:g}; the ladder is too sparse")
            warnings.append(msg)
            logger.warning(msg)
    samples = out.reshape(-1, dim)[: cfg.total_samples]
    return PTResult(samples=samples, acceptance=acc_rates, swap_rates=swap_rates, warnings=warnings)


# -- dataset files -------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray
    target_id: str = ""
    config_hash: str = ""
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def count(self) -> int:
        return self.x.shape[0]


def write_dataset(ds: Dataset, path, fmt: str = "text") -> None:
    """Header lines ``# key=value`` then rows.  ``fmt`` is text or binary
    (little-endian float64 after the header)."""
    if fmt not in ("text", "binary"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    header = [
        DATASET_MAGIC,
        f"# dim={ds.dim}",
        f"# count={ds.count}",
        f"# target_id={ds.target_id}",
        f"# config_hash={ds.config_hash}",
        f"# seed={ds.seed}",
        f"# format={fmt}",
        "# end-header",
    ]
    head = ("\n".join(header) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(head)
        if fmt == "binary":
            fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        else:
            np.savetxt(fh, ds.x, fmt="%.17g")


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    meta = {}
    pos = 0
    first = True
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ValueError(f"{path}: truncated dataset header")
        line = raw[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if first:
            if line != DATASET_MAGIC:
                raise ValueError(f"{path}: not a boltzlab dataset")
            first = False
            continue
        if line == "# end-header":
            break
        key, _, value = line[2:].partition("=")
        meta[key] = value
    dim, count = int(meta["dim"]), int(meta["count"])
    if meta.get("format") == "binary":
        x = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64)
    else:
        x = np.array(raw[pos:].split(), dtype=np.float64)
    if x.size != dim * count:
        raise ValueError(f"{path}: expected {dim * count} values, found {x.size}")
    return Dataset(x=x.reshape(count, dim), target_id=meta.get("target_id", ""),
                   config_hash=meta.get("config_hash", ""), seed=int(meta.get("seed", 0)))
