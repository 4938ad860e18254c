"""Affine coupling normalizing flow over a Gaussian base.

``generate`` maps latent points to data space (G), ``invert`` maps back (F),
and both return the per-sample log-determinant of their Jacobian.  Each
coupling block leaves half of the coordinates untouched and applies
``x = z * exp(s(z_frozen)) + t(z_frozen)`` to the other half, so the
log-determinant of one block is just ``sum(s)``.

All model methods take an optional ``params`` argument: a list of tape Values
matching :attr:`FlowModel.params`.  Without it the same code runs on a
non-recording tape and plain arrays come back.

Parameter order (used by checkpoints and by ``params``) is block-major::

    for block in blocks:
        scale W1 (h_in, hidden), scale b1 (hidden,), scale W2 (hidden, d_out), scale b2 (d_out,)
        shift W1, shift b1, shift W2, shift b2   # same shapes
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

FORMAT_VERSION = 1
_MAGIC = "boltzlab-checkpoint"


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BaseDistribution:
    dim: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @property
    def log_norm(self) -> float:
        """log Z_N = dim * log(sigma * sqrt(2 pi))."""
        return self.dim * np.log(self.sigma * np.sqrt(2 * np.pi))

    def log_prob(self, z):
        z = np.asarray(z, dtype=np.float64)
        return -np.sum(z * z, axis=-1) / (2 * self.sigma**2) - self.log_norm

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sigma * rng.standard_normal((n, self.dim))


class CouplingBlock:
    """One affine coupling layer; ``parity`` picks which dims stay frozen."""

    def __init__(self, dim: int, hidden: int, parity: int, scale_clamp: float | None = 4.0):
        if dim < 2:
            raise ValueError("coupling blocks need dim >= 2")
        self.dim = dim
        self.hidden = hidden
        self.parity = parity % 2
        self.scale_clamp = scale_clamp
        dims = np.arange(dim)
        self.frozen = dims[dims % 2 == self.parity]
        self.transformed = dims[dims % 2 != self.parity]
        order = np.concatenate([self.frozen, self.transformed])
        self.unpermute = np.argsort(order)

    def param_shapes(self):
        nf, nt, h = len(self.frozen), len(self.transformed), self.hidden
        net = [(nf, h), (h,), (h, nt), (nt,)]
        return net + net

    def init_params(self, rng):
        out = []
        for shape in self.param_shapes():
            if len(shape) == 2 and shape[1] == self.hidden:
                bound = 1.0 / np.sqrt(shape[0])
                out.append(rng.uniform(-bound, bound, size=shape))
            elif shape == (self.hidden,):
                bound = 1.0 / np.sqrt(len(self.frozen))
                out.append(rng.uniform(-bound, bound, size=shape))
            else:
                # output layers start at zero: the block is the identity
                out.append(np.zeros(shape))
        return out

    def _nets(self, frozen, p, alpha):
        def mlp(w1, b1, w2, b2):
            return ad.celu(frozen @ w1 + b1, alpha) @ w2 + b2

        raw_s = mlp(*p[0:4])
        t = mlp(*p[4:8])
        if self.scale_clamp is None:
            s = raw_s
        else:
            c = self.scale_clamp
            s = ad.tanh(raw_s * (1.0 / c)) * c
        return s, t

    def forward(self, z, p, alpha):
        frozen = ad.take(z, self.frozen, axis=1)
        moving = ad.take(z, self.transformed, axis=1)
        s, t = self._nets(frozen, p, alpha)
        out = moving * ad.exp(s) + t
        x = ad.take(ad.concat([frozen, out], axis=1), self.unpermute, axis=1)
        return x, ad.sum(s, axis=1)

    def inverse(self, x, p, alpha):
        frozen = ad.take(x, self.frozen, axis=1)
        moving = ad.take(x, self.transformed, axis=1)
        s, t = self._nets(frozen, p, alpha)
        out = (moving - t) * ad.exp(-s)
        z = ad.take(ad.concat([frozen, out], axis=1), self.unpermute, axis=1)
        return z, -ad.sum(s, axis=1)


class FlowModel:
    """Stack of coupling blocks with alternating even/odd masks."""

    def __init__(
        self,
        dim: int,
        block_count: int = 32,
        hidden: int = 64,
        sigma: float = 1.0,
        celu_alpha: float = 1.0,
        scale_clamp: float | None = 4.0,
        rng: np.random.Generator | None = None,
    ):
        self.dim = dim
        self.hidden = hidden
        self.celu_alpha = celu_alpha
        self.scale_clamp = scale_clamp
        self.base = BaseDistribution(dim, sigma)
        self.blocks = [CouplingBlock(dim, hidden, k, scale_clamp) for k in range(block_count)]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for b in self.blocks:
            self.params.extend(b.init_params(rng))

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def sigma(self) -> float:
        return self.base.sigma

    @property
    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    def copy(self) -> FlowModel:
        new = object.__new__(FlowModel)
        new.__dict__.update(self.__dict__)
        new.params = [p.copy() for p in self.params]
        return new

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params]) if self.params else np.zeros(0)

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        out, k = [], 0
        for p in self.params:
            out.append(flat[k:k + p.size].reshape(p.shape).copy())
            k += p.size
        self.params = out

    def randomize(self, rng: np.random.Generator, scale: float = 0.3) -> FlowModel:
        """Give every output layer random weights (tests want non-identity flows)."""
        for i, p in enumerate(self.params):
            if i % 4 in (2, 3):
                self.params[i] = scale * rng.standard_normal(p.shape) / np.sqrt(max(p.shape[0], 1))
        return self

    # -- evaluation ---------------------------------------------------------

    def _bind(self, params, *arrays):
        if params is None:
            tape = ad.Tape(record=False)
            params = [tape.constant(p) for p in self.params]
        else:
            if len(params) != len(self.params):
                raise ValueError("params do not match the model")
            tape = params[0].tape if params else ad.Tape(record=False)
        vals = []
        for a in arrays:
            if isinstance(a, ad.Value):
                vals.append(a)
            else:
                a = np.asarray(a, dtype=np.float64)
                if a.ndim != 2 or a.shape[1] != self.dim:
                    raise ValueError(f"expected batch of shape (n, {self.dim}), got {a.shape}")
                vals.append(tape.constant(a))
        return tape, params, vals

    @staticmethod
    def _out(v, unwrap):
        return v.data if unwrap else v

    def generate(self, z, params=None):
        """x = G(z) and log|det dG/dz| per sample."""
        unwrap = params is None
        tape, params, (h,) = self._bind(params, z)
        logdet = tape.constant(np.zeros(h.shape[0]))
        for k, block in enumerate(self.blocks):
            h, ld = block.forward(h, params[8 * k:8 * k + 8], self.celu_alpha)
            logdet = logdet + ld
        return self._out(h, unwrap), self._out(logdet, unwrap)

    def invert(self, x, params=None):
        """z = F(x) and log|det dF/dx| per sample."""
        unwrap = params is None
        tape, params, (h,) = self._bind(params, x)
        logdet = tape.constant(np.zeros(h.shape[0]))
        for k in range(len(self.blocks) - 1, -1, -1):
            h, ld = self.blocks[k].inverse(h, params[8 * k:8 * k + 8], self.celu_alpha)
            logdet = logdet + ld
        return self._out(h, unwrap), self._out(logdet, unwrap)

    def latent_energy(self, x, params=None):
        """U_N(F(x)) / (2 sigma^2) - log|det dF/dx|, i.e. -log p_G(x) - log Z_N."""
        unwrap = params is None
        z, logdet = self.invert(x, params)
        if unwrap:
            return np.sum(z * z, axis=1) / (2 * self.sigma**2) - logdet
        return ad.sum(ad.square(z), axis=1) * (0.5 / self.sigma**2) - logdet

    def log_prob(self, x, params=None):
        """log p_G(x) = log q_N(F(x)) + log|det dF/dx|."""
        e = self.latent_energy(x, params)
        return -e - self.base.log_norm

    def sample(self, rng: np.random.Generator, n: int):
        """Draw n points; returns (z, x, log p_G(x))."""
        z = self.base.sample(rng, n)
        x, logdet = self.generate(z)
        return z, x, self.base.log_prob(z) - logdet


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: FlowModel, path) -> None:
    clamp = "none" if model.scale_clamp is None else float(model.scale_clamp).hex()
    lines = [
        _MAGIC,
        f"format_version={FORMAT_VERSION}",
        f"dim={model.dim}",
        f"block_count={model.block_count}",
        f"hidden_width={model.hidden}",
        f"sigma={float(model.sigma).hex()}",
        f"celu_alpha={float(model.celu_alpha).hex()}",
        f"scale_clamp={clamp}",
        f"param_count={model.n_params}",
    ]
    lines.extend(float(v).hex() for v in model.get_flat())
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> FlowModel:
    try:
        lines = Path(path).read_text().splitlines()
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"{path}: not a text checkpoint") from e
    if not lines or lines[0] != _MAGIC:
        raise CheckpointFormatError(f"{path}: missing '{_MAGIC}' header")
    header = {}
    i = 1
    while i < len(lines) and "=" in lines[i]:
        k, v = lines[i].split("=", 1)
        header[k] = v
        i += 1
    try:
        version = int(header["format_version"])
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(
                f"{path}: format_version {version}, this build reads {FORMAT_VERSION}")
        clamp = header["scale_clamp"]
        model = FlowModel(
            dim=int(header["dim"]),
            block_count=int(header["block_count"]),
            hidden=int(header["hidden_width"]),
            sigma=float.fromhex(header["sigma"]),
            celu_alpha=float.fromhex(header["celu_alpha"]),
            scale_clamp=None if clamp == "none" else float.fromhex(clamp),
        )
        count = int(header["param_count"])
        values = [float.fromhex(s) for s in lines[i:]]
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: header lacks {e.args[0]}") from e
    except ValueError as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: {e}") from e
    if len(values) != count or count != model.n_params:
        raise CheckpointFormatError(
            f"{path}: expected {model.n_params} parameters, found {len(values)}")
    model.set_flat(values)
    return model
