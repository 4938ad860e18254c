"""Target Boltzmann densities.

An energy model exposes ``energy(x)`` = beta * U_B(x) with beta absorbed
(beta = 1), so log p~_B(x) = -energy(x).  Nothing downstream needs the
partition function Z_B; the closed forms here exist for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate

from . import autodiff as ad


class EnergyModel(Protocol):
    dim: int

    def energy(self, x: np.ndarray) -> np.ndarray:
        """Per-row energy of an (n, dim) array."""

    def energy_value(self, x: ad.Value) -> ad.Value:
        """Same quantity on a tape, differentiable in x."""


def log_unnormalized(target: EnergyModel, x) -> np.ndarray:
    return -target.energy(x)


# -- per-term capping ---------------------------------------------------------


class PolynomialTerm:
    """An energy term that is a polynomial in one coordinate.

    With a finite ``threshold`` the term is continued linearly beyond the
    outermost points where its slope reaches +-threshold.  The result is C1,
    equal to the raw term in between, and its slope never exceeds threshold.
    """

    def __init__(self, coeffs, threshold: float = np.inf):
        # coeffs in increasing degree, as numpy.polynomial.Polynomial
        self.poly = Polynomial(coeffs)
        self.deriv = self.poly.deriv()
        self.threshold = float(threshold)
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        self.lo, self.hi = -np.inf, np.inf
        if np.isfinite(self.threshold):
            self.lo, self.hi = self._knees()

    def _knees(self):
        g = self.threshold
        deg = self.poly.degree()
        lead = self.poly.coef[-1]
        if deg < 2 or lead <= 0 or deg % 2:
            raise ValueError("capping needs an even-degree term with positive leading coefficient")

        def real_roots(p):
            r = p.roots()
            return np.sort(r[np.abs(r.imag) < 1e-9].real)

        hi = real_roots(self.deriv - g)[-1]
        lo = real_roots(self.deriv + g)[0]
        crit = real_roots(self.deriv.deriv())
        crit = crit[(crit > lo) & (crit < hi)]
        if crit.size and np.max(np.abs(self.deriv(crit))) > g:
            raise ValueError(
                f"threshold {g} is below the term's interior slope "
                f"{np.max(np.abs(self.deriv(crit))):.4g}")
        return lo, hi

    def value(self, u):
        u = np.asarray(u, dtype=np.float64)
        # inf from a diverged sampler is caught downstream as NonFiniteError
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.poly(np.clip(u, self.lo, self.hi))
        if np.isfinite(self.threshold):
            g = self.threshold
            out = out + np.where(u > self.hi, g * (u - self.hi), 0.0)
            out = out + np.where(u < self.lo, g * (self.lo - u), 0.0)
        return out

    def slope(self, u):
        u = np.asarray(u, dtype=np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.deriv(np.clip(u, self.lo, self.hi))
        if np.isfinite(self.threshold):
            out = np.where(u > self.hi, self.threshold, out)
            out = np.where(u < self.lo, -self.threshold, out)
        return out

    def on_tape(self, u: ad.Value) -> ad.Value:
        return ad.elementwise(u, self.value, self.slope, kind="capped_term")


def cap_energy_terms(terms, u, threshold: float = np.inf):
    """Sum of individually capped terms.

    ``terms`` lists coefficient tuples (one polynomial per column of ``u``),
    ``u`` is an (n, k) array or tape Value.  Returns the per-row sum.
    """
    capped = [PolynomialTerm(c, threshold) for c in terms]
    if isinstance(u, ad.Value):
        total = None
        for j, term in enumerate(capped):
            v = term.on_tape(ad.take(u, [j], axis=1))
            total = v if total is None else total + v
        return ad.sum(total, axis=1)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    return np.sum([t.value(u[:, j]) for j, t in enumerate(capped)], axis=0)


# -- targets -----------------------------------------------------------------


@dataclass
class GaussianTarget:
    """Isotropic Gaussian; ``normalized`` includes log Z so that p~ = q_N."""

    dim: int
    sigma: float = 1.0
    normalized: bool = True

    @property
    def log_z(self) -> float:
        return 0.0 if self.normalized else self.dim * np.log(self.sigma * np.sqrt(2 * np.pi))

    def _const(self):
        return self.dim * np.log(self.sigma * np.sqrt(2 * np.pi)) if self.normalized else 0.0

    def energy(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.sum(x * x, axis=-1) / (2 * self.sigma**2) + self._const()

    def energy_value(self, x):
        return ad.sum(ad.square(x), axis=1) * (0.5 / self.sigma**2) + self._const()


@dataclass
class DoubleWell:
    """Bimodal first coordinate, wide independent Gaussians elsewhere.

    U(x) = a x1^4 - b x1^2 + c x1 + sum_{i>=2} x_i^2 / (2 sigma_wide^2)
    """

    dim: int = 12
    a: float = 1.0
    b: float = 6.0
    c: float = 1.0
    sigma_wide: float = 10.0
    cap_threshold: float = np.inf
    _terms: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        self._terms = (
            PolynomialTerm([0.0, self.c, -self.b, 0.0, self.a], self.cap_threshold),
            PolynomialTerm([0.0, 0.0, 0.5 / self.sigma_wide**2], self.cap_threshold),
        )

    @property
    def target_id(self) -> str:
        return "double_well"

    def u1(self, x1):
        x1 = np.asarray(x1, dtype=np.float64)
        return ((self.a * x1 * x1 - self.b) * x1 + self.c) * x1

    def energy(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {x.shape[1]}")
        well, wide = self._terms
        out = well.value(x[:, 0])
        if self.dim > 1:
            out = out + np.sum(wide.value(x[:, 1:]), axis=1)
        return out

    def energy_value(self, x: ad.Value) -> ad.Value:
        well, wide = self._terms
        out = ad.sum(well.on_tape(ad.take(x, [0], axis=1)), axis=1)
        if self.dim > 1:
            rest = ad.take(x, np.arange(1, self.dim), axis=1)
            out = out + ad.sum(wide.on_tape(rest), axis=1)
        return out

    # -- landscape of the first coordinate ----------------------------------

    def critical_points(self) -> np.ndarray:
        """Real roots of dU1/dx = 4a x^3 - 2b x + c, sorted."""
        r = np.roots([4 * self.a, 0.0, -2 * self.b, self.c])
        return np.sort(r[np.abs(r.imag) < 1e-9].real)

    def minima(self) -> np.ndarray:
        cp = self.critical_points()
        if cp.size != 3:
            raise ValueError("coefficients do not give two wells")
        return cp[[0, 2]]

    @property
    def saddle(self) -> float:
        cp = self.critical_points()
        if cp.size != 3:
            raise ValueError("coefficients do not give two wells")
        return float(cp[1])

    @property
    def minor_side(self) -> int:
        """+1 if the minor (higher-energy) well is to the right of the saddle."""
        left, right = self.minima()
        return 1 if self.u1(right) > self.u1(left) else -1

    def in_minor_mode(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return (x[:, 0] - self.saddle) * self.minor_side > 0

    def _well_integral(self, lo, hi):
        # shift by the global minimum so exp stays O(1)
        shift = float(np.min(self.u1(self.minima())))
        val, _ = integrate.quad(
            lambda t: np.exp(-(self.u1(t) - shift)), lo, hi, epsabs=0, epsrel=1e-12, limit=200)
        return val, shift

    def log_z1(self, lo=-np.inf, hi=np.inf) -> float:
        """log of the integral of exp(-U1) over [lo, hi] (adaptive quadrature)."""
        val, shift = self._well_integral(lo, hi)
        return float(np.log(val) - shift)

    def log_partition(self) -> float:
        """Exact log Z_B (uncapped energy)."""
        wide = (self.dim - 1) * np.log(self.sigma_wide * np.sqrt(2 * np.pi))
        return self.log_z1() + wide

    def minor_mode_ratio(self) -> float:
        """Probability mass beyond the saddle on the minor side."""
        s = self.saddle
        left = np.exp(self.log_z1(-np.inf, s))
        right = np.exp(self.log_z1(s, np.inf))
        minor = right if self.minor_side > 0 else left
        return float(minor / (left + right))

    def restricted_free_energy_gap(self) -> float:
        """F_right - F_left = log(Z_left / Z_right) for the two half-line wells."""
        s = self.saddle
        return self.log_z1(-np.inf, s) - self.log_z1(s, np.inf)


def restricted(target: EnergyModel, side: str, threshold: float):
    """Energy equal to ``target`` on one side of x1 = threshold, +inf elsewhere."""

    def energy(x):
        x = np.atleast_2d(x)
        u = target.energy(x)
        keep = x[:, 0] < threshold if side == "left" else x[:, 0] > threshold
        return np.where(keep, u, np.inf)

    return energy


# -- discrete surrogates -------------------------------------------------------


@dataclass
class DiscreteSpace:
    """Finite state space with target and sampler masses, both unnormalized."""

    states: np.ndarray
    weights_B: np.ndarray
    weights_G: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.weights_B = np.asarray(self.weights_B, dtype=np.float64)
        self.weights_G = np.asarray(self.weights_G, dtype=np.float64)
        if self.weights_B.size == 0:
            raise ValueError("empty state space")
        if self.weights_B.shape != self.weights_G.shape or len(self.states) != self.weights_B.size:
            raise ValueError("states and weights disagree in length")
        if np.any(self.weights_B <= 0) or np.any(self.weights_G <= 0):
            raise ValueError("weights must be positive")

    @property
    def size(self) -> int:
        return self.weights_B.size

    @property
    def p_B(self):
        return self.weights_B / self.weights_B.sum()

    @property
    def p_G(self):
        return self.weights_G / self.weights_G.sum()

    @property
    def log_Z_B(self) -> float:
        return float(np.log(self.weights_B.sum()))

    def log_ptB(self, idx):
        return np.log(self.weights_B[idx])

    def log_pG(self, idx):
        return np.log(self.p_G[idx])

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """State indices drawn from p_G."""
        return rng.choice(self.size, size=size, p=self.p_G)


def discrete_exact(space: DiscreteSpace, f) -> tuple[float, float]:
    """Exact Q = E_B[f] and the single-sample importance-sampling variance
    E_G[(f p_B / p_G)^2] - Q^2."""
    f = np.broadcast_to(np.asarray(f, dtype=np.float64), (space.size,))
    pB, pG = space.p_B, space.p_G
    q = float(np.sum(pB * f))
    g = f * pB / pG
    var = float(np.sum(pG * g * g) - q * q)
    return q, max(var, 0.0)
