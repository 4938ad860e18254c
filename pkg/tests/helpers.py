"""Finite-difference oracles shared by the test modules."""

import numpy as np


def central_diff(fn, x, h=1e-4):
    """Fourth-order central differences of scalar fn at array x.

    The five-point stencil keeps truncation error near h^4, so gradients as
    small as 1e-6 can be checked at 1e-5 relative error.  CELU has a jump in
    its second derivative at 0, so h stays small enough that few stencils
    straddle it.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        def at(d):
            v = x.copy()
            v[i] += d
            return fn(v)
        g[i] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    big = np.abs(numeric) > floor
    if not np.any(big):
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[big] / np.abs(numeric)[big]))


def param_fd(model, scalar_of_model, h=1e-4):
    """Central differences of scalar_of_model(model) over the flat parameters."""
    flat = model.get_flat()
    m = model.copy()

    def fn(v):
        m.set_flat(v)
        return scalar_of_model(m)

    return central_diff(fn, flat, h)
