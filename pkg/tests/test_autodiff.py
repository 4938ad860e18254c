import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boltzlab import autodiff as ad


def fd_grad(fn, x, h=1e-5):
    """Central differences of scalar fn at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def scalar_grad(build, x0):
    tape = ad.Tape()
    x = tape.leaf(np.asarray(x0, dtype=np.float64))
    return ad.backward(build(x), [x])[0]


# -- op values ------------------------------------------------------------------


@pytest.mark.parametrize("x, expected", [(0.0, 0.0), (2.0, 2.0), (-1.0, math.exp(-1) - 1)])
def test_celu_values(x, expected):
    t = ad.Tape()
    assert ad.celu(t.leaf(x)).item() == pytest.approx(expected, abs=1e-15)


def test_celu_alpha_scaling():
    t = ad.Tape()
    v = ad.celu(t.leaf(-1.0), alpha=2.0).item()
    assert v == pytest.approx(2.0 * (math.exp(-0.5) - 1))


def test_apply_dispatch_matches_direct_calls():
    t = ad.Tape()
    a, b = t.leaf(np.array([1.0, -2.0])), t.leaf(np.array([0.5, 3.0]))
    np.testing.assert_array_equal(ad.apply("add", a, b).data, (a + b).data)
    np.testing.assert_array_equal(ad.apply("max", a, b).data, [1.0, 3.0])
    np.testing.assert_array_equal(ad.apply("relu-mask", a).data, [1.0, 0.0])
    np.testing.assert_allclose(ad.apply("celu", a, alpha=1.0).data, [1.0, math.exp(-2) - 1])
    with pytest.raises(ValueError):
        ad.apply("sqrt", a)


# -- detach ---------------------------------------------------------------------


def test_detach_product_rule():
    assert scalar_grad(lambda x: ad.detach(x) * x, 3.0) == pytest.approx(3.0)


def test_detach_of_square_has_no_gradient():
    tape = ad.Tape()
    x = tape.leaf(5.0)
    root = ad.detach(ad.square(x)) + 0.0 * x
    assert ad.backward(root, [x])[0] == 0.0


def test_difference_with_detached_self():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    root = ad.square(x - ad.detach(x))
    assert root.item() == 0.0
    assert ad.backward(root, [x])[0] == 0.0


def test_detach_idempotent():
    tape = ad.Tape()
    x = tape.leaf(1.5)
    d1 = ad.detach(x)
    d2 = ad.detach(ad.detach(x))
    assert d1.item() == d2.item()
    g1 = ad.backward(d1 * 2.0, [x])[0]
    g2 = ad.backward(d2 * 2.0, [x])[0]
    assert g1 == g2 == 0.0


# -- backward -------------------------------------------------------------------


def test_product_gradient():
    tape = ad.Tape()
    x, y = tape.leaf(2.0), tape.leaf(3.0)
    gx, gy = ad.backward(x * y, [x, y])
    assert (gx, gy) == (3.0, 2.0)


@given(st.floats(-20, 20))
def test_log_exp_identity_gradient(x):
    assert scalar_grad(lambda v: ad.log(ad.exp(v)), x) == pytest.approx(1.0, rel=1e-12)


def test_non_scalar_root_rejected():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(x * 2.0, [x])


def test_unreached_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x, y = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
    gx, gy = ad.backward(ad.sum(x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(3))


def test_tape_is_topologically_ordered():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    ad.sum(ad.tanh(x * 2.0) + ad.exp(x))
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def _mlp(params, x):
    w1, b1, w2, b2, w3, b3 = params
    h = ad.celu(x @ w1 + b1)
    h = ad.tanh(h @ w2 + b2)
    return ad.sum(h @ w3 + b3)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    shapes = [(4, 8), (8,), (8, 8), (8,), (8, 1), (1,)]
    params = [rng.normal(size=s) * 0.7 for s in shapes]
    x = rng.normal(size=(1, 4))
    tape = ad.Tape()
    vals = tape.leaves(params)
    grads = ad.backward(_mlp(vals, tape.constant(x)), vals)

    def f(flat_i, i):
        ps = [p.copy() for p in params]
        ps[i] = flat_i
        t = ad.Tape(record=False)
        return _mlp([t.constant(p) for p in ps], t.constant(x)).item()

    for i, p in enumerate(params):
        num = fd_grad(lambda v: f(v, i), p)
        big = np.abs(num) > 1e-8
        rel = np.abs(grads[i] - num)[big] / np.abs(num)[big]
        assert rel.max(initial=0) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_random_graphs_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.5, 2.0, size=5)
    c = rng.normal(size=5)

    def build(x):
        a = ad.log(x) * c + ad.tanh(x / 3.0)
        b = ad.maximum(ad.square(x) - 1.0, ad.celu(x - 1.5)) / (x + 1.0)
        return ad.logsumexp(a) + ad.mean(b * ad.exp(-x)) + ad.sum(ad.take(a, [0, 0, 3]))

    g = scalar_grad(build, x0)

    def f(v):
        t = ad.Tape(record=False)
        return build(t.constant(v)).item()

    num = fd_grad(f, x0)
    big = np.abs(num) > 1e-8
    assert np.all(np.abs(g - num)[big] <= 1e-5 * np.abs(num)[big])


@settings(max_examples=30)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=4)
    tape = ad.Tape()
    x = tape.leaf(x0)
    r1 = ad.sum(ad.tanh(x) * x)
    r2 = ad.sum(ad.exp(x * 0.3))
    g = ad.backward(r1 * a + r2 * b, [x])[0]
    g1, g2 = ad.backward(r1, [x])[0], ad.backward(r2, [x])[0]
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=1e-12, atol=1e-12)


# -- errors ---------------------------------------------------------------------


def test_log_of_nonpositive_reports_node():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 0.0]))
    with pytest.raises(ad.DomainError) as info:
        ad.log(x)
    assert info.value.node_id is not None


def test_division_by_zero_is_domain_error():
    tape = ad.Tape()
    with pytest.raises(ad.DomainError):
        tape.leaf(1.0) / tape.leaf(0.0)


def test_overflow_is_non_finite_error():
    tape = ad.Tape()
    with pytest.raises(ad.NonFiniteError):
        ad.exp(tape.leaf(1000.0))


def test_non_finite_leaf_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tape().leaf(np.array([1.0, np.nan]))


# -- per-sample gradients -------------------------------------------------------


def test_per_sample_two_roots():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    gs = ad.per_sample_gradients([ad.square(x), x * 3.0], [x])
    assert [g[0] for g in gs] == [2.0, 3.0]
    total = ad.backward(ad.square(x) + x * 3.0, [x])[0]
    assert gs[0][0] + gs[1][0] == total == 5.0


def test_per_sample_single_root_equals_backward():
    tape = ad.Tape()
    x = tape.leaf(np.array([0.3, -0.7]))
    root = ad.sum(ad.tanh(x))
    np.testing.assert_array_equal(ad.per_sample_gradients([root], [x])[0][0], ad.backward(root, [x])[0])


def test_per_sample_vector_root_sums_to_batched_gradient():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(8, 3, 3))
    tape = ad.Tape()
    theta = tape.leaf(rng.normal(size=3))
    roots = [ad.sum((theta @ A[i]) * theta) for i in range(8)]
    per = ad.per_sample_gradients(roots, [theta])
    batched = ad.backward(ad.sum(ad.concat([r * np.ones(1) for r in roots])), [theta])[0]
    np.testing.assert_allclose(np.sum([p[0] for p in per], axis=0), batched, rtol=0, atol=1e-12)

    vec = ad.concat([r * np.ones(1) for r in roots])
    per_vec = ad.per_sample_gradients(vec, [theta])
    for a, b in zip(per, per_vec):
        np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)


def test_non_recording_tape_keeps_no_nodes():
    tape = ad.Tape(record=False)
    x = tape.constant(np.ones(3))
    y = ad.sum(ad.exp(x) * 2.0)
    assert len(tape) == 0
    assert y.item() == pytest.approx(6 * math.e)
