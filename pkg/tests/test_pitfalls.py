import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boltzlab import autodiff as ad
from boltzlab.flow import FlowModel
from boltzlab.pitfalls import (CategoricalModel, ControlVariate, GridDensity, enumerate_minibatches,
                               estimator_moments, mass_preservation_check, naive_gradient,
                               naive_minibatch_kl, naive_minibatch_kl_grad, normalized_minibatch_kl,
                               stabilized_gradient, unconstrained_kl_closed_form, unconstrained_kl_flow,
                               variance_reduction_formula)


def grid_density(m=64):
    x = np.linspace(-4, 4, m)
    p = np.exp(-0.5 * (x - 1) ** 2)
    p /= p.sum() * (x[1] - x[0])
    q = np.exp(-0.5 * x**2 / 4)
    q /= q.sum() * (x[1] - x[0])
    return GridDensity(x, q, p)


def surrogate(seed, M=8):
    rng = np.random.default_rng(seed)
    model = CategoricalModel(rng.normal(size=M))
    return model.dq_dtheta(), rng.normal(size=M) * 2 + 1


# -- unconstrained functional flow ----------------------------------------------


def test_rk4_matches_closed_form():
    d = grid_density()
    q = unconstrained_kl_flow(d, T=10.0, dt=1e-3)
    np.testing.assert_allclose(q, unconstrained_kl_closed_form(d, 10.0), rtol=1e-9)


def test_closed_form_solves_the_ode():
    d = grid_density()
    h = 1e-5
    dq = (unconstrained_kl_closed_form(d, 2 + h) - unconstrained_kl_closed_form(d, 2 - h)) / (2 * h)
    np.testing.assert_allclose(dq, d.p / unconstrained_kl_closed_form(d, 2.0), rtol=1e-7)


def test_unconstrained_mass_grows_without_bound():
    d = grid_density()
    dx = d.grid[1] - d.grid[0]
    masses = [unconstrained_kl_closed_form(d, T).sum() * dx for T in (0.0, 1.0, 10.0, 100.0)]
    assert masses[0] == pytest.approx(1.0)
    assert np.all(np.diff(masses) > 0)
    assert masses[-1] > 10


def test_flow_step_count_rounds_up():
    d = grid_density(8)
    a = unconstrained_kl_flow(d, T=1.0, dt=0.3)
    b = unconstrained_kl_flow(d, T=1.0, dt=0.25)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_array_equal(unconstrained_kl_flow(d, T=0.0, dt=0.1), d.q)


def test_grid_density_validation():
    with pytest.raises(ValueError):
        GridDensity([0, 1], [1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        GridDensity([0, 1], [1.0, 1.0], [-1.0, 1.0])
    with pytest.raises(ValueError):
        unconstrained_kl_flow(grid_density(4), 1.0, 0.0)


# -- minibatch KL ---------------------------------------------------------------


def test_naive_kl_step_raises_weighted_log_likelihood():
    rng = np.random.default_rng(0)
    model = FlowModel(2, 2, 8, rng=rng).randomize(rng, 0.2)
    x = rng.normal(size=(8, 2))
    log_pB = -0.5 * np.sum(x**2, axis=1) - np.log(2 * np.pi)
    before = model.log_prob(x)
    tape = ad.Tape()
    vals = tape.leaves(model.params)
    grads = naive_minibatch_kl_grad(x, log_pB, model, vals)
    step = model.copy()
    step.params = [p - 1e-3 * g for p, g in zip(model.params, grads)]
    after = step.log_prob(x)
    w = np.exp(log_pB)
    assert np.sum(w * after) > np.sum(w * before)


def test_naive_kl_gradient_on_categorical():
    model = CategoricalModel(np.random.default_rng(1).normal(size=6))
    idx = np.array([0, 2, 2, 5])
    log_pB = np.log(np.array([0.1, 0.2, 0.2, 0.05]))
    tape = ad.Tape()
    vals = tape.leaves(model.params)
    (g,) = naive_minibatch_kl_grad(idx, log_pB, model, vals)
    p = model.probs()
    expected = -sum(np.exp(lb) * (np.eye(6)[i] - p) for i, lb in zip(idx, log_pB))
    np.testing.assert_allclose(g, expected, rtol=1e-12, atol=1e-15)
    assert naive_minibatch_kl(log_pB, model.log_prob(idx)) == pytest.approx(
        naive_minibatch_kl(log_pB, model.log_prob(idx, vals)).item())


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_normalized_kl_ignores_overall_scale(seed, shift):
    rng = np.random.default_rng(seed)
    lb, lg = rng.normal(size=5), rng.normal(size=5)
    assert normalized_minibatch_kl(lb, lg + shift) == pytest.approx(normalized_minibatch_kl(lb, lg), abs=1e-10)
    assert normalized_minibatch_kl(lb + shift, lb) == pytest.approx(0.0, abs=1e-12)
    assert normalized_minibatch_kl(lb, lg) >= -1e-12


def test_normalized_kl_tape_matches_array_and_fd():
    rng = np.random.default_rng(2)
    lb, lg = rng.normal(size=4), rng.normal(size=4)
    tape = ad.Tape()
    v = tape.leaf(lg)
    out = normalized_minibatch_kl(lb, v)
    assert out.item() == pytest.approx(normalized_minibatch_kl(lb, lg), rel=1e-13)
    g = ad.backward(out, [v])[0]
    h = 1e-6
    num = np.array([(normalized_minibatch_kl(lb, lg + h * e) - normalized_minibatch_kl(lb, lg - h * e)) / (2 * h)
                    for e in np.eye(4)])
    np.testing.assert_allclose(g, num, atol=1e-8)
    assert abs(g.sum()) < 1e-12


# -- control variate ------------------------------------------------------------


def test_softmax_derivatives_sum_to_zero():
    dq, _ = surrogate(3)
    np.testing.assert_allclose(dq.sum(axis=0), 0.0, atol=1e-15)


def test_enumerate_minibatches():
    b = enumerate_minibatches(3, 2)
    assert b.shape == (9, 2)
    assert len({tuple(r) for r in b}) == 9


@pytest.mark.parametrize("n", [1, 2, 3])
def test_stabilized_estimator_is_unbiased(n):
    dq, f = surrogate(4)
    K = ControlVariate.exact(dq, f).K_star
    m0, _ = estimator_moments(dq, f, n)
    m1, _ = estimator_moments(dq, f, n, K)
    np.testing.assert_allclose(m1, m0, atol=1e-15)
    np.testing.assert_allclose(m0, np.mean(dq * f[:, None], axis=0), atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_variance_reduction_matches_formula(n):
    dq, f = surrogate(5)
    K = ControlVariate.exact(dq, f).K_star
    _, v0 = estimator_moments(dq, f, n)
    _, v1 = estimator_moments(dq, f, n, K)
    np.testing.assert_allclose(v0 - v1, variance_reduction_formula(dq, f, n), rtol=1e-10, atol=1e-18)
    assert np.all(v1 <= v0 + 1e-18)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5).filter(lambda e: abs(e) > 1e-3))
def test_optimal_K_minimizes_variance(seed, eps):
    dq, f = surrogate(seed, M=5)
    K = ControlVariate.exact(dq, f).K_star
    _, v = estimator_moments(dq, f, 2, K)
    _, v_off = estimator_moments(dq, f, 2, K + eps)
    assert np.all(v <= v_off + 1e-15)


def test_running_control_variate_converges():
    dq, f = surrogate(6)
    rng = np.random.default_rng(7)
    cv = ControlVariate(dq.shape[1], decay=0.999)
    for _ in range(20_000):
        idx = rng.integers(0, len(f), size=4)
        cv.update(dq[idx], f[idx])
    np.testing.assert_allclose(cv.K_star, ControlVariate.exact(dq, f).K_star, atol=0.1)


def test_stabilized_gradient_forms():
    dq, f = surrogate(8)
    cv = ControlVariate.exact(dq, f)
    idx = np.array([1, 3, 3])
    a = stabilized_gradient(dq[idx], f[idx], cv)
    b = stabilized_gradient(dq[idx], f[idx], cv.K_star)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, naive_gradient(dq[idx], f[idx]) + cv.K_star * dq[idx].mean(axis=0))
    np.testing.assert_array_equal(stabilized_gradient(dq[idx], f[idx], np.zeros(dq.shape[1])),
                                  naive_gradient(dq[idx], f[idx]))


def test_control_variate_requires_warmup():
    with pytest.raises(RuntimeError):
        ControlVariate(3).K_star


def test_mass_preserved_only_with_control_variate():
    dq, f = surrogate(9)
    rep = mass_preservation_check(dq, f, np.random.default_rng(10), n=2, n_minibatches=100_000)
    assert rep.exact_expected == pytest.approx(0.0, abs=1e-15)
    assert abs(rep.mean_change) <= 4 * rep.std_error
    assert abs(rep.naive_mean_change - rep.naive_exact_expected) <= 4 * rep.naive_std_error
    assert abs(rep.naive_mean_change) > 4 * rep.naive_std_error
