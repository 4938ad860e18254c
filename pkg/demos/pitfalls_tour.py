"""Why minibatch KL training needs care, in four small experiments.

Run with ``python demos/pitfalls_tour.py``; it takes a few seconds.
"""

import numpy as np

from boltzlab import autodiff as ad
from boltzlab.flow import FlowModel
from boltzlab.pitfalls import (CategoricalModel, ControlVariate, GridDensity, estimator_moments,
                               mass_preservation_check, naive_minibatch_kl_grad, normalized_minibatch_kl,
                               unconstrained_kl_closed_form, unconstrained_kl_flow)

rng = np.random.default_rng(0)

# 1. Minimizing KL(p || q) pointwise, with no constraint that q integrates to
#    one, never settles: q grows like sqrt(2 p t) everywhere p > 0.
grid = np.linspace(-4, 4, 64)
dx = grid[1] - grid[0]
p = np.exp(-0.5 * (grid - 1) ** 2)
p /= p.sum() * dx
dens = GridDensity(grid, np.full(64, 1 / (64 * dx)), p)
print("1. unconstrained KL gradient flow")
for T in (0.0, 1.0, 10.0, 100.0):
    q = unconstrained_kl_flow(dens, T, 1e-2) if T else dens.q
    err = np.max(np.abs(q - unconstrained_kl_closed_form(dens, T)) / q)
    print(f"   T={T:6.1f}  mass={q.sum() * dx:8.3f}  vs closed form: {err:.1e}")

# 2. The same happens on a minibatch: with the divergence summed over sampled
#    points only, each step pushes density onto those points.
print("2. naive minibatch KL on a 2-D flow")
model = FlowModel(2, 2, 8, rng=rng).randomize(rng, 0.3)
x = rng.normal(size=(8, 2))
log_pB = -0.5 * np.sum(x**2, axis=1) - np.log(2 * np.pi)
for step in range(41):
    if step % 10 == 0:
        print(f"   step {step:2d}  minibatch mass sum p_G(x_i) = {np.exp(model.log_prob(x)).sum():.4f}")
    grads = naive_minibatch_kl_grad(x, log_pB, model, ad.Tape().leaves(model.params))
    model.params = [w - 0.05 * g for w, g in zip(model.params, grads)]

# 3. Renormalizing both densities over the minibatch restores a proper
#    divergence: it is never negative and vanishes for proportional weights.
vals = [normalized_minibatch_kl(np.log(rng.random(8)), np.log(rng.random(8))) for _ in range(10_000)]
lb = np.log(rng.random(8))
print(f"3. normalized minibatch KL: min over 1e4 draws {min(vals):.3e}; "
      f"proportional weights {normalized_minibatch_kl(lb, lb - 3.0):.1e}")

# 4. Adding K * sum_i dq(x_i)/dtheta, which has zero mean, keeps the gradient
#    unbiased, lowers its variance and stops the expected mass drift.
cat = CategoricalModel(rng.normal(size=8))
dq = cat.dq_dtheta()
f = rng.normal(size=8) * 2 + 1
K = ControlVariate.exact(dq, f).K_star
_, naive_var = estimator_moments(dq, f, 2)
_, stab_var = estimator_moments(dq, f, 2, K)
mass = mass_preservation_check(dq, f, rng, n=2, n_minibatches=100_000, K=K)
print("4. control variate on an 8-state softmax model, minibatches of 2")
print(f"   total variance naive {naive_var.sum():.4f} -> stabilized {stab_var.sum():.4f}")
print(f"   mean mass change per step: naive {mass.naive_mean_change:+.2e} "
      f"(+-{mass.naive_std_error:.1e}), stabilized {mass.mean_change:+.2e} (+-{mass.std_error:.1e})")
