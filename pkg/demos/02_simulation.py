"""
Simulating populations
======================

Roll out the infinite-population limit and a finite team of M agents under
the equilibrium, and check the cost formulas against Monte Carlo.
"""

import numpy as np

from lqmftg import dynamics, presets, riccati
from lqmftg.model import PolicyProfile, derive_joint_model, spec_from_dict

model = derive_joint_model(spec_from_dict(presets.expand("eps_nash")["model"]))
ne = riccati.solve_clne(model).profile

# Expected costs from the value recursion, split into deviation and mean-field parts.
exact = dynamics.analytic_cost(model, ne)
print("analytic cost per player", exact.total.round(4))

# Monte Carlo in the limit model. Noise is seeded per block of runs, so any
# split of the runs gives the same numbers.
traj = dynamics.simulate_mean_field(model, ne, seed=0, n_runs=50_000)
se = traj.cost.std(axis=0) / np.sqrt(len(traj.cost))
print("Monte Carlo             ", traj.cost.mean(axis=0).round(4), "+/-", se.round(4))

# A finite team: the empirical mean replaces the conditional expectation.
fin = dynamics.simulate_finite_population(model, ne, 50, seed=1, n_runs=2000)
print("M=50 agents             ", fin.cost.mean(axis=0).round(4))
print("empirical mean is the mean field:", np.allclose(fin.mean_field, fin.x.mean(axis=1)))

# ---------------------------------------------------------------------------
# One realized path is an unbiased but noisy cost estimate. Its variance has
# a closed form, 2 ||Phi||_F^2 for the y part.
scalar = derive_joint_model(spec_from_dict(presets.expand("hand_scalar")["model"]))
cert = dynamics.variance_certificate(scalar, PolicyProfile.zeros(scalar))
print("Phi =\n", cert.phi)
print("mean", cert.mean, "variance", cert.variance)
paths = dynamics.simulate_mean_field(scalar, PolicyProfile.zeros(scalar), seed=2, n_runs=200_000)
print("sampled mean", paths.cost_y.mean().round(3), "sampled variance", paths.cost_y.var().round(3))
