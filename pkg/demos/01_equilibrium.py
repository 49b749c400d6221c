"""
Solving for a Nash equilibrium
==============================

Build a two-team game, solve the coupled Riccati recursions for the
closed-loop equilibrium, and compare with the open-loop one.
"""

import numpy as np

from lqmftg import presets, riccati
from lqmftg.model import derive_joint_model, spec_from_dict

# A model comes from a plain dict; presets are such dicts. ``teams`` configs
# are assembled into one joint state, one block per team.
tree = presets.expand("fig2_left")["model"]
model = derive_joint_model(spec_from_dict(tree))
print("players", model.num_players, "state dim", model.state_dim, "horizon", model.horizon)

# Closed-loop equilibrium: one gain for the deviation y = x - xbar and one for
# the mean field, per player and step.
sol = riccati.solve_clne(model)
for i in range(model.num_players):
    print(f"player {i}: K_0 = {sol.profile.k[i][0].round(4)}, Kbar_0 = {sol.profile.k_bar[i][0].round(4)}")

# The stationarity residual is the certificate that these gains are an equilibrium.
print("max residual", riccati.verify_ne_residual(model, sol).max())
print("condition (1/rcond) per step", (1 / sol.rcond).round(2))

# ---------------------------------------------------------------------------
# The open-loop equilibrium solves a different recursion. For this game the
# two sets of gains coincide to rounding.
olne = riccati.solve_olne(model)
print("open-loop residual", riccati.olne_residual(model, olne).max())
print("open-loop vs closed-loop gains", olne.gap_to(sol.profile))

# ---------------------------------------------------------------------------
# A tiny hand example: one player, one step, everything equal to one.
scalar = derive_joint_model(spec_from_dict(presets.expand("hand_scalar")["model"]))
print("scalar K* =", riccati.solve_clne(scalar).profile.k[0][0, 0, 0])

# Solutions round-trip through JSON.
d = riccati.solution_to_dict(sol)
back = riccati.solution_from_dict(d)
assert np.allclose(back.profile.k[0], sol.profile.k[0])
