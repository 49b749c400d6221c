"""
Learning the equilibrium from costs
===================================

Receding-horizon natural policy gradient: learn the last step first, then
move backwards. Gradients are exact or come from cost evaluations alone.
"""

from dataclasses import replace

from lqmftg import learner, presets, riccati
from lqmftg.model import derive_joint_model, spec_from_dict

tree = presets.expand("fig2_left")
model = derive_joint_model(spec_from_dict(tree["model"]))
ne = riccati.solve_clne(model)
cfg = learner.config_from_dict(tree["learner"])

# With exact gradients the error decays geometrically within each phase.
prof, trace = learner.mrpg_run(model, replace(cfg, mode="exact"), ne)
print("exact gradients: final error", prof.max_error(ne.profile))
e = trace.error(t=0, player=0)
print("phase 0 error at k = 0, 250, 500, 999:", [f"{e[k]:.1e}" for k in (0, 250, 500, 999)])

# Zero-order gradients from sphere-smoothed cost evaluations. A shorter run
# keeps the demo quick; the preset runs 1000 iterations.
quick = replace(cfg, iterations=200, batch_size=2000)
prof, trace = learner.mrpg_run(model, quick, ne)
print("zero-order, 200 iterations: error", round(prof.max_error(ne.profile), 3))

# The non-receding baseline updates every step at once on the full-horizon cost.
prof, _ = learner.vanilla_npg_run(model, replace(cfg, mode="exact"), ne)
print("vanilla, exact gradients: error", prof.max_error(ne.profile))

# Traces are long-format tables, one row per (phase, iteration, player).
trace.to_csv("trace_demo.csv")
print("wrote trace_demo.csv with", len(trace), "rows")
