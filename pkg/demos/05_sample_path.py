"""
Learning from single rollouts
=============================

Instead of expected costs, each cost query simulates one fresh team of M
agents and returns its realized cost. That is unbiased but noisy, so the
learner needs bigger batches for the same accuracy.
"""

from dataclasses import replace

from lqmftg import learner, presets, riccati
from lqmftg.model import derive_joint_model, spec_from_dict

tree = presets.expand("appendix_h")
model = derive_joint_model(spec_from_dict(tree["model"]))
ne = riccati.solve_clne(model)
cfg = replace(learner.config_from_dict(tree["learner"]), iterations=400)

# Compare trace noise (spread of the per-iteration error changes).
for mode, nb in tree["experiment"]["compare"]:
    prof, trace = learner.mrpg_run(model, replace(cfg, mode=mode, batch_size=nb), ne)
    print(f"{mode:24s} N_b={nb:6d}: error {prof.max_error(ne.profile):.3f}, "
          f"increment std {trace.increment_std():.2e}")

# Rollouts can also be simulated agent by agent; the default draws the same
# cost distribution from the team's scatter matrix, which is much cheaper.
slow = replace(cfg, mode="zero_order_sample_path", rollout="agents", iterations=20, batch_size=500, population=50)
prof, _ = learner.mrpg_run(model, slow, ne)
print("agent-level rollouts, 20 iterations: error", round(prof.max_error(ne.profile), 3))
