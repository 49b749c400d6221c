"""Named experiment configurations.

Each preset expands to an explicit tree with ``model`` (team form or joint
form), ``learner`` and ``experiment`` keys. Run parameters (horizon, team
count, iteration budget, rates, batch sizes) are the standard ones; the team
matrices themselves are choices of this package.
"""
from __future__ import annotations

import copy

_FIG2_TEAMS = {
    "num_teams": 2, "horizon": 2, "state_dim": 1,
    "a": [1.0, 0.9], "a_bar": [0.1, 0.05],
    "b": [[1.0, 0.5], [0.5, 1.0]], "b_bar": [[0.1, 0.0], [0.0, 0.1]],
    "q": [1.0, 1.5], "q_bar": [0.5, 1.0],
    "r": [[6.0, 8.0], [8.0, 6.0]], "r_bar": [[6.0, 8.0], [8.0, 6.0]],
    "sigma": [1.0, 1.0], "sigma0": [0.2, 0.2],
    "agent_counts": 1000,
}

_SCALAR_ONE = {
    "num_players": 1, "horizon": 1, "state_dim": 1, "control_dims": [1],
    "a": 1.0, "a_bar": 0.0, "b": [1.0], "b_bar": [0.0],
    "q": [1.0], "q_bar": [1.0], "r": [1.0], "r_bar": [1.0],
    "sigma": 1.0, "sigma0": 0.0,
}

_TWO_PLAYER = {
    "num_players": 2, "horizon": 1, "state_dim": 1, "control_dims": [1, 1],
    "a": 1.0, "a_bar": 0.0, "b": [1.0, 1.0], "b_bar": [0.0, 0.0],
    "q": [[0.0, 1.0], [0.0, 1.0]], "q_bar": [[0.0, 1.0], [0.0, 1.0]],
    "r": [1.0, 1.0], "r_bar": [1.0, 1.0],
    "sigma": 1.0, "sigma0": 0.0,
}

# scalar two-team instance for the finite-population sweep
_EPS_TEAMS = {
    "num_teams": 2, "horizon": 2, "state_dim": 1,
    "a": [1.0, 0.8], "a_bar": [0.2, 0.1],
    "b": [[1.0, 0.3], [0.3, 1.0]], "b_bar": [[0.2, 0.0], [0.0, 0.2]],
    "q": [2.0, 1.0], "q_bar": [0.5, 0.25],
    "r": [[1.0, 2.0], [2.0, 1.0]], "r_bar": [[1.5, 2.0], [2.0, 1.5]],
    "sigma": [1.0, 1.0], "sigma0": [0.0, 0.0],
}

_PRESETS = {
    "hand_scalar": {
        "model": _SCALAR_ONE,
        "learner": {"mode": "exact", "iterations": 1000, "eta": 1e-2},
        "experiment": {},
    },
    "hand_two_player": {
        "model": _TWO_PLAYER,
        "learner": {"mode": "exact", "iterations": 1000, "eta": 1e-2},
        "experiment": {},
    },
    # the two-player instance above, whose cross coupling violates dominance
    "diag_dom_fail": {
        "model": _TWO_PLAYER,
        "learner": {"mode": "exact", "iterations": 2000, "eta": 1e-2, "proj_radius": 10.0},
        "experiment": {"gamma_scales": [1.0, 0.5, 0.25, 0.125]},
    },
    "fig2_left": {
        "model": {"teams": _FIG2_TEAMS},
        "learner": {"mode": "zero_order_expected", "iterations": 1000, "eta": 1e-3,
                    "batch_size": 5000, "radius": 0.1, "sigma_y": 1.0, "sigma_x": 1.0},
        "experiment": {"modes": ["exact", "zero_order_expected"], "vanilla": True},
    },
    "fig2_center": {
        "model": _SCALAR_ONE,
        "learner": {"mode": "zero_order_expected", "iterations": 1000, "eta": 1e-3,
                    "batch_size": 5000, "radius": 1e-2},
        "experiment": {"eta_grid": [1e-2, 1e-3, 1e-4]},
    },
    "fig2_right": {
        "model": _SCALAR_ONE,
        "learner": {"mode": "zero_order_expected", "iterations": 1000, "eta": 1e-3,
                    "batch_size": 5000, "radius": 1e-2},
        "experiment": {"batch_grid": [500, 1000, 5000, 10000]},
    },
    "appendix_h": {
        "model": _SCALAR_ONE,
        "learner": {"mode": "zero_order_sample_path", "iterations": 1000, "eta": 1e-3,
                    "batch_size": 2000, "radius": 0.1, "population": 1000,
                    "rollout": "sufficient"},
        "experiment": {"compare": [["zero_order_expected", 2000],
                                   ["zero_order_sample_path", 2000],
                                   ["zero_order_sample_path", 10000]]},
    },
    "eps_nash": {
        "model": {"teams": _EPS_TEAMS},
        "learner": {},
        "experiment": {"m_grid": [10, 50, 100, 500, 1000], "runs": 4000},
    },
}


def names() -> list[str]:
    return sorted(_PRESETS)


def expand(name: str) -> dict:
    """Fully explicit copy of a preset tree."""
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(names())}")
    from .learner import config_from_dict, config_to_dict

    tree = copy.deepcopy(_PRESETS[name])
    tree["preset"] = name
    tree["learner"] = config_to_dict(config_from_dict(tree["learner"]))
    return tree
