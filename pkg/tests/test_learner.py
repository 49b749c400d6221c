import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from lqmftg import dynamics, learner, presets, riccati
from lqmftg.learner import LearnerConfig
from lqmftg.model import GameSpec, PolicyProfile, derive_joint_model, random_spec, spec_from_dict


def preset_model(name):
    return derive_joint_model(spec_from_dict(presets.expand(name)["model"]))


def random_profile(rng, model, scale=0.3):
    T, n = model.horizon, model.state_dim
    return PolicyProfile(tuple(scale * rng.standard_normal((T, p, n)) for p in model.control_dims),
                         tuple(scale * rng.standard_normal((T, p, n)) for p in model.control_dims))


def swapped(model):
    """The same game with the two players' labels exchanged."""
    s = model.spec
    flip = lambda seq: tuple(reversed(seq))
    return derive_joint_model(GameSpec(
        s.num_players, s.horizon, s.state_dim, flip(s.control_dims), s.a, s.a_bar,
        flip(s.b), flip(s.b_bar), flip(s.q), flip(s.q_bar), flip(s.r), flip(s.r_bar), s.sigma, s.sigma0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["y", "x"]))
def test_gradient_matches_finite_differences(seed, part):
    rng = np.random.default_rng(seed)
    m = derive_joint_model(random_spec(rng, 2, 2, 3))
    prof = random_profile(rng, m)
    i, t = int(rng.integers(2)), int(rng.integers(3))
    cov = np.diag([1.0, 0.5])
    g = learner.analytic_gradient(m, prof, i, t, cov, part)

    def cost(k):
        p = prof.copy()
        p.gains(part)[i][t] = k
        return dynamics.value_recursion(m, p, i, part).cost(t, cov)

    k0 = prof.gains(part)[i][t]
    fd = np.zeros_like(k0)
    h = 1e-5
    for idx in np.ndindex(k0.shape):
        e = np.zeros_like(k0)
        e[idx] = h
        fd[idx] = (cost(k0 + e) - cost(k0 - e)) / (2 * h)
    assert np.linalg.norm(fd - g) <= 1e-4 * max(1.0, np.linalg.norm(g))


def test_gradient_is_affine_in_own_gain():
    rng = np.random.default_rng(1)
    m = derive_joint_model(random_spec(rng, 2, 2, 2))
    prof = random_profile(rng, m)
    h = rng.standard_normal(prof.k[0][0].shape)
    grads = []
    for s in (-1.0, 0.0, 1.0):
        p = prof.copy()
        p.k[0][0] = p.k[0][0] + s * h
        grads.append(learner.analytic_gradient(m, p, 0, 0))
    assert_allclose(grads[0] + grads[2], 2 * grads[1], atol=1e-12)


def test_gradient_vanishes_at_equilibrium():
    m = derive_joint_model(random_spec(np.random.default_rng(2), 3, 2, 3))
    sol = riccati.solve_clne(m)
    assert learner.profile_gradient_norm(m, sol.profile) <= 1e-9


def test_natural_gradient_is_scale_free():
    m = preset_model("fig2_left")
    traces = []
    for s in (0.5, 1.0, 2.0):
        cfg = LearnerConfig(mode="exact", iterations=30, eta=0.05, sigma_y=s, sigma_x=s)
        traces.append(learner.mrpg_run(m, cfg, riccati.solve_clne(m))[1])
    for tr in traces[1:]:
        assert_allclose(tr.column("err_K"), traces[0].column("err_K"), rtol=1e-10, atol=1e-14)
        assert_allclose(tr.column("err_Kbar"), traces[0].column("err_Kbar"), rtol=1e-10, atol=1e-14)


def test_zero_order_constant_oracle():
    k0 = np.zeros((2, 3))
    g = learner.zero_order_gradient(lambda b: np.full(len(b), 7.0), k0, 100_000, 0.1, seed=0)
    # each entry is a mean of 6 * 7 * e / r^2 with sd around 42 / sqrt(6) / 0.1
    assert np.abs(g).max() < 5 * 42 / np.sqrt(6) / 0.1 / np.sqrt(100_000)


def test_zero_order_quadratic():
    g = learner.zero_order_gradient(lambda b: b[:, 0, 0] ** 2, np.ones((1, 1)), 100_000, 0.5, seed=1)
    assert g[0, 0] == pytest.approx(2.0, rel=0.02)
    # at a small radius only the paired draws cancel the O(J / r) noise
    g = learner.zero_order_gradient(lambda b: b[:, 0, 0] ** 2, np.ones((1, 1)), 100_000, 1e-3, seed=1,
                                    pairing="antithetic")
    assert g[0, 0] == pytest.approx(2.0, rel=0.02)


@pytest.mark.parametrize("pairing", learner.PAIRINGS)
def test_zero_order_constant_oracle_mean(pairing):
    est = np.stack([learner.zero_order_gradient(lambda b: np.full(len(b), 3.0), np.zeros((1, 2)), 2000, 0.1,
                                                seed=s, pairing=pairing) for s in range(50)])
    se = est.std(axis=0, ddof=1) / np.sqrt(len(est)) + 1e-15
    assert np.all(np.abs(est.mean(axis=0)) <= 3 * se)


def test_antithetic_matches_analytic_gradient():
    m = derive_joint_model(random_spec(np.random.default_rng(21), 2, 2, 3))
    prof = random_profile(np.random.default_rng(22), m)
    cov = np.eye(2)
    g = learner.analytic_gradient(m, prof, 0, 1, cov)
    oracle = lambda b: dynamics.receding_cost_batch(m, prof, 0, 1, "y", b, cov)
    est = learner.zero_order_gradient(oracle, prof.k[0][1], 10_000, 1e-3, seed=0, pairing="antithetic")
    assert np.linalg.norm(est - g) <= 0.05 * np.linalg.norm(g)


def test_noise_scales_inversely_with_radius():
    # independent draws: the stochastic error doubles when r is halved
    m = derive_joint_model(random_spec(np.random.default_rng(23), 1, 2, 2))
    prof = random_profile(np.random.default_rng(24), m)
    cov = np.eye(2)
    g = learner.analytic_gradient(m, prof, 0, 0, cov)
    oracle = lambda b: dynamics.receding_cost_batch(m, prof, 0, 0, "y", b, cov)
    spread = []
    for r in (0.02, 0.01):
        est = np.stack([learner.zero_order_gradient(oracle, prof.k[0][0], 2000, r, seed=s) for s in range(40)])
        spread.append(np.sqrt(np.mean(np.sum((est - g) ** 2, axis=(1, 2)))))
    assert spread[1] / spread[0] == pytest.approx(2.0, rel=0.25)


def test_zero_order_chunking_invariant():
    oracle = lambda b: np.sum(b ** 2, axis=(1, 2))
    k0 = np.ones((2, 2))
    a = learner.zero_order_gradient(oracle, k0, 10_000, 0.1, seed=5)
    b = learner.zero_order_gradient(oracle, k0, 10_000, 0.1, seed=5)
    assert_array_equal(a, b)


@pytest.mark.parametrize("r", [0.0, -1.0])
def test_invalid_radius(r):
    with pytest.raises(learner.InvalidRadius):
        learner.zero_order_gradient(lambda b: np.zeros(len(b)), np.zeros((1, 1)), 10, r)
    with pytest.raises(learner.InvalidRadius):
        LearnerConfig(radius=r).validate()
    with pytest.raises(learner.InvalidRadius):
        learner.smoothed_gradient_bias_probe(lambda b: np.zeros(len(b)), np.zeros((1, 1)),
                                             np.zeros((1, 1)), [0.1, r])


def test_sphere_samples_have_radius():
    e = learner.sphere(np.random.default_rng(0), 500, (2, 3), 0.25)
    assert_allclose(np.linalg.norm(e.reshape(500, -1), axis=1), 0.25)


def test_zero_cost_model_stays_at_zero():
    m = derive_joint_model(random_spec(np.random.default_rng(3), 2, 2, 2))
    z = [np.zeros((2, 2))] * 3
    m = derive_joint_model(GameSpec(**{**m.spec.__dict__, "q": [z, z], "q_bar": [z, z]}))
    prof, trace = learner.mrpg_run(m, LearnerConfig(mode="exact", iterations=20, eta=0.1))
    assert prof.max_error(PolicyProfile.zeros(m)) == 0.0
    assert np.all(trace.column("grad_norm") == 0)


def test_exact_mrpg_converges():
    m = preset_model("fig2_left")
    sol = riccati.solve_clne(m)
    prof, trace = learner.mrpg_run(m, LearnerConfig(mode="exact", iterations=400, eta=0.05), sol)
    assert prof.max_error(sol.profile) < 1e-6
    assert len(trace) == 2 * m.horizon * 400


def test_players_are_treated_symmetrically():
    m = derive_joint_model(random_spec(np.random.default_rng(4), 2, 2, 2))
    cfg = LearnerConfig(mode="exact", iterations=25, eta=0.05)
    p1, _ = learner.mrpg_run(m, cfg)
    p2, _ = learner.mrpg_run(swapped(m), cfg)
    for i in range(2):
        assert_allclose(p1.k[i], p2.k[1 - i], atol=1e-14)
        assert_allclose(p1.k_bar[i], p2.k_bar[1 - i], atol=1e-14)


def test_simultaneous_update_uses_frozen_profile():
    m = derive_joint_model(random_spec(np.random.default_rng(5), 2, 2, 1))
    cfg = LearnerConfig(mode="exact", iterations=1, eta=0.1)
    zero = PolicyProfile.zeros(m)
    est = learner.estimate_gradients(m, zero, 0, cfg)
    prof, _ = learner.mrpg_run(m, cfg)
    for i in range(2):
        assert_allclose(prof.k[i][0], -0.1 * est.natural_y[i])


def test_zero_order_run_reproducible():
    m = preset_model("hand_two_player")
    cfg = LearnerConfig(iterations=5, batch_size=200, radius=0.1, eta=0.05, seed=3)
    a = learner.mrpg_run(m, cfg)[0]
    b = learner.mrpg_run(m, cfg)[0]
    c = learner.mrpg_run(m, LearnerConfig(**{**cfg.__dict__, "seed": 4}))[0]
    assert a.max_error(b) == 0.0
    assert a.max_error(c) > 0.0


def test_sample_path_run_reproducible():
    m = preset_model("hand_two_player")
    cfg = LearnerConfig(iterations=3, batch_size=100, radius=0.1, eta=0.05, seed=1)
    a = learner.sp_mrpg_run(m, cfg, M=10)[0]
    b = learner.sp_mrpg_run(m, cfg, M=10)[0]
    assert a.max_error(b) == 0.0


def test_zero_augmentation_is_plain_mrpg():
    m = preset_model("fig2_left")
    cfg = LearnerConfig(iterations=4, batch_size=300, radius=0.1, eta=0.01)
    plain = learner.mrpg_run(m, cfg)[1]
    aug = learner.augmented_mrpg_run(m, cfg)[1]
    for col in learner.TRACE_COLUMNS[:-1]:
        assert_array_equal(plain.column(col), aug.column(col))


def test_augmented_run_reaches_augmented_equilibrium():
    m = preset_model("diag_dom_fail")
    sched = riccati.compute_gamma_schedule(m)
    cfg = LearnerConfig(mode="exact", iterations=500, eta=0.05, proj_radius=1e3)
    prof, _ = learner.augmented_mrpg_run(m, cfg, sched)
    assert prof.max_error(sched.profile) < 1e-8


def test_augmentation_weights_are_per_player():
    m = derive_joint_model(random_spec(np.random.default_rng(8), 2, 2, 2))
    gamma = np.array([[0.5, 0.0], [0.0, 2.0]])
    target = riccati.solve_augmented(m, gamma, gamma).profile
    cfg = LearnerConfig(mode="exact", iterations=800, eta=0.05, gamma=gamma)
    prof, _ = learner.augmented_mrpg_run(m, cfg, reference=target)
    assert prof.max_error(target) < 1e-8


@pytest.mark.parametrize("mode", ["exact", "zero_order_expected"])
def test_vanilla_single_step_matches_mrpg(mode):
    m = preset_model("hand_two_player")
    cfg = LearnerConfig(mode=mode, iterations=6, batch_size=200, radius=0.1, eta=0.05)
    a, ta = learner.mrpg_run(m, cfg)
    b, tb = learner.vanilla_npg_run(m, cfg)
    assert a.max_error(b) <= 1e-14
    assert_allclose(ta.column("err_K"), tb.column("err_K"), equal_nan=True)


def test_vanilla_gradient_zero_at_equilibrium():
    m = derive_joint_model(random_spec(np.random.default_rng(6), 2, 2, 3))
    sol = riccati.solve_clne(m)
    cfg = LearnerConfig(mode="exact")
    context = learner._full_horizon_context(m, sol.profile, cfg)
    for t in range(3):
        est = learner.estimate_gradients(m, sol.profile, t, cfg, 0, context[t])
        assert max(est.norm(i) for i in range(2)) <= 1e-9


def test_vanilla_exact_converges():
    m = derive_joint_model(random_spec(np.random.default_rng(7), 2, 2, 2))
    sol = riccati.solve_clne(m)
    prof, trace = learner.vanilla_npg_run(m, LearnerConfig(mode="exact", iterations=1500, eta=0.05), sol)
    assert prof.max_error(sol.profile) < 1e-6
    assert len(trace) == 2 * 2 * 2 * 1500


def test_divergence_is_detected():
    m = preset_model("fig2_left")
    with pytest.raises(learner.DivergenceDetected) as info:
        learner.mrpg_run(m, LearnerConfig(mode="exact", iterations=200, eta=50.0))
    assert info.value.norm > learner.DIVERGENCE_NORM or not math.isfinite(info.value.norm)
    assert len(info.value.trace) > 0


def test_projection_bounds_gains():
    m = preset_model("fig2_left")
    prof, _ = learner.mrpg_run(m, LearnerConfig(mode="exact", iterations=50, eta=50.0, proj_radius=0.2))
    for g in prof.k + prof.k_bar:
        assert np.linalg.norm(g[0]) <= 0.2 + 1e-12
    k = np.array([[3.0, 4.0]])
    assert_allclose(learner.project(k, 1.0), [[0.6, 0.8]])
    assert learner.project(k, math.inf) is k


def test_per_player_rates():
    cfg = LearnerConfig(eta=[0.1, 0.2])
    assert cfg.rate(1, 0) == 0.2
    assert LearnerConfig(eta=lambda i, k: 1.0 / (k + 1)).rate(0, 3) == 0.25
    with pytest.raises(ValueError):
        LearnerConfig(eta=[0.1, -1.0]).validate()


def test_config_parsing():
    cfg = learner.config_from_dict({"K": 10, "N_b": 20, "r": 0.5, "D": "inf", "eta": [0.1, 0.2], "M": 7})
    assert (cfg.iterations, cfg.batch_size, cfg.radius, cfg.population) == (10, 20, 0.5, 7)
    assert math.isinf(cfg.proj_radius) and cfg.eta == (0.1, 0.2)
    back = learner.config_from_dict(learner.config_to_dict(cfg))
    assert back == cfg
    with pytest.raises(ValueError, match="unknown option"):
        learner.config_from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="mode"):
        learner.config_from_dict({"mode": "newton"})


def test_trace_metrics(tmp_path):
    tr = learner.RunTrace()
    for k in range(10):
        for i in range(2):
            tr.append(0, k, i, 1.0 / (k + 1), 0.0, 1.0, 1.0, 0.0, None)
    assert tr.error(0, 1).shape == (10,)
    # a smooth decay has increments with small spread
    assert tr.increment_std() < 0.02
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(learner.TRACE_COLUMNS)
    assert lines[1].endswith(",")


def test_bias_probe_on_quartic():
    # the smoothed gradient of k^4 is 4k^3 + 12 k r^2 / (d + 2) in dimension d,
    # so the bias grows like r^2
    k0 = np.full((1, 2), 0.5)
    oracle = lambda b: np.sum(b ** 4, axis=(1, 2))
    table = learner.smoothed_gradient_bias_probe(oracle, k0, 4 * k0 ** 3, [0.2, 0.4, 0.8],
                                                 n_samples=200_000, seed=0)
    assert table.slope == pytest.approx(2.0, abs=0.3)


def test_learning_rate_bound_positive():
    m = preset_model("fig2_left")
    b = learner.learning_rate_bound(m, riccati.solve_clne(m).profile, 0)
    assert np.all((b > 0) & (b < 1))
