"""Receding-horizon natural policy gradient learners.

All learners start from zero gains and update every player simultaneously
against the pre-update profile. Randomness for the gradient estimate of
player ``i`` at phase ``t``, iteration ``k`` and sub-game ``part`` comes from
``SeedSequence(seed, spawn_key=(t, k, i, part, stream))``, so a run is fully
determined by ``(seed, config)`` and does not depend on player order.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import dynamics
from .model import JointModel, PolicyProfile

MODES = ("exact", "zero_order_expected", "zero_order_sample_path")
PAIRINGS = ("antithetic", "independent")
DIVERGENCE_NORM = 1e6
_PART_ID = {"y": 0, "x": 1}


class InvalidRadius(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    """A gain left the ``1e6`` Frobenius ball; ``trace`` holds the partial run."""

    def __init__(self, player: int, t: int, k: int, norm: float, trace=None):
        super().__init__(f"gain norm {norm:.3g} of player {player} at t={t}, iteration {k} exceeds {DIVERGENCE_NORM:g}")
        self.player, self.t, self.k, self.norm = player, t, k, norm
        self.trace = trace


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters. ``eta`` is a float, a per-player sequence, or a
    callable ``(player, k) -> rate``. ``gamma``/``gamma_bar`` are optional
    ``(N, T)`` augmentation weights. ``population`` is the team size used by
    sample-path oracles, ``rollout`` selects how they are simulated.
    ``pairing`` picks antithetic or independent sphere draws."""

    eta: float | Sequence[float] | Callable = 1e-3
    iterations: int = 1000
    batch_size: int = 5000
    radius: float = 1e-2
    sigma_y: float = 1.0
    sigma_x: float = 1.0
    proj_radius: float = math.inf
    mode: str = "zero_order_expected"
    gamma: np.ndarray | None = None
    gamma_bar: np.ndarray | None = None
    seed: int = 0
    population: int = 1000
    rollout: str = "sufficient"
    pairing: str = "independent"
    timing: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode != "exact" and not self.radius > 0:
            raise InvalidRadius(f"smoothing radius must be > 0, got {self.radius}")
        if not (self.sigma_y > 0 and self.sigma_x > 0):
            raise ValueError("exploration scales sigma_y, sigma_x must be > 0")
        if not self.proj_radius > 0:
            raise ValueError("projection radius must be > 0")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        if self.rollout not in ("sufficient", "agents"):
            raise ValueError(f"rollout must be 'sufficient' or 'agents', got {self.rollout!r}")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if not callable(self.eta):
            etas = np.atleast_1d(np.asarray(self.eta, dtype=float))
            if np.any(etas <= 0):
                raise ValueError("learning rates must be > 0")

    def rate(self, player: int, k: int) -> float:
        if callable(self.eta):
            return float(self.eta(player, k))
        etas = np.atleast_1d(np.asarray(self.eta, dtype=float))
        return float(etas[player] if etas.size > 1 else etas[0])

    def init_cov(self, n: int, part: str) -> np.ndarray:
        return (self.sigma_y if part == "y" else self.sigma_x) * np.eye(n)

    def weights(self, part: str, i: int):
        """Player ``i``'s per-step stage weights ``1 + gamma``, or ``None``."""
        g = self.gamma if part == "y" else (self.gamma_bar if self.gamma_bar is not None else self.gamma)
        if g is None:
            return None
        g = np.asarray(g, dtype=float)
        return 1.0 + (g[i] if g.ndim == 2 else g)


def config_from_dict(tree: dict, base: LearnerConfig | None = None) -> LearnerConfig:
    """Learner options from the ``learner`` key of a config file."""
    base = base or LearnerConfig()
    known = {f for f in LearnerConfig.__dataclass_fields__}
    alias = {"K": "iterations", "N_b": "batch_size", "r": "radius", "D": "proj_radius", "M": "population"}
    values = {}
    for key, value in tree.items():
        key = alias.get(key, key)
        if key not in known:
            raise ValueError(f"learner.{key}: unknown option")
        if key == "proj_radius" and value in (None, "inf"):
            value = math.inf
        if key in ("gamma", "gamma_bar") and value is not None:
            value = np.asarray(value, dtype=float)
        if key == "eta" and isinstance(value, list):
            value = tuple(float(v) for v in value)
        values[key] = value
    cfg = replace(base, **values)
    cfg.validate()
    return cfg


def config_to_dict(cfg: LearnerConfig) -> dict:
    out = {}
    for name in LearnerConfig.__dataclass_fields__:
        value = getattr(cfg, name)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif callable(value):
            value = repr(value)
        elif isinstance(value, float) and math.isinf(value):
            value = "inf"
        elif isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


# --------------------------------------------------------------------------
# Gradients


def analytic_gradient(model: JointModel, profile: PolicyProfile, i: int, t: int,
                      sigma: np.ndarray | None = None, part: str = "y", weights=None) -> np.ndarray:
    """Exact policy gradient of player ``i``'s receding-horizon cost at ``t``.

    ``2 ((w R + B^T P B) K - B^T P (A - sum_{j != i} B^j K^j)) Sigma`` with
    ``P`` the cost-to-go of the future controllers and ``w`` the stage weight.
    """
    a, b, _, r, _ = model.part(part)
    sigma = (model.sigma if part == "y" else model.sigma0) if sigma is None else np.asarray(sigma, dtype=float)
    w = 1.0 if weights is None else float(np.asarray(weights)[t])
    p_next = dynamics.value_recursion(model, profile, i, part, weights=weights).p[t + 1]
    k_all = profile.gains(part)
    others = a[t] - sum(b[j][t] @ k_all[j][t] for j in range(model.num_players) if j != i)
    bi = b[i][t]
    return 2.0 * ((w * r[i][t] + bi.T @ p_next @ bi) @ k_all[i][t] - bi.T @ p_next @ others) @ sigma


def sphere(rng: np.random.Generator, n_samples: int, shape: tuple[int, ...], radius: float) -> np.ndarray:
    """``n_samples`` matrices uniform on the Frobenius sphere of ``radius``."""
    e = rng.standard_normal((n_samples,) + tuple(shape))
    norms = np.sqrt(np.sum(e * e, axis=tuple(range(1, e.ndim)), keepdims=True))
    return e * (radius / norms)


def zero_order_gradient(cost_oracle: Callable[[np.ndarray], np.ndarray], k0: np.ndarray,
                        n_samples: int, radius: float, seed=None, chunk: int = 4096,
                        pairing: str = "independent") -> np.ndarray:
    """Mini-batch sphere-smoothing estimate ``d / (N_b r^2) sum_j J(K + e_j) e_j``.

    ``cost_oracle`` maps a batch ``(B,) + K.shape`` to ``(B,)`` costs; ``d``
    is the number of entries of ``K``. ``seed`` may be an int, a
    ``SeedSequence`` or a ``Generator``.

    ``pairing="independent"`` draws every ``e_j`` separately. With
    ``"antithetic"`` the batch is made of pairs ``(e, -e)``: each ``e_j`` is
    still uniform on the sphere, but the constant part of ``J`` cancels
    inside every pair, which removes the ``O(J / r)`` noise term.
    """
    if not radius > 0:
        raise InvalidRadius(f"smoothing radius must be > 0, got {radius}")
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k0 = np.asarray(k0, dtype=float)
    d = k0.size
    chunk += chunk % 2
    acc = np.zeros_like(k0)
    done = 0
    # chunking keeps memory bounded; the sum is a fixed-order reduction
    while done < n_samples:
        size = min(chunk, n_samples - done)
        if pairing == "antithetic":
            half = sphere(rng, (size + 1) // 2, k0.shape, radius)
            e = np.concatenate([half, -half])[:size]
        else:
            e = sphere(rng, size, k0.shape, radius)
        costs = np.asarray(cost_oracle(k0[None] + e), dtype=float)
        acc += np.tensordot(costs, e, axes=(0, 0))
        done += size
    return acc * (d / (n_samples * radius ** 2))


@dataclass(frozen=True)
class GradientEstimate:
    """Raw and natural gradients per player, both sub-games."""

    raw_y: tuple[np.ndarray, ...]
    raw_x: tuple[np.ndarray, ...]
    natural_y: tuple[np.ndarray, ...]
    natural_x: tuple[np.ndarray, ...]
    mode: str
    batch_size: int
    radius: float
    seed: int

    def norm(self, i: int) -> float:
        return float(np.hypot(np.linalg.norm(self.natural_y[i]), np.linalg.norm(self.natural_x[i])))


def _substream(seed: int, t: int, k: int, i: int, part: str, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, k, i, _PART_ID[part], stream)))


def _oracle(model, profile, i, t, part, cfg: LearnerConfig, k: int, full_horizon=None):
    n = model.state_dim
    init = cfg.init_cov(n, part)
    weights = cfg.weights(part, i)
    if cfg.mode == "zero_order_sample_path":
        rng = _substream(cfg.seed, t, k, i, part, 1)
        return lambda g: dynamics.sample_path_cost_batch(
            model, profile, i, t, part, g, cfg.population, rng,
            cfg.init_cov(n, "y"), cfg.init_cov(n, "x"), cfg.rollout)
    if full_horizon is not None:
        cov_t, offset = full_horizon
        return lambda g: dynamics.receding_cost_batch(model, profile, i, t, part, g, cov_t,
                                                      weights, offset=offset)
    return lambda g: dynamics.receding_cost_batch(model, profile, i, t, part, g, init, weights)


def estimate_gradients(model: JointModel, profile: PolicyProfile, t: int, cfg: LearnerConfig,
                       k: int = 0, full_horizon: dict | None = None) -> GradientEstimate:
    """All players' gradients at phase ``t`` against the frozen ``profile``.

    ``full_horizon`` (used by the vanilla baseline) maps ``(part, i)`` to the
    state covariance at ``t`` and the cost accrued before ``t``.
    """
    n = model.state_dim
    out = {"y": ([], []), "x": ([], [])}
    for part in ("y", "x"):
        init = cfg.init_cov(n, part)
        inv = np.linalg.inv(init)
        for i in range(model.num_players):
            fh = None if full_horizon is None else full_horizon[(part, i)]
            if cfg.mode == "exact":
                cov = init if fh is None else fh[0]
                g = analytic_gradient(model, profile, i, t, cov, part, cfg.weights(part, i))
            else:
                oracle = _oracle(model, profile, i, t, part, cfg, k, fh)
                k0 = profile.gains(part)[i][t]
                g = zero_order_gradient(oracle, k0, cfg.batch_size, cfg.radius,
                                        _substream(cfg.seed, t, k, i, part, 0), pairing=cfg.pairing)
            out[part][0].append(g)
            out[part][1].append(g @ inv)
    return GradientEstimate(tuple(out["y"][0]), tuple(out["x"][0]), tuple(out["y"][1]),
                            tuple(out["x"][1]), cfg.mode, cfg.batch_size, cfg.radius, cfg.seed)


def project(k: np.ndarray, radius: float) -> np.ndarray:
    """Rescale onto the Frobenius ball of ``radius`` if outside it."""
    if math.isinf(radius):
        return k
    norm = float(np.linalg.norm(k))
    return k if norm <= radius else k * (radius / norm)


# --------------------------------------------------------------------------
# Traces


TRACE_COLUMNS = ("phase_t", "iter_k", "player", "err_K", "err_Kbar", "cost_y", "cost_xbar",
                 "grad_norm", "wall_ms")


@dataclass
class RunTrace:
    """Long-format per-(t, k, player) records plus the final profile.

    ``err_*`` are Frobenius errors of the phase-``t`` gains against the
    reference (NaN when none was given); costs are the analytic
    receding-horizon costs from ``t`` after the update.
    """

    records: list = field(default_factory=list)
    profile: PolicyProfile | None = None

    def append(self, *row) -> None:
        self.records.append(row)

    def column(self, name: str) -> np.ndarray:
        j = TRACE_COLUMNS.index(name)
        return np.array([r[j] for r in self.records], dtype=float)

    def select(self, t: int | None = None, player: int | None = None) -> "RunTrace":
        rows = [r for r in self.records
                if (t is None or r[0] == t) and (player is None or r[2] == player)]
        return RunTrace(rows, self.profile)

    def error(self, t: int | None = None, player: int | None = None) -> np.ndarray:
        """``sqrt(err_K^2 + err_Kbar^2)`` per record of the selection."""
        sel = self.select(t, player)
        return np.hypot(sel.column("err_K"), sel.column("err_Kbar"))

    def increment_std(self, t: int = 0, tail: float = 0.5) -> float:
        """Spread of the per-iteration error increments over the final
        ``tail`` fraction of phase ``t``, averaged over players. Differencing
        removes the smooth convergence trend, leaving the gradient noise."""
        players = sorted({r[2] for r in self.records if r[0] == t})
        vals = []
        for i in players:
            e = self.error(t, i)
            e = e[int(len(e) * (1 - tail)):]
            vals.append(float(np.diff(e).std()) if len(e) > 1 else 0.0)
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(v) for v in r])

    def __len__(self) -> int:
        return len(self.records)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _error(profile, reference, i, t):
    if reference is None:
        return float("nan"), float("nan")
    return (float(np.linalg.norm(profile.k[i][t] - reference.k[i][t])),
            float(np.linalg.norm(profile.k_bar[i][t] - reference.k_bar[i][t])))


def _reference_profile(reference):
    if reference is None or isinstance(reference, PolicyProfile):
        return reference
    return reference.profile


def _check(profile, cfg, t, k, trace):
    if not math.isinf(cfg.proj_radius):
        return
    for i in range(profile.num_players):
        for g in (profile.k[i][t], profile.k_bar[i][t]):
            norm = float(np.linalg.norm(g))
            if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
                trace.profile = profile
                raise DivergenceDetected(i, t, k, norm, trace)


def _receding_costs(model, profile, cfg, t):
    n = model.state_dim
    N = model.num_players
    cy = [dynamics.value_recursion(model, profile, i, "y", weights=cfg.weights("y", i)).cost(t, cfg.init_cov(n, "y"))
          for i in range(N)]
    cx = [dynamics.value_recursion(model, profile, i, "x", weights=cfg.weights("x", i)).cost(t, cfg.init_cov(n, "x"))
          for i in range(N)]
    return cy, cx


def _apply(profile: PolicyProfile, est: GradientEstimate, cfg: LearnerConfig, t: int, k: int):
    for i in range(profile.num_players):
        eta = cfg.rate(i, k)
        profile.k[i][t] = project(profile.k[i][t] - eta * est.natural_y[i], cfg.proj_radius)
        profile.k_bar[i][t] = project(profile.k_bar[i][t] - eta * est.natural_x[i], cfg.proj_radius)


def _record(trace, model, profile, reference, cfg, t, k, est, started):
    cy, cx = _receding_costs(model, profile, cfg, t)
    wall = (time.perf_counter() - started) * 1e3 if cfg.timing else None
    for i in range(model.num_players):
        ek, ekb = _error(profile, reference, i, t)
        trace.append(t, k, i, ek, ekb, cy[i], cx[i], est.norm(i), wall)


# --------------------------------------------------------------------------
# Runners


def mrpg_run(model: JointModel, cfg: LearnerConfig, reference=None,
             init: PolicyProfile | None = None) -> tuple[PolicyProfile, RunTrace]:
    """Receding-horizon MRPG: phases ``t = T-1..0``, ``cfg.iterations`` each.

    Future-time controllers are frozen while phase ``t`` is learned. The
    gradient oracle follows ``cfg.mode``; ``cfg.gamma`` turns on the augmented
    stage weights.
    """
    cfg.validate()
    reference = _reference_profile(reference)
    profile = (init or PolicyProfile.zeros(model)).copy()
    trace = RunTrace()
    started = time.perf_counter()
    for t in range(model.horizon - 1, -1, -1):
        for k in range(cfg.iterations):
            est = estimate_gradients(model, profile, t, cfg, k)
            _apply(profile, est, cfg, t, k)
            _check(profile, cfg, t, k, trace)
            _record(trace, model, profile, reference, cfg, t, k, est, started)
    trace.profile = profile
    return profile, trace


def sp_mrpg_run(model: JointModel, cfg: LearnerConfig, M: int | None = None, reference=None,
                teams=None) -> tuple[PolicyProfile, RunTrace]:
    """MRPG with sample-path costs of fresh ``M``-agent rollouts as oracle."""
    if M is None:
        M = teams.agents_per_team() if teams is not None else cfg.population
    cfg = replace(cfg, mode="zero_order_sample_path", population=int(M))
    return mrpg_run(model, cfg, reference)


def augmented_mrpg_run(model: JointModel, cfg: LearnerConfig, schedule=None,
                       reference=None) -> tuple[PolicyProfile, RunTrace]:
    """MRPG on the ``(1 + gamma)``-weighted costs with projection ``proj_D``.

    ``schedule`` is an :class:`AugmentationSchedule` (or ``None`` to use
    ``cfg.gamma``); the reference defaults to its augmented equilibrium.
    """
    if schedule is not None:
        cfg = replace(cfg, gamma=schedule.gamma, gamma_bar=schedule.gamma_bar)
        if reference is None:
            reference = schedule.profile
    if cfg.gamma is None:
        cfg = replace(cfg, gamma=np.zeros((model.num_players, model.horizon)))
    return mrpg_run(model, cfg, reference)


def vanilla_npg_run(model: JointModel, cfg: LearnerConfig, reference=None) -> tuple[PolicyProfile, RunTrace]:
    """Non-receding baseline: every ``K_t`` is updated each iteration.

    Gradients are of the full-horizon cost from ``y_0 ~ N(0, Sigma_y)``
    (``x_0`` likewise), scaled by the same ``Sigma^{-1}``. Runs
    ``T * cfg.iterations`` iterations so the budget matches MRPG.
    """
    cfg.validate()
    if cfg.mode == "zero_order_sample_path":
        raise ValueError("the vanilla baseline uses expected-cost oracles")
    reference = _reference_profile(reference)
    profile = PolicyProfile.zeros(model)
    T, N, n = model.horizon, model.num_players, model.state_dim
    trace = RunTrace()
    started = time.perf_counter()
    for k in range(T * cfg.iterations):
        frozen = profile.copy()
        context = _full_horizon_context(model, frozen, cfg)
        estimates = [estimate_gradients(model, frozen, t, cfg, k, context[t]) for t in range(T)]
        for t in range(T):
            _apply(profile, estimates[t], cfg, t, k)
            _check(profile, cfg, t, k, trace)
        for t in range(T):
            _record(trace, model, profile, reference, cfg, t, k, estimates[t], started)
    trace.profile = profile
    return profile, trace


def _full_horizon_context(model, profile, cfg):
    """Per ``t``: ``(part, i) -> (state covariance at t, cost accrued before t)``."""
    n, T = model.state_dim, model.horizon
    out = [dict() for _ in range(T)]
    for part in ("y", "x"):
        cov = dynamics.state_covariances(model, profile, part, cfg.init_cov(n, part))
        for i in range(model.num_players):
            stage = dynamics.stage_weights(model, profile, i, part)
            w = cfg.weights(part, i)
            ww = np.ones(T) if w is None else w
            acc = 0.0
            for t in range(T):
                out[t][(part, i)] = (cov[t], acc)
                acc += ww[t] * float(np.trace(cov[t] @ stage[t]))
    return out


# --------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class BiasTable:
    radius: np.ndarray
    error: np.ndarray        # ||estimate - analytic||_F
    noise_floor: np.ndarray  # Monte-Carlo standard error of the estimate
    slope: float             # log-log slope over points above 3x the floor

    def rows(self):
        return zip(self.radius.tolist(), self.error.tolist(), self.noise_floor.tolist())


def smoothed_gradient_bias_probe(cost_oracle, k0: np.ndarray, gradient: np.ndarray,
                                 r_grid: Sequence[float], n_samples: int = 200_000, seed: int = 0,
                                 n_repeats: int = 4, pairing: str = "independent") -> BiasTable:
    """Estimate error of the smoothed gradient against ``gradient`` per radius.

    The noise floor is the standard error over ``n_repeats`` independent
    batches; the slope is fitted only where the error clears 3x that floor.
    """
    r_grid = np.asarray(list(r_grid), dtype=float)
    if np.any(r_grid <= 0):
        raise InvalidRadius("every radius must be > 0")
    err = np.zeros(len(r_grid))
    floor = np.zeros(len(r_grid))
    for a, r in enumerate(r_grid):
        reps = np.stack([
            zero_order_gradient(cost_oracle, k0, n_samples, float(r),
                                np.random.SeedSequence(seed, spawn_key=(a, rep)), pairing=pairing)
            for rep in range(n_repeats)])
        mean = reps.mean(axis=0)
        err[a] = float(np.linalg.norm(mean - gradient))
        floor[a] = float(np.sqrt(np.sum(reps.var(axis=0, ddof=1)) / n_repeats))
    keep = err > 3 * floor
    slope = dynamics.fit_loglog(r_grid[keep], err[keep])[0] if keep.sum() >= 2 else float("nan")
    return BiasTable(r_grid, err, floor, slope)


def profile_gradient_norm(model: JointModel, profile: PolicyProfile, cfg: LearnerConfig | None = None) -> float:
    """Largest natural-gradient Frobenius norm over players, steps and sub-games."""
    cfg = cfg or LearnerConfig(mode="exact")
    n = model.state_dim
    worst = 0.0
    for part in ("y", "x"):
        init = cfg.init_cov(n, part)
        for t in range(model.horizon):
            for i in range(model.num_players):
                g = analytic_gradient(model, profile, i, t, init, part, cfg.weights(part, i))
                worst = max(worst, float(np.linalg.norm(g @ np.linalg.inv(init))))
    return worst


def learning_rate_bound(model: JointModel, profile: PolicyProfile, t: int) -> np.ndarray:
    """Per-player ``1 / (2 ||R + B^T P B||^2 + 1)``, the model-based step-size
    cap for phase ``t`` (reported, never enforced)."""
    out = np.zeros(model.num_players)
    for i in range(model.num_players):
        p_next = dynamics.value_recursion(model, profile, i, "y").p[t + 1]
        h = model.r[i][t] + model.b[i][t].T @ p_next @ model.b[i][t]
        out[i] = 1.0 / (2.0 * np.linalg.norm(h, 2) ** 2 + 1.0)
    return out
