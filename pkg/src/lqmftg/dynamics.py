"""Seeded simulators, cost evaluation and the finite-population gap.

Noise streams
-------------
Runs are grouped into fixed blocks of ``RUN_BLOCK`` consecutive run ids.
Each block draws from its own ``SeedSequence(seed, spawn_key=(tag, block))``
stream, common noise first, then idiosyncratic noise in (run, agent, time)
order. A run's noise therefore depends only on ``(seed, tag, run_id, M)``,
never on how many runs are requested together or how they are split over
workers.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import JointModel, PolicyProfile

RUN_BLOCK = 256
_TAG_MEAN_FIELD = 0
_TAG_FINITE = 1


def cov_factor(cov: np.ndarray) -> np.ndarray:
    """``G`` with ``G @ G.T == cov``; Cholesky when PD, eigen-based otherwise."""
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    try:
        w = np.linalg.eigvalsh(cov)
        if w[0] > 1e-12 * max(1.0, w[-1]):
            return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def sym_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True)
class NoiseModel:
    sigma: np.ndarray
    sigma0: np.ndarray
    seed: int

    @property
    def factor(self) -> np.ndarray:
        return cov_factor(self.sigma)

    @property
    def factor0(self) -> np.ndarray:
        return cov_factor(self.sigma0)

    def block_rng(self, tag: int, block: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(tag, block)))

    def draw(self, tag: int, first_run: int, n_runs: int, agents: int, steps: int):
        """Common ``(R, steps, n)`` and idiosyncratic ``(R, agents, steps, n)`` noise."""
        n = self.sigma.shape[0]
        g, g0 = self.factor, self.factor0
        common = np.empty((n_runs, steps, n))
        idio = np.empty((n_runs, agents, steps, n))
        run = first_run
        while run < first_run + n_runs:
            block, offset = divmod(run, RUN_BLOCK)
            take = min(RUN_BLOCK - offset, first_run + n_runs - run)
            rng = self.block_rng(tag, block)
            c = rng.standard_normal((RUN_BLOCK, steps, n))
            w = rng.standard_normal((RUN_BLOCK, agents, steps, n))
            lo = run - first_run
            common[lo:lo + take] = c[offset:offset + take] @ g0.T
            idio[lo:lo + take] = w[offset:offset + take] @ g.T
            run += take
        return common, idio


def closed_loop(model: JointModel, profile: PolicyProfile, part: str = "y") -> np.ndarray:
    """``(T, n, n)`` matrices ``A_t - sum_i B^i_t K^i_t`` (or the mean-field analogue)."""
    a, b, _, _, _ = model.part(part)
    gains = profile.gains(part)
    return a - sum(np.einsum("tnp,tpm->tnm", b[i], gains[i]) for i in range(model.num_players))


def stage_weights(model: JointModel, profile: PolicyProfile, i: int, part: str = "y") -> np.ndarray:
    """``(T+1, n, n)`` matrices ``Q^i_s + K^T R K`` with zero terminal gain."""
    _, _, q, r, _ = model.part(part)
    k = profile.gains(part)[i]
    out = q[i].copy()
    out[:-1] += np.einsum("tpn,tpq,tqm->tnm", k, r[i], k)
    return out


# --------------------------------------------------------------------------
# Analytic costs


@dataclass(frozen=True)
class ValueRecursion:
    """``p[s]`` quadratic and ``offset[s]`` constant of the cost-to-go from ``s``."""

    p: np.ndarray       # (T+1, n, n)
    offset: np.ndarray  # (T+1,)

    def cost(self, t: int, init_cov: np.ndarray) -> float:
        return float(np.trace(init_cov @ self.p[t]) + self.offset[t])


def value_recursion(model: JointModel, profile: PolicyProfile, i: int, part: str = "y",
                    noise: np.ndarray | None = None, weights=None) -> ValueRecursion:
    """Backward recursion of player ``i``'s cost under ``profile``.

    ``noise`` is the per-step noise covariance of the process (defaults to
    the sub-game's own: ``Sigma`` for y, ``Sigma0`` for x). ``weights`` are
    the per-step stage multipliers ``1 + gamma`` (length ``T``).
    """
    T = model.horizon
    noise = model.part(part)[4] if noise is None else noise
    w = np.ones(T) if weights is None else np.asarray(weights, dtype=float)
    lmat = closed_loop(model, profile, part)
    stage = stage_weights(model, profile, i, part)
    p = np.empty((T + 1,) + stage.shape[1:])
    off = np.zeros(T + 1)
    p[T] = stage[T]
    for s in range(T - 1, -1, -1):
        p[s] = w[s] * stage[s] + lmat[s].T @ p[s + 1] @ lmat[s]
        p[s] = 0.5 * (p[s] + p[s].T)
        off[s] = off[s + 1] + float(np.trace(noise @ p[s + 1]))
    return ValueRecursion(p, off)


@dataclass(frozen=True)
class CostPair:
    y: np.ndarray
    x: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.y + self.x


def analytic_cost(model: JointModel, profile: PolicyProfile, t: int = 0,
                  sigma_y: np.ndarray | None = None, sigma_x: np.ndarray | None = None,
                  noise_y: np.ndarray | None = None, noise_x: np.ndarray | None = None,
                  gamma=None, gamma_bar=None) -> CostPair:
    """Expected cost-to-go from ``t`` of every player, both sub-games.

    The initial deviation and mean field at ``t`` are zero-mean Gaussians
    with covariances ``sigma_y`` / ``sigma_x`` (default: the game's own
    initial law, ``Sigma`` and ``Sigma0``).
    """
    sigma_y = model.sigma if sigma_y is None else np.asarray(sigma_y, dtype=float)
    sigma_x = model.sigma0 if sigma_x is None else np.asarray(sigma_x, dtype=float)
    N = model.num_players
    out_y, out_x = np.zeros(N), np.zeros(N)
    for i in range(N):
        wy = None if gamma is None else 1.0 + np.asarray(gamma)[i]
        wx = None if gamma_bar is None else 1.0 + np.asarray(gamma_bar)[i]
        out_y[i] = value_recursion(model, profile, i, "y", noise_y, wy).cost(t, sigma_y)
        out_x[i] = value_recursion(model, profile, i, "x", noise_x, wx).cost(t, sigma_x)
    return CostPair(out_y, out_x)


def state_covariances(model: JointModel, profile: PolicyProfile, part: str,
                      init_cov: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    noise = model.part(part)[4] if noise is None else noise
    lmat = closed_loop(model, profile, part)
    T = model.horizon
    c = np.empty((T + 1,) + init_cov.shape)
    c[0] = init_cov
    for s in range(T):
        c[s + 1] = lmat[s] @ c[s] @ lmat[s].T + noise
    return c


def receding_cost_batch(model: JointModel, profile: PolicyProfile, i: int, t: int, part: str,
                        gains: np.ndarray, init_cov: np.ndarray, weights=None,
                        noise: np.ndarray | None = None, offset: float = 0.0) -> np.ndarray:
    """Expected cost from ``t`` with player ``i``'s time-``t`` gain replaced.

    ``gains`` is a batch ``(B, p_i, n)``; later gains come from ``profile``.
    Returns ``(B,)`` costs ``tr(init_cov P_t) + N_t + offset``.
    """
    a, b, q, r, _ = model.part(part)
    N = model.num_players
    w = np.ones(model.horizon) if weights is None else np.asarray(weights, dtype=float)
    vr = value_recursion(model, profile, i, part, noise, w)
    noise = model.part(part)[4] if noise is None else noise
    p_next = vr.p[t + 1]
    n_t = vr.offset[t + 1] + float(np.trace(noise @ p_next))
    k_all = profile.gains(part)
    base = a[t] - sum(b[j][t] @ k_all[j][t] for j in range(N) if j != i)
    gains = np.asarray(gains, dtype=float)
    lb = base[None] - np.einsum("np,bpm->bnm", b[i][t], gains)
    stage = q[i][t][None] + np.einsum("bpn,pq,bqm->bnm", gains, r[i][t], gains)
    # tr(C (w * stage + L^T P L)) without forming the products per batch element
    lc = np.einsum("bnm,mk->bnk", lb, init_cov)
    quad = np.einsum("bnk,nj,bjk->b", lc, p_next, lb)
    return w[t] * np.einsum("nm,bmn->b", init_cov, stage) + quad + n_t + offset


# --------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class Trajectory:
    """Batch of simulated runs. Shapes use ``R`` runs and ``M`` agents.

    ``x``/``y``: ``(R, M, T+1, n)``; ``mean_field``: ``(R, T+1, n)``;
    ``controls[i]``: ``(R, M, T, p_i)``. ``cost_y``/``cost_x``: ``(R, N)``
    realized costs; their sum is the realized game cost.
    """

    x: np.ndarray
    y: np.ndarray
    mean_field: np.ndarray
    controls: tuple[np.ndarray, ...]
    cost_y: np.ndarray
    cost_x: np.ndarray
    first_run: int = 0

    @property
    def cost(self) -> np.ndarray:
        return self.cost_y + self.cost_x

    @property
    def num_agents(self) -> int:
        return self.x.shape[1]


def _realized_costs(model, profile, y, mf):
    """Per-run decomposed costs from deviations ``(R, M, T+1, n)`` and mean field."""
    N = model.num_players
    cy = np.empty((y.shape[0], N))
    cx = np.empty((y.shape[0], N))
    for i in range(N):
        wy = stage_weights(model, profile, i, "y")
        wx = stage_weights(model, profile, i, "x")
        cy[:, i] = np.einsum("rjtn,tnm,rjtm->r", y, wy, y) / y.shape[1]
        cx[:, i] = np.einsum("rtn,tnm,rtm->r", mf, wx, mf)
    return cy, cx


def simulate_mean_field(model: JointModel, profile: PolicyProfile, seed: int, n_runs: int = 1,
                        first_run: int = 0, x0: np.ndarray | None = None) -> Trajectory:
    """Infinite-population limit: one representative agent per run.

    Initial condition ``x_0 = omega_0 + omega0_0`` unless ``x0`` (deterministic,
    shape ``(n,)``) is given, in which case ``xbar_0 = x0`` and ``y_0 = 0``.
    """
    T, n, N = model.horizon, model.state_dim, model.num_players
    noise = NoiseModel(model.sigma, model.sigma0, seed)
    common, idio = noise.draw(_TAG_MEAN_FIELD, first_run, n_runs, 1, T + 1)
    idio = idio[:, 0]
    lmat = closed_loop(model, profile, "y")
    lbar = closed_loop(model, profile, "x")
    y = np.empty((n_runs, T + 1, n))
    xb = np.empty((n_runs, T + 1, n))
    if x0 is None:
        y[:, 0], xb[:, 0] = idio[:, 0], common[:, 0]
    else:
        y[:, 0], xb[:, 0] = 0.0, np.asarray(x0, dtype=float)
    for t in range(T):
        y[:, t + 1] = y[:, t] @ lmat[t].T + idio[:, t + 1]
        xb[:, t + 1] = xb[:, t] @ lbar[t].T + common[:, t + 1]
    controls = tuple(
        -(np.einsum("tpn,rtn->rtp", profile.k[i], y[:, :T]) + np.einsum("tpn,rtn->rtp", profile.k_bar[i], xb[:, :T]))[:, None]
        for i in range(N))
    yy = y[:, None]
    cy, cx = _realized_costs(model, profile, yy, xb)
    return Trajectory(yy + xb[:, None], yy, xb, controls, cy, cx, first_run)


def _finite_population(model, profile, M, noise: NoiseModel, first_run, n_runs, x0=None):
    """Direct simulation of the M-agent joint dynamics (not the decomposed form)."""
    T, n, N = model.horizon, model.state_dim, model.num_players
    common, idio = noise.draw(_TAG_FINITE, first_run, n_runs, M, T + 1)
    x = np.empty((n_runs, M, T + 1, n))
    if x0 is None:
        x[:, :, 0] = idio[:, :, 0] + common[:, None, 0]
    else:
        x[:, :, 0] = np.asarray(x0, dtype=float)
    controls = [np.empty((n_runs, M, T, p)) for p in model.control_dims]
    for t in range(T):
        xt = x[:, :, t]
        mf = xt.mean(axis=1)
        dev = xt - mf[:, None]
        drift = xt @ model.a[t].T + (mf @ model.a_bar[t].T)[:, None]
        for i in range(N):
            u = -(dev @ profile.k[i][t].T) - (mf @ profile.k_bar[i][t].T)[:, None]
            controls[i][:, :, t] = u
            drift += u @ model.b[i][t].T + (u.mean(axis=1) @ model.b_bar[i][t].T)[:, None]
        x[:, :, t + 1] = drift + common[:, None, t + 1] + idio[:, :, t + 1]
    mf = x.mean(axis=1)
    y = x - mf[:, None]
    return x, y, mf, tuple(controls), common, idio


def _finite_costs(model, profile, x, mf, controls):
    """Realized cost of every team straight from states and controls."""
    T, N, M = model.horizon, model.num_players, x.shape[1]
    dev = x - mf[:, None]
    cy = np.zeros((x.shape[0], N))
    cx = np.zeros((x.shape[0], N))
    for i in range(N):
        cy[:, i] = np.einsum("rjtn,tnm,rjtm->r", dev, model.q[i], dev) / M
        cx[:, i] = np.einsum("rtn,tnm,rtm->r", mf, model.q_bar[i], mf)
        u = controls[i]
        ubar = u.mean(axis=1)
        du = u - ubar[:, None]
        cy[:, i] += np.einsum("rjtp,tpq,rjtq->r", du, model.r[i], du) / M
        cx[:, i] += np.einsum("rtp,tpq,rtq->r", ubar, model.r_bar[i], ubar)
    return cy, cx


def simulate_finite_population(model: JointModel, profile: PolicyProfile, M: int, seed: int,
                               n_runs: int = 1, teams=None, first_run: int = 0,
                               x0: np.ndarray | None = None) -> Trajectory:
    """M joint agents under ``u^{i,j} = -K (x^j - x~) - Kbar x~``.

    ``teams`` (a :class:`TeamSpec`) may supply ``M`` through its equal
    ``agent_counts``. Costs are the realized per-team averages.
    """
    if M is None:
        if teams is None:
            raise ValueError("need M or a TeamSpec with agent_counts")
        M = teams.agents_per_team()
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    noise = NoiseModel(model.sigma, model.sigma0, seed)
    x, y, mf, controls, _, _ = _finite_population(model, profile, M, noise, first_run, n_runs, x0)
    cy, cx = _finite_costs(model, profile, x, mf, controls)
    return Trajectory(x, y, mf, controls, cy, cx, first_run)


def sample_path_cost(traj: Trajectory, model: JointModel, profile: PolicyProfile, i: int,
                     t: int = 0) -> CostPair:
    """Realized cost-to-go from ``t`` of player ``i`` on every run, ``(R,)`` each."""
    wy = stage_weights(model, profile, i, "y")[t:]
    wx = stage_weights(model, profile, i, "x")[t:]
    y = traj.y[:, :, t:]
    mf = traj.mean_field[:, t:]
    cy = np.einsum("rjtn,tnm,rjtm->r", y, wy, y) / y.shape[1]
    cx = np.einsum("rtn,tnm,rtm->r", mf, wx, mf)
    return CostPair(cy, cx)


# --------------------------------------------------------------------------
# Sample-path oracle used by the learner


def transition_blocks(lmats: np.ndarray) -> np.ndarray:
    """``(S, S, n, n)`` products ``L_{s-1} ... L_tau`` (identity on the diagonal,
    zero above it) for a window of ``S - 1`` closed-loop matrices."""
    S = lmats.shape[0] + 1
    n = lmats.shape[-1]
    out = np.zeros((S, S, n, n))
    for tau in range(S):
        out[tau, tau] = np.eye(n)
        for s in range(tau + 1, S):
            out[s, tau] = lmats[s - 1] @ out[s - 1, tau]
    return out


def wishart_standard(rng: np.random.Generator, dof: int, dim: int, size: int) -> np.ndarray:
    """``(size, dim, dim)`` draws of ``Z Z^T`` with ``Z`` a ``dim x dof`` standard normal."""
    if dof <= 0:
        return np.zeros((size, dim, dim))
    if dof < dim:
        z = rng.standard_normal((size, dim, dof))
        return z @ np.swapaxes(z, 1, 2)
    # Bartlett decomposition
    low = np.zeros((size, dim, dim))
    il = np.tril_indices(dim, -1)
    low[:, il[0], il[1]] = rng.standard_normal((size, len(il[0])))
    diag = np.sqrt(rng.chisquare(dof - np.arange(dim), size=(size, dim)))
    low[:, np.arange(dim), np.arange(dim)] = diag
    return low @ np.swapaxes(low, 1, 2)


def sample_path_cost_batch(model: JointModel, profile: PolicyProfile, i: int, t: int, part: str,
                           gains: np.ndarray, M: int, rng: np.random.Generator,
                           sigma_y: np.ndarray, sigma_x: np.ndarray,
                           method: str = "sufficient") -> np.ndarray:
    """One fresh M-agent rollout from ``t`` per candidate gain, realized cost.

    At ``t`` agents start at ``x^j = z + xi^j`` with ``z ~ N(0, sigma_x)``
    shared and ``xi^j ~ N(0, sigma_y)`` i.i.d., then follow the population
    dynamics. ``method="agents"`` simulates every agent; ``"sufficient"``
    draws the same cost distribution from the population's scatter matrix
    (Wishart with ``M - 1`` degrees of freedom) or empirical mean.
    """
    a, b, q, r, _ = model.part(part)
    T, N, n = model.horizon, model.num_players, model.state_dim
    gains = np.asarray(gains, dtype=float)
    B = gains.shape[0]
    S = T - t + 1
    k_all = profile.gains(part)
    base = a[t] - sum(b[j][t] @ k_all[j][t] for j in range(N) if j != i)
    l_t = base[None] - np.einsum("np,bpm->bnm", b[i][t], gains)
    l_fixed = closed_loop(model, profile, part)[t + 1:]
    wq = stage_weights(model, profile, i, part)[t:]
    w_t = q[i][t][None] + np.einsum("bpn,pq,bqm->bnm", gains, r[i][t], gains)

    if part == "y":
        init, step = sigma_y, model.sigma
    else:
        init, step = sigma_x + sigma_y / M, model.sigma0 + model.sigma / M

    # transitions with a batch-dependent first factor
    fixed = transition_blocks(l_fixed) if S > 1 else np.zeros((1, 1, n, n))
    psi = np.zeros((B, S, S, n, n))
    for s in range(S):
        if s == 0:
            psi[:, 0, 0] = np.eye(n)
            continue
        # columns tau >= 1 do not involve L_t
        psi[:, s, 1:s + 1] = fixed[s - 1, :s]
        psi[:, s, 0] = fixed[s - 1, 0] @ l_t

    if method == "agents":
        g_init, g_step = cov_factor(sigma_y), cov_factor(model.sigma)
        xi = rng.standard_normal((B, M, S, n))
        xi[:, :, 0] = xi[:, :, 0] @ g_init.T
        xi[:, :, 1:] = xi[:, :, 1:] @ g_step.T
        mean = xi.mean(axis=1)
        if part == "y":
            w = xi - mean[:, None]
            traj = np.einsum("bstnm,bjtm->bjsn", psi, w)
            weights = np.concatenate([w_t[:, None], np.broadcast_to(wq[1:], (B,) + wq[1:].shape)], axis=1)
            return np.einsum("bjsn,bsnm,bjsm->b", traj, weights, traj) / M
        g0_init, g0_step = cov_factor(sigma_x), cov_factor(model.sigma0)
        com = rng.standard_normal((B, S, n))
        com[:, 0] = com[:, 0] @ g0_init.T
        com[:, 1:] = com[:, 1:] @ g0_step.T
        drive = com + mean
    elif method == "sufficient":
        factors = [cov_factor(init)] + [cov_factor(step)] * (S - 1)
        if part == "y":
            if M == 1:
                return np.zeros(B)
            from scipy.linalg import block_diag
            g = block_diag(*factors)
            psig = psi.transpose(0, 1, 3, 2, 4).reshape(B, S * n, S * n) @ g
            weights = np.zeros((B, S * n, S * n))
            for s in range(S):
                weights[:, s * n:(s + 1) * n, s * n:(s + 1) * n] = w_t if s == 0 else wq[s]
            phi = np.swapaxes(psig, 1, 2) @ weights @ psig
            scatter = wishart_standard(rng, M - 1, S * n, B)
            return np.einsum("bij,bij->b", phi, scatter) / M
        z = rng.standard_normal((B, S, n))
        drive = np.stack([z[:, s] @ factors[s].T for s in range(S)], axis=1)
    else:
        raise ValueError(f"unknown rollout method {method!r}")
    xs = np.einsum("bstnm,btm->bsn", psi, drive)
    out = np.einsum("bn,bnm,bm->b", xs[:, 0], w_t, xs[:, 0])
    if S > 1:
        out += np.einsum("bsn,snm,bsm->b", xs[:, 1:], wq[1:], xs[:, 1:])
    return out


# --------------------------------------------------------------------------
# Variance certificate


@dataclass(frozen=True)
class VarianceCertificate:
    """Sample-path cost as a Gaussian quadratic form ``w^T Phi w``.

    ``psi`` maps the whitened noise stack to the state stack; ``phi`` is
    ``psi^T diag(Q_K) psi``; mean ``tr(Phi)``, variance ``2 ||Phi||_F^2``.
    """

    psi: np.ndarray
    phi: np.ndarray
    transitions: np.ndarray  # (S, S, n, n) closed-loop products
    mean: float
    variance: float


def variance_certificate(model: JointModel, profile: PolicyProfile, i: int = 0, t: int = 0,
                         part: str = "y", init_cov: np.ndarray | None = None,
                         noise: np.ndarray | None = None) -> VarianceCertificate:
    """Certificate for one representative trajectory from ``t`` to ``T``.

    The state at ``t`` has covariance ``init_cov`` (default: the step noise).
    """
    from scipy.linalg import block_diag

    noise = model.part(part)[4] if noise is None else np.asarray(noise, dtype=float)
    init_cov = noise if init_cov is None else np.asarray(init_cov, dtype=float)
    T, n = model.horizon, model.state_dim
    S = T - t + 1
    trans = transition_blocks(closed_loop(model, profile, part)[t:])
    roots = [sym_sqrt(init_cov)] + [sym_sqrt(noise)] * (S - 1)
    psi = np.zeros((S * n, S * n))
    for s in range(S):
        for tau in range(s + 1):
            psi[s * n:(s + 1) * n, tau * n:(tau + 1) * n] = trans[s, tau] @ roots[tau]
    weights = block_diag(*stage_weights(model, profile, i, part)[t:])
    phi = psi.T @ weights @ psi
    phi = 0.5 * (phi + phi.T)
    return VarianceCertificate(psi, phi, trans, float(np.trace(phi)),
                               2.0 * float(np.sum(phi * phi)))


# --------------------------------------------------------------------------
# Finite-population gap


@dataclass(frozen=True)
class GapTable:
    """Rows per (M, player): gap ``|J_M - J_inf|``, its standard error and the
    signed estimate. ``slope[i]`` is the fitted log-log slope (NaN when the
    gaps sit below the noise floor)."""

    m_grid: np.ndarray
    gap: np.ndarray       # (len(M), N) absolute
    signed: np.ndarray    # (len(M), N)
    stderr: np.ndarray    # (len(M), N)
    slope: np.ndarray     # (N,)
    slope_stderr: np.ndarray
    j_inf: np.ndarray     # (N,)

    def rows(self):
        for a, m in enumerate(self.m_grid):
            for i in range(self.gap.shape[1]):
                yield int(m), i, float(self.gap[a, i]), float(self.stderr[a, i]), float(self.slope[i])


def _gap_block(model, profile, M, noise, first_run, n_runs, control_variate):
    x, y, mf, controls, common, idio = _finite_population(model, profile, M, noise, first_run, n_runs)
    cy, cx = _finite_costs(model, profile, x, mf, controls)
    value = cy + cx
    if control_variate:
        # the same noise driving the infinite-population processes
        T, N = model.horizon, model.num_players
        lmat = closed_loop(model, profile, "y")
        lbar = closed_loop(model, profile, "x")
        z = np.empty_like(idio)
        xb = np.empty_like(common)
        z[:, :, 0], xb[:, 0] = idio[:, :, 0], common[:, 0]
        for t in range(T):
            z[:, :, t + 1] = z[:, :, t] @ lmat[t].T + idio[:, :, t + 1]
            xb[:, t + 1] = xb[:, t] @ lbar[t].T + common[:, t + 1]
        ry, rx = _realized_costs(model, profile, z, xb)
        value = value - (ry + rx)
    return value


def fit_loglog(xs, ys) -> tuple[float, float]:
    """Least-squares slope of ``log y`` on ``log x`` and its standard error."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if len(lx) <= 2:
        return float(coef[0]), float("nan")
    resid = ly - A @ coef
    s2 = resid @ resid / (len(lx) - 2)
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(np.sqrt(cov[0, 0]))


def eps_nash_gap(model: JointModel, ne_profile: PolicyProfile, m_grid: Sequence[int], seed: int,
                 n_runs=2000, control_variate: bool = True, workers: int | None = None,
                 noise_floor_se: float = 3.0) -> GapTable:
    """Monte-Carlo ``J^i_M - J^i_inf`` for each population size in ``m_grid``.

    ``J_inf`` is analytic. With ``control_variate`` the estimator subtracts
    the realized infinite-population cost driven by the same noise and adds
    back its exact mean, which cancels the O(1) sampling noise. ``n_runs``
    is an int or a callable ``M -> runs``. The slope is fitted over the M
    values whose gap exceeds ``noise_floor_se`` standard errors.
    """
    workers = workers or int(os.environ.get("LQMFTG_WORKERS", "1"))
    j_inf = analytic_cost(model, ne_profile).total
    N = model.num_players
    grid = np.asarray(list(m_grid), dtype=int)
    signed = np.zeros((len(grid), N))
    se = np.zeros((len(grid), N))
    runs_for = n_runs if callable(n_runs) else (lambda M: n_runs)
    for a, M in enumerate(grid):
        noise = NoiseModel(model.sigma, model.sigma0, seed + 7919 * int(M))
        total = int(runs_for(int(M)))
        chunk = max(1, min(RUN_BLOCK, int(4_000_000 // max(1, M * (model.horizon + 1) * model.state_dim))))
        starts = list(range(0, total, chunk))
        job = lambda s: _gap_block(model, ne_profile, int(M), noise, s, min(chunk, total - s), control_variate)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(job, starts))
        else:
            parts = [job(s) for s in starts]
        vals = np.concatenate(parts, axis=0)
        if control_variate:
            est = vals
        else:
            est = vals - j_inf[None]
        signed[a] = est.mean(axis=0)
        se[a] = est.std(axis=0, ddof=1) / np.sqrt(total)
    gap = np.abs(signed)
    slope = np.full(N, np.nan)
    slope_se = np.full(N, np.nan)
    for i in range(N):
        keep = gap[:, i] > noise_floor_se * se[:, i]
        if keep.sum() >= 2:
            slope[i], slope_se[i] = fit_loglog(grid[keep], gap[keep, i])
    return GapTable(grid, gap, signed, se, slope, slope_se, j_inf)


# --------------------------------------------------------------------------
# CSV export


def trajectory_to_csv(traj: Trajectory, path) -> None:
    n = traj.x.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "t", "agent_id"] + [f"x{c}" for c in range(n)])
        R, M, S, _ = traj.x.shape
        for r in range(R):
            for t in range(S):
                for j in range(M):
                    w.writerow([traj.first_run + r, t, j] + [repr(float(v)) for v in traj.x[r, j, t]])


def gap_table_to_csv(table: GapTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "player", "gap", "stderr", "slope"])
        for m, i, g, s, sl in table.rows():
            w.writerow([m, i, repr(g), repr(s), repr(sl)])
