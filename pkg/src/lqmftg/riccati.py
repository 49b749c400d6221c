"""Model-based equilibrium solvers.

Closed-loop Nash equilibrium via coupled Riccati recursions (one stacked
linear solve per step), the open-loop equilibrium's feedback representation,
diagonal-dominance diagnostics and the cost-augmentation schedule.

Every solver treats the deviation game ``(A, B, Q, R)`` and the mean-field
game ``(A~, B~, Q_bar, R_bar)`` with the same code path; see
:meth:`JointModel.part`.

The stationarity right-hand side is ``B^T Z_{t+1} A`` (value matrix at
``t+1``), the backward-induction form. Weighting it with the stage matrix
``Q_t`` instead does not satisfy the first-order conditions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .model import JointModel, PolicyProfile

RCOND_MIN = 1e-12


class SingularPhi(RuntimeError):
    """The stacked stationarity matrix is numerically singular at step ``t``."""

    def __init__(self, t: int, rcond: float, part: str = "y"):
        self.t, self.rcond, self.part = t, rcond, part
        which = "deviation" if part == "y" else "mean-field"
        super().__init__(f"{which} coupling matrix singular at t={t} (rcond={rcond:.3e})")


class FixedPointDiverged(RuntimeError):
    def __init__(self, t: int, part: str = "y"):
        self.t, self.part = t, part
        super().__init__(f"open-loop recursion ({part}) did not converge at t={t}")


def _rcond(mat: np.ndarray) -> float:
    if not np.all(np.isfinite(mat)):
        return 0.0
    s = np.linalg.svd(mat, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def stacked_system(b_t, z_next, a_t, r_t, weights=None):
    """Coupled stationarity system ``Phi K = rhs`` at one step.

    Block ``(i, j)`` of ``Phi`` is ``B_i^T Z_i B_j`` plus ``w_i R_i`` on the
    diagonal; ``rhs_i = B_i^T Z_i A``. ``weights`` defaults to ones.
    """
    N = len(b_t)
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    rows, rhs = [], []
    for i in range(N):
        bz = b_t[i].T @ z_next[i]
        row = [bz @ b_t[j] for j in range(N)]
        row[i] = row[i] + w[i] * r_t[i]
        rows.append(row)
        rhs.append(bz @ a_t)
    return np.block(rows), np.vstack(rhs)


def _backward(model: JointModel, part: str, gamma=None, gamma_rule=None):
    """Shared backward pass for the plain and cost-augmented equilibria.

    Stage costs of player ``i`` at ``t`` are weighted by ``1 + gamma[i, t]``.
    If ``gamma_rule`` is given it is called as ``gamma_rule(t, z_next)`` to
    produce that step's weights just before the solve.
    """
    a, b, q, r, _ = model.part(part)
    N, T, n = model.num_players, model.horizon, model.state_dim
    dims = model.control_dims
    splits = np.cumsum(dims)[:-1]
    z = [np.zeros((T + 1, n, n)) for _ in range(N)]
    k = [np.zeros((T, p, n)) for p in dims]
    g = np.zeros((N, T)) if gamma is None else np.array(gamma, dtype=float).reshape(N, T)
    rcond = np.zeros(T)
    f = np.zeros((T, n, n))
    for i in range(N):
        z[i][T] = q[i][T]
    for t in range(T - 1, -1, -1):
        z_next = [z[i][t + 1] for i in range(N)]
        b_t = [b[i][t] for i in range(N)]
        r_t = [r[i][t] for i in range(N)]
        if gamma_rule is not None:
            g[:, t] = gamma_rule(t, z_next)
        phi, rhs = stacked_system(b_t, z_next, a[t], r_t, 1.0 + g[:, t])
        rcond[t] = _rcond(phi)
        if rcond[t] < RCOND_MIN:
            raise SingularPhi(t, rcond[t], part)
        k_all = scipy.linalg.lu_solve(scipy.linalg.lu_factor(phi), rhs)
        k_t = np.split(k_all, splits, axis=0)
        f_t = a[t] - sum(b_t[j] @ k_t[j] for j in range(N))
        f[t] = f_t
        for i in range(N):
            k[i][t] = k_t[i]
            stage = (1.0 + g[i, t]) * (q[i][t] + k_t[i].T @ r_t[i] @ k_t[i])
            z[i][t] = _sym(f_t.T @ z_next[i] @ f_t + stage)
    return k, z, rcond, f, g


@dataclass(frozen=True)
class RiccatiSolution:
    """Closed-loop equilibrium of both sub-games.

    ``z[i]``/``z_bar[i]`` are ``(T+1, n, n)`` value matrices; ``rcond`` and
    ``rcond_bar`` hold the reciprocal 2-norm condition number of the coupling
    matrix at each step; ``f``/``f_bar`` are the closed-loop matrices.
    """

    profile: PolicyProfile
    z: tuple[np.ndarray, ...]
    z_bar: tuple[np.ndarray, ...]
    rcond: np.ndarray
    rcond_bar: np.ndarray
    f: np.ndarray
    f_bar: np.ndarray

    def values(self, part: str):
        return self.z if part == "y" else self.z_bar


def solve_clne(model: JointModel) -> RiccatiSolution:
    k, z, rc, f, _ = _backward(model, "y")
    kb, zb, rcb, fb, _ = _backward(model, "x")
    return RiccatiSolution(PolicyProfile(tuple(k), tuple(kb)), tuple(z), tuple(zb), rc, rcb, f, fb)


@dataclass(frozen=True)
class NEResidual:
    y: np.ndarray  # (N, T)
    x: np.ndarray  # (N, T)

    def max(self) -> float:
        return float(max(self.y.max(initial=0.0), self.x.max(initial=0.0)))


def verify_ne_residual(model: JointModel, sol: RiccatiSolution) -> NEResidual:
    """Frobenius norm of each player's first-order stationarity condition.

    Uses the gains in ``sol.profile`` against the value matrices in ``sol``,
    so a perturbed profile can be checked with ``dataclasses.replace``.
    """
    out = {}
    for part in ("y", "x"):
        a, b, _, r, _ = model.part(part)
        gains = sol.profile.gains(part)
        z = sol.values(part)
        N, T = model.num_players, model.horizon
        res = np.zeros((N, T))
        for t in range(T):
            for i in range(N):
                bz = b[i][t].T @ z[i][t + 1]
                others = sum((b[j][t] @ gains[j][t] for j in range(N) if j != i),
                             np.zeros_like(a[t]))
                lhs = (r[i][t] + bz @ b[i][t]) @ gains[i][t] + bz @ others
                res[i, t] = np.linalg.norm(lhs - bz @ a[t])
        out[part] = res
    return NEResidual(out["y"], out["x"])


# --------------------------------------------------------------------------
# Open-loop equilibrium


@dataclass(frozen=True)
class OlneSolution:
    """Open-loop equilibrium in feedback form.

    ``u^i_t = -G^i_t (x - xbar) - Gbar^i_t xbar`` with ``G = L P`` and
    ``Gbar = (L + Lbar) Pbar``. ``p[i]``/``p_bar[i]`` are ``(T+1, n, n)``
    with zero terminal value; they are not symmetric in general.
    """

    l: tuple[np.ndarray, ...]
    l_bar: tuple[np.ndarray, ...]
    p: tuple[np.ndarray, ...]
    p_bar: tuple[np.ndarray, ...]
    profile: PolicyProfile
    used_fallback: np.ndarray  # (2, T) bool, rows y then x

    def gap_to(self, other: PolicyProfile) -> float:
        return self.profile.max_error(other)


def _olne_step(c, d, a_t, fallback: bool, damping=0.5, max_iter=10_000, tol=1e-12):
    """Solve ``P_i + C_i sum_j D_j P_j = C_i A`` for all ``i``.

    Returns ``(P list, used_fallback)``; ``None`` for P on divergence.
    """
    N, n = len(c), a_t.shape[0]
    big = np.eye(N * n * n)
    eye_n = np.eye(n)
    for i in range(N):
        for j in range(N):
            big[i * n * n:(i + 1) * n * n, j * n * n:(j + 1) * n * n] += np.kron(eye_n, c[i] @ d[j])
    rhs = np.concatenate([(c[i] @ a_t).reshape(-1, order="F") for i in range(N)])
    if not fallback and _rcond(big) > RCOND_MIN:
        sol = np.linalg.solve(big, rhs)
        return [sol[i * n * n:(i + 1) * n * n].reshape(n, n, order="F") for i in range(N)], False
    p = [np.zeros((n, n)) for _ in range(N)]
    for _ in range(max_iter):
        coupled = sum(d[j] @ p[j] for j in range(N))
        new = [c[i] @ (a_t - coupled) for i in range(N)]
        new = [(1 - damping) * p[i] + damping * new[i] for i in range(N)]
        delta = max(np.abs(new[i] - p[i]).max() for i in range(N))
        p = new
        if not np.all(np.isfinite(delta)):
            break
        if delta < tol:
            return p, True
    return None, True


def solve_olne(model: JointModel, force_fallback: bool = False) -> OlneSolution:
    N, T, n = model.num_players, model.horizon, model.state_dim
    l, l_bar = [], []
    for i in range(N):
        li = np.stack([0.5 * np.linalg.solve(model.r[i][t], model.b[i][t].T) for t in range(T)])
        # R^{-1}(R Rbar^{-1} B~^T - B^T) / 2, with the R^{-1} R factor cancelled
        lbi = np.stack([
            0.5 * (np.linalg.solve(model.r_bar[i][t], model.b_tilde[i][t].T) - 2.0 * li[t])
            for t in range(T)])
        l.append(li)
        l_bar.append(lbi)

    fallback = np.zeros((2, T), dtype=bool)
    values = {}
    for row, part in enumerate(("y", "x")):
        a, b, q, _, _ = model.part(part)
        # feedback factor multiplying P^j_t inside the closed loop
        lf = l if part == "y" else [l[j] + l_bar[j] for j in range(N)]
        p = [np.zeros((T + 1, n, n)) for _ in range(N)]
        for t in range(T - 1, -1, -1):
            c = [a[t].T @ p[i][t + 1] + 2.0 * q[i][t] for i in range(N)]
            d = [b[j][t] @ lf[j][t] for j in range(N)]
            p_t, fallback[row, t] = _olne_step(c, d, a[t], force_fallback)
            if p_t is None:
                raise FixedPointDiverged(t, part)
            for i in range(N):
                p[i][t] = p_t[i]
        values[part] = p
    p, pb = values["y"], values["x"]
    g = tuple(np.einsum("tpn,tnm->tpm", l[i], p[i][:T]) for i in range(N))
    gb = tuple(np.einsum("tpn,tnm->tpm", l[i] + l_bar[i], pb[i][:T]) for i in range(N))
    return OlneSolution(tuple(l), tuple(l_bar), tuple(p), tuple(pb), PolicyProfile(g, gb), fallback)


def olne_residual(model: JointModel, sol: OlneSolution) -> np.ndarray:
    """``(2, N, T)`` residuals of the defining recursions (rows y, x)."""
    N, T = model.num_players, model.horizon
    out = np.zeros((2, N, T))
    for row, part in enumerate(("y", "x")):
        a, b, q, _, _ = model.part(part)
        p = sol.p if part == "y" else sol.p_bar
        lf = sol.l if part == "y" else [sol.l[j] + sol.l_bar[j] for j in range(N)]
        for t in range(T):
            closed = a[t] - sum(b[j][t] @ lf[j][t] @ p[j][t] for j in range(N))
            for i in range(N):
                rhs = (a[t].T @ p[i][t + 1] + 2.0 * q[i][t]) @ closed
                out[row, i, t] = np.linalg.norm(p[i][t] - rhs)
    return out


# --------------------------------------------------------------------------
# Diagonal dominance and cost augmentation


def dominance_factor(model: JointModel) -> float:
    """``sqrt(2 m (N-1))`` with ``m`` bound to the joint state dimension."""
    return float(np.sqrt(2.0 * model.state_dim * (model.num_players - 1)))


def input_gain_bound(b, t: int) -> float:
    return max(float(np.linalg.norm(bi[t], 2)) for bi in b)


@dataclass(frozen=True)
class DominanceReport:
    """Per-(player, t) margins ``sigma_min(R) - c * gamma_B^2 * ||Z_{t+1}||``."""

    margin: np.ndarray      # (N, T), deviation game
    margin_bar: np.ndarray  # (N, T), mean-field game

    @property
    def holds(self) -> bool:
        return bool(np.all(self.margin >= 0) and np.all(self.margin_bar >= 0))


def check_diag_dominance(model: JointModel, sol: RiccatiSolution, r_scale=None) -> DominanceReport:
    """``r_scale`` (optional ``(N, T)`` or pair of them) multiplies ``R``,
    which is how the augmented weights ``(1 + gamma) R`` are checked."""
    c = dominance_factor(model)
    N, T = model.num_players, model.horizon
    if r_scale is None:
        scales = (np.ones((N, T)), np.ones((N, T)))
    elif isinstance(r_scale, tuple):
        scales = tuple(np.asarray(s, dtype=float).reshape(N, T) for s in r_scale)
    else:
        scales = (np.asarray(r_scale, dtype=float).reshape(N, T),) * 2
    out = []
    for part, scale in zip(("y", "x"), scales):
        _, b, _, r, _ = model.part(part)
        z = sol.values(part)
        margin = np.zeros((N, T))
        for t in range(T):
            gb = input_gain_bound(b, t)
            for i in range(N):
                smin = float(np.linalg.svd(r[i][t], compute_uv=False)[-1]) * scale[i, t]
                margin[i, t] = smin - c * gb ** 2 * float(np.linalg.norm(z[i][t + 1], 2))
        out.append(margin)
    return DominanceReport(*out)


@dataclass(frozen=True)
class AugmentationSchedule:
    """Per-(player, t) augmentation weights and the augmented equilibrium.

    ``gamma``/``gamma_bar`` are ``(N, T)``; the terminal step carries no
    weight. ``p_aug[i]`` are the augmented value matrices.
    """

    gamma: np.ndarray
    gamma_bar: np.ndarray
    p_aug: tuple[np.ndarray, ...]
    p_aug_bar: tuple[np.ndarray, ...]
    profile: PolicyProfile
    rcond: np.ndarray
    rcond_bar: np.ndarray

    @property
    def max_gamma(self) -> float:
        return float(max(self.gamma.max(initial=0.0), self.gamma_bar.max(initial=0.0)))

    def scaled(self, c: float):
        return c * self.gamma, c * self.gamma_bar


def compute_gamma_schedule(model: JointModel) -> AugmentationSchedule:
    c = dominance_factor(model)
    parts = {}
    for part in ("y", "x"):
        _, b, _, r, _ = model.part(part)

        def rule(t, z_next, b=b, r=r):
            gb2 = input_gain_bound(b, t) ** 2
            return np.array([
                max(0.0, c * gb2 * float(np.linalg.norm(z_next[i], 2))
                    / float(np.linalg.svd(r[i][t], compute_uv=False)[-1]) - 1.0)
                for i in range(len(z_next))])

        parts[part] = _backward(model, part, gamma_rule=rule)
    k, z, rc, _, g = parts["y"]
    kb, zb, rcb, _, gb = parts["x"]
    return AugmentationSchedule(g, gb, tuple(z), tuple(zb), PolicyProfile(tuple(k), tuple(kb)), rc, rcb)


def solve_augmented(model: JointModel, gamma, gamma_bar=None) -> AugmentationSchedule:
    """Augmented equilibrium for a fixed weight schedule (no gamma rule)."""
    gamma = np.asarray(gamma, dtype=float)
    gamma_bar = gamma if gamma_bar is None else np.asarray(gamma_bar, dtype=float)
    k, z, rc, _, g = _backward(model, "y", gamma=gamma)
    kb, zb, rcb, _, gb = _backward(model, "x", gamma=gamma_bar)
    return AugmentationSchedule(g, gb, tuple(z), tuple(zb), PolicyProfile(tuple(k), tuple(kb)), rc, rcb)


# --------------------------------------------------------------------------
# Serialization


def profile_to_dict(profile: PolicyProfile) -> dict:
    return {"K": [k.tolist() for k in profile.k], "K_bar": [k.tolist() for k in profile.k_bar]}


def profile_from_dict(tree: dict) -> PolicyProfile:
    return PolicyProfile(tuple(np.asarray(k, dtype=float) for k in tree["K"]),
                         tuple(np.asarray(k, dtype=float) for k in tree["K_bar"]))


def solution_to_dict(sol: RiccatiSolution) -> dict:
    return {
        "gains": profile_to_dict(sol.profile),
        "Z": [z.tolist() for z in sol.z],
        "Z_bar": [z.tolist() for z in sol.z_bar],
        "rcond": sol.rcond.tolist(),
        "rcond_bar": sol.rcond_bar.tolist(),
    }


def solution_from_dict(tree: dict) -> RiccatiSolution:
    z = tuple(np.asarray(v, dtype=float) for v in tree["Z"])
    zb = tuple(np.asarray(v, dtype=float) for v in tree["Z_bar"])
    T = z[0].shape[0] - 1
    n = z[0].shape[1]
    return RiccatiSolution(profile_from_dict(tree["gains"]), z, zb,
                           np.asarray(tree["rcond"]), np.asarray(tree["rcond_bar"]),
                           np.full((T, n, n), np.nan), np.full((T, n, n), np.nan))


def save_solution(sol: RiccatiSolution, path) -> None:
    Path(path).write_text(json.dumps(solution_to_dict(sol), indent=1))


def with_profile(sol: RiccatiSolution, profile: PolicyProfile) -> RiccatiSolution:
    return replace(sol, profile=profile)
