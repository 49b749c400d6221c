"""Game specifications, validation, team assembly and config ingestion.

A game is described by its *joint* matrices (``GameSpec``): one joint state
of dimension ``n`` shared by all players, per-player input matrices and
per-player quadratic weights. ``TeamSpec`` is the per-team description used
in cooperative-competitive settings; ``assemble_joint`` turns it into a
``GameSpec``.

Team-assembly convention
------------------------
``TeamSpec.b[k][i][t]`` is the ``m x p`` block through which player ``i``
drives the dynamics of team ``k``. Player ``i``'s joint control stacks its
inputs into every team, so the joint input matrix is
``B^i_t = blockdiag_k(b[k][i][t])`` and the joint control weight is
``R^i_t = blockdiag_k(r[k][i][t])``. The joint state weight ``Q^i_t`` is
nonzero only in the ``(i, i)`` block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.linalg import block_diag

PD_TOL = 1e-10
PSD_TOL = 1e-10
SYM_TOL = 1e-9


class ConfigError(ValueError):
    """Raised when a config tree cannot be turned into a game.

    ``path`` locates the offending entry, e.g. ``b[1][0]``.
    """

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


def _matrices(seq) -> tuple[np.ndarray, ...]:
    return tuple(np.atleast_2d(np.asarray(m, dtype=float)) for m in seq)


@dataclass(frozen=True)
class GameSpec:
    """Joint-state description of an N-player LQ mean-field type game.

    Time-indexed entries are sequences over ``t``; ``q`` and ``q_bar`` have
    ``horizon + 1`` entries, everything else ``horizon``. Per-player entries
    are a sequence over players of such sequences.
    """

    num_players: int
    horizon: int
    state_dim: int
    control_dims: tuple[int, ...]
    a: tuple[np.ndarray, ...]
    a_bar: tuple[np.ndarray, ...]
    b: tuple[tuple[np.ndarray, ...], ...]
    b_bar: tuple[tuple[np.ndarray, ...], ...]
    q: tuple[tuple[np.ndarray, ...], ...]
    q_bar: tuple[tuple[np.ndarray, ...], ...]
    r: tuple[tuple[np.ndarray, ...], ...]
    r_bar: tuple[tuple[np.ndarray, ...], ...]
    sigma: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "control_dims", tuple(int(p) for p in self.control_dims))
        set_(self, "a", _matrices(self.a))
        set_(self, "a_bar", _matrices(self.a_bar))
        for name in ("b", "b_bar", "q", "q_bar", "r", "r_bar"):
            set_(self, name, tuple(_matrices(seq) for seq in getattr(self, name)))
        set_(self, "sigma", np.atleast_2d(np.asarray(self.sigma, dtype=float)))
        set_(self, "sigma0", np.atleast_2d(np.asarray(self.sigma0, dtype=float)))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __iter__(self):
        return iter(self.violations)

    def __len__(self) -> int:
        return len(self.violations)


def _eig_range(mat: np.ndarray) -> tuple[float, float]:
    w = np.linalg.eigvalsh((mat + mat.T) / 2)
    return float(w[0]), float(w[-1])


def is_symmetric(mat: np.ndarray, tol: float = SYM_TOL) -> bool:
    return mat.shape[0] == mat.shape[1] and bool(
        np.all(np.abs(mat - mat.T) <= tol * max(1.0, np.abs(mat).max(initial=0.0)))
    )


def is_psd(mat: np.ndarray) -> bool:
    lo, hi = _eig_range(mat)
    return lo > -PSD_TOL * max(1.0, hi)


def is_pd(mat: np.ndarray) -> bool:
    return _eig_range(mat)[0] > PD_TOL


def validate_spec(spec: GameSpec) -> ValidationReport:
    """Collect every well-formedness violation of ``spec``.

    Never raises; an empty report means the spec is usable by the solvers.
    """
    out: list[str] = []
    N, T, n = spec.num_players, spec.horizon, spec.state_dim
    if N < 1:
        out.append(f"num_players must be >= 1, got {N}")
    if T < 1:
        out.append(f"horizon must be >= 1, got {T}")
    if n < 1:
        out.append(f"state_dim must be >= 1, got {n}")
    if len(spec.control_dims) != N:
        out.append(f"control_dims has {len(spec.control_dims)} entries, expected {N}")
    if any(p < 1 for p in spec.control_dims):
        out.append(f"control_dims must be >= 1, got {list(spec.control_dims)}")
    if out:
        return ValidationReport(out)

    def check_seq(name, seq, length, shape):
        if len(seq) != length:
            out.append(f"{name}: expected {length} matrices, got {len(seq)}")
        for t, m in enumerate(seq):
            if m.shape != shape:
                out.append(f"{name}[{t}]: shape {m.shape}, expected {shape}")
            elif not np.all(np.isfinite(m)):
                out.append(f"{name}[{t}]: non-finite entries")

    check_seq("a", spec.a, T, (n, n))
    check_seq("a_bar", spec.a_bar, T, (n, n))
    for pname in ("b", "b_bar", "q", "q_bar", "r", "r_bar"):
        if len(getattr(spec, pname)) != N:
            out.append(f"{pname}: expected {N} players, got {len(getattr(spec, pname))}")
    if out:
        return ValidationReport(out)
    for i, p in enumerate(spec.control_dims):
        check_seq(f"b[{i}]", spec.b[i], T, (n, p))
        check_seq(f"b_bar[{i}]", spec.b_bar[i], T, (n, p))
        check_seq(f"q[{i}]", spec.q[i], T + 1, (n, n))
        check_seq(f"q_bar[{i}]", spec.q_bar[i], T + 1, (n, n))
        check_seq(f"r[{i}]", spec.r[i], T, (p, p))
        check_seq(f"r_bar[{i}]", spec.r_bar[i], T, (p, p))
    for name, mat in (("sigma", spec.sigma), ("sigma0", spec.sigma0)):
        if mat.shape != (n, n):
            out.append(f"{name}: shape {mat.shape}, expected {(n, n)}")
    if out:
        return ValidationReport(out)

    for i in range(N):
        for qname in ("q", "q_bar"):
            for t, m in enumerate(getattr(spec, qname)[i]):
                if not is_symmetric(m):
                    out.append(f"{qname}[{i}][{t}]: Q not symmetric")
                elif not is_psd(m):
                    out.append(f"{qname}[{i}][{t}]: Q not PSD")
        for rname in ("r", "r_bar"):
            for t, m in enumerate(getattr(spec, rname)[i]):
                if not is_symmetric(m):
                    out.append(f"{rname}[{i}][{t}]: R not symmetric")
                elif not is_pd(m):
                    out.append(f"{rname}[{i}][{t}]: R not positive definite")
    for name, mat in (("sigma", spec.sigma), ("sigma0", spec.sigma0)):
        if not is_symmetric(mat):
            out.append(f"{name}: covariance not symmetric")
        elif not is_psd(mat):
            out.append(f"{name}: covariance not PSD")
    return ValidationReport(out)


@dataclass(frozen=True)
class JointModel:
    """Validated game with stacked arrays and the mean-field matrices.

    ``a`` is ``(T, n, n)``; ``b[i]`` is ``(T, n, p_i)``; ``q[i]`` is
    ``(T+1, n, n)``; ``a_tilde = a + a_bar`` and ``b_tilde[i] = b[i] + b_bar[i]``.
    """

    spec: GameSpec
    a: np.ndarray
    a_bar: np.ndarray
    a_tilde: np.ndarray
    b: tuple[np.ndarray, ...]
    b_bar: tuple[np.ndarray, ...]
    b_tilde: tuple[np.ndarray, ...]
    q: tuple[np.ndarray, ...]
    q_bar: tuple[np.ndarray, ...]
    r: tuple[np.ndarray, ...]
    r_bar: tuple[np.ndarray, ...]
    sigma: np.ndarray
    sigma0: np.ndarray

    @property
    def num_players(self) -> int:
        return self.spec.num_players

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def control_dims(self) -> tuple[int, ...]:
        return self.spec.control_dims

    def part(self, name: str):
        """Matrices of one decoupled sub-game.

        ``"y"`` is the deviation game ``(A, B, Q, R, Sigma)``; ``"x"`` is the
        mean-field game ``(A~, B~, Q_bar, R_bar, Sigma0)``.
        """
        if name == "y":
            return self.a, self.b, self.q, self.r, self.sigma
        if name == "x":
            return self.a_tilde, self.b_tilde, self.q_bar, self.r_bar, self.sigma0
        raise ValueError(f"unknown sub-game {name!r}; expected 'y' or 'x'")


def derive_joint_model(spec: GameSpec) -> JointModel:
    report = validate_spec(spec)
    if not report.ok:
        raise ValueError("invalid game spec: " + "; ".join(report.violations))
    a = np.stack(spec.a)
    a_bar = np.stack(spec.a_bar)
    b = tuple(np.stack(s) for s in spec.b)
    b_bar = tuple(np.stack(s) for s in spec.b_bar)
    arrays = [a, a_bar, *b, *b_bar]
    q = tuple(np.stack(s) for s in spec.q)
    q_bar = tuple(np.stack(s) for s in spec.q_bar)
    r = tuple(np.stack(s) for s in spec.r)
    r_bar = tuple(np.stack(s) for s in spec.r_bar)
    arrays += [*q, *q_bar, *r, *r_bar, spec.sigma, spec.sigma0]
    for arr in arrays:
        arr.setflags(write=False)
    a_tilde = a + a_bar
    b_tilde = tuple(bi + bbi for bi, bbi in zip(b, b_bar))
    for arr in (a_tilde, *b_tilde):
        arr.setflags(write=False)
    return JointModel(spec, a, a_bar, a_tilde, b, b_bar, b_tilde, q, q_bar, r, r_bar,
                      spec.sigma, spec.sigma0)


@dataclass(frozen=True)
class PolicyProfile:
    """Linear feedback gains ``u^i_t = -K^i_t (x - xbar) - Kbar^i_t xbar``.

    ``k[i]`` and ``k_bar[i]`` have shape ``(T, p_i, n)``.
    """

    k: tuple[np.ndarray, ...]
    k_bar: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(np.asarray(x, dtype=float) for x in self.k))
        object.__setattr__(self, "k_bar", tuple(np.asarray(x, dtype=float) for x in self.k_bar))
        if len(self.k) != len(self.k_bar):
            raise ValueError("k and k_bar must cover the same players")

    @classmethod
    def zeros(cls, model: JointModel) -> PolicyProfile:
        T, n = model.horizon, model.state_dim
        return cls(tuple(np.zeros((T, p, n)) for p in model.control_dims),
                   tuple(np.zeros((T, p, n)) for p in model.control_dims))

    @property
    def num_players(self) -> int:
        return len(self.k)

    def gains(self, part: str) -> tuple[np.ndarray, ...]:
        if part == "y":
            return self.k
        if part == "x":
            return self.k_bar
        raise ValueError(f"unknown sub-game {part!r}")

    def copy(self) -> PolicyProfile:
        return PolicyProfile(tuple(x.copy() for x in self.k), tuple(x.copy() for x in self.k_bar))

    def is_complete(self, model: JointModel) -> bool:
        T, n = model.horizon, model.state_dim
        if self.num_players != model.num_players:
            return False
        for i, p in enumerate(model.control_dims):
            for arr in (self.k[i], self.k_bar[i]):
                if arr.shape != (T, p, n) or not np.all(np.isfinite(arr)):
                    return False
        return True

    def max_error(self, other: PolicyProfile) -> float:
        """Largest Frobenius gap over every (player, t, part)."""
        err = 0.0
        for mine, theirs in ((self.k, other.k), (self.k_bar, other.k_bar)):
            for a, b in zip(mine, theirs):
                err = max(err, float(np.linalg.norm(a - b, axis=(1, 2)).max()))
        return err


# --------------------------------------------------------------------------
# Teams


@dataclass(frozen=True)
class TeamSpec:
    """Per-team description with uniform team state dimension ``m``.

    ``a[k][t]``, ``a_bar[k][t]``: ``m x m`` team dynamics.
    ``b[k][i][t]``, ``b_bar[k][i][t]``: player ``i``'s input into team ``k``.
    ``q[i][t]``, ``q_bar[i][t]`` (``t`` in ``0..T``): team ``i``'s own state weight.
    ``r[k][i][t]``, ``r_bar[k][i][t]``: player ``i``'s weight on its input into team ``k``.
    ``sigma[k]``, ``sigma0[k]``: idiosyncratic and common noise of team ``k``.
    """

    state_dim: int
    horizon: int
    a: Sequence
    a_bar: Sequence
    b: Sequence
    b_bar: Sequence
    q: Sequence
    q_bar: Sequence
    r: Sequence
    r_bar: Sequence
    sigma: Sequence
    sigma0: Sequence
    agent_counts: tuple[int, ...] = ()

    @property
    def num_teams(self) -> int:
        return len(self.a)

    def agents_per_team(self) -> int:
        counts = set(int(c) for c in self.agent_counts)
        if not counts:
            raise ValueError("TeamSpec has no agent_counts")
        if len(counts) != 1:
            raise ValueError(f"joint simulation needs equal team sizes, got {list(self.agent_counts)}")
        return counts.pop()


def assemble_joint(teams: TeamSpec) -> GameSpec:
    N, T, m = teams.num_teams, teams.horizon, teams.state_dim
    n = N * m

    def mat(x, path, shape=None):
        arr = np.atleast_2d(np.asarray(x, dtype=float))
        if shape is not None and arr.shape != shape:
            raise ValueError(f"{path}: shape {arr.shape}, expected {shape}")
        return arr

    for name in ("a", "a_bar", "b", "b_bar", "r", "r_bar", "sigma", "sigma0"):
        if len(getattr(teams, name)) != N:
            raise ValueError(f"{name}: expected {N} teams, got {len(getattr(teams, name))}")
    for name in ("q", "q_bar"):
        if len(getattr(teams, name)) != N:
            raise ValueError(f"{name}: expected {N} teams, got {len(getattr(teams, name))}")

    # control block widths p[k][i], taken from b at t=0
    widths = [[mat(teams.b[k][i][0], f"b[{k}][{i}][0]").shape[1] for i in range(N)] for k in range(N)]
    control_dims = [sum(widths[k][i] for k in range(N)) for i in range(N)]

    a = [block_diag(*[mat(teams.a[k][t], f"a[{k}][{t}]", (m, m)) for k in range(N)]) for t in range(T)]
    a_bar = [block_diag(*[mat(teams.a_bar[k][t], f"a_bar[{k}][{t}]", (m, m)) for k in range(N)])
             for t in range(T)]

    def player_blocks(field_name, rows):
        src = getattr(teams, field_name)
        out = []
        for i in range(N):
            seq = []
            for t in range(T):
                blocks = [mat(src[k][i][t], f"{field_name}[{k}][{i}][{t}]",
                              (rows(k, i), widths[k][i])) for k in range(N)]
                seq.append(block_diag(*blocks))
            out.append(seq)
        return out

    b = player_blocks("b", lambda k, i: m)
    b_bar = player_blocks("b_bar", lambda k, i: m)
    r = player_blocks("r", lambda k, i: widths[k][i])
    r_bar = player_blocks("r_bar", lambda k, i: widths[k][i])

    def own_block(field_name):
        src = getattr(teams, field_name)
        out = []
        for i in range(N):
            seq = []
            for t in range(T + 1):
                full = np.zeros((n, n))
                full[i * m:(i + 1) * m, i * m:(i + 1) * m] = mat(src[i][t], f"{field_name}[{i}][{t}]", (m, m))
                seq.append(full)
            out.append(seq)
        return out

    sigma = block_diag(*[mat(s, f"sigma[{k}]", (m, m)) for k, s in enumerate(teams.sigma)])
    sigma0 = block_diag(*[mat(s, f"sigma0[{k}]", (m, m)) for k, s in enumerate(teams.sigma0)])
    return GameSpec(N, T, n, tuple(control_dims), a, a_bar, b, b_bar,
                    own_block("q"), own_block("q_bar"), r, r_bar, sigma, sigma0)


def extract_teams(spec: GameSpec, team_state_dim: int, team_control_widths=None,
                  agent_counts: Sequence[int] = ()) -> TeamSpec:
    """Inverse of :func:`assemble_joint`.

    ``team_control_widths[k][i]`` gives the width of player ``i``'s block in
    team ``k``; by default every block has width ``p_i / N``. Raises
    ``ValueError`` if ``spec`` lacks the block structure.
    """
    N, T, m = spec.num_players, spec.horizon, team_state_dim
    if N * m != spec.state_dim:
        raise ValueError(f"state_dim {spec.state_dim} != num_players * team_state_dim {N * m}")
    if team_control_widths is None:
        for p in spec.control_dims:
            if p % N:
                raise ValueError(f"control dim {p} not divisible by {N}; pass team_control_widths")
        team_control_widths = [[p // N for p in spec.control_dims] for _ in range(N)]
    w = team_control_widths
    offs = [np.concatenate([[0], np.cumsum([w[k][i] for k in range(N)])]) for i in range(N)]

    def split_diag(full, rows_of, cols_of, path):
        """Diagonal blocks of ``full``; everything off the blocks must vanish."""
        blocks, mask = [], np.ones_like(full, dtype=bool)
        for k in range(N):
            rs, cs = rows_of(k), cols_of(k)
            blocks.append(full[rs, cs].copy())
            mask[rs, cs] = False
        if np.any(full[mask] != 0):
            raise ValueError(f"{path}: matrix is not team block-diagonal")
        return blocks

    rows_state = lambda k: slice(k * m, (k + 1) * m)
    a = [[None] * T for _ in range(N)]
    a_bar = [[None] * T for _ in range(N)]
    for t in range(T):
        for k, blk in enumerate(split_diag(spec.a[t], rows_state, rows_state, f"a[{t}]")):
            a[k][t] = blk
        for k, blk in enumerate(split_diag(spec.a_bar[t], rows_state, rows_state, f"a_bar[{t}]")):
            a_bar[k][t] = blk

    def per_player(field_name, square):
        src = getattr(spec, field_name)
        out = [[[None] * T for _ in range(N)] for _ in range(N)]
        for i in range(N):
            cols = lambda k, i=i: slice(int(offs[i][k]), int(offs[i][k + 1]))
            rows = cols if square else rows_state
            for t in range(T):
                for k, blk in enumerate(split_diag(src[i][t], rows, cols, f"{field_name}[{i}][{t}]")):
                    out[k][i][t] = blk
        return out

    b = per_player("b", square=False)
    b_bar = per_player("b_bar", square=False)
    r = per_player("r", square=True)
    r_bar = per_player("r_bar", square=True)

    def own(field_name):
        src = getattr(spec, field_name)
        out = []
        for i in range(N):
            seq = []
            for t in range(T + 1):
                full = src[i][t]
                blk = full[rows_state(i), rows_state(i)].copy()
                rest = full.copy()
                rest[rows_state(i), rows_state(i)] = 0
                if np.any(rest != 0):
                    raise ValueError(f"{field_name}[{i}][{t}]: nonzero outside block ({i},{i})")
                seq.append(blk)
            out.append(seq)
        return out

    sigma = split_diag(spec.sigma, rows_state, rows_state, "sigma")
    sigma0 = split_diag(spec.sigma0, rows_state, rows_state, "sigma0")
    return TeamSpec(m, T, a, a_bar, b, b_bar, own("q"), own("q_bar"), r, r_bar,
                    sigma, sigma0, tuple(int(c) for c in agent_counts))


# --------------------------------------------------------------------------
# Config ingestion


def _as_matrix(value, path: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, f"not a numeric array ({exc})") from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ConfigError(path, f"expected a matrix, got array of rank {arr.ndim}")
    return arr


def _time_series(value, length: int, path: str) -> list[np.ndarray]:
    """Matrix replicated over ``length`` steps, or an explicit per-step list.

    A flat list of numbers is read as per-step scalars; a single row vector
    must therefore be written ``[[...]]``.
    """
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        arr = None
    if arr is not None and arr.ndim == 1:
        # flat list of numbers: per-step 1x1 entries
        if len(arr) != length:
            raise ConfigError(path, f"expected {length} time steps, got {len(arr)}")
        return [v.reshape(1, 1).copy() for v in arr]
    if arr is not None and arr.ndim <= 2:
        mat = _as_matrix(arr, path)
        return [mat.copy() for _ in range(length)]
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, "expected a matrix or a list of matrices")
    if len(value) != length:
        raise ConfigError(path, f"expected {length} time steps, got {len(value)}")
    return [_as_matrix(v, f"{path}[{t}]") for t, v in enumerate(value)]


def _require(tree: dict, key: str, path: str = ""):
    if key not in tree:
        raise ConfigError(f"{path}{key}", "missing required key")
    return tree[key]


def spec_from_dict(tree: dict) -> GameSpec:
    """Build a :class:`GameSpec` from a JSON-compatible tree.

    Matrix entries may be a number (1x1), a matrix (replicated over time) or
    a list of per-step matrices. Per-player entries are lists over players.
    If the tree has a ``teams`` key instead of joint matrices, the team form
    is assembled (see :func:`teams_from_dict`).
    """
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if "teams" in tree:
        return assemble_joint(teams_from_dict(tree["teams"]))
    try:
        N = int(_require(tree, "num_players"))
        T = int(_require(tree, "horizon"))
        n = int(_require(tree, "state_dim"))
    except (TypeError, ValueError) as exc:
        raise ConfigError("<root>", f"bad dimension entry ({exc})") from None
    dims = _require(tree, "control_dims")
    if not isinstance(dims, (list, tuple)) or len(dims) != N:
        raise ConfigError("control_dims", f"expected a list of {N} integers")
    control_dims = [int(p) for p in dims]

    def per_player(key, length, default=None):
        if key not in tree:
            if default is None:
                raise ConfigError(key, "missing required key")
            return [default(i) for i in range(N)]
        value = tree[key]
        if not isinstance(value, (list, tuple)) or len(value) != N:
            raise ConfigError(key, f"expected a list over {N} players")
        return [_time_series(v, length, f"{key}[{i}]") for i, v in enumerate(value)]

    zeros_b = lambda i: [np.zeros((n, control_dims[i])) for _ in range(T)]
    a = _time_series(_require(tree, "a"), T, "a")
    a_bar = _time_series(tree.get("a_bar", np.zeros((n, n))), T, "a_bar")
    b = per_player("b", T)
    b_bar = per_player("b_bar", T, zeros_b)
    q = per_player("q", T + 1)
    q_bar = per_player("q_bar", T + 1)
    r = per_player("r", T)
    r_bar = per_player("r_bar", T)
    sigma = _as_matrix(tree.get("sigma", np.eye(n)), "sigma")
    sigma0 = _as_matrix(tree.get("sigma0", np.zeros((n, n))), "sigma0")
    return GameSpec(N, T, n, tuple(control_dims), a, a_bar, b, b_bar, q, q_bar, r, r_bar,
                    sigma, sigma0)


def teams_from_dict(tree: dict) -> TeamSpec:
    """Team form: ``num_teams``, ``horizon``, ``state_dim`` (m) plus blocks.

    ``b``/``b_bar``/``r``/``r_bar`` are ``[team][player]`` nested lists;
    ``a``/``a_bar``/``q``/``q_bar``/``sigma``/``sigma0`` are per team.
    """
    path = "teams."
    try:
        N = int(_require(tree, "num_teams", path))
        T = int(_require(tree, "horizon", path))
        m = int(_require(tree, "state_dim", path))
    except (TypeError, ValueError) as exc:
        raise ConfigError("teams", f"bad dimension entry ({exc})") from None

    def per_team(key, length, default=None):
        if key not in tree:
            if default is None:
                raise ConfigError(path + key, "missing required key")
            return [default() for _ in range(N)]
        value = tree[key]
        if not isinstance(value, (list, tuple)) or len(value) != N:
            raise ConfigError(path + key, f"expected a list over {N} teams")
        return [_time_series(v, length, f"{path}{key}[{k}]") for k, v in enumerate(value)]

    def pairwise(key, default=None):
        if key not in tree:
            if default is None:
                raise ConfigError(path + key, "missing required key")
            return default()
        value = tree[key]
        if not isinstance(value, (list, tuple)) or len(value) != N:
            raise ConfigError(path + key, f"expected a [team][player] list over {N} teams")
        out = []
        for k, row in enumerate(value):
            if not isinstance(row, (list, tuple)) or len(row) != N:
                raise ConfigError(f"{path}{key}[{k}]", f"expected a list over {N} players")
            out.append([_time_series(v, T, f"{path}{key}[{k}][{i}]") for i, v in enumerate(row)])
        return out

    b = pairwise("b")
    zero_b = lambda: [[[np.zeros_like(b[k][i][0]) for _ in range(T)] for i in range(N)]
                      for k in range(N)]
    counts = tree.get("agent_counts", [])
    if isinstance(counts, int):
        counts = [counts] * N
    sig = [_as_matrix(s, f"{path}sigma[{k}]") for k, s in enumerate(tree.get("sigma", [np.eye(m)] * N))]
    sig0 = [_as_matrix(s, f"{path}sigma0[{k}]")
            for k, s in enumerate(tree.get("sigma0", [np.zeros((m, m))] * N))]
    return TeamSpec(
        m, T,
        per_team("a", T), per_team("a_bar", T, lambda: np.zeros((m, m))),
        b, pairwise("b_bar", zero_b),
        per_team("q", T + 1), per_team("q_bar", T + 1),
        pairwise("r"), pairwise("r_bar"),
        sig, sig0, tuple(int(c) for c in counts),
    )


def _tolist(x):
    return np.asarray(x).tolist()


def spec_to_dict(spec: GameSpec) -> dict[str, Any]:
    """Explicit (per-step) config tree; round-trips through :func:`spec_from_dict`."""
    return {
        "num_players": spec.num_players,
        "horizon": spec.horizon,
        "state_dim": spec.state_dim,
        "control_dims": list(spec.control_dims),
        "a": [_tolist(m) for m in spec.a],
        "a_bar": [_tolist(m) for m in spec.a_bar],
        **{name: [[_tolist(m) for m in seq] for seq in getattr(spec, name)]
           for name in ("b", "b_bar", "q", "q_bar", "r", "r_bar")},
        "sigma": _tolist(spec.sigma),
        "sigma0": _tolist(spec.sigma0),
    }


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read file ({exc.strerror})") from None
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    if not isinstance(tree, dict):
        raise ConfigError(str(path), "top level must be an object")
    return tree


def load_spec(path) -> GameSpec:
    tree = load_config(path)
    return spec_from_dict(tree.get("model", tree))


def random_spec(rng: np.random.Generator, num_players: int = 2, state_dim: int = 2,
                horizon: int = 3, control_dims=None, r_floor: float = 0.5,
                noise_scale: float = 1.0, common_noise: bool = True) -> GameSpec:
    """A random well-posed instance (time-varying matrices, PD ``R``, PSD ``Q``).

    Intended for tests and demos; norms are kept moderate so costs stay O(1).
    """
    N, n, T = num_players, state_dim, horizon
    dims = tuple(control_dims or [int(rng.integers(1, n + 1)) for _ in range(N)])

    def psd(k, scale=1.0):
        g = rng.standard_normal((k, k))
        return scale * (g @ g.T) / k

    def stable(k):
        g = rng.standard_normal((k, k))
        return 0.9 * g / max(1.0, np.linalg.norm(g, 2))

    a = [stable(n) for _ in range(T)]
    a_bar = [0.2 * stable(n) for _ in range(T)]
    b = [[rng.standard_normal((n, p)) / np.sqrt(n) for _ in range(T)] for p in dims]
    b_bar = [[0.2 * rng.standard_normal((n, p)) / np.sqrt(n) for _ in range(T)] for p in dims]
    q = [[psd(n) for _ in range(T + 1)] for _ in range(N)]
    q_bar = [[psd(n) for _ in range(T + 1)] for _ in range(N)]
    r = [[psd(p) + r_floor * np.eye(p) for _ in range(T)] for p in dims]
    r_bar = [[psd(p) + r_floor * np.eye(p) for _ in range(T)] for p in dims]
    sigma = psd(n, noise_scale) + 0.1 * noise_scale * np.eye(n)
    sigma0 = psd(n, 0.5 * noise_scale) if common_noise else np.zeros((n, n))
    return GameSpec(N, T, n, dims, a, a_bar, b, b_bar, q, q_bar, r, r_bar, sigma, sigma0)
