"""Confidence-conditioned Q-tables and their fixed-point solvers.

A :class:`ConfidenceQ` stores ``Q(s, a, delta)`` on a finite grid of confidence
levels. Lower tables lower-bound ``Q*`` with probability ``1 - delta``; upper
tables upper-bound it. Three backups are provided:

* :func:`ccvl_bonus_backup` subtracts a count-based Hoeffding bonus,
* :func:`ccvl_reg_backup` uses the closed-form solution of the
  conservative-regularizer objective,
* :func:`ccvl_upper_backup` adds the bonus and takes an outer minimum.

Each backup maximizes (or minimizes) over all grid pairs ``(delta1, delta2)``
with both entries at most the target ``delta``, and reports how often that
optimum sat on the diagonal pair ``(delta, delta)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from .data import EmpiricalModel, empirical_bellman
from .errors import ConfigError, ConvergenceError

LOWER = "lower"
UPPER = "upper"

DEFAULT_DELTAS = (0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10_000

# relative slack when deciding that the diagonal pair attains the optimum
_ARGMAX_RTOL = 1e-12


@dataclass(frozen=True)
class ConfidenceGrid:
    deltas: tuple = DEFAULT_DELTAS

    def __post_init__(self):
        d = tuple(float(x) for x in self.deltas)
        object.__setattr__(self, "deltas", d)
        if not d:
            raise ConfigError("confidence grid must be non-empty")
        if not (0.0 < d[0] and d[-1] < 1.0):
            raise ConfigError("confidence levels must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError("confidence levels must be strictly increasing")

    def __len__(self) -> int:
        return len(self.deltas)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.deltas)

    def index(self, delta: float) -> int:
        for i, d in enumerate(self.deltas):
            if math.isclose(d, delta, rel_tol=1e-9, abs_tol=1e-12):
                return i
        raise ConfigError(f"delta={delta} is not on the grid {self.deltas}")


@dataclass(frozen=True, eq=False)
class ConfidenceQ:
    """Q-values indexed ``[state, action, grid index]``.

    ``tie_weights`` (same shape, optional) is the saddle policy of the
    regularized objective. Acting policies use it to split exact ties, which
    the hard-max regularizer creates on purpose by capping over-preferred
    actions at a common level.
    """

    values: np.ndarray
    grid: ConfidenceGrid
    bound_kind: str = LOWER
    alpha: float = 1.0
    iota: float = 1.0
    tie_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if v.ndim != 3 or v.shape[2] != len(self.grid):
            raise ConfigError(f"values must have shape [S, A, {len(self.grid)}], got {v.shape}")
        if self.tie_weights is not None:
            tw = np.array(self.tie_weights, dtype=float, copy=True)
            if tw.shape != v.shape:
                raise ConfigError(f"tie_weights shape {tw.shape} differs from values shape {v.shape}")
            tw.setflags(write=False)
            object.__setattr__(self, "tie_weights", tw)
        if self.bound_kind not in (LOWER, UPPER):
            raise ConfigError(f"bound_kind must be '{LOWER}' or '{UPPER}'")

    @property
    def num_states(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[1]

    def slice(self, k: int) -> np.ndarray:
        return self.values[:, :, k]

    def replace_values(self, values) -> "ConfidenceQ":
        return ConfidenceQ(values, self.grid, self.bound_kind, self.alpha, self.iota)

    def is_monotone(self, tol: float = 1e-9) -> bool:
        diff = np.diff(self.values, axis=2)
        if self.bound_kind == LOWER:
            return bool(np.all(diff >= -tol))
        return bool(np.all(diff <= tol))

    def with_tie_weights(self, weights) -> "ConfidenceQ":
        return ConfidenceQ(self.values, self.grid, self.bound_kind, self.alpha, self.iota, weights)

    def to_dict(self) -> dict:
        d = {
            "bound_kind": self.bound_kind,
            "alpha": self.alpha,
            "iota": self.iota,
            "deltas": list(self.grid.deltas),
            "shape": list(self.values.shape),
            "values": self.values.ravel().tolist(),
        }
        if self.tie_weights is not None:
            d["tie_weights"] = self.tie_weights.ravel().tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceQ":
        try:
            shape = tuple(d["shape"])
            values = np.array(d["values"], dtype=float).reshape(shape)
            tw = d.get("tie_weights")
            if tw is not None:
                tw = np.array(tw, dtype=float).reshape(shape)
            return cls(values, ConfidenceGrid(tuple(d["deltas"])), d["bound_kind"], d["alpha"], d["iota"], tw)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed confidence table: {exc}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "a", "delta", "q"])
        S, A, K = self.values.shape
        for s in range(S):
            for a in range(A):
                for k in range(K):
                    w.writerow([s, a, repr(self.grid.deltas[k]), repr(float(self.values[s, a, k]))])
        return buf.getvalue()


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    argmax_degeneracy_rate: float
    residuals: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "argmax_degeneracy_rate": self.argmax_degeneracy_rate,
        }


def bonus(n, delta, alpha: float = 1.0, iota: float = 1.0):
    """Hoeffding bonus ``alpha * sqrt(iota * log(1/delta) / max(n, 1))``.

    Broadcasts over array inputs.
    """
    d = np.asarray(delta, dtype=float)
    if np.any((d <= 0.0) | (d >= 1.0)):
        raise ValueError("delta must lie strictly inside (0, 1)")
    if alpha < 0 or iota <= 0:
        raise ValueError("need alpha >= 0 and iota > 0")
    n = np.maximum(np.asarray(n, dtype=float), 1.0)
    out = alpha * np.sqrt(iota * np.log(1.0 / d) / n)
    return float(out) if np.ndim(out) == 0 else out


def value_bounds(v_max: float, alpha: float, iota: float, grid: ConfidenceGrid):
    """Range every confidence-conditioned entry is clamped to."""
    slack = alpha * math.sqrt(iota * math.log(1.0 / grid.deltas[0]))
    return -v_max - slack, v_max + slack


def initial_table(
    model: EmpiricalModel,
    grid: ConfidenceGrid = ConfidenceGrid(),
    bound_kind: str = LOWER,
    alpha: float = 1.0,
    iota: float = 1.0,
) -> ConfidenceQ:
    """Start lower tables at ``-v_max`` and upper tables at ``+v_max``."""
    sign = -1.0 if bound_kind == LOWER else 1.0
    values = np.full((model.num_states, model.num_actions, len(grid)), sign * model.v_max)
    return ConfidenceQ(values, grid, bound_kind, alpha, iota)


def _pair_mask(K: int) -> np.ndarray:
    # mask[k, k1, k2]: both partner indices at most k
    idx = np.arange(K)
    return (idx[None, :, None] <= idx[:, None, None]) & (idx[None, None, :] <= idx[:, None, None])


def _diagonal_attains(best: np.ndarray, diag: np.ndarray, lower: bool) -> np.ndarray:
    slack = _ARGMAX_RTOL * np.maximum(1.0, np.abs(best))
    return diag >= best - slack if lower else diag <= best + slack


def _bonus_pairs(prev: ConfidenceQ, model: EmpiricalModel, sign: float):
    """Shared body of the lower (sign=-1) and upper (sign=+1) bonus backups."""
    K = len(prev.grid)
    lower = sign < 0
    target = empirical_bellman(prev.values, model)  # [S, A, K] indexed by delta2
    b = bonus(model.count_sa[:, :, None], prev.grid.array[None, None, :], prev.alpha, prev.iota)
    # cand[s, a, k1, k2] = target(delta2) +/- bonus(delta1)
    cand = target[:, :, None, :] + sign * b[:, :, :, None]
    mask = _pair_mask(K)
    fill = -np.inf if lower else np.inf
    masked = np.where(mask[None, None], cand[:, :, None, :, :], fill)  # [S, A, k, k1, k2]
    flat = masked.reshape(masked.shape[:3] + (K * K,))
    best = flat.max(axis=3) if lower else flat.min(axis=3)
    diag = cand[:, :, np.arange(K), np.arange(K)]
    degenerate = _diagonal_attains(best, diag, lower)
    lo, hi = value_bounds(model.v_max, prev.alpha, prev.iota, prev.grid)
    best = np.clip(best, lo, hi)
    if lower:
        best = np.maximum.accumulate(best, axis=2)
    else:
        best = np.minimum.accumulate(best, axis=2)
    return prev.replace_values(best), float(degenerate.mean())


def ccvl_bonus_backup(prev: ConfidenceQ, model: EmpiricalModel):
    """One sweep of the bonus-form lower update; returns ``(table, degeneracy_rate)``."""
    if prev.bound_kind != LOWER:
        raise ConfigError("the bonus backup needs a lower table")
    return _bonus_pairs(prev, model, -1.0)


def ccvl_upper_backup(prev: ConfidenceQ, model: EmpiricalModel):
    """One sweep of the upper-bound update (bonus added, outer minimum)."""
    if prev.bound_kind != UPPER:
        raise ConfigError("the upper backup needs an upper table")
    return _bonus_pairs(prev, model, 1.0)


# --- regularized update ---------------------------------------------------------


def floored_behavior(model: EmpiricalModel) -> np.ndarray:
    """Empirical behavior policy floored at ``1 / (n(s) + |A|)``."""
    floor = 1.0 / (model.count_s[:, None] + model.num_actions)
    return np.maximum(model.behavior_hat, floor)


def regularizer_weight(count_s, delta, alpha: float, iota: float):
    """``alpha * sqrt(iota * log(1/delta) / max(n(s), 1))``."""
    return bonus(count_s, delta, alpha, iota)


def regularizer_penalty(pi, behavior, weight):
    """Closed-form regularizer term ``weight * (pi / behavior - 1)``.

    Positive where ``pi`` puts more mass than the behavior policy, negative
    (a bonus) where it puts less.
    """
    return weight * (np.asarray(pi) / np.asarray(behavior) - 1.0)


def _waterfill_level(u: np.ndarray, p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Solve ``sum_a p_a * max(u_a - c, 0) = w`` for ``c`` along the last axis."""
    order = np.argsort(-u, axis=-1, kind="stable")
    us = np.take_along_axis(u, order, axis=-1)
    ps = np.take_along_axis(p, order, axis=-1)
    cum_pu = np.cumsum(ps * us, axis=-1)
    cum_p = np.cumsum(ps, axis=-1)
    levels = (cum_pu - w[..., None]) / cum_p
    nxt = np.concatenate([us[..., 1:], np.full(us.shape[:-1] + (1,), -np.inf)], axis=-1)
    ok = levels >= nxt
    first = np.argmax(ok, axis=-1)  # the last column is always ok
    return np.take_along_axis(levels, first[..., None], axis=-1)[..., 0]


def greedy_saddle_policy(target: np.ndarray, behavior: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Maximizing policy of the regularized objective with a hard max over actions.

    Solves, per leading index, ``min_Q max_pi weight*(E_pi Q - E_beta Q) +
    0.5 * sum_a beta_a (Q_a - target_a)^2``. The returned ``pi`` is greedy with
    respect to the resulting ``Q = target - penalty(pi)``; tied maximizers share
    mass so that their values are equalized.
    """
    w = np.asarray(weight, dtype=float)
    u = target + w[..., None]
    c = _waterfill_level(u, behavior, w)
    excess = behavior * np.maximum(u - c[..., None], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = excess / excess.sum(axis=-1, keepdims=True)
    # weight == 0: any greedy policy gives zero penalty; pick the uniform argmax
    flat = ~np.isfinite(pi).all(axis=-1)
    if np.any(flat):
        t = target[flat]
        best = t >= t.max(axis=-1, keepdims=True)
        pi[flat] = best / best.sum(axis=-1, keepdims=True)
    return pi


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_saddle_policy(
    target: np.ndarray, behavior: np.ndarray, weight: np.ndarray, temperature: float,
    tol: float = 1e-13, max_iters: int = 100,
) -> np.ndarray:
    """Entropy-regularized counterpart of :func:`greedy_saddle_policy`.

    The inner maximization gives ``pi = softmax(Q / temperature)``; the fixed
    point ``Q = target - weight * (pi / behavior - 1)`` is found by damped
    Newton steps on the strongly convex objective.
    """
    tau = float(temperature)
    w = np.asarray(weight, dtype=float)[..., None]
    p = behavior
    u = target + w

    def objective(q):
        m = q.max(axis=-1, keepdims=True) / tau
        lse = (m + np.log(np.exp(q / tau - m).sum(axis=-1, keepdims=True)))[..., 0]
        return w[..., 0] * tau * lse + 0.5 * (p * (q - u) ** 2).sum(axis=-1)

    q = u - w * greedy_saddle_policy(target, behavior, w[..., 0]) / p
    f = objective(q)
    eye = np.eye(q.shape[-1])
    for _ in range(max_iters):
        sig = _softmax(q / tau)
        grad = w * sig + p * (q - u)
        if np.max(np.abs(grad)) <= tol:
            break
        hess = (w[..., None] / tau) * (sig[..., :, None] * eye - sig[..., :, None] * sig[..., None, :])
        hess = hess + p[..., :, None] * eye
        step = np.linalg.solve(hess, grad[..., None])[..., 0]
        t = np.ones(q.shape[:-1])
        for _ in range(40):
            cand = q - t[..., None] * step
            fc = objective(cand)
            bad = fc > f + 1e-15 * np.maximum(1.0, np.abs(f))
            if not np.any(bad):
                break
            t = np.where(bad, 0.5 * t, t)
        q, f = cand, fc
    return _softmax(q / tau)


def saddle_policy(target, behavior, weight, policy_mode: str = "greedy", temperature: float = 1.0):
    if policy_mode == "greedy":
        return greedy_saddle_policy(target, behavior, weight)
    if policy_mode == "softmax":
        if temperature <= 0:
            raise ConfigError("softmax temperature must be positive")
        return softmax_saddle_policy(target, behavior, weight, temperature)
    raise ConfigError(f"unknown policy_mode {policy_mode!r}")


def ccvl_reg_backup(
    prev: ConfidenceQ,
    model: EmpiricalModel,
    policy_mode: str = "greedy",
    temperature: float = 1.0,
):
    """One sweep of the regularized lower update; returns ``(table, degeneracy_rate)``.

    For every state and grid pair ``(delta1, delta2)`` the per-state objective
    is solved in closed form: ``Q = B(prev at delta2) - w(s, delta1) *
    (pi / beta - 1)`` with ``pi`` the saddle policy and ``beta`` the floored
    behavior estimate. At each target ``delta`` the pair with the highest
    state value ``max_a Q`` over pairs at most ``delta`` is kept; the diagonal
    pair wins ties.
    """
    if prev.bound_kind != LOWER:
        raise ConfigError("the regularized backup needs a lower table")
    grid = prev.grid
    K, S, A = len(grid), prev.num_states, prev.num_actions
    target = empirical_bellman(prev.values, model)  # [S, A, K2]
    beta = floored_behavior(model)
    w = regularizer_weight(model.count_s[:, None], grid.array[None, :], prev.alpha, prev.iota)  # [S, K1]

    # pair tensors indexed [S, K1, K2, A]
    t_pairs = np.broadcast_to(np.moveaxis(target, 1, 2)[:, None, :, :], (S, K, K, A))
    w_pairs = np.broadcast_to(w[:, :, None], (S, K, K))
    b_pairs = np.broadcast_to(beta[:, None, None, :], (S, K, K, A))
    pi = saddle_policy(t_pairs, b_pairs, w_pairs, policy_mode, temperature)
    q_pairs = t_pairs - regularizer_penalty(pi, b_pairs, w_pairs[..., None])
    v_pairs = q_pairs.max(axis=-1)  # [S, K1, K2]

    mask = _pair_mask(K)  # [k, k1, k2]
    masked = np.where(mask[None], v_pairs[:, None], -np.inf).reshape(S, K, K * K)
    best = masked.max(axis=2)
    diag = v_pairs[:, np.arange(K), np.arange(K)]  # [S, K]
    degenerate = _diagonal_attains(best, diag, True)
    choice = np.where(degenerate, np.arange(K)[None, :] * (K + 1), masked.argmax(axis=2))
    k1, k2 = np.divmod(choice, K)
    out = q_pairs[np.arange(S)[:, None], k1, k2]  # [S, K, A]
    out = np.moveaxis(out, 2, 1)
    lo, hi = value_bounds(model.v_max, prev.alpha, prev.iota, grid)
    out = np.maximum.accumulate(np.clip(out, lo, hi), axis=2)
    return prev.replace_values(out), float(degenerate.mean())


def reg_tie_weights(
    table: ConfidenceQ,
    model: EmpiricalModel,
    policy_mode: str = "greedy",
    temperature: float = 1.0,
) -> np.ndarray:
    """Saddle policy ``[S, A, K]`` of a converged regularized lower table.

    At convergence every cell uses the diagonal pair, so slice ``k`` is
    ``target_k - w(s, delta_k) * (pi_k / beta - 1)`` and ``pi_k`` is recovered
    from the slice's own empirical backup.
    """
    target = np.moveaxis(empirical_bellman(table.values, model), 1, 2)  # [S, K, A]
    beta = floored_behavior(model)[:, None, :]
    w = regularizer_weight(model.count_s[:, None], table.grid.array[None, :], table.alpha, table.iota)
    pi = saddle_policy(target, np.broadcast_to(beta, target.shape), w, policy_mode, temperature)
    return np.moveaxis(pi, 2, 1)


# --- driver ---------------------------------------------------------------------


def solve(
    update: Callable,
    init: ConfidenceQ,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
):
    """Iterate ``update`` until successive tables differ by at most ``tol``.

    ``update`` maps a table to ``(table, degeneracy_rate)``, e.g.
    ``functools.partial(ccvl_bonus_backup, model=model)``.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    table = init
    residuals = []
    for it in range(1, max_iters + 1):
        nxt, degeneracy = update(table)
        residual = float(np.max(np.abs(nxt.values - table.values)))
        residuals.append(residual)
        table = nxt
        if residual <= tol:
            return table, SolveReport(it, residual, degeneracy, residuals)
    raise ConvergenceError(residuals[-1] if residuals else np.inf, max_iters, "CCVL solver")


METHODS = ("ccvl-bonus", "ccvl-reg", "ccvl-upper")


def train_ccvl(
    model: EmpiricalModel,
    method: str = "ccvl-reg",
    alpha: float = 1.0,
    iota: float = 1.0,
    grid: Optional[ConfidenceGrid] = None,
    policy_mode: str = "greedy",
    temperature: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
):
    """Build the matching update and solve it from the standard initialization."""
    grid = grid or ConfidenceGrid()
    if method == "ccvl-bonus":
        update, kind = partial(ccvl_bonus_backup, model=model), LOWER
    elif method == "ccvl-reg":
        update = partial(ccvl_reg_backup, model=model, policy_mode=policy_mode, temperature=temperature)
        kind = LOWER
    elif method == "ccvl-upper":
        update, kind = partial(ccvl_upper_backup, model=model), UPPER
    else:
        raise ConfigError(f"unknown CCVL method {method!r}")
    init = initial_table(model, grid, kind, alpha, iota)
    table, report = solve(update, init, tol, max_iters)
    if method == "ccvl-reg":
        table = table.with_tie_weights(reg_tie_weights(table, model, policy_mode, temperature))
    return table, report
