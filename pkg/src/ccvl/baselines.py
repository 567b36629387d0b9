"""Single-table comparison methods: CQL, anti-exploration bonuses, plain
empirical Q-iteration, the AEVL ensemble, and Fixed-CCVL slice selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np

from .data import EmpiricalModel, OfflineDataset, empirical_bellman
from .errors import ConfigError, ConvergenceError
from .solver import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    ConfidenceQ,
    floored_behavior,
    regularizer_penalty,
    saddle_policy,
)

BASELINE_METHODS = ("cql", "anti-explore", "plain")


@dataclass(frozen=True, eq=False)
class QTable:
    """A single ``[S, A]`` table; ``tie_weights`` as in :class:`ConfidenceQ`."""

    values: np.ndarray
    method_tag: str
    alpha: float = 0.0
    tie_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2:
            raise ConfigError(f"a QTable must be [S, A], got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.tie_weights is not None:
            tw = np.array(self.tie_weights, dtype=float, copy=True)
            if tw.shape != v.shape:
                raise ConfigError("tie_weights must match the value table's shape")
            tw.setflags(write=False)
            object.__setattr__(self, "tie_weights", tw)

    def replace_values(self, values) -> "QTable":
        return QTable(values, self.method_tag, self.alpha)

    def as_stack(self) -> np.ndarray:
        """Values as ``[S, A, 1]`` so single tables plug into slice-based policies."""
        return self.values[:, :, None]

    def to_dict(self) -> dict:
        S, A = self.values.shape
        d = {
            "method": self.method_tag,
            "alpha": self.alpha,
            "deltas": [],
            "shape": [S, A, 1],
            "values": self.values.ravel().tolist(),
        }
        if self.tie_weights is not None:
            d["tie_weights"] = self.tie_weights.ravel().tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QTable":
        try:
            S, A = d["shape"][:2]
            tw = d.get("tie_weights")
            if tw is not None:
                tw = np.array(tw, dtype=float).reshape(S, A)
            return cls(np.array(d["values"], dtype=float).reshape(S, A), d["method"], d.get("alpha", 0.0), tw)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed Q table: {exc}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "a", "delta", "q"])
        S, A = self.values.shape
        for s in range(S):
            for a in range(A):
                w.writerow([s, a, "", repr(float(self.values[s, a]))])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class EnsembleQ:
    members: tuple
    seeds: tuple

    def __post_init__(self):
        if len(self.members) < 2:
            raise ConfigError("an ensemble needs at least two members")
        if len(self.members) != len(self.seeds):
            raise ConfigError("one seed per ensemble member is required")

    def stack(self) -> np.ndarray:
        """Member values as ``[S, A, E]``, the layout adaptive policies consume."""
        return np.stack([m.values for m in self.members], axis=2)

    def stack_tie_weights(self):
        if any(m.tie_weights is None for m in self.members):
            return None
        return np.stack([m.tie_weights for m in self.members], axis=2)

    def to_dict(self) -> dict:
        return {"method": "aevl", "seeds": list(self.seeds), "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleQ":
        try:
            return cls(tuple(QTable.from_dict(m) for m in d["members"]), tuple(d["seeds"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed ensemble: {exc}") from None


def _bounds(model: EmpiricalModel, alpha: float):
    return -model.v_max - alpha, model.v_max


def plain_backup(prev: QTable, model: EmpiricalModel) -> QTable:
    return prev.replace_values(empirical_bellman(prev.values, model))


def anti_exploration_backup(prev: QTable, model: EmpiricalModel, alpha: float) -> QTable:
    """Empirical backup minus ``alpha * sqrt(1 / max(n(s, a), 1))``."""
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    target = empirical_bellman(prev.values, model)
    penalty = alpha * np.sqrt(1.0 / np.maximum(model.count_sa, 1.0))
    lo, hi = _bounds(model, alpha)
    return prev.replace_values(np.clip(target - penalty, lo, hi))


def cql_backup(
    prev: QTable,
    model: EmpiricalModel,
    alpha: float,
    policy_mode: str = "greedy",
    temperature: float = 1.0,
) -> QTable:
    """Closed-form CQL sweep ``B Q - alpha * (pi / beta - 1)``.

    ``pi`` is the saddle policy of the per-state objective (see
    :func:`ccvl.solver.greedy_saddle_policy`); ``beta`` is the floored
    empirical behavior policy.
    """
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    target = empirical_bellman(prev.values, model)
    beta = floored_behavior(model)
    weight = np.full(model.num_states, float(alpha))
    pi = saddle_policy(target, beta, weight, policy_mode, temperature)
    lo, hi = _bounds(model, alpha)
    out = target - regularizer_penalty(pi, beta, weight[:, None])
    return prev.replace_values(np.clip(out, lo, hi))


def cql_tie_weights(q: QTable, model: EmpiricalModel, alpha: float,
                    policy_mode: str = "greedy", temperature: float = 1.0) -> np.ndarray:
    """Saddle policy ``[S, A]`` of a converged CQL table."""
    target = empirical_bellman(q.values, model)
    return saddle_policy(target, floored_behavior(model), np.full(model.num_states, float(alpha)),
                         policy_mode, temperature)


def solve_q(update, init: QTable, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS):
    """Iterate a single-table backup to a sup-norm step of at most ``tol``.

    Returns ``(table, iterations, residual)``.
    """
    table = init
    residual = np.inf
    for it in range(1, max_iters + 1):
        nxt = update(table)
        residual = float(np.max(np.abs(nxt.values - table.values)))
        table = nxt
        if residual <= tol:
            return table, it, residual
    raise ConvergenceError(residual, max_iters, "baseline solver")


def baseline_update(model: EmpiricalModel, method: str, alpha: float = 0.0,
                    policy_mode: str = "greedy", temperature: float = 1.0):
    if method == "cql":
        return partial(cql_backup, model=model, alpha=alpha, policy_mode=policy_mode,
                       temperature=temperature)
    if method == "anti-explore":
        return partial(anti_exploration_backup, model=model, alpha=alpha)
    if method == "plain":
        return partial(plain_backup, model=model)
    raise ConfigError(f"unknown baseline method {method!r}")


def train_baseline(
    model: EmpiricalModel,
    method: str = "cql",
    alpha: float = 0.0,
    policy_mode: str = "greedy",
    temperature: float = 1.0,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
):
    if method == "plain":
        alpha = 0.0
    update = baseline_update(model, method, alpha, policy_mode, temperature)
    if init is None:
        init = np.full((model.num_states, model.num_actions), -model.v_max)
    table, iters, residual = solve_q(update, QTable(init, method, alpha), tol, max_iters)
    if method == "cql":
        table = QTable(table.values, method, alpha, cql_tie_weights(table, model, alpha, policy_mode, temperature))
    return table, iters, residual


def train_aevl_ensemble(
    model: EmpiricalModel,
    ensemble_size: int,
    alpha: float,
    seeds,
    policy_mode: str = "greedy",
    temperature: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> EnsembleQ:
    """Independently converge CQL from seed-dependent random initial tables."""
    seeds = tuple(int(s) for s in seeds)
    if ensemble_size != len(seeds) or ensemble_size < 2:
        raise ConfigError("ensemble_size must equal len(seeds) and be at least 2")
    lo, hi = _bounds(model, alpha)
    members = []
    for sd in seeds:
        rng = np.random.default_rng(sd)
        init = rng.uniform(lo, hi, size=(model.num_states, model.num_actions))
        table, _, _ = train_baseline(model, "cql", alpha, policy_mode, temperature, init, tol, max_iters)
        members.append(QTable(table.values, "aevl", alpha, table.tie_weights))
    return EnsembleQ(tuple(members), seeds)


def slice_bellman_errors(values: np.ndarray, data: OfflineDataset, discount: float) -> np.ndarray:
    """Dataset-averaged squared one-step residual of each slice of ``values[S, A, K]``."""
    s, a, r, s2, done = data.arrays()
    if len(s) == 0:
        return np.zeros(values.shape[2])
    nxt = np.where(done[:, None], 0.0, values[s2].max(axis=1))
    resid = values[s, a] - r[:, None] - discount * nxt
    return np.mean(resid**2, axis=0)


def fixed_ccvl_select(ccvl: ConfidenceQ, data: OfflineDataset, discount: float) -> int:
    """Grid index whose slice has the smallest offline Bellman error (smaller delta on ties)."""
    errors = slice_bellman_errors(ccvl.values, data, discount)
    return int(np.argmin(errors))
