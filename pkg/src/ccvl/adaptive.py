"""Evaluation-time policies that act on confidence-conditioned tables.

The belief over grid slices is ``softmax(-temperature * cumulative squared
Bellman residual)``: slices that explain the observed transitions better get
more mass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import Transition
from .errors import ConfigError

BELIEF_SAMPLE = "belief_sample"
BELIEF_MODE = "belief_mode"
FIXED_DELTA = "fixed_delta"
SAFE_SET = "safe_set"
MODES = (BELIEF_SAMPLE, BELIEF_MODE, FIXED_DELTA, SAFE_SET)

TIE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class BeliefState:
    cum_sq_error: np.ndarray
    temperature: float = 1.0

    @property
    def size(self) -> int:
        return len(self.cum_sq_error)

    @property
    def probs(self) -> np.ndarray:
        logits = -self.temperature * self.cum_sq_error
        z = np.exp(logits - logits.max())
        return z / z.sum()

    @property
    def mode(self) -> int:
        """Most probable slice; the smallest index wins ties."""
        return int(np.argmin(self.cum_sq_error))

    def entropy(self) -> float:
        p = self.probs
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())


def belief_init(num_slices: int, temperature: float = 1.0) -> BeliefState:
    if temperature <= 0:
        raise ConfigError("belief temperature must be positive")
    if num_slices < 1:
        raise ConfigError("need at least one slice")
    return BeliefState(np.zeros(num_slices), float(temperature))


def bellman_residuals(values: np.ndarray, t: Transition, discount: float) -> np.ndarray:
    """One-step residual ``Q(s,a,k) - r - gamma * max_a' Q(s',a',k)`` for every slice ``k``."""
    nxt = 0.0 if t.done else values[t.s_next].max(axis=0)
    return values[t.s, t.a] - t.r - discount * nxt


def belief_update(belief: BeliefState, t: Transition, values: np.ndarray, discount: float) -> BeliefState:
    resid = bellman_residuals(values, t, discount)
    return replace(belief, cum_sq_error=belief.cum_sq_error + resid**2)


@dataclass(frozen=True)
class AdaptivePolicyConfig:
    """How an evaluation policy picks its slice and action.

    ``resample`` is ``"episode"`` (draw a slice once per episode) or
    ``"step"``. ``carry_belief`` keeps the belief across episodes.
    ``value_range`` sets the additive safe-set threshold for rows whose
    lower-bound maximum is not positive; ``None`` uses the spread of the
    lower table.
    """

    mode: str = BELIEF_SAMPLE
    delta_index: int = 0
    beta: float = 1.0
    use_upper: bool = True
    temperature: float = 1.0
    resample: str = "episode"
    carry_belief: bool = True
    value_range: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"policy mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == SAFE_SET and not 0.0 < self.beta <= 1.0:
            raise ConfigError("safe-set beta must lie in (0, 1]")
        if self.resample not in ("episode", "step"):
            raise ConfigError("resample must be 'episode' or 'step'")
        if self.temperature <= 0:
            raise ConfigError("belief temperature must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptivePolicyConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown policy fields {sorted(extra)}")
        return cls(**d)


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def _random_argmax(row: np.ndarray, rng: np.random.Generator, allowed=None, weights=None) -> int:
    """Argmax with ties (within ``TIE_TOL``) split by ``weights``, uniformly if absent."""
    row = np.asarray(row, dtype=float)
    if allowed is not None:
        row = np.where(allowed, row, -np.inf)
    best = np.flatnonzero(row >= row.max() - TIE_TOL)
    if len(best) == 1:
        return int(best[0])
    if weights is not None:
        w = np.asarray(weights, dtype=float)[best]
        if w.sum() > 0:
            return int(best[sample_index(w, rng)])
    return int(best[rng.integers(len(best))])


def choose_delta(belief: BeliefState, cfg: AdaptivePolicyConfig, rng: np.random.Generator) -> int:
    if cfg.mode == FIXED_DELTA:
        if not 0 <= cfg.delta_index < belief.size:
            raise ConfigError(f"delta_index {cfg.delta_index} outside grid of size {belief.size}")
        return cfg.delta_index
    if cfg.mode == BELIEF_MODE or belief.size == 1:
        return belief.mode  # nothing to sample from a single slice; keeps the rng stream untouched
    return sample_index(belief.probs, rng)


def safe_actions(lower_row: np.ndarray, beta: float, value_range: float) -> np.ndarray:
    """Actions whose lower bound clears the threshold relative to the row maximum."""
    m = lower_row.max()
    if m > 0:
        return lower_row >= beta * m
    return lower_row >= m - (1.0 - beta) * value_range


def select_action(
    lower: np.ndarray,
    upper: Optional[np.ndarray],
    s: int,
    belief: BeliefState,
    cfg: AdaptivePolicyConfig,
    rng: np.random.Generator,
    delta_index: Optional[int] = None,
    tie_weights: Optional[np.ndarray] = None,
) -> int:
    """Pick an action at state ``s`` from ``[S, A, K]`` value stacks.

    When ``delta_index`` is omitted the slice is chosen from the belief per
    ``cfg``. ``tie_weights`` (``[S, A, K]``) splits ties of the lower slice;
    without it ties are broken uniformly.
    """
    k = choose_delta(belief, cfg, rng) if delta_index is None else delta_index
    row = lower[s, :, k]
    if cfg.mode != SAFE_SET:
        return _random_argmax(row, rng, weights=None if tie_weights is None else tie_weights[s, :, k])
    if upper is None:
        raise ConfigError("safe-set mode needs an upper table")
    vr = cfg.value_range if cfg.value_range is not None else float(np.ptp(lower))
    allowed = safe_actions(row, cfg.beta, vr)
    assert allowed.any(), "the lower-bound argmax always belongs to the safe set"
    return _random_argmax(upper[s, :, k], rng, allowed)


class AdaptiveAgent:
    """Stateful wrapper used by rollouts: keeps the belief and the current slice."""

    def __init__(self, lower, cfg: AdaptivePolicyConfig, discount: float, upper=None, deltas=None,
                 tie_weights=None):
        self.lower = np.asarray(getattr(lower, "values", lower), dtype=float)
        self.upper = None if upper is None else np.asarray(getattr(upper, "values", upper), dtype=float)
        if tie_weights is None:
            tie_weights = getattr(lower, "tie_weights", None)
        self.tie_weights = None if tie_weights is None else np.asarray(tie_weights, dtype=float)
        self.cfg = cfg
        self.discount = discount
        K = self.lower.shape[2]
        if deltas is None and hasattr(lower, "grid"):
            deltas = lower.grid.deltas
        self.deltas = tuple(deltas) if deltas is not None else tuple(range(K))
        self.belief = belief_init(K, cfg.temperature)
        self.delta_index: Optional[int] = None
        self.episodes = 0
        self.start_modes: list = []  # belief mode in force at the start of each episode

    def begin_episode(self, rng: np.random.Generator) -> None:
        if self.episodes and not self.cfg.carry_belief:
            self.belief = belief_init(self.belief.size, self.cfg.temperature)
        self.episodes += 1
        self.start_modes.append(self.belief.mode)
        self.delta_index = choose_delta(self.belief, self.cfg, rng)

    def act(self, s: int, rng: np.random.Generator):
        if self.cfg.resample == "step" or self.delta_index is None:
            self.delta_index = choose_delta(self.belief, self.cfg, rng)
        a = select_action(self.lower, self.upper, s, self.belief, self.cfg, rng, self.delta_index,
                          self.tie_weights)
        return a, self.delta_index

    def observe(self, t: Transition) -> None:
        self.belief = belief_update(self.belief, t, self.lower, self.discount)


class StaticAgent:
    """Markov policy given as a probability table ``[S, A]``."""

    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs, dtype=float)
        self.cdf = np.cumsum(self.probs, axis=1)
        self.cdf[:, -1] = 1.0

    def begin_episode(self, rng) -> None:
        pass

    def act(self, s: int, rng: np.random.Generator):
        return int(np.searchsorted(self.cdf[s], rng.random(), side="right")), None

    def observe(self, t: Transition) -> None:
        pass
