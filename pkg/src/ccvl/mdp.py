"""Exact tabular MDPs, gridworld construction and ground-truth solvers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ConvergenceError

STOCHASTIC_TOL = 1e-12

# Action ids for gridworlds, as (row, col) offsets.
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
ACTION_NAMES = ("up", "down", "left", "right")

CELL_CHARS = {".": "empty", "W": "wall", "S": "start", "G": "goal", "L": "lava"}


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with dense transition tensor ``[S, A, S]`` and reward table ``[S, A]``.

    ``reward`` holds the expected one-step reward. ``transition_reward`` is
    optional and gives the realized reward of each ``(s, a, s')`` triple; when
    present, sampled transitions use it and ``reward`` must equal its
    expectation under ``transition``.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal: np.ndarray
    r_max: float
    transition_reward: Optional[np.ndarray] = None

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        d0 = _frozen(self.initial_dist)
        term = _frozen(self.terminal, dtype=bool)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "r_max", float(self.r_max))
        if self.transition_reward is not None:
            object.__setattr__(self, "transition_reward", _frozen(self.transition_reward))
        self._validate()

    def _validate(self):
        P, R = self.transition, self.reward
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ConfigError(f"transition must have shape [S, A, S], got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ConfigError("need at least one state and one action")
        if R.shape != (S, A):
            raise ConfigError(f"reward must have shape {(S, A)}, got {R.shape}")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError(f"discount must lie in (0, 1), got {self.discount}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > STOCHASTIC_TOL):
            raise ConfigError("transition rows must be probability vectors")
        if np.any(np.abs(R) > self.r_max):
            raise ConfigError(f"reward exceeds declared r_max={self.r_max}")
        if self.initial_dist.shape != (S,) or np.any(self.initial_dist < 0) or abs(
            self.initial_dist.sum() - 1.0
        ) > STOCHASTIC_TOL:
            raise ConfigError("initial_dist must be a probability vector over states")
        if self.terminal.shape != (S,):
            raise ConfigError("terminal must be a boolean vector over states")
        for s in np.flatnonzero(self.terminal):
            if np.any(P[s, :, s] != 1.0) or np.any(R[s] != 0.0):
                raise ConfigError(f"terminal state {s} must self-loop with reward 0")
        if self.transition_reward is not None:
            TR = self.transition_reward
            if TR.shape != P.shape:
                raise ConfigError("transition_reward must match the transition shape")
            if np.any(np.abs(TR) > self.r_max):
                raise ConfigError(f"transition_reward exceeds declared r_max={self.r_max}")
            if np.max(np.abs((P * TR).sum(axis=2) - R)) > 1e-9:
                raise ConfigError("reward must be the expectation of transition_reward")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def v_max(self) -> float:
        """Largest achievable |value|, ``r_max / (1 - discount)``."""
        return self.r_max / (1.0 - self.discount)

    def with_transition(self, transition, transition_reward=None) -> "TabularMdp":
        tr = transition_reward
        reward = self.reward if tr is None else (np.asarray(transition) * tr).sum(axis=2)
        return TabularMdp(
            transition=transition,
            reward=reward,
            discount=self.discount,
            initial_dist=self.initial_dist,
            terminal=self.terminal,
            r_max=self.r_max,
            transition_reward=tr,
        )

    def to_dict(self) -> dict:
        out = {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "discount": self.discount,
            "r_max": self.r_max,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.tolist(),
        }
        if self.transition_reward is not None:
            out["transition_reward"] = self.transition_reward.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        return cls(
            transition=d["transition"],
            reward=d["reward"],
            discount=d["discount"],
            initial_dist=d["initial_dist"],
            terminal=d["terminal"],
            r_max=d["r_max"],
            transition_reward=d.get("transition_reward"),
        )


@dataclass(frozen=True)
class GridworldSpec:
    """Layout of a slippery gridworld.

    ``rows`` lists the grid top to bottom using ``S`` (start), ``G`` (goal),
    ``L`` (lava), ``W`` (wall) and ``.`` (empty).
    """

    rows: tuple
    slip_prob: float = 0.3
    goal_reward: float = 1.0
    width: int = field(default=0)
    height: int = field(default=0)

    def __post_init__(self):
        rows = tuple(str(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        if not self.height:
            object.__setattr__(self, "height", len(rows))
        if not self.width:
            object.__setattr__(self, "width", len(rows[0]) if rows else 0)
        self.validate()

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("gridworld width and height must be positive")
        if len(self.rows) != self.height:
            raise ConfigError(f"expected {self.height} rows, got {len(self.rows)}")
        for i, row in enumerate(self.rows):
            if len(row) != self.width:
                raise ConfigError(f"row {i} has length {len(row)}, expected {self.width}")
            bad = set(row) - set(CELL_CHARS)
            if bad:
                raise ConfigError(f"row {i} has unknown cell characters {sorted(bad)}")
        text = "".join(self.rows)
        if text.count("S") != 1:
            raise ConfigError(f"gridworld needs exactly one start cell, found {text.count('S')}")
        if "G" not in text:
            raise ConfigError("gridworld needs at least one goal cell")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ConfigError(f"slip_prob must lie in [0, 1), got {self.slip_prob}")

    def replace(self, **changes) -> "GridworldSpec":
        d = self.to_dict()
        d.update(changes)
        return GridworldSpec.from_dict(d)

    def cell(self, s: int) -> str:
        return self.rows[s // self.width][s % self.width]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "rows": list(self.rows),
            "slip_prob": self.slip_prob,
            "goal_reward": self.goal_reward,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridworldSpec":
        try:
            rows = d["rows"]
        except KeyError:
            raise ConfigError("gridworld spec is missing 'rows'") from None
        return cls(
            rows=tuple(rows),
            slip_prob=float(d.get("slip_prob", 0.3)),
            goal_reward=float(d.get("goal_reward", 1.0)),
            width=int(d.get("width", 0)),
            height=int(d.get("height", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "GridworldSpec":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# Start sits just above a lava row that runs to the goal: the short route hugs
# the lava, so slip noise makes the degree of conservatism matter.
DEFAULT_GRIDWORLD_ROWS = (
    "........",
    "..WW..W.",
    "........",
    "........",
    "........",
    "........",
    "S.......",
    "LLLLLLLG",
)


def default_gridworld_spec(slip_prob: float = 0.3) -> GridworldSpec:
    return GridworldSpec(rows=DEFAULT_GRIDWORLD_ROWS, slip_prob=slip_prob, goal_reward=1.0)


def build_gridworld(spec: GridworldSpec, discount: float = 0.95) -> TabularMdp:
    """Compile a gridworld layout into a :class:`TabularMdp`.

    Every cell is a state (id ``row * width + col``). The intended move is
    taken with probability ``1 - slip_prob``; each other direction with
    ``slip_prob / 3``. Moves into walls or off the grid leave the agent in
    place. Goal and lava cells are absorbing terminals; the goal reward is paid
    on the transition that enters a goal cell. Wall cells are unreachable
    absorbing states.
    """
    spec.validate()
    W, H = spec.width, spec.height
    S, A = W * H, len(MOVES)
    kinds = [CELL_CHARS[spec.cell(s)] for s in range(S)]
    P = np.zeros((S, A, S))
    TR = np.zeros((S, A, S))
    terminal = np.array([k in ("goal", "lava", "wall") for k in kinds])

    def step(s, d):
        r, c = divmod(s, W)
        nr, nc = r + MOVES[d][0], c + MOVES[d][1]
        if 0 <= nr < H and 0 <= nc < W and kinds[nr * W + nc] != "wall":
            return nr * W + nc
        return s

    for s in range(S):
        if terminal[s]:
            P[s, :, s] = 1.0
            continue
        for a in range(A):
            for d in range(A):
                p = 1.0 - spec.slip_prob if d == a else spec.slip_prob / 3.0
                if p > 0.0:
                    P[s, a, step(s, d)] += p
    goal_cols = np.array([k == "goal" for k in kinds])
    TR[:, :, goal_cols] = spec.goal_reward
    TR[terminal] = 0.0
    reward = (P * TR).sum(axis=2)
    d0 = np.array([k == "start" for k in kinds], dtype=float)
    return TabularMdp(
        transition=P,
        reward=reward,
        discount=discount,
        initial_dist=d0,
        terminal=terminal,
        r_max=abs(spec.goal_reward),
        transition_reward=TR,
    )


@dataclass(frozen=True)
class RandomMdpSpec:
    """Parameters of a random dense MDP (Dirichlet rows, uniform rewards)."""

    num_states: int = 6
    num_actions: int = 2
    discount: float = 0.9
    seed: int = 0
    concentration: float = 1.0
    reward_low: float = 0.0
    reward_high: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def random_mdp(spec: RandomMdpSpec) -> TabularMdp:
    rng = np.random.default_rng(spec.seed)
    S, A = spec.num_states, spec.num_actions
    P = rng.dirichlet(np.full(S, spec.concentration), size=(S, A))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(spec.reward_low, spec.reward_high, size=(S, A))
    d0 = np.full(S, 1.0 / S)
    return TabularMdp(
        transition=P,
        reward=R,
        discount=spec.discount,
        initial_dist=d0,
        terminal=np.zeros(S, dtype=bool),
        r_max=max(abs(spec.reward_low), abs(spec.reward_high)),
    )


def bellman_optimality(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """Apply the exact optimality backup ``r + gamma * P max_a' q``."""
    return mdp.reward + mdp.discount * mdp.transition @ q.max(axis=1)


def solve_optimal_q(mdp: TabularMdp, tol: float = 1e-10, max_iters: int = 100_000) -> np.ndarray:
    """Synchronous value iteration to a sup-norm residual of at most ``tol``."""
    if tol <= 0:
        raise ConfigError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    residual = np.inf
    for _ in range(max_iters):
        q_next = bellman_optimality(mdp, q)
        residual = np.max(np.abs(q_next - q))
        q = q_next
        if residual <= tol:
            return q
    raise ConvergenceError(residual, max_iters, "value iteration")


def greedy_policy(q: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Uniform over all actions within ``tie_tol`` of each row's maximum."""
    q = np.asarray(q, dtype=float)
    best = q >= q.max(axis=1, keepdims=True) - tie_tol
    return best / best.sum(axis=1, keepdims=True)


def uniform_policy(num_states: int, num_actions: int) -> np.ndarray:
    return np.full((num_states, num_actions), 1.0 / num_actions)


def mix_policy(base: np.ndarray, epsilon_opt: float) -> np.ndarray:
    """``epsilon_opt * base + (1 - epsilon_opt) * uniform``."""
    if not 0.0 <= epsilon_opt <= 1.0:
        raise ConfigError(f"epsilon_opt must lie in [0, 1], got {epsilon_opt}")
    base = np.asarray(base, dtype=float)
    uniform = np.full_like(base, 1.0 / base.shape[1])
    return epsilon_opt * base + (1.0 - epsilon_opt) * uniform
