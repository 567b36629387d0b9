"""Offline datasets, visitation counts and the empirical Bellman operator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError
from .mdp import TabularMdp


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    done: bool

    def to_json(self) -> str:
        return json.dumps(
            {"s": self.s, "a": self.a, "r": self.r, "s_next": self.s_next, "done": self.done}
        )


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Flat list of transitions plus exact counts derived from it.

    Use :meth:`from_transitions` to build one; counts and the behavior
    estimate are always recomputed from the transition list.
    """

    transitions: tuple
    num_states: int
    num_actions: int
    count_sa: np.ndarray
    count_s: np.ndarray
    behavior_hat: np.ndarray

    @classmethod
    def from_transitions(
        cls, transitions: Iterable[Transition], num_states: int, num_actions: int
    ) -> "OfflineDataset":
        ts = tuple(
            Transition(int(t.s), int(t.a), float(t.r), int(t.s_next), bool(t.done))
            for t in transitions
        )
        count_sa = np.zeros((num_states, num_actions), dtype=np.int64)
        for t in ts:
            if not (0 <= t.s < num_states and 0 <= t.s_next < num_states and 0 <= t.a < num_actions):
                raise ConfigError(f"transition {t} has ids out of range")
            count_sa[t.s, t.a] += 1
        count_s = count_sa.sum(axis=1)
        behavior_hat = np.full((num_states, num_actions), 1.0 / num_actions)
        seen = count_s > 0
        behavior_hat[seen] = count_sa[seen] / count_s[seen, None]
        for arr in (count_sa, count_s, behavior_hat):
            arr.setflags(write=False)
        return cls(ts, num_states, num_actions, count_sa, count_s, behavior_hat)

    def __len__(self) -> int:
        return len(self.transitions)

    def arrays(self):
        """Columns ``(s, a, r, s_next, done)`` as numpy arrays."""
        if not self.transitions:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0), empty, np.zeros(0, dtype=bool)
        s, a, r, s2, d = zip(*self.transitions)
        return (
            np.array(s, dtype=np.int64),
            np.array(a, dtype=np.int64),
            np.array(r, dtype=float),
            np.array(s2, dtype=np.int64),
            np.array(d, dtype=bool),
        )

    def to_jsonl(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.transitions)

    def save_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str, num_states: int, num_actions: int) -> "OfflineDataset":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rows.append(Transition(d["s"], d["a"], d["r"], d["s_next"], d["done"]))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad transition on line {lineno}: {exc}") from None
        return cls.from_transitions(rows, num_states, num_actions)

    @classmethod
    def load_jsonl(cls, path, num_states: int, num_actions: int) -> "OfflineDataset":
        return cls.from_jsonl(Path(path).read_text(), num_states, num_actions)


def _sampler(probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return cdf


def collect_dataset(
    mdp: TabularMdp,
    behavior: np.ndarray,
    num_samples: int,
    horizon: int = 100,
    seed: int = 0,
) -> OfflineDataset:
    """Roll ``behavior`` from the initial distribution until ``num_samples`` transitions exist.

    Episodes end on entering a terminal state or after ``horizon`` steps.
    """
    if num_samples <= 0:
        raise ConfigError("num_samples must be positive")
    if horizon <= 0:
        raise ConfigError("horizon must be positive")
    rng = np.random.default_rng(seed)
    pi_cdf = _sampler(np.asarray(behavior, dtype=float))
    p_cdf = _sampler(mdp.transition)
    d0_cdf = _sampler(mdp.initial_dist)
    TR = mdp.transition_reward
    out = []
    while len(out) < num_samples:
        s = int(np.searchsorted(d0_cdf, rng.random(), side="right"))
        for _ in range(horizon):
            a = int(np.searchsorted(pi_cdf[s], rng.random(), side="right"))
            s2 = int(np.searchsorted(p_cdf[s, a], rng.random(), side="right"))
            r = float(TR[s, a, s2]) if TR is not None else float(mdp.reward[s, a])
            done = bool(mdp.terminal[s2])
            out.append(Transition(s, a, r, s2, done))
            if done or len(out) == num_samples:
                break
            s = s2
    return OfflineDataset.from_transitions(out, mdp.num_states, mdp.num_actions)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Count-based estimate of the dynamics.

    ``terminal_hat`` marks states observed as episode ends; their values are
    not bootstrapped. ``discount`` and ``r_max`` fix the backup and its clamp.
    """

    p_hat: np.ndarray
    r_hat: np.ndarray
    visited_mask: np.ndarray
    terminal_hat: np.ndarray
    count_sa: np.ndarray
    count_s: np.ndarray
    behavior_hat: np.ndarray
    discount: float
    r_max: float

    @property
    def num_states(self) -> int:
        return self.p_hat.shape[0]

    @property
    def num_actions(self) -> int:
        return self.p_hat.shape[1]

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.discount)


def build_empirical_model(data: OfflineDataset, discount: float, r_max: float) -> EmpiricalModel:
    S, A = data.num_states, data.num_actions
    succ = np.zeros((S, A, S))
    rsum = np.zeros((S, A))
    terminal_hat = np.zeros(S, dtype=bool)
    s, a, r, s2, done = data.arrays()
    np.add.at(succ, (s, a, s2), 1.0)
    np.add.at(rsum, (s, a), r)
    terminal_hat[s2[done]] = True
    n = data.count_sa.astype(float)
    visited = data.count_sa > 0
    p_hat = np.zeros((S, A, S))
    p_hat[visited] = succ[visited] / n[visited, None]
    r_hat = np.zeros((S, A))
    r_hat[visited] = rsum[visited] / n[visited]
    return EmpiricalModel(
        p_hat=p_hat,
        r_hat=r_hat,
        visited_mask=visited,
        terminal_hat=terminal_hat,
        count_sa=data.count_sa,
        count_s=data.count_s,
        behavior_hat=data.behavior_hat,
        discount=float(discount),
        r_max=float(r_max),
    )


def empirical_bellman(q: np.ndarray, model: EmpiricalModel) -> np.ndarray:
    """Empirical optimality backup of ``q`` (shape ``[S, A, ...]``).

    Trailing axes (e.g. a confidence axis) are backed up independently.
    Unvisited pairs get ``-v_max``; results are clamped to ``[-v_max, v_max]``.
    """
    q = np.asarray(q, dtype=float)
    v = q.max(axis=1)
    v = np.where(model.terminal_hat.reshape((-1,) + (1,) * (v.ndim - 1)), 0.0, v)
    S, A = model.num_states, model.num_actions
    target = np.tensordot(model.p_hat, v, axes=([2], [0]))
    extra = (1,) * (q.ndim - 2)
    out = model.r_hat.reshape((S, A) + extra) + model.discount * target
    out = np.where(model.visited_mask.reshape((S, A) + extra), out, -model.v_max)
    return np.clip(out, -model.v_max, model.v_max)

