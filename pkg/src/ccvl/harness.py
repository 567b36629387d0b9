"""Rollout evaluation, normalized returns, coverage Monte Carlo and alpha sweeps.

Experiments are driven by an :class:`ExperimentConfig`, a validated view of a
single JSON document::

    {
      "env":      {"kind": "gridworld", "rows": [...], "slip_prob": 0.3, "discount": 0.95},
      "eval_env": {"slip_prob": 0.15},
      "dataset":  {"num_samples": 2500, "epsilon_opt": 0.5, "horizon": 100, "seed": 0},
      "solver":   {"method": "ccvl-reg", "alpha": 0.2, "iota": 1.0, "deltas": [...]},
      "policy":   {"mode": "belief_sample", "temperature": 10.0},
      "eval":     {"episodes": 100, "horizon": 100, "seeds": [0]},
      "sweep":    {"alphas": [...], "seeds": [...], "methods": ["cql", "ccvl-reg"]},
      "coverage": {"num_resamples": 200, "deltas_to_check": [0.1, 0.3, 0.5]}
    }

Every section except ``env`` is optional and falls back to defaults.
"""

from __future__ import annotations

import copy
import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adaptive import FIXED_DELTA, AdaptiveAgent, AdaptivePolicyConfig, StaticAgent
from .baselines import BASELINE_METHODS, QTable, fixed_ccvl_select, train_aevl_ensemble, train_baseline
from .data import Transition, build_empirical_model, collect_dataset
from .errors import ConfigError, ConvergenceError
from .mdp import (
    GridworldSpec,
    RandomMdpSpec,
    TabularMdp,
    build_gridworld,
    default_gridworld_spec,
    greedy_policy,
    mix_policy,
    random_mdp,
    solve_optimal_q,
)
from .solver import DEFAULT_DELTAS, DEFAULT_MAX_ITERS, DEFAULT_TOL, ConfidenceGrid, ConfidenceQ, train_ccvl

CCVL_METHODS = ("ccvl-bonus", "ccvl-reg", "ccvl-upper")
TRAIN_METHODS = CCVL_METHODS + BASELINE_METHODS + ("aevl",)
SWEEP_METHODS = ("ccvl-bonus", "ccvl-reg", "fixed-ccvl", "cql", "anti-explore", "plain", "aevl")

EVAL_OVERRIDABLE = {"gridworld": ("slip_prob", "goal_reward"), "random": ()}


# --- rollouts ---------------------------------------------------------------------


@dataclass
class RolloutResult:
    returns: list
    trace: list = field(default_factory=list)  # (episode, step, delta_index, action, reward)
    lengths: list = field(default_factory=list)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std_error(self) -> float:
        n = len(self.returns)
        return float(np.std(self.returns, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def rollout(mdp: TabularMdp, agent, episodes: int, horizon: int = 100, seed: int = 0) -> RolloutResult:
    """Run ``episodes`` undiscounted episodes of ``agent`` from the initial distribution.

    The agent sees every transition through ``observe`` as soon as it happens,
    so history-dependent policies adapt within and across episodes.
    """
    if episodes <= 0 or horizon <= 0:
        raise ValueError("episodes and horizon must be positive")
    rng = np.random.default_rng(seed)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    p_cdf[..., -1] = 1.0
    d0_cdf = np.cumsum(mdp.initial_dist)
    d0_cdf[-1] = 1.0
    TR = mdp.transition_reward
    returns, lengths, trace = [], [], []
    for ep in range(episodes):
        agent.begin_episode(rng)
        s = int(np.searchsorted(d0_cdf, rng.random(), side="right"))
        total, steps = 0.0, 0
        for step in range(horizon):
            if mdp.terminal[s]:
                break
            a, k = agent.act(s, rng)
            s2 = int(np.searchsorted(p_cdf[s, a], rng.random(), side="right"))
            r = float(TR[s, a, s2]) if TR is not None else float(mdp.reward[s, a])
            done = bool(mdp.terminal[s2])
            agent.observe(Transition(s, a, r, s2, done))
            trace.append((ep, step, k, a, r))
            total += r
            steps += 1
            s = s2
            if done:
                break
        returns.append(total)
        lengths.append(steps)
    return RolloutResult(returns, trace, lengths)


def optimal_return(mdp: TabularMdp, episodes: int = 10_000, horizon: int = 100, seed: int = 0) -> float:
    """Monte Carlo mean return of the exact optimal greedy policy."""
    q_star = solve_optimal_q(mdp)
    return rollout(mdp, StaticAgent(greedy_policy(q_star)), episodes, horizon, seed).mean_return


# --- reports ----------------------------------------------------------------------


@dataclass
class EvalReport:
    """Outcome of evaluating one policy.

    ``normalized_return`` is the mean over *all* episodes (adaptation
    included) divided by the optimal policy's mean return.
    """

    per_episode_returns: list
    normalized_return: float
    mean_return: float
    std_error: float
    optimal_return: float
    delta_trace: list = field(default_factory=list)  # (episode, step, delta_index, delta, action, reward)
    start_modes: list = field(default_factory=list)
    final_mode: Optional[int] = None
    coverage: Optional[dict] = None
    wall_time: float = 0.0

    def summary(self) -> dict:
        """JSON-ready summary; ``wall_time`` is left out so summaries are reproducible."""
        return {
            "episodes": len(self.per_episode_returns),
            "mean_return": self.mean_return,
            "std_error": self.std_error,
            "optimal_return": self.optimal_return,
            "normalized_return": self.normalized_return,
            "start_modes": list(self.start_modes),
            "final_mode": self.final_mode,
        }

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "return", "start_mode"])
        modes = list(self.start_modes) + [""] * (len(self.per_episode_returns) - len(self.start_modes))
        for ep, (ret, m) in enumerate(zip(self.per_episode_returns, modes)):
            w.writerow([ep, repr(float(ret)), m])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "step", "delta_index", "delta", "action", "reward"])
        for row in self.delta_trace:
            w.writerow(["" if v is None else v for v in row])
        return buf.getvalue()


def evaluate(mdp: TabularMdp, agent, episodes: int, horizon: int, seed: int,
             opt_return: float, deltas=None) -> EvalReport:
    """Roll out ``agent`` and normalize by ``opt_return``."""
    if opt_return <= 0:
        raise ConfigError("the optimal return must be positive to normalize")
    t0 = time.perf_counter()
    res = rollout(mdp, agent, episodes, horizon, seed)
    deltas = tuple(deltas) if deltas is not None else tuple(getattr(agent, "deltas", ()))
    trace = [
        (ep, step, k, (deltas[k] if k is not None and k < len(deltas) else None), a, r)
        for ep, step, k, a, r in res.trace
    ]
    belief = getattr(agent, "belief", None)
    return EvalReport(
        per_episode_returns=list(res.returns),
        normalized_return=res.mean_return / opt_return,
        mean_return=res.mean_return,
        std_error=res.std_error,
        optimal_return=opt_return,
        delta_trace=trace,
        start_modes=list(getattr(agent, "start_modes", [])),
        final_mode=None if belief is None else belief.mode,
        wall_time=time.perf_counter() - t0,
    )


# --- configuration ----------------------------------------------------------------


def _section(d: dict, name: str, allowed: tuple) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be an object")
    extra = set(sec) - set(allowed)
    if extra:
        raise ConfigError(f"unknown field(s) in '{name}': {', '.join(sorted(extra))}")
    return sec


def _number(sec: dict, section: str, key: str, default, kind=float, low=None, high=None,
            low_open=False, high_open=False):
    val = sec.get(key, default)
    name = f"{section}.{key}"
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
            raise ConfigError(f"{name} must be an integer, got {val!r}")
        val = int(val)
    else:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{name} must be a number, got {val!r}")
        val = float(val)
    if low is not None and (val < low or (low_open and val == low)):
        raise ConfigError(f"{name} must be {'>' if low_open else '>='} {low}, got {val}")
    if high is not None and (val > high or (high_open and val == high)):
        raise ConfigError(f"{name} must be {'<' if high_open else '<='} {high}, got {val}")
    return val


def _int_list(sec: dict, section: str, key: str, default) -> tuple:
    val = sec.get(key, default)
    if not isinstance(val, (list, tuple)) or not val:
        raise ConfigError(f"{section}.{key} must be a non-empty list")
    for v in val:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{section}.{key} must contain integers, got {v!r}")
    return tuple(int(v) for v in val)


def _float_list(sec: dict, section: str, key: str, default) -> tuple:
    val = sec.get(key, default)
    if not isinstance(val, (list, tuple)) or not val:
        raise ConfigError(f"{section}.{key} must be a non-empty list")
    for v in val:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{key} must contain numbers, got {v!r}")
    return tuple(float(v) for v in val)


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 2500
    epsilon_opt: float = 0.5
    horizon: int = 100
    seed: int = 0


@dataclass(frozen=True)
class SolverSpec:
    method: str = "ccvl-reg"
    alpha: float = 0.2
    iota: float = 1.0
    deltas: tuple = DEFAULT_DELTAS
    policy_mode: str = "greedy"
    temperature: float = 1.0
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    ensemble_size: int = 5
    ensemble_seeds: tuple = (0, 1, 2, 3, 4)

    @property
    def grid(self) -> ConfidenceGrid:
        return ConfidenceGrid(self.deltas)


@dataclass(frozen=True)
class EvalSpec:
    episodes: int = 100
    horizon: int = 100
    seeds: tuple = (0,)
    normalizer_episodes: int = 10_000
    normalizer_seed: int = 0


@dataclass(frozen=True)
class SweepSpec:
    alphas: tuple = (0.05, 0.1, 0.2, 0.5, 1.0)
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = ("cql", "ccvl-reg")


@dataclass(frozen=True)
class CoverageSpec:
    num_resamples: int = 200
    deltas_to_check: tuple = (0.1, 0.3, 0.5)
    bound: str = "q"  # "q": all (s, a) pairs; "v": state values
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    env_kind: str
    env_train: object  # GridworldSpec or RandomMdpSpec
    env_eval: object
    discount: float
    dataset: DatasetSpec = DatasetSpec()
    solver: SolverSpec = SolverSpec()
    policy: AdaptivePolicyConfig = AdaptivePolicyConfig()
    eval: EvalSpec = EvalSpec()
    sweep: SweepSpec = SweepSpec()
    coverage: CoverageSpec = CoverageSpec()
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        top = {"env", "eval_env", "dataset", "solver", "policy", "eval", "sweep", "coverage"}
        extra = set(d) - top
        if extra:
            raise ConfigError(f"unknown top-level field(s): {', '.join(sorted(extra))}")
        if "env" not in d:
            raise ConfigError("env: section is required")

        env = dict(_section(d, "env", ("kind", "rows", "width", "height", "slip_prob", "goal_reward",
                                        "discount", "num_states", "num_actions", "seed", "concentration",
                                        "reward_low", "reward_high")))
        kind = env.pop("kind", "gridworld")
        if kind not in EVAL_OVERRIDABLE:
            raise ConfigError(f"env.kind must be 'gridworld' or 'random', got {kind!r}")
        overrides = _section(d, "eval_env", EVAL_OVERRIDABLE[kind])
        if kind == "gridworld":
            discount = _number(env, "env", "discount", 0.95, low=0.0, high=1.0, low_open=True, high_open=True)
            env.pop("discount", None)
            stray = set(env) - {"rows", "width", "height", "slip_prob", "goal_reward"}
            if stray:
                raise ConfigError(f"field(s) not valid for a gridworld env: {', '.join(sorted(stray))}")
            if "rows" not in env:
                env["rows"] = list(default_gridworld_spec().rows)
            try:
                train = GridworldSpec.from_dict(env)
                eval_spec = train.replace(**overrides)
            except ConfigError as exc:
                raise ConfigError(f"env: {exc}") from None
        else:
            stray = set(env) - set(RandomMdpSpec.__dataclass_fields__)
            if stray:
                raise ConfigError(f"field(s) not valid for a random env: {', '.join(sorted(stray))}")
            train = RandomMdpSpec(
                num_states=_number(env, "env", "num_states", 6, int, low=1),
                num_actions=_number(env, "env", "num_actions", 2, int, low=1),
                discount=_number(env, "env", "discount", 0.9, low=0.0, high=1.0, low_open=True, high_open=True),
                seed=_number(env, "env", "seed", 0, int),
                concentration=_number(env, "env", "concentration", 1.0, low=0.0, low_open=True),
                reward_low=_number(env, "env", "reward_low", 0.0),
                reward_high=_number(env, "env", "reward_high", 1.0),
            )
            if train.reward_high < train.reward_low:
                raise ConfigError("env.reward_high must be >= env.reward_low")
            discount = train.discount
            eval_spec = train

        ds = _section(d, "dataset", tuple(DatasetSpec.__dataclass_fields__))
        dataset = DatasetSpec(
            num_samples=_number(ds, "dataset", "num_samples", 2500, int, low=1),
            epsilon_opt=_number(ds, "dataset", "epsilon_opt", 0.5, low=0.0, high=1.0),
            horizon=_number(ds, "dataset", "horizon", 100, int, low=1),
            seed=_number(ds, "dataset", "seed", 0, int),
        )

        sv = _section(d, "solver", tuple(SolverSpec.__dataclass_fields__))
        method = sv.get("method", "ccvl-reg")
        if method not in TRAIN_METHODS:
            raise ConfigError(f"solver.method must be one of {TRAIN_METHODS}, got {method!r}")
        policy_mode = sv.get("policy_mode", "greedy")
        if policy_mode not in ("greedy", "softmax"):
            raise ConfigError(f"solver.policy_mode must be 'greedy' or 'softmax', got {policy_mode!r}")
        deltas = _float_list(sv, "solver", "deltas", DEFAULT_DELTAS)
        try:
            ConfidenceGrid(deltas)
        except ConfigError as exc:
            raise ConfigError(f"solver.deltas: {exc}") from None
        solver = SolverSpec(
            method=method,
            alpha=_number(sv, "solver", "alpha", 0.2, low=0.0),
            iota=_number(sv, "solver", "iota", 1.0, low=0.0, low_open=True),
            deltas=deltas,
            policy_mode=policy_mode,
            temperature=_number(sv, "solver", "temperature", 1.0, low=0.0, low_open=True),
            tol=_number(sv, "solver", "tol", DEFAULT_TOL, low=0.0, low_open=True),
            max_iters=_number(sv, "solver", "max_iters", DEFAULT_MAX_ITERS, int, low=1),
            ensemble_size=_number(sv, "solver", "ensemble_size", 5, int, low=2),
            ensemble_seeds=_int_list(sv, "solver", "ensemble_seeds", list(range(sv.get("ensemble_size", 5)))),
        )
        if len(solver.ensemble_seeds) != solver.ensemble_size:
            raise ConfigError("solver.ensemble_seeds must have solver.ensemble_size entries")
        if method in CCVL_METHODS and solver.alpha <= 0:
            raise ConfigError("solver.alpha must be > 0 for CCVL methods")

        pol = d.get("policy", {})
        if not isinstance(pol, dict):
            raise ConfigError("'policy' must be an object")
        try:
            policy = AdaptivePolicyConfig.from_dict(pol)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"policy: {exc}") from None

        ev = _section(d, "eval", tuple(EvalSpec.__dataclass_fields__))
        evspec = EvalSpec(
            episodes=_number(ev, "eval", "episodes", 100, int, low=1),
            horizon=_number(ev, "eval", "horizon", 100, int, low=1),
            seeds=_int_list(ev, "eval", "seeds", [0]),
            normalizer_episodes=_number(ev, "eval", "normalizer_episodes", 10_000, int, low=1),
            normalizer_seed=_number(ev, "eval", "normalizer_seed", 0, int),
        )

        sw = _section(d, "sweep", tuple(SweepSpec.__dataclass_fields__))
        methods = sw.get("methods", ["cql", "ccvl-reg"])
        if not isinstance(methods, (list, tuple)) or not methods:
            raise ConfigError("sweep.methods must be a non-empty list")
        bad = [m for m in methods if m not in SWEEP_METHODS]
        if bad:
            raise ConfigError(f"sweep.methods has unknown method(s) {bad}; choose from {SWEEP_METHODS}")
        sweep = SweepSpec(
            alphas=_float_list(sw, "sweep", "alphas", [0.05, 0.1, 0.2, 0.5, 1.0]),
            seeds=_int_list(sw, "sweep", "seeds", [0, 1, 2, 3, 4]),
            methods=tuple(methods),
        )
        if any(a <= 0 for a in sweep.alphas):
            raise ConfigError("sweep.alphas must all be > 0")

        cv = _section(d, "coverage", tuple(CoverageSpec.__dataclass_fields__))
        cov = CoverageSpec(
            num_resamples=_number(cv, "coverage", "num_resamples", 200, int, low=1),
            deltas_to_check=_float_list(cv, "coverage", "deltas_to_check", [0.1, 0.3, 0.5]),
            bound=cv.get("bound", "q"),
            seed=_number(cv, "coverage", "seed", 0, int),
        )
        if cov.bound not in ("q", "v"):
            raise ConfigError(f"coverage.bound must be 'q' or 'v', got {cov.bound!r}")
        for delta in cov.deltas_to_check:
            try:
                solver.grid.index(delta)
            except ConfigError:
                raise ConfigError(f"coverage.deltas_to_check: {delta} is not in solver.deltas") from None

        return cls(kind, train, eval_spec, discount, dataset, solver, policy, evspec, sweep, cov, copy.deepcopy(d))

    # environment helpers

    def _build(self, spec) -> TabularMdp:
        if self.env_kind == "gridworld":
            return build_gridworld(spec, self.discount)
        return random_mdp(spec)

    def train_mdp(self) -> TabularMdp:
        return self._build(self.env_train)

    def eval_mdp(self) -> TabularMdp:
        return self._build(self.env_eval)

    def behavior_policy(self, mdp: Optional[TabularMdp] = None) -> np.ndarray:
        """``epsilon_opt``-optimal behavior policy on the training dynamics."""
        mdp = mdp or self.train_mdp()
        return mix_policy(greedy_policy(solve_optimal_q(mdp)), self.dataset.epsilon_opt)


# --- training and agents ----------------------------------------------------------


def train_method(model, method: str, solver: SolverSpec, alpha: Optional[float] = None):
    """Train one method on an empirical model.

    Returns ``(trained, report_dict)`` where ``trained`` is a ConfidenceQ,
    QTable or EnsembleQ.
    """
    alpha = solver.alpha if alpha is None else float(alpha)
    if method in CCVL_METHODS:
        table, report = train_ccvl(model, method, alpha, solver.iota, solver.grid, solver.policy_mode,
                                   solver.temperature, solver.tol, solver.max_iters)
        return table, report.to_dict()
    if method in BASELINE_METHODS:
        table, iters, residual = train_baseline(model, method, alpha, solver.policy_mode, solver.temperature,
                                                tol=solver.tol, max_iters=solver.max_iters)
        return table, {"iterations": iters, "final_residual": residual, "argmax_degeneracy_rate": None}
    if method == "aevl":
        ens = train_aevl_ensemble(model, solver.ensemble_size, alpha, solver.ensemble_seeds, solver.policy_mode,
                                  solver.temperature, solver.tol, solver.max_iters)
        return ens, {"iterations": None, "final_residual": None, "argmax_degeneracy_rate": None}
    raise ConfigError(f"unknown method {method!r}")


def make_agent(trained, policy: AdaptivePolicyConfig, discount: float, upper=None):
    """Wrap a trained table in an acting agent.

    Confidence tables and ensembles act through ``policy``; single tables act
    greedily (ties split by their saddle weights when present).
    """
    if isinstance(trained, QTable):
        cfg = AdaptivePolicyConfig(mode=FIXED_DELTA, delta_index=0)
        tw = None if trained.tie_weights is None else trained.tie_weights[:, :, None]
        return AdaptiveAgent(trained.as_stack(), cfg, discount, tie_weights=tw, deltas=(None,))
    if isinstance(trained, ConfidenceQ):
        return AdaptiveAgent(trained, policy, discount, upper=upper)
    # ensemble: members play the role of slices
    return AdaptiveAgent(trained.stack(), policy, discount, tie_weights=trained.stack_tie_weights(),
                         deltas=tuple(range(len(trained.members))))


# --- coverage Monte Carlo -----------------------------------------------------------


@dataclass
class CoverageReport:
    deltas: tuple
    coverage: dict  # delta -> fraction of successful resamples where the bound held
    resamples: int
    failures: int
    bound: str

    def rows(self) -> list:
        return [
            {"delta": d, "coverage": self.coverage[d], "resamples": self.resamples, "failures": self.failures}
            for d in self.deltas
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta", "coverage", "resamples", "failures"])
        for r in self.rows():
            w.writerow([repr(r["delta"]), repr(r["coverage"]), r["resamples"], r["failures"]])
        return buf.getvalue()


def _coverage_job(args):
    mdp, behavior, dataset, solver, alpha, seed = args
    data = collect_dataset(mdp, behavior, dataset.num_samples, dataset.horizon, seed)
    model = build_empirical_model(data, mdp.discount, mdp.r_max)
    try:
        table, _ = train_ccvl(model, solver.method, alpha, solver.iota, solver.grid, solver.policy_mode,
                              solver.temperature, solver.tol, solver.max_iters)
    except ConvergenceError:
        return None
    return table.values


def resample_seeds(seed: int, n: int) -> list:
    """Independent per-resample integer seeds derived from one master seed."""
    return [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(n)]


def coverage_experiment(
    mdp: TabularMdp,
    dataset: DatasetSpec,
    solver: SolverSpec,
    num_resamples: int,
    deltas_to_check,
    seed: int = 0,
    bound: str = "q",
    behavior: Optional[np.ndarray] = None,
    alpha: Optional[float] = None,
    jobs: int = 1,
    min_resamples: int = 100,
) -> CoverageReport:
    """Fraction of dataset resamples on which the learned lower bound holds.

    ``bound="q"`` checks ``Q_hat(s, a, delta) <= Q*(s, a)`` for every pair;
    ``bound="v"`` checks ``max_a Q_hat(s, a, delta) <= V*(s)`` for every state.
    Resamples whose solver fails to converge are counted in ``failures`` and
    excluded from the fractions.
    """
    if num_resamples < min_resamples:
        raise ConfigError(f"num_resamples must be >= {min_resamples}")
    if solver.method not in ("ccvl-bonus", "ccvl-reg"):
        raise ConfigError("coverage needs a lower-bound CCVL method (ccvl-bonus or ccvl-reg)")
    if bound not in ("q", "v"):
        raise ConfigError("bound must be 'q' or 'v'")
    deltas = tuple(float(d) for d in deltas_to_check)
    idx = [solver.grid.index(d) for d in deltas]
    alpha = solver.alpha if alpha is None else float(alpha)
    if behavior is None:
        behavior = mix_policy(greedy_policy(solve_optimal_q(mdp)), dataset.epsilon_opt)
    q_star = solve_optimal_q(mdp)
    v_star = q_star.max(axis=1)
    jobs_args = [(mdp, behavior, dataset, solver, alpha, sd) for sd in resample_seeds(seed, num_resamples)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            tables = list(pool.map(_coverage_job, jobs_args, chunksize=max(1, num_resamples // (4 * jobs))))
    else:
        tables = [_coverage_job(a) for a in jobs_args]
    ok = [t for t in tables if t is not None]
    failures = len(tables) - len(ok)
    coverage = {}
    for d, k in zip(deltas, idx):
        if not ok:
            coverage[d] = float("nan")
            continue
        if bound == "q":
            held = [np.all(t[:, :, k] <= q_star + 1e-9) for t in ok]
        else:
            held = [np.all(t[:, :, k].max(axis=1) <= v_star + 1e-9) for t in ok]
        coverage[d] = float(np.mean(held))
    return CoverageReport(deltas, coverage, len(ok), failures, bound)


# --- alpha sweep and delta adaptation -----------------------------------------------


@dataclass
class SweepCell:
    method: str
    alpha: float
    seed: int
    report: EvalReport
    solve: dict = field(default_factory=dict)
    selected_index: Optional[int] = None

    def row(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "seed": self.seed,
            "mean_return": self.report.mean_return,
            "std_error": self.report.std_error,
            "normalized_return": self.report.normalized_return,
            "final_mode": self.report.final_mode,
            "selected_index": self.selected_index,
            "iterations": self.solve.get("iterations"),
        }


SWEEP_COLUMNS = ("method", "alpha", "seed", "mean_return", "std_error", "normalized_return",
                 "final_mode", "selected_index", "iterations")


def sweep_table_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for c in cells:
        r = c.row()
        w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_COLUMNS])
    return buf.getvalue()


def _sweep_seed_job(args):
    cfg, seed, alphas, methods, opt = args
    train, test = cfg.train_mdp(), cfg.eval_mdp()
    d = cfg.dataset
    data = collect_dataset(train, cfg.behavior_policy(train), d.num_samples, d.horizon, seed)
    model = build_empirical_model(data, train.discount, train.r_max)
    cells = []
    cache = {}
    for alpha in alphas:
        for method in methods:
            base = "ccvl-reg" if method == "fixed-ccvl" else method
            if (base, alpha) not in cache:
                cache[(base, alpha)] = train_method(model, base, cfg.solver, alpha)
            trained, solve_info = cache[(base, alpha)]
            selected = None
            policy = cfg.policy
            if method == "fixed-ccvl":
                selected = fixed_ccvl_select(trained, data, train.discount)
                policy = AdaptivePolicyConfig(mode=FIXED_DELTA, delta_index=selected)
            agent = make_agent(trained, policy, train.discount)
            rep = evaluate(test, agent, cfg.eval.episodes, cfg.eval.horizon, seed, opt)
            cells.append(SweepCell(method, alpha, seed, rep, solve_info, selected))
    return cells


def normalizer(cfg: ExperimentConfig) -> float:
    """Optimal mean return in the evaluation environment."""
    return optimal_return(cfg.eval_mdp(), cfg.eval.normalizer_episodes, cfg.eval.horizon,
                          cfg.eval.normalizer_seed)


def alpha_sweep(cfg: ExperimentConfig, alphas=None, seeds=None, methods=None, jobs: int = 1,
                opt_return: Optional[float] = None) -> list:
    """Train and evaluate every ``(method, alpha, seed)`` cell.

    Each seed draws its own dataset (``collect_dataset(..., seed)``) and the
    evaluation rollouts of that seed reuse the same integer seed. CCVL acts
    through ``cfg.policy``; single-table baselines act greedily.
    """
    alphas = tuple(cfg.sweep.alphas if alphas is None else alphas)
    seeds = tuple(cfg.sweep.seeds if seeds is None else seeds)
    methods = tuple(cfg.sweep.methods if methods is None else methods)
    if not alphas:
        raise ConfigError("alphas must be non-empty")
    opt = normalizer(cfg) if opt_return is None else opt_return
    args = [(cfg, sd, alphas, methods, opt) for sd in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_sweep_seed_job, args))
    else:
        per_seed = [_sweep_seed_job(a) for a in args]
    cells = [c for group in per_seed for c in group]
    order = {m: i for i, m in enumerate(methods)}
    cells.sort(key=lambda c: (order[c.method], alphas.index(c.alpha), seeds.index(c.seed)))
    return cells


def summarize_sweep(cells) -> dict:
    """``{method: {alpha: mean normalized return over seeds}}``."""
    out: dict = {}
    for c in cells:
        out.setdefault(c.method, {}).setdefault(c.alpha, []).append(c.report.normalized_return)
    return {m: {a: float(np.mean(v)) for a, v in by_a.items()} for m, by_a in out.items()}


def delta_adaptation(cfg: ExperimentConfig, alpha: float = 0.2, seeds=None, episodes: int = 10,
                     method: str = "ccvl-reg", opt_return: Optional[float] = None) -> list:
    """Evaluate CCVL for ``episodes`` episodes per seed with the belief carried over.

    Returns one :class:`EvalReport` per seed; ``start_modes[k]`` is the belief
    mode in force when episode ``k`` began.
    """
    seeds = tuple(cfg.sweep.seeds if seeds is None else seeds)
    train, test = cfg.train_mdp(), cfg.eval_mdp()
    opt = normalizer(cfg) if opt_return is None else opt_return
    behavior = cfg.behavior_policy(train)
    policy = AdaptivePolicyConfig(**{**cfg.policy.__dict__, "carry_belief": True})
    reports = []
    for seed in seeds:
        data = collect_dataset(train, behavior, cfg.dataset.num_samples, cfg.dataset.horizon, seed)
        model = build_empirical_model(data, train.discount, train.r_max)
        table, _ = train_method(model, method, cfg.solver, alpha)
        agent = make_agent(table, policy, train.discount)
        reports.append(evaluate(test, agent, episodes, cfg.eval.horizon, seed, opt))
    return reports


# --- presets ------------------------------------------------------------------------


def gridworld_config_dict() -> dict:
    """Slip-shift gridworld experiment: 30% slip offline, 15% at evaluation."""
    return {
        "env": {"kind": "gridworld", "rows": list(default_gridworld_spec().rows), "slip_prob": 0.3,
                "goal_reward": 1.0, "discount": 0.95},
        "eval_env": {"slip_prob": 0.15},
        "dataset": {"num_samples": 2500, "epsilon_opt": 0.5, "horizon": 100, "seed": 0},
        "solver": {"method": "ccvl-reg", "alpha": 0.2, "iota": 1.0, "deltas": list(DEFAULT_DELTAS),
                   "policy_mode": "greedy"},
        "policy": {"mode": "belief_sample", "temperature": 10.0},
        "eval": {"episodes": 100, "horizon": 100, "seeds": [0]},
        "sweep": {"alphas": [0.05, 0.1, 0.2, 0.5, 1.0], "seeds": [0, 1, 2, 3, 4],
                  "methods": ["cql", "ccvl-reg"]},
    }


def coverage_config_dict(method: str = "ccvl-bonus", bound: str = "q") -> dict:
    """Random 6-state, 2-action MDP with uniform-behavior datasets of 400 samples."""
    return {
        "env": {"kind": "random", "num_states": 6, "num_actions": 2, "discount": 0.9, "seed": 0},
        "dataset": {"num_samples": 400, "epsilon_opt": 0.0, "horizon": 100, "seed": 0},
        "solver": {"method": method, "alpha": 1.0, "iota": 1.0, "deltas": list(DEFAULT_DELTAS)},
        "coverage": {"num_resamples": 200, "deltas_to_check": [0.1, 0.3, 0.5], "bound": bound, "seed": 0},
    }


PRESETS = {
    "gridworld": gridworld_config_dict,
    "coverage-bonus": lambda: coverage_config_dict("ccvl-bonus", "q"),
    "coverage-reg": lambda: coverage_config_dict("ccvl-reg", "v"),
}
