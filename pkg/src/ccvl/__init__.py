"""Confidence-conditioned value learning for tabular offline RL.

Lower (and upper) Q-value bounds indexed by a confidence level, conservative
baselines, confidence-adaptive evaluation policies and an experiment harness.
"""

__version__ = "0.1.0"

from .adaptive import AdaptiveAgent, AdaptivePolicyConfig, BeliefState, belief_init, belief_update, select_action
from .baselines import (
    EnsembleQ,
    QTable,
    anti_exploration_backup,
    cql_backup,
    fixed_ccvl_select,
    train_aevl_ensemble,
    train_baseline,
)
from .data import EmpiricalModel, OfflineDataset, Transition, build_empirical_model, collect_dataset, empirical_bellman
from .errors import ConfigError, ConvergenceError, ShapeMismatchError
from .mdp import (
    GridworldSpec,
    RandomMdpSpec,
    TabularMdp,
    build_gridworld,
    greedy_policy,
    mix_policy,
    random_mdp,
    solve_optimal_q,
)
from .solver import (
    ConfidenceGrid,
    ConfidenceQ,
    SolveReport,
    bonus,
    ccvl_bonus_backup,
    ccvl_reg_backup,
    ccvl_upper_backup,
    solve,
    train_ccvl,
)
