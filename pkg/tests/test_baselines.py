import json
import math

import numpy as np
import pytest

from ccvl.baselines import (
    EnsembleQ,
    QTable,
    anti_exploration_backup,
    cql_backup,
    fixed_ccvl_select,
    plain_backup,
    slice_bellman_errors,
    train_aevl_ensemble,
    train_baseline,
)
from ccvl.data import OfflineDataset, Transition, build_empirical_model, empirical_bellman
from ccvl.errors import ConfigError
from ccvl.solver import LOWER, ConfidenceGrid, ConfidenceQ, ccvl_bonus_backup, train_ccvl

from conftest import small_instance


def q_table(model, rng, tag="x"):
    return QTable(rng.uniform(-model.v_max, model.v_max, size=(model.num_states, model.num_actions)), tag)


class TestCql:
    def test_alpha_zero_is_plain(self, instance, rng):
        _, _, model = instance
        prev = q_table(model, rng)
        np.testing.assert_array_equal(cql_backup(prev, model, 0.0).values, plain_backup(prev, model).values)

    def test_alpha_zero_fixed_point_is_plain_value_iteration(self, instance):
        _, _, model = instance
        cql, _, _ = train_baseline(model, "cql", 0.0)
        plain, _, _ = train_baseline(model, "plain")
        np.testing.assert_allclose(cql.values, plain.values, atol=1e-12)

    def test_uniform_behavior_constant_prev_is_penalty_free(self):
        ts = [Transition(0, a, 0.2, 0, False) for a in range(4)] * 5
        model = build_empirical_model(OfflineDataset.from_transitions(ts, 1, 4), 0.9, 1.0)
        prev = QTable(np.full((1, 4), 0.7), "cql")
        np.testing.assert_allclose(cql_backup(prev, model, 1.0).values, empirical_bellman(prev.values, model))

    def test_negative_alpha_rejected(self, instance, rng):
        _, _, model = instance
        with pytest.raises(ConfigError):
            cql_backup(q_table(model, rng), model, -0.1)

    def test_larger_alpha_is_more_conservative(self, instance):
        _, _, model = instance
        a, _, _ = train_baseline(model, "cql", 0.1)
        b, _, _ = train_baseline(model, "cql", 1.0)
        assert np.all(b.values.max(axis=1) <= a.values.max(axis=1) + 1e-9)

    def test_tie_weights_attached(self, instance):
        _, _, model = instance
        table, _, _ = train_baseline(model, "cql", 0.5)
        np.testing.assert_allclose(table.tie_weights.sum(axis=1), 1.0, atol=1e-12)

    def test_fixed_points_reproducible(self, instance):
        _, _, model = instance
        a, _, _ = train_baseline(model, "cql", 0.3)
        b, _, _ = train_baseline(model, "cql", 0.3)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.tie_weights, b.tie_weights)


class TestAntiExploration:
    def test_alpha_zero_is_plain(self, instance, rng):
        _, _, model = instance
        prev = q_table(model, rng)
        np.testing.assert_array_equal(anti_exploration_backup(prev, model, 0.0).values,
                                      plain_backup(prev, model).values)

    def test_unit_counts(self):
        ts = [Transition(0, 0, 0.3, 1, True), Transition(0, 1, 0.6, 1, True)]
        model = build_empirical_model(OfflineDataset.from_transitions(ts, 2, 2), 0.9, 1.0)
        out = anti_exploration_backup(QTable(np.zeros((2, 2)), "ae"), model, 0.25)
        np.testing.assert_allclose(out.values[0], [0.3 - 0.25, 0.6 - 0.25])

    @pytest.mark.parametrize("seed", range(20))
    def test_equals_single_point_confidence_backup(self, seed):
        _, _, model = small_instance(seed, num_samples=150)
        rng = np.random.default_rng(seed)
        vals = rng.uniform(-model.v_max, model.v_max, size=(model.num_states, model.num_actions))
        alpha = float(rng.uniform(0.1, 2.0))
        ae = anti_exploration_backup(QTable(vals, "ae", alpha), model, alpha)
        cq, _ = ccvl_bonus_backup(ConfidenceQ(vals[:, :, None], ConfidenceGrid((math.exp(-1),)), LOWER, alpha, 1.0),
                                  model)
        assert np.max(np.abs(ae.values - cq.values[:, :, 0])) <= 1e-12


class TestAevl:
    def test_identical_seeds_identical_members(self, instance):
        _, _, model = instance
        ens = train_aevl_ensemble(model, 2, 0.5, [7, 7])
        assert np.array_equal(ens.members[0].values, ens.members[1].values)

    def test_members_converge_to_one_fixed_point(self, instance):
        _, _, model = instance
        ens = train_aevl_ensemble(model, 5, 0.5, [0, 1, 2, 3, 4], tol=1e-10)
        spread = ens.stack().max(axis=2) - ens.stack().min(axis=2)
        assert spread.max() <= 1e-8
        cql, _, _ = train_baseline(model, "cql", 0.5, tol=1e-10)
        np.testing.assert_allclose(ens.members[0].values, cql.values, atol=1e-8)

    @pytest.mark.parametrize("size,seeds", [(1, [0]), (3, [0, 1])])
    def test_validation(self, instance, size, seeds):
        _, _, model = instance
        with pytest.raises(ConfigError):
            train_aevl_ensemble(model, size, 0.5, seeds)

    def test_round_trip(self, instance):
        _, _, model = instance
        ens = train_aevl_ensemble(model, 3, 0.5, [0, 1, 2])
        back = EnsembleQ.from_dict(json.loads(json.dumps(ens.to_dict())))
        np.testing.assert_array_equal(back.stack(), ens.stack())
        assert back.seeds == (0, 1, 2)


class TestFixedCcvl:
    def test_single_slice(self, instance):
        _, data, model = instance
        table, _ = train_ccvl(model, "ccvl-bonus", alpha=0.5, grid=ConfidenceGrid((0.3,)))
        assert fixed_ccvl_select(table, data, model.discount) == 0

    def test_zero_residual_slice_wins(self):
        # deterministic two-state chain: s0 -> s1 (reward 1, terminal)
        ts = [Transition(0, 0, 1.0, 1, True)] * 3
        data = OfflineDataset.from_transitions(ts, 2, 1)
        vals = np.zeros((2, 1, 3))
        vals[0, 0] = [0.2, 1.0, 0.6]  # only the middle slice satisfies Q = r exactly
        table = ConfidenceQ(vals, ConfidenceGrid((0.1, 0.3, 0.5)))
        assert fixed_ccvl_select(table, data, 0.9) == 1

    def test_ties_prefer_smaller_delta(self):
        ts = [Transition(0, 0, 1.0, 1, True)]
        data = OfflineDataset.from_transitions(ts, 2, 1)
        vals = np.zeros((2, 1, 2))
        vals[0, 0] = [0.5, 1.5]
        assert fixed_ccvl_select(ConfidenceQ(vals, ConfidenceGrid((0.1, 0.3))), data, 0.9) == 0

    def test_bellman_errors_match_loop(self, instance):
        _, data, model = instance
        table, _ = train_ccvl(model, "ccvl-reg", alpha=0.5)
        errs = slice_bellman_errors(table.values, data, model.discount)
        for k in range(len(table.grid)):
            tot = 0.0
            for t in data.transitions:
                nxt = 0.0 if t.done else table.values[t.s_next, :, k].max()
                tot += (table.values[t.s, t.a, k] - t.r - model.discount * nxt) ** 2
            assert errs[k] == pytest.approx(tot / len(data), rel=1e-12)


class TestQTable:
    def test_dict_uses_k1_schema(self):
        doc = QTable(np.arange(6.0).reshape(3, 2), "cql", 0.2).to_dict()
        assert doc["shape"] == [3, 2, 1] and doc["values"] == [0, 1, 2, 3, 4, 5]

    def test_round_trip(self, instance):
        _, _, model = instance
        table, _, _ = train_baseline(model, "cql", 0.5)
        back = QTable.from_dict(json.loads(json.dumps(table.to_dict())))
        np.testing.assert_array_equal(back.values, table.values)
        np.testing.assert_array_equal(back.tie_weights, table.tie_weights)

    def test_csv(self):
        lines = QTable(np.array([[1.5, 2.0]]), "plain").to_csv().splitlines()
        assert lines == ["s,a,delta,q", "0,0,,1.5", "0,1,,2.0"]

    def test_unknown_method(self, instance):
        _, _, model = instance
        with pytest.raises(ConfigError):
            train_baseline(model, "rem")
