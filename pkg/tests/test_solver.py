import json
import math
from functools import partial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccvl.data import OfflineDataset, Transition, build_empirical_model, empirical_bellman
from ccvl.errors import ConfigError, ConvergenceError
from ccvl.mdp import RIGHT, TabularMdp, solve_optimal_q
from ccvl.solver import (
    LOWER,
    UPPER,
    ConfidenceGrid,
    ConfidenceQ,
    bonus,
    ccvl_bonus_backup,
    ccvl_reg_backup,
    ccvl_upper_backup,
    floored_behavior,
    greedy_saddle_policy,
    initial_table,
    regularizer_penalty,
    regularizer_weight,
    softmax_saddle_policy,
    solve,
    train_ccvl,
    value_bounds,
)

from conftest import small_instance
from oracles import exhaustive_bonus_backup, exhaustive_reg_backup, saddle_q_by_bisection

E_INV = math.exp(-1)
SMALL_GRID = ConfidenceGrid((0.05, 0.2, 0.5, 0.8))


def single_pair_model(reward=0.0, n=1, num_actions=1):
    ts = [Transition(0, 0, reward, 0, False)] * n
    return build_empirical_model(OfflineDataset.from_transitions(ts, 1, num_actions), 0.9, 1.0)


def random_table(model, grid, rng, kind=LOWER, alpha=1.0, monotone=True):
    S, A, K = model.num_states, model.num_actions, len(grid)
    v = rng.uniform(-model.v_max, model.v_max, size=(S, A, K))
    if monotone:
        v = np.sort(v, axis=2)
        if kind == UPPER:
            v = v[:, :, ::-1]
    return ConfidenceQ(v, grid, kind, alpha, 1.0)


class TestGrid:
    def test_default_grid(self):
        assert ConfidenceGrid().deltas == (0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)

    @pytest.mark.parametrize("deltas", [(), (0.0, 0.5), (0.5, 1.0), (0.3, 0.2), (0.2, 0.2)])
    def test_invalid(self, deltas):
        with pytest.raises(ConfigError):
            ConfidenceGrid(deltas)

    def test_index_lookup(self):
        assert ConfidenceGrid().index(0.3) == 4
        with pytest.raises(ConfigError):
            ConfidenceGrid().index(0.4)


class TestBonus:
    def test_unit_case(self):
        assert bonus(1, E_INV, 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_zero_count_clamps_to_one(self):
        assert bonus(0, 0.3, 0.7, 2.0) == bonus(1, 0.3, 0.7, 2.0)

    def test_quarter(self):
        assert bonus(4, E_INV, 1.0, 1.0) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("delta", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, delta):
        with pytest.raises(ValueError):
            bonus(3, delta)

    def test_broadcasts(self):
        out = bonus(np.array([[1], [4]]), np.array([E_INV, E_INV]))
        np.testing.assert_allclose(out, [[1, 1], [0.5, 0.5]])


class TestBonusBackup:
    def test_zero_target_bonus_only(self):
        model = single_pair_model()
        prev = ConfidenceQ(np.zeros((1, 1, 1)), ConfidenceGrid((E_INV,)), LOWER, 0.7, 1.0)
        out, rate = ccvl_bonus_backup(prev, model)
        assert out.values[0, 0, 0] == pytest.approx(-0.7, abs=1e-15)
        assert rate == 1.0

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("monotone", [True, False])
    def test_matches_exhaustive_pair_search(self, seed, monotone):
        _, _, model = small_instance(seed, num_samples=80)
        prev = random_table(model, SMALL_GRID, np.random.default_rng(seed), monotone=monotone)
        out, rate = ccvl_bonus_backup(prev, model)
        expected, diag = exhaustive_bonus_backup(prev.values, model, SMALL_GRID.deltas, 1.0, 1.0)
        np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-12)
        assert rate == pytest.approx(diag.mean())

    @pytest.mark.parametrize("seed", range(6))
    def test_monotone_input_is_degenerate(self, seed):
        _, _, model = small_instance(seed, num_samples=60)
        prev = random_table(model, ConfidenceGrid(), np.random.default_rng(seed))
        _, rate = ccvl_bonus_backup(prev, model)
        assert rate == 1.0

    def test_corridor_two_iterations_reach_closed_form(self):
        # single-step corridor "SG" without slip
        ts = []
        for a in range(4):  # 2500 samples spread evenly over the 4 start-state pairs
            s2 = 1 if a == RIGHT else 0
            ts += [Transition(0, a, float(a == RIGHT), s2, a == RIGHT)] * 625
        model = build_empirical_model(OfflineDataset.from_transitions(ts, 2, 4), 0.9, 1.0)
        alpha, grid = 0.5, ConfidenceGrid((E_INV,))
        b = alpha / 25.0
        table = initial_table(model, grid, LOWER, alpha, 1.0)
        for _ in range(2):
            table, _ = ccvl_bonus_backup(table, model)
        q = table.values[:, :, 0]
        assert q[0, RIGHT] == pytest.approx(1 - b, abs=1e-12)
        for a in (0, 1, 2):
            assert q[0, a] == pytest.approx(0.9 * (1 - b) - b, abs=1e-12)
        np.testing.assert_allclose(q[1], -model.v_max - alpha)
        # already a fixed point
        again, _ = ccvl_bonus_backup(table, model)
        np.testing.assert_allclose(again.values, table.values, atol=1e-12)

    def test_requires_lower(self, instance):
        _, _, model = instance
        with pytest.raises(ConfigError):
            ccvl_bonus_backup(initial_table(model, bound_kind=UPPER), model)


class TestUpperBackup:
    def test_zero_target_plus_bonus(self):
        prev = ConfidenceQ(np.zeros((1, 1, 1)), ConfidenceGrid((E_INV,)), UPPER, 0.7, 1.0)
        out, _ = ccvl_upper_backup(prev, single_pair_model())
        assert out.values[0, 0, 0] == pytest.approx(0.7, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("monotone", [True, False])
    def test_matches_exhaustive_min(self, seed, monotone):
        _, _, model = small_instance(seed, num_samples=80)
        prev = random_table(model, SMALL_GRID, np.random.default_rng(seed), UPPER, monotone=monotone)
        out, rate = ccvl_upper_backup(prev, model)
        expected, diag = exhaustive_bonus_backup(prev.values, model, SMALL_GRID.deltas, 1.0, 1.0, sign=1.0)
        np.testing.assert_allclose(out.values, expected, atol=1e-12)
        assert rate == pytest.approx(diag.mean())
        if monotone:
            assert rate == 1.0

    @pytest.mark.parametrize("seed", range(8))
    def test_paired_backups_keep_the_sandwich(self, seed):
        _, _, model = small_instance(seed, num_samples=100)
        lo = initial_table(model, ConfidenceGrid(), LOWER, 0.5, 1.0)
        hi = initial_table(model, ConfidenceGrid(), UPPER, 0.5, 1.0)
        for _ in range(30):
            lo, _ = ccvl_bonus_backup(lo, model)
            hi, _ = ccvl_upper_backup(hi, model)
            assert np.all(lo.values <= hi.values + 1e-12)


class TestRegularizer:
    def test_hand_computed_penalty(self):
        w = regularizer_weight(4, E_INV, 1.0, 1.0)
        pen = regularizer_penalty(np.array([1.0, 0, 0, 0]), np.full(4, 0.25), w)
        np.testing.assert_allclose(pen, [1.5, -0.5, -0.5, -0.5])

    def test_behavior_policy_has_no_penalty(self, rng):
        beta = rng.dirichlet(np.ones(3), size=4)
        np.testing.assert_allclose(regularizer_penalty(beta, beta, 0.8), 0.0, atol=1e-15)

    def test_floor(self):
        ts = [Transition(0, 0, 0.0, 0, False)] * 3
        model = build_empirical_model(OfflineDataset.from_transitions(ts, 1, 2), 0.9, 1.0)
        np.testing.assert_allclose(floored_behavior(model), [[1.0, 1 / 5]])

    def test_constant_target_uniform_behavior_is_penalty_free(self):
        # symmetric tie: the saddle policy equals the behavior estimate
        mdp = TabularMdp(np.full((2, 3, 2), 0.5), np.full((2, 3), 0.5), 0.9, [0.5, 0.5], [False, False], 1.0)
        ts = [Transition(s, a, 0.5, s2, False) for s in range(2) for a in range(3) for s2 in range(2)]
        model = build_empirical_model(OfflineDataset.from_transitions(ts * 4, 2, 3), mdp.discount, 1.0)
        prev = ConfidenceQ(np.full((2, 3, 2), 1.3), ConfidenceGrid((0.1, 0.5)), LOWER, 1.0, 1.0)
        out, _ = ccvl_reg_backup(prev, model)
        np.testing.assert_allclose(out.values, empirical_bellman(prev.values, model), atol=1e-12)


class TestSaddle:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 100_000), A=st.integers(1, 5), w=st.floats(0.0, 3.0))
    def test_greedy_saddle_matches_bisection(self, seed, A, w):
        rng = np.random.default_rng(seed)
        target = rng.normal(size=A)
        if A > 2 and seed % 3 == 0:
            target[1] = target[0]  # exercise exact ties
        beta = rng.dirichlet(np.ones(A))
        beta = np.maximum(beta, 0.05)
        beta /= beta.sum()
        pi = greedy_saddle_policy(target[None], beta[None], np.array([w]))[0]
        q = target - regularizer_penalty(pi, beta, w)
        np.testing.assert_allclose(pi.sum(), 1.0, atol=1e-12)
        assert np.all(pi >= -1e-15)
        if w > 0:
            np.testing.assert_allclose(q, saddle_q_by_bisection(target, beta, w), atol=1e-9)
            # the saddle policy only plays maximizers of its own Q
            assert np.all(q[pi > 1e-12] >= q.max() - 1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 100_000), A=st.integers(2, 4), tau=st.floats(0.05, 2.0))
    def test_softmax_saddle_is_self_consistent(self, seed, A, tau):
        rng = np.random.default_rng(seed)
        target = rng.normal(size=(3, A))
        beta = rng.dirichlet(np.ones(A), size=3) * 0.8 + 0.2 / A
        w = rng.uniform(0.1, 2.0, size=3)
        pi = softmax_saddle_policy(target, beta, w, tau)
        q = target - regularizer_penalty(pi, beta, w[:, None])
        z = np.exp((q - q.max(axis=1, keepdims=True)) / tau)
        np.testing.assert_allclose(pi, z / z.sum(axis=1, keepdims=True), atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_reg_backup_matches_pair_search_by_bisection(self, seed):
        _, _, model = small_instance(seed, num_samples=60)
        prev = random_table(model, SMALL_GRID, np.random.default_rng(seed))
        out, _ = ccvl_reg_backup(prev, model)
        expected = exhaustive_reg_backup(prev.values, model, SMALL_GRID.deltas, 1.0, 1.0)
        np.testing.assert_allclose(out.values, expected, atol=1e-8)

    def test_unknown_policy_mode(self, instance):
        _, _, model = instance
        with pytest.raises(ConfigError):
            ccvl_reg_backup(initial_table(model), model, policy_mode="argmax")


class TestSolve:
    @pytest.mark.parametrize("seed", range(4))
    def test_residuals_shrink_geometrically(self, seed):
        _, _, model = small_instance(seed)
        _, report = train_ccvl(model, "ccvl-bonus", alpha=1.0)
        r = np.array(report.residuals)
        big = r[:-1] > 1e-10
        assert np.all(r[1:][big] <= 0.9 * r[:-1][big] + 1e-12)

    def test_alpha_zero_full_coverage_is_value_iteration(self):
        mdp, data, model = small_instance(1, num_samples=2000)
        assert model.visited_mask.all()
        emp = TabularMdp(model.p_hat, model.r_hat, mdp.discount, mdp.initial_dist,
                         np.zeros(mdp.num_states, bool), mdp.r_max)
        q_emp = solve_optimal_q(emp, tol=1e-12)
        for method in ("ccvl-bonus", "ccvl-reg"):
            table, _ = train_ccvl(model, method, alpha=0.0, tol=1e-11)
            for k in range(len(table.grid)):
                np.testing.assert_allclose(table.values[:, :, k], q_emp, atol=1e-8)

    def test_non_convergence(self, instance):
        _, _, model = instance
        with pytest.raises(ConvergenceError) as info:
            train_ccvl(model, "ccvl-bonus", max_iters=2)
        assert info.value.iterations == 2 and info.value.residual > 0

    def test_tol_must_be_positive(self, instance):
        _, _, model = instance
        with pytest.raises(ConfigError):
            solve(partial(ccvl_bonus_backup, model=model), initial_table(model), tol=0.0)

    @pytest.mark.parametrize("method", ["ccvl-bonus", "ccvl-reg", "ccvl-upper"])
    def test_converged_tables_are_degenerate_monotone_and_bounded(self, method, instance):
        _, _, model = instance
        table, report = train_ccvl(model, method, alpha=0.8)
        assert report.argmax_degeneracy_rate == 1.0
        assert table.is_monotone()
        lo, hi = value_bounds(model.v_max, 0.8, 1.0, table.grid)
        assert table.values.min() >= lo and table.values.max() <= hi
        assert report.final_residual <= 1e-8

    @pytest.mark.parametrize("method", ["ccvl-bonus", "ccvl-reg"])
    def test_alpha_monotonicity(self, method):
        _, _, model = small_instance(4)
        low, _ = train_ccvl(model, method, alpha=0.3)
        high, _ = train_ccvl(model, method, alpha=1.5)
        assert np.all(high.values <= low.values + 1e-9)

    def test_softmax_mode_converges(self, instance):
        _, _, model = instance
        table, report = train_ccvl(model, "ccvl-reg", alpha=0.5, policy_mode="softmax", temperature=0.5)
        assert report.final_residual <= 1e-8
        assert table.is_monotone()

    def test_reg_tie_weights_reproduce_the_table(self, instance):
        _, _, model = instance
        table, _ = train_ccvl(model, "ccvl-reg", alpha=0.6)
        pi = table.tie_weights
        np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
        target = empirical_bellman(table.values, model)
        w = regularizer_weight(model.count_s[:, None, None], table.grid.array[None, None, :], 0.6, 1.0)
        beta = floored_behavior(model)[:, :, None]
        rebuilt = np.clip(target - w * (pi / beta - 1), *value_bounds(model.v_max, 0.6, 1.0, table.grid))
        np.testing.assert_allclose(rebuilt, table.values, atol=1e-7)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(2, 6), A=st.integers(1, 3),
       alpha=st.floats(0.05, 2.0), n=st.integers(5, 300))
def test_converged_tables_monotone_in_delta(seed, S, A, alpha, n):
    mdp, data, model = small_instance(seed, S, A, 0.9, n)
    for method in ("ccvl-bonus", "ccvl-reg"):
        table, _ = train_ccvl(model, method, alpha=alpha)
        assert np.all(np.diff(table.values, axis=2) >= -1e-9)


class TestSerialization:
    def test_json_round_trip(self, instance):
        _, _, model = instance
        table, _ = train_ccvl(model, "ccvl-reg", alpha=0.4)
        doc = json.loads(json.dumps(table.to_dict()))
        back = ConfidenceQ.from_dict(doc)
        np.testing.assert_array_equal(back.values, table.values)
        np.testing.assert_array_equal(back.tie_weights, table.tie_weights)
        assert back.grid == table.grid and back.bound_kind == LOWER and back.alpha == 0.4

    def test_row_major_layout(self):
        v = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
        doc = ConfidenceQ(v, ConfidenceGrid((0.1, 0.5))).to_dict()
        assert doc["values"][:3] == [0.0, 1.0, 2.0] and doc["shape"] == [2, 3, 2]

    def test_csv_export(self):
        v = np.arange(4, dtype=float).reshape(1, 2, 2)
        text = ConfidenceQ(v, ConfidenceGrid((0.1, 0.5))).to_csv().splitlines()
        assert text[0] == "s,a,delta,q"
        assert text[1:] == ["0,0,0.1,0.0", "0,0,0.5,1.0", "0,1,0.1,2.0", "0,1,0.5,3.0"]

    def test_shape_checked(self):
        with pytest.raises(ConfigError):
            ConfidenceQ(np.zeros((2, 2, 3)), ConfidenceGrid((0.1, 0.5)))

    def test_malformed_document(self):
        with pytest.raises(ConfigError):
            ConfidenceQ.from_dict({"shape": [1, 1, 1]})
