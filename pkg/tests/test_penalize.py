import math

import numpy as np
import pytest

import oracles
from exoplan.datagen import collect, make_behavior_policies
from exoplan.exbmdp import EXBMDPSpec, PolicyTable, exact_return, lift_policy, random_spec
from exoplan.exceptions import ConfigurationError, PlanningError
from exoplan.penalize import (
    PenalizedMDP,
    UncertaintyTable,
    build_penalized,
    distractor_swap_eval,
    evaluate_policy,
    latent_policy,
    md_rows,
    normalization_bounds,
    normalized_score,
    penalized_values,
    plan,
    save_penalized,
    uncertainty_md,
    uncertainty_table,
    uncertainty_vlp,
    vlp_rows,
)
from exoplan.sepmodel import EnsembleModel, Partition, fit_separated_model
from exoplan.theory import deterministic_policies


def ensemble(members, reward=None):
    members = np.asarray(members, dtype=float)
    k, n, a, _ = members.shape
    reward = np.zeros((n, a)) if reward is None else np.asarray(reward, dtype=float)
    return EnsembleModel("separated", members, np.ones((1, 1)), reward, np.zeros((n, a)), np.full(n, 1 / n),
                         0.1, Partition(0), (n, 1))


TWO_ROWS = [[[[1.0, 0.0]]], [[[0.0, 1.0]]]]


# estimators

def test_identical_members_have_zero_uncertainty():
    row = [[[0.2, 0.3, 0.5]]]
    model = ensemble([row, row, row])
    assert uncertainty_md(model, 0, 0) == 0.0
    assert uncertainty_vlp(model, 0, 0) == 0.0


def test_md_two_opposite_members():
    assert uncertainty_md(ensemble(TWO_ROWS), 0, 0) == 1.0


def test_md_relabel_invariant():
    rng = np.random.default_rng(0)
    rows = rng.dirichlet(np.ones(5), size=4)
    perm = rng.permutation(5)
    assert abs(md_rows(rows) - md_rows(rows[:, perm])) <= 1e-15
    assert abs(md_rows(rows) - oracles.md(rows.tolist())) <= 1e-15


def test_vlp_two_point_variance():
    value = vlp_rows([[0.8, 0.2], [0.4, 0.6]], law=[1.0, 0.0])
    assert abs(value - (math.log(2) / 2) ** 2) <= 1e-12
    assert abs(value - 0.1201132534795503) <= 1e-12


def test_vlp_mean_law_matches_oracle():
    rows = np.random.default_rng(1).dirichlet(np.ones(4), size=3)
    assert abs(vlp_rows(rows) - oracles.vlp(rows.tolist())) <= 1e-14


def test_vlp_zero_probability_is_infinite():
    assert uncertainty_vlp(ensemble(TWO_ROWS), 0, 0) == math.inf


def test_same_smoothing_keeps_zero_disagreement():
    counts = np.array([3.0, 1.0, 0.0])
    for alpha in (0.01, 0.5, 2.0):
        row = (counts + alpha) / (counts + alpha).sum()
        model = ensemble([[[row]], [[row]]])
        assert uncertainty_md(model, 0, 0) == 0.0 and uncertainty_vlp(model, 0, 0) == 0.0


def test_single_member_warns():
    model = ensemble([[[[0.5, 0.5]]]])
    with pytest.warns(UserWarning):
        assert uncertainty_md(model, 0, 0) == 0.0
    with pytest.warns(UserWarning):
        assert uncertainty_vlp(model, 0, 0) == 0.0


def test_unknown_estimator():
    with pytest.raises(ConfigurationError):
        uncertainty_table(ensemble(TWO_ROWS), "bogus")


# penalized MDP

@pytest.fixture
def fitted(small_spec):
    pols = make_behavior_policies(small_spec, "random", 2, np.random.default_rng(0))
    ds = collect(small_spec, pols, 10, 40, seed=1, swap_factors=False)
    return fit_separated_model(ds, Partition(0), K=4, seed=2), ds


def test_zero_lambda_keeps_reward(fitted):
    model, _ = fitted
    pm = build_penalized(model, "md", 0.0)
    assert np.array_equal(pm.reward, model.reward)


def test_penalty_arithmetic():
    pm = PenalizedMDP(np.ones((1, 1, 1)), np.array([[0.8]]), UncertaintyTable(np.array([[0.05]]), "md"), 10.0, 0.9)
    assert abs(pm.reward[0, 0] - 0.3) <= 1e-12


def test_reward_non_increasing_in_lambda(fitted):
    model, _ = fitted
    for est in ("md", "vlp"):
        rewards = [build_penalized(model, est, lam).reward for lam in (0.0, 0.1, 1.0, 10.0)]
        assert all(np.all(b <= a) for a, b in zip(rewards, rewards[1:]))


def test_penalized_transitions_are_mean(fitted):
    model, _ = fitted
    pm = build_penalized(model)
    assert np.allclose(pm.trans, model.members.mean(axis=0), atol=1e-15, rtol=0)
    assert np.allclose(pm.trans.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_negative_lambda_rejected(fitted):
    with pytest.raises(ConfigurationError):
        build_penalized(fitted[0], "md", -1.0)


# planning

def test_single_state_plan():
    pm = PenalizedMDP(np.ones((1, 2, 1)), np.ones((1, 2)), UncertaintyTable(np.zeros((1, 2)), "md"), 1.0, 0.9)
    values, _ = penalized_values(pm)
    assert abs(values[0] - 10.0) <= 1e-8
    assert plan(pm).greedy_actions().tolist() == [0]


def test_zero_reward_plan():
    trans = np.random.default_rng(0).dirichlet(np.ones(3), size=(3, 2))
    pm = PenalizedMDP(trans, np.zeros((3, 2)), UncertaintyTable(np.zeros((3, 2)), "md"), 1.0, 0.9)
    values, _ = penalized_values(pm)
    assert np.all(values == 0.0)
    assert plan(pm).greedy_actions().tolist() == [0, 0, 0]


def test_large_penalty_flips_choice():
    # state 0: action 0 -> uncertain state 1 (reward 1), action 1 -> safe state 2 (reward 0.8)
    trans = np.zeros((3, 2, 3))
    trans[0, 0, 1] = trans[0, 1, 2] = 1.0
    trans[1, :, 1] = trans[2, :, 2] = 1.0
    r_hat = np.array([[0.0, 0.0], [1.0, 1.0], [0.8, 0.8]])
    u = np.array([[0.0, 0.0], [0.05, 0.05], [0.0, 0.0]])
    # lam=0: Q(0,0) = 0.9 * 10 = 9 > Q(0,1) = 0.9 * 8 = 7.2
    # lam=10: Q(0,0) = 0.9 * 5 = 4.5 < 7.2
    low = PenalizedMDP(trans, r_hat, UncertaintyTable(u, "md"), 0.0, 0.9)
    high = PenalizedMDP(trans, r_hat, UncertaintyTable(u, "md"), 10.0, 0.9)
    assert plan(low).greedy_actions()[0] == 0
    assert plan(high).greedy_actions()[0] == 1
    assert abs(penalized_values(high)[0][0] - 7.2) <= 1e-8


def test_nonfinite_penalty_refuses_to_plan():
    model = ensemble(TWO_ROWS, reward=[[0.5]])
    pm = build_penalized(model, "vlp", 1.0)
    with pytest.raises(PlanningError, match="alpha > 0"):
        plan(pm)


@pytest.mark.parametrize("seed", range(10))
def test_plan_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 7)), int(rng.integers(2, 4))
    trans = rng.dirichlet(np.ones(n), size=(n, k))
    pm = PenalizedMDP(trans, rng.random((n, k)), UncertaintyTable(rng.random((n, k)) * 0.1, "md"), 1.0, 0.9,
                      np.full(n, 1 / n))
    spec = EXBMDPSpec(trans, np.ones((1, 1)), np.zeros((n, k)), np.arange(n)[:, None], pm.init, [1.0], 0.9)
    reward = pm.reward

    def value(policy):
        shifted = EXBMDPSpec(trans, np.ones((1, 1)), reward - reward.min(), spec.emission, pm.init, [1.0], 0.9)
        return exact_return(shifted, policy) + reward.min() / 0.1

    best = max(value(p) for p in deterministic_policies(n, k))
    assert abs(value(plan(pm)) - best) <= 1e-8


def test_penalized_dump(tmp_path, fitted):
    pm = build_penalized(fitted[0], "md", 1.0)
    save_penalized(pm, tmp_path / "pm.json")
    text = (tmp_path / "pm.json").read_text()
    assert '"estimator": "md"' in text


# evaluation

def test_normalization_reproduces_published_scores():
    walker = normalized_score(459, 5.0, 598.0)
    cheetah = normalized_score(254, 1.7, 403.2)
    assert abs(walker - 0.766) <= 5e-4 and abs(walker - 0.77) <= 0.005
    assert abs(cheetah - 0.628) <= 5e-4 and abs(cheetah - 0.63) <= 0.005


def test_normalization_edge_cases():
    assert normalized_score(5.0, 5.0, 10.0) == 0.0
    with pytest.raises(ConfigurationError):
        normalized_score(1.0, 2.0, 2.0)
    stats = [{"min": 5.9, "max": 199.1}, {"min": 5.0, "max": 398.2}, {"min": 401.5, "max": 598.0}]
    assert normalization_bounds(stats) == (5.0, 598.0)


def test_evaluate_policy_on_endo_and_latent_tables(small_spec):
    pol = PolicyTable(np.random.default_rng(0).dirichlet(np.ones(2), size=4))
    ret, norm = evaluate_policy(small_spec, pol, (0.0, 10.0))
    assert abs(ret - exact_return(small_spec, pol)) <= 1e-12
    ret2, _ = evaluate_policy(small_spec, lift_policy(small_spec, pol), (0.0, 10.0))
    assert abs(ret - ret2) <= 1e-12 and norm == ret / 10.0


def test_latent_policy_routes_through_decoder(small_spec, fitted):
    model, ds = fitted
    probs = np.random.default_rng(1).dirichlet(np.ones(2), size=4)
    lat = latent_policy(small_spec, ds.decoder, model, PolicyTable(probs))
    assert np.array_equal(lat, lift_policy(small_spec, probs))


def test_distractor_swap(small_spec):
    pol = PolicyTable(np.random.default_rng(2).dirichlet(np.ones(2), size=4))
    before, after = distractor_swap_eval(small_spec, pol, small_spec.exo_trans)
    assert before == after
    before, after = distractor_swap_eval(small_spec, pol, np.full((3, 3), 1 / 3))
    assert abs(before - after) <= 1e-12
    before, after = distractor_swap_eval(small_spec, pol, np.random.default_rng(3).dirichlet(np.ones(6), size=6))
    assert abs(before - after) <= 1e-12
    assert abs(before - exact_return(small_spec, pol)) <= 1e-12


def test_distractor_swap_dimension_checks(small_spec):
    with pytest.raises(ConfigurationError):
        distractor_swap_eval(small_spec, PolicyTable.uniform(4, 2), np.ones((2, 3)))
    with pytest.raises(ConfigurationError):
        distractor_swap_eval(small_spec, PolicyTable.uniform(5, 2), np.eye(3))
