import math

import numpy as np
import pytest

import oracles
from exoplan.exbmdp import EXBMDPSpec, PolicyTable, exact_return, optimal_policy, random_spec
from exoplan.exceptions import AssumptionViolated, EnumerationCapExceeded
from exoplan.theory import (
    bound_instance,
    check_equal_action_marginals,
    check_mixture_mi,
    check_performance_bound,
    check_sampling_likelihood,
    check_telescoping,
    deterministic_policies,
    gap_table,
    lemma_instance,
    mutual_information,
    run_suite,
    sampling_instance,
    symmetric_swap_instance,
)


def perturbed(spec, seed, weight=0.3):
    noise = np.random.default_rng(seed).dirichlet(np.ones(spec.n_endo), size=(spec.n_endo, spec.n_act))
    return (1 - weight) * spec.endo_trans + weight * noise


# telescoping

def test_identical_models_give_zero_gap(small_spec):
    pol = PolicyTable.uniform(4, 2)
    rep = check_telescoping(small_spec, small_spec.endo_trans, pol)
    assert rep.lhs == 0.0 and abs(rep.rhs) <= 1e-15 and rep.passed
    assert np.all(gap_table(small_spec, small_spec.endo_trans, pol) == 0.0)


def test_zero_discount_gives_zero_gap():
    spec = random_spec(3, 1, 2, np.random.default_rng(0), discount=0.0)
    rep = check_telescoping(spec, perturbed(spec, 1), PolicyTable.uniform(3, 2))
    assert abs(rep.lhs) <= 1e-15 and rep.rhs == 0.0


def test_telescoping_against_oracle():
    spec = random_spec(4, 1, 2, np.random.default_rng(4), concentration=1.0)
    tt = perturbed(spec, 5)
    pol = PolicyTable(np.random.default_rng(6).dirichlet(np.ones(2), size=4))
    g = spec.discount
    v_true = oracles.series_values(spec.endo_trans, spec.reward, pol.probs, g)
    v_model = oracles.series_values(tt, spec.reward, pol.probs, g)
    lhs = spec.init_endo @ (v_model - v_true)
    gap = np.einsum("sat,t->sa", tt - spec.endo_trans, v_true)
    rhs = g * np.sum(oracles.inverse_occupancy(tt, pol.probs, g, spec.init_endo) * gap)
    rep = check_telescoping(spec, tt, pol)
    assert abs(lhs - rhs) <= 1e-8
    assert abs(rep.lhs - lhs) <= 1e-9 and abs(rep.rhs - rhs) <= 1e-9
    assert rep.passed


# performance bound

def test_exact_model_bound_is_tight():
    spec = random_spec(3, 1, 2, np.random.default_rng(2))
    rep = check_performance_bound(spec, spec.endo_trans, 1.0)
    best = exact_return(spec, optimal_policy(spec))
    assert abs(rep.lhs - best) <= 1e-10
    assert abs(rep.rhs - best) <= 1e-10
    assert rep.passed and rep.details["admissible"]


def test_bound_on_three_state_instance():
    spec = random_spec(3, 1, 2, np.random.default_rng(3), concentration=1.0)
    rep = check_performance_bound(spec, perturbed(spec, 4, 0.5), 2.0)
    assert rep.passed and rep.details["n_policies"] == 8
    assert rep.details["admissible"]


def test_policy_cap_refusal():
    with pytest.raises(EnumerationCapExceeded, match="7 states"):
        deterministic_policies(7, 3)


def test_zero_penalty_corruption_is_caught():
    results = list(run_suite("performance_bound", 20, corrupt_zero_penalty=True))
    assert any(not r.passed for r in results)


# sampling likelihood

def test_single_policy_equality():
    spec, pols, _, desc = sampling_instance(0)
    rep = check_sampling_likelihood(spec, pols[:1], desc["horizon"], desc["marginal"])
    assert rep.details["margin"] == 0.0 and rep.passed


def test_duplicated_policy_equality():
    spec, pols, _, desc = sampling_instance(1)
    rep = check_sampling_likelihood(spec, [pols[0], pols[0]], desc["horizon"], desc["marginal"])
    assert abs(rep.details["margin"]) <= 1e-12


def test_symmetric_swap_strict_margin():
    spec, pols = symmetric_swap_instance()
    rep = check_sampling_likelihood(spec, pols, 4)
    # each of the 4 steps costs ln 2 when scored with the pooled behavior
    assert abs(rep.details["margin"] - 4 * math.log(2)) <= 1e-12
    assert rep.lhs < rep.rhs


def test_per_policy_reading_is_equality():
    spec, pols, _, desc = sampling_instance(2)
    rep = check_sampling_likelihood(spec, pols, desc["horizon"], desc["marginal"], action_model="per_policy")
    assert rep.lhs == rep.rhs


@pytest.mark.parametrize("seed", [4, 5])
def test_sampling_margin_matches_oracle(seed):
    spec, pols, _, desc = sampling_instance(seed)
    horizon = min(desc["horizon"], 3)
    rep = check_sampling_likelihood(spec, pols, horizon, desc["marginal"])
    lhs, rhs = oracles.trajectory_loglik(spec, pols, horizon)
    assert abs(rep.details["margin"] - (rhs - lhs)) <= 1e-9


def test_unequal_marginals_rejected(small_spec):
    pols = [PolicyTable.from_actions([0, 0, 0, 0], 2), PolicyTable.from_actions([1, 1, 1, 1], 2)]
    with pytest.raises(AssumptionViolated):
        check_equal_action_marginals(small_spec, pols)
    with pytest.raises(AssumptionViolated):
        check_sampling_likelihood(small_spec, pols, 2)


def test_path_cap_refusal():
    spec, pols = symmetric_swap_instance()
    with pytest.raises(EnumerationCapExceeded):
        check_sampling_likelihood(spec, pols, 12)


# mutual information

def test_identical_policies_mi_equality():
    spec, pols, weights, _ = sampling_instance(3)
    rep = check_mixture_mi(spec, [pols[0]] * 3, weights)
    assert abs(rep.lhs - rep.rhs) <= 1e-15 and rep.passed


def test_swapped_policies_mi_closed_form():
    spec, pols = symmetric_swap_instance()
    rep = check_mixture_mi(spec, pols, [0.5, 0.5])
    assert abs(rep.lhs) <= 1e-15
    assert abs(rep.rhs - math.log(2)) <= 1e-15
    assert rep.passed


def test_mi_matches_oracle():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=4)
    dist = rng.dirichlet(np.ones(4))
    assert abs(mutual_information(probs, dist) - oracles.mutual_information(probs.tolist(), dist.tolist())) <= 1e-14


def test_mi_rejects_unequal_marginals(small_spec):
    pols = [PolicyTable.from_actions([0, 0, 0, 0], 2), PolicyTable.from_actions([1, 1, 1, 1], 2)]
    with pytest.raises(AssumptionViolated):
        check_mixture_mi(small_spec, pols, np.full(4, 0.25))


# instances and suites

def test_instances_reproducible():
    a = lemma_instance(17)
    b = lemma_instance(17)
    assert np.array_equal(a[1], b[1]) and a[3] == b[3]
    assert bound_instance(3)[3] == bound_instance(3)[3]
    first = [r.to_dict() for r in run_suite("mixture_mi", 5, seed=2)]
    second = [r.to_dict() for r in run_suite("mixture_mi", 5, seed=2)]
    assert first == second


def test_generated_instances_satisfy_assumption():
    for seed in range(10):
        spec, pols, _, desc = sampling_instance(seed)
        check_equal_action_marginals(spec, pols, desc["marginal"])
        assert (spec.n_endo * spec.n_act) ** desc["horizon"] <= 60_000


def test_unknown_suite():
    with pytest.raises(ValueError):
        list(run_suite("nope", 1))


def test_symmetric_spec_is_well_formed():
    spec, _ = symmetric_swap_instance()
    assert isinstance(spec, EXBMDPSpec) and spec.n_endo == 2
