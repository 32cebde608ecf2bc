"""Exact numerical checks of the telescoping identity, the penalized
performance bound, the sampling-likelihood inequality and its mutual
information step.

Every check returns a :class:`TheoryReport` carrying both sides, the tolerance
and the instance descriptor, so a failing instance can be regenerated.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .exbmdp import (
    EXBMDPSpec,
    PolicyTable,
    exact_return,
    greedy_policy,
    occupancy,
    policy_values,
    q_values,
    random_spec,
    value_iteration,
)
from .exceptions import AssumptionViolated, EnumerationCapExceeded

POLICY_CAP = 1000
PATH_CAP = 200_000
ASSUMPTION_TOL = 1e-9


@dataclass
class TheoryReport:
    check: str
    lhs: float
    rhs: float
    tol: float
    passed: bool
    instance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def gap_table(spec: EXBMDPSpec, trans_tilde, policy) -> np.ndarray:
    """One-step value gap ``E_{T~}[V] - E_T[V]`` with V the policy's values under the true model."""
    values = policy_values(spec.endo_trans, spec.reward, policy, spec.discount)
    return np.einsum("sat,t->sa", np.asarray(trans_tilde) - spec.endo_trans, values)


def check_telescoping(spec: EXBMDPSpec, trans_tilde, policy, tol: float = 1e-8, instance=None) -> TheoryReport:
    """Return gap between two dynamics versus the occupancy-weighted value gaps."""
    trans_tilde = np.asarray(trans_tilde, dtype=float)
    lhs = exact_return(spec, policy, trans=trans_tilde) - exact_return(spec, policy)
    rho = occupancy(trans_tilde, policy, spec.discount, spec.init_endo)
    rhs = spec.discount * rho.expect(gap_table(spec, trans_tilde, policy))
    return TheoryReport("telescoping", lhs, rhs, tol, abs(lhs - rhs) <= tol, instance or {}, {"residual": abs(lhs - rhs)})


def deterministic_policies(n_states: int, n_act: int, cap: int = POLICY_CAP) -> list:
    count = n_act ** n_states
    if count > cap:
        raise EnumerationCapExceeded(
            f"{count} deterministic policies for {n_states} states x {n_act} actions exceeds cap {cap}"
        )
    return [PolicyTable.from_actions(acts, n_act) for acts in itertools.product(range(n_act), repeat=n_states)]


def check_performance_bound(
    spec: EXBMDPSpec,
    trans_tilde,
    lam: float,
    policies=None,
    tol: float = 1e-8,
    cap: int = POLICY_CAP,
    force_zero_penalty: bool = False,
    instance=None,
) -> TheoryReport:
    """Plan against the penalized learned model and test the lower bound.

    The error estimator is built admissible by construction: it is the largest
    one-step value gap over the enumerated value functions, scaled so that
    ``lam * u >= gamma * |G|`` for every enumerated policy.
    """
    trans_tilde = np.asarray(trans_tilde, dtype=float)
    policies = deterministic_policies(spec.n_endo, spec.n_act, cap) if policies is None else list(policies)
    if len(policies) > cap:
        raise EnumerationCapExceeded(f"{len(policies)} candidate policies exceeds cap {cap}")
    gamma = spec.discount
    gaps = np.stack([np.abs(gap_table(spec, trans_tilde, p)) for p in policies])
    worst = gaps.max(axis=0)
    if force_zero_penalty:
        u = np.zeros_like(worst)
    elif lam > 0:
        u = gamma * worst / lam
    elif np.all(worst == 0):
        u = np.zeros_like(worst)
    else:
        raise ValueError("lam must be positive unless the learned model is exact")
    admissible = bool(np.all(lam * u >= gamma * worst - 1e-15))

    penalized = spec.reward - lam * u
    values, _ = value_iteration(trans_tilde, penalized, gamma, tol=1e-13)
    pi_tilde = greedy_policy(q_values(trans_tilde, penalized, values, gamma))
    lhs = exact_return(spec, pi_tilde)

    candidates = []
    for p in policies:
        eps = occupancy(trans_tilde, p, gamma, spec.init_endo).expect(u)
        candidates.append(exact_return(spec, p) - 2.0 * lam * eps)
    rhs = float(max(candidates))
    return TheoryReport(
        "performance_bound", lhs, rhs, tol, lhs >= rhs - tol, instance or {},
        {"admissible": admissible, "n_policies": len(policies), "pi_tilde": pi_tilde.greedy_actions().tolist()},
    )


# ---------------------------------------------------------------------------
# sampling-likelihood inequality

def action_marginal(policy, weights) -> np.ndarray:
    probs = policy.probs if isinstance(policy, PolicyTable) else np.asarray(policy)
    return np.asarray(weights) @ probs


def state_marginal(spec: EXBMDPSpec, policy, marginal: str) -> np.ndarray:
    """Weights over endogenous states used to test equal action marginals."""
    if marginal == "uniform":
        return np.full(spec.n_endo, 1.0 / spec.n_endo)
    if marginal == "occupancy":
        occ = occupancy(spec.endo_trans, policy, spec.discount, spec.init_endo).scaled()
        return occ.sum(axis=1)
    raise ValueError(f"unknown marginal {marginal!r}; expected 'occupancy' or 'uniform'")


def check_equal_action_marginals(spec: EXBMDPSpec, policies, marginal: str = "occupancy", tol: float = ASSUMPTION_TOL):
    marginals = np.array([action_marginal(p, state_marginal(spec, p, marginal)) for p in policies])
    spread = float(np.max(np.abs(marginals - marginals[0]))) if len(marginals) else 0.0
    if spread > tol:
        raise AssumptionViolated(
            f"behavior policies have different action marginals under the {marginal} state weighting "
            f"(max deviation {spread:.3g} > {tol})"
        )
    return marginals[0]


def _paths(n_states: int, n_act: int, horizon: int, cap: int):
    count = (n_states * n_act) ** horizon
    if count > cap:
        raise EnumerationCapExceeded(
            f"{count} trajectories of length {horizon} over {n_states} states x {n_act} actions exceeds cap {cap}"
        )
    grid = np.array(list(itertools.product(range(n_states * n_act), repeat=horizon)), dtype=np.int64)
    return grid // n_act, grid % n_act


def _path_logs(spec: EXBMDPSpec, states, actions, policy_probs):
    """Log-probability pieces of each enumerated path; -inf marks impossible steps."""
    with np.errstate(divide="ignore"):
        log_init = np.log(spec.init_endo)[states[:, 0]]
        log_act = np.log(policy_probs)[states, actions].sum(axis=1)
        log_trans = np.log(spec.endo_trans)[states[:, :-1], actions[:, :-1], states[:, 1:]].sum(axis=1)
    return log_init + log_trans, log_act


def _exo_expected_loglik(spec: EXBMDPSpec, horizon: int) -> float:
    """Exact expected exogenous log-likelihood over ``horizon`` steps (0 ln 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.where(spec.exo_trans > 0, np.log(spec.exo_trans), 0.0)
        log_init = np.where(spec.init_exo > 0, np.log(spec.init_exo), 0.0)
    dist = spec.init_exo.copy()
    total = float(dist @ log_init)
    per_state = np.sum(spec.exo_trans * log_t, axis=1)
    for _ in range(horizon - 1):
        total += float(dist @ per_state)
        dist = dist @ spec.exo_trans
    return total


def _expected_loglik(weights, logs):
    mask = weights > 0
    return float(np.sum(weights[mask] * logs[mask]))


def check_sampling_likelihood(
    spec: EXBMDPSpec,
    policies,
    horizon: int,
    marginal: str = "occupancy",
    action_model: str = "mixture",
    tol: float = 1e-9,
    cap: int = PATH_CAP,
    instance=None,
) -> TheoryReport:
    """Mixture-dataset log-likelihood versus the per-policy average, by enumeration.

    ``action_model='mixture'`` scores the pooled dataset with the pooled
    behavior (the mixture policy); ``'per_policy'`` scores each trajectory
    with the policy that generated it, which makes both sides coincide.
    """
    policies = list(policies)
    check_equal_action_marginals(spec, policies, marginal)
    if action_model not in ("mixture", "per_policy"):
        raise ValueError(f"unknown action_model {action_model!r}")
    states, actions = _paths(spec.n_endo, spec.n_act, horizon, cap)
    exo = _exo_expected_loglik(spec, horizon)
    n = len(policies)
    mix = sum(p.probs for p in policies) / n

    per_policy, probs_each = [], []
    for p in policies:
        base, log_act = _path_logs(spec, states, actions, p.probs)
        prob = np.exp(base + log_act)
        probs_each.append(prob)
        per_policy.append(_expected_loglik(prob, base + log_act) + exo)
    rhs = float(np.mean(per_policy))

    if action_model == "per_policy":
        lhs = rhs
    else:
        p_mix = sum(probs_each) / n
        base, log_act = _path_logs(spec, states, actions, mix)
        lhs = _expected_loglik(p_mix, base + log_act) + exo
    margin = rhs - lhs
    return TheoryReport(
        "sampling_likelihood", lhs, rhs, tol, margin >= -tol, instance or {},
        {"margin": margin, "n_paths": int(len(states)), "marginal": marginal, "action_model": action_model},
    )


def mutual_information(policy, state_dist) -> float:
    """``I(a; s+)`` in nats for ``s+ ~ state_dist`` and ``a ~ policy(.|s+)``."""
    probs = policy.probs if isinstance(policy, PolicyTable) else np.asarray(policy, dtype=float)
    state_dist = np.asarray(state_dist, dtype=float)
    p_a = state_dist @ probs
    joint = state_dist[:, None] * probs
    mask = joint > 0
    ratio = probs[mask] / np.broadcast_to(p_a, probs.shape)[mask]
    return float(np.sum(joint[mask] * np.log(ratio)))


def check_mixture_mi(spec: EXBMDPSpec, policies, state_dist, tol: float = 1e-10, instance=None) -> TheoryReport:
    """Mixture-policy mutual information against the average per-policy value."""
    policies = list(policies)
    state_dist = np.asarray(state_dist, dtype=float)
    marginals = np.array([action_marginal(p, state_dist) for p in policies])
    if np.max(np.abs(marginals - marginals[0])) > ASSUMPTION_TOL:
        raise AssumptionViolated("policies have different action marginals under the supplied state distribution")
    mix = PolicyTable(sum(p.probs for p in policies) / len(policies))
    lhs = mutual_information(mix, state_dist)
    each = [mutual_information(p, state_dist) for p in policies]
    rhs = float(np.mean(each))
    return TheoryReport("mixture_mi", lhs, rhs, tol, lhs <= rhs + tol, instance or {}, {"per_policy": each})


# ---------------------------------------------------------------------------
# seeded instance generators

def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def lemma_instance(seed: int, max_states: int = 6, max_act: int = 3):
    rng = _rng(seed, 1)
    n_endo = int(rng.integers(1, max_states + 1))
    n_act = int(rng.integers(1, max_act + 1))
    gamma = float(rng.uniform(0.0, 0.95))
    spec = random_spec(n_endo, 1, n_act, rng, drift="static", discount=gamma, concentration=1.0)
    trans_tilde = rng.dirichlet(np.ones(n_endo), size=(n_endo, n_act))
    policy = PolicyTable(rng.dirichlet(np.ones(n_act), size=n_endo))
    return spec, trans_tilde, policy, {"seed": seed, "n_endo": n_endo, "n_act": n_act, "discount": gamma}


def bound_instance(seed: int, max_states: int = 5, max_act: int = 3):
    rng = _rng(seed, 2)
    n_endo = int(rng.integers(2, max_states + 1))
    n_act = int(rng.integers(2, max_act + 1))
    gamma = float(rng.uniform(0.5, 0.95))
    spec = random_spec(n_endo, 1, n_act, rng, drift="static", discount=gamma, n_goals=2)
    noise = rng.dirichlet(np.ones(n_endo), size=(n_endo, n_act))
    weight = float(rng.uniform(0.05, 0.6))
    trans_tilde = (1 - weight) * spec.endo_trans + weight * noise
    lam = float(rng.uniform(0.5, 5.0))
    return spec, trans_tilde, lam, {"seed": seed, "n_endo": n_endo, "n_act": n_act, "discount": gamma, "lam": lam, "corruption": weight}


def _balanced_policies(rng, weights, n_act: int, n_policies: int) -> list:
    """Stochastic policies sharing one action marginal under ``weights``."""
    n_states = len(weights)
    base = rng.dirichlet(np.ones(n_act) * 2.0)
    policies = []
    for _ in range(n_policies):
        raw = rng.normal(size=(n_states, n_act))
        dev = raw - raw.mean(axis=1, keepdims=True)
        dev = dev - np.outer(np.ones(n_states), weights @ dev)
        scale = 0.95 * base.min() / max(np.abs(dev).max(), 1e-300)
        probs = base + min(1.0, scale) * dev
        policies.append(PolicyTable(probs / probs.sum(axis=1, keepdims=True)))
    return policies


def sampling_instance(seed: int, max_paths: int = 60_000):
    """Spec and behavior policies satisfying the equal-marginal assumption.

    Even seeds use action-independent endogenous dynamics (so every policy has
    the same occupancy) and test marginals under occupancy; odd seeds use
    action-dependent dynamics with the uniform state weighting.
    """
    rng = _rng(seed, 3)
    n_endo = int(rng.integers(2, 5))
    n_act = int(rng.integers(2, 4))
    horizon = 5
    while (n_endo * n_act) ** horizon > max_paths:
        horizon -= 1
    n_policies = int(rng.integers(2, 5))
    gamma = float(rng.uniform(0.5, 0.95))
    marginal = "occupancy" if seed % 2 == 0 else "uniform"
    spec = random_spec(n_endo, 2, n_act, rng, drift="fast_random_walk", discount=gamma, concentration=1.0,
                       action_influence=0.0 if marginal == "occupancy" else 1.0)
    if marginal == "occupancy":
        weights = state_marginal(spec, PolicyTable.uniform(n_endo, n_act), "occupancy")
    else:
        weights = np.full(n_endo, 1.0 / n_endo)
    policies = _balanced_policies(rng, weights, n_act, n_policies)
    desc = {"seed": seed, "n_endo": n_endo, "n_act": n_act, "n_policies": n_policies,
            "horizon": horizon, "marginal": marginal, "discount": gamma}
    return spec, policies, weights, desc


def symmetric_swap_instance(discount: float = 0.9):
    """Two states with action-free uniform dynamics and two action-swapped deterministic policies."""
    endo = np.full((2, 2, 2), 0.5)
    spec = EXBMDPSpec(endo, np.eye(1), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0], [1]]),
                      np.array([0.5, 0.5]), np.array([1.0]), discount)
    policies = [PolicyTable.from_actions([0, 1], 2), PolicyTable.from_actions([1, 0], 2)]
    return spec, policies


# ---------------------------------------------------------------------------
# suites

SUITES = ("telescoping", "performance_bound", "sampling_likelihood", "mixture_mi")
DEFAULT_COUNTS = {"telescoping": 1000, "performance_bound": 100, "sampling_likelihood": 100, "mixture_mi": 100}


def run_suite(name: str, count: int, seed: int = 0, corrupt_zero_penalty: bool = False):
    """Yield reports for ``count`` seeded instances of check ``name``."""
    for i in range(count):
        s = seed * 1_000_003 + i
        if name == "telescoping":
            spec, tt, pol, desc = lemma_instance(s)
            yield check_telescoping(spec, tt, pol, instance=desc)
        elif name == "performance_bound":
            spec, tt, lam, desc = bound_instance(s)
            if corrupt_zero_penalty:
                tt = _adversarial_model(spec, _rng(s, 4))
                desc = dict(desc, corruption="adversarial", zero_penalty=True)
            yield check_performance_bound(spec, tt, lam, force_zero_penalty=corrupt_zero_penalty, instance=desc)
        elif name == "sampling_likelihood":
            spec, pols, _, desc = sampling_instance(s)
            yield check_sampling_likelihood(spec, pols, desc["horizon"], marginal=desc["marginal"], instance=desc)
        elif name == "mixture_mi":
            spec, pols, weights, desc = sampling_instance(s)
            yield check_mixture_mi(spec, pols, weights, instance=desc)
        else:
            raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")


def _adversarial_model(spec: EXBMDPSpec, rng) -> np.ndarray:
    """Learned dynamics that promise a big reward behind the worst action."""
    worst_q = q_values(spec.endo_trans, spec.reward, value_iteration(spec.endo_trans, spec.reward, spec.discount)[0], spec.discount)
    goal = int(np.argmax(spec.reward.max(axis=1)))
    tt = spec.endo_trans.copy()
    for s in range(spec.n_endo):
        bad = int(np.argmin(worst_q[s]))
        tt[s, bad] = 0.0
        tt[s, bad, goal] = 1.0
    return tt
