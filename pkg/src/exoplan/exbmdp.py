"""Ground-truth exogenous block MDPs: representation, simulation and exact DP.

Everything here is tabular.  The latent state is a pair ``(endo, exo)``; the
endogenous factor is driven by actions, the exogenous factor drifts on its own
Markov chain, and reward and policies only ever see the endogenous factor.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._io import atomic_write_text
from ._validation import check_discount, check_rows
from .exceptions import ConfigurationError, FormatVersionError

SPEC_FORMAT_VERSION = 1

ROW_TOL = 1e-12
DRIFT_PROFILES = ("static", "slow_cycle", "fast_random_walk")


class LatentState(NamedTuple):
    endo: int
    exo: int


@dataclass(frozen=True, eq=False)
class EXBMDPSpec:
    """Full factored MDP.

    Attributes
    ----------
    endo_trans : ndarray, shape (n_endo, n_act, n_endo)
        ``endo_trans[s, a, s2]`` is the probability of moving from ``s`` to
        ``s2`` under action ``a``.
    exo_trans : ndarray, shape (n_exo, n_exo)
    reward : ndarray, shape (n_endo, n_act)
        Entries in [0, 1].
    emission : ndarray of int, shape (n_endo, n_exo)
        Observation id emitted by each latent pair.
    init_endo, init_exo : ndarray
        Initial distributions of the two factors.
    discount : float
    """

    endo_trans: np.ndarray
    exo_trans: np.ndarray
    reward: np.ndarray
    emission: np.ndarray
    init_endo: np.ndarray
    init_exo: np.ndarray
    discount: float = 0.9

    def __post_init__(self):
        for name in ("endo_trans", "exo_trans", "reward", "init_endo", "init_exo"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        emission = np.array(self.emission, dtype=np.int64)
        emission.setflags(write=False)
        object.__setattr__(self, "emission", emission)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_endo(self) -> int:
        return self.endo_trans.shape[0]

    @property
    def n_act(self) -> int:
        return self.endo_trans.shape[1]

    @property
    def n_exo(self) -> int:
        return self.exo_trans.shape[0]

    @property
    def n_obs(self) -> int:
        return int(self.emission.max()) + 1

    def decode(self, obs: int) -> LatentState:
        """Invert the emission map (exact under block structure)."""
        hits = np.argwhere(self.emission == obs)
        if len(hits) != 1:
            raise ValueError(f"observation {obs} does not decode to a unique latent state")
        return LatentState(int(hits[0][0]), int(hits[0][1]))

    def with_exo(self, exo_trans, init_exo=None, emission=None) -> "EXBMDPSpec":
        """Copy of this spec with the exogenous chain replaced.

        When the number of exogenous states changes, a fresh dense emission and a
        uniform initial distribution are used unless given.
        """
        exo_trans = np.asarray(exo_trans, dtype=float)
        n_exo = exo_trans.shape[0]
        if init_exo is None:
            init_exo = self.init_exo if n_exo == self.n_exo else np.full(n_exo, 1.0 / n_exo)
        if emission is None:
            emission = (
                self.emission
                if n_exo == self.n_exo
                else np.arange(self.n_endo * n_exo).reshape(self.n_endo, n_exo)
            )
        return EXBMDPSpec(
            self.endo_trans, exo_trans, self.reward, emission,
            self.init_endo, init_exo, self.discount,
        )

    @cached_property
    def _endo_cdf(self) -> np.ndarray:
        return np.cumsum(self.endo_trans, axis=-1)

    @cached_property
    def _exo_cdf(self) -> np.ndarray:
        return np.cumsum(self.exo_trans, axis=-1)

    def fingerprint(self) -> str:
        return hashlib.sha256(_canonical_bytes(spec_to_dict(self))).hexdigest()


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Stochastic policy ``probs[s, a]`` over a (possibly learned) state space."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D (states, actions)")
        check_rows(probs, "policy", tol=ROW_TOL)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_act(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_act: int) -> "PolicyTable":
        return cls(np.full((n_states, n_act), 1.0 / n_act))

    @classmethod
    def deterministic(cls, actions) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        n_act = int(actions.max()) + 1 if actions.size else 1
        return cls.from_actions(actions, n_act)

    @classmethod
    def from_actions(cls, actions, n_act: int) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_act))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    """Discounted state-action visitation.

    ``rho`` is the raw discounted sum; ``scaled()`` multiplies by ``1 - gamma``
    so the table sums to one.
    """

    rho: np.ndarray
    discount: float

    def scaled(self) -> np.ndarray:
        return (1.0 - self.discount) * self.rho

    def expect(self, table) -> float:
        """Unscaled discounted expectation ``sum rho * table``."""
        return float(np.sum(self.rho * np.asarray(table)))


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return not self.violations

    def add(self, kind: str, where, message: str):
        self.violations.append({"kind": kind, "where": where, "message": message})


def validate(spec: EXBMDPSpec) -> ValidationReport:
    """Collect every invariant violation of ``spec``; never raises."""
    report = ValidationReport()
    n_endo, n_act, n_exo = spec.n_endo, spec.n_act, spec.n_exo

    shapes = {
        "endo_trans": (spec.endo_trans.shape, (n_endo, n_act, n_endo)),
        "exo_trans": (spec.exo_trans.shape, (n_exo, n_exo)),
        "reward": (spec.reward.shape, (n_endo, n_act)),
        "emission": (spec.emission.shape, (n_endo, n_exo)),
        "init_endo": (spec.init_endo.shape, (n_endo,)),
        "init_exo": (spec.init_exo.shape, (n_exo,)),
    }
    bad_shape = False
    for name, (got, want) in shapes.items():
        if got != want:
            report.add("shape", name, f"{name} has shape {got}, expected {want}")
            bad_shape = True
    if bad_shape:
        return report

    for s in range(n_endo):
        for a in range(n_act):
            row = spec.endo_trans[s, a]
            if np.any(row < 0):
                report.add("negative", ("endo_trans", s, a), f"endo_trans row (s+={s}, a={a}) has negative entries")
            if abs(row.sum() - 1.0) > ROW_TOL:
                report.add("row_sum", ("endo_trans", s, a), f"endo_trans row (s+={s}, a={a}) sums to {row.sum()!r}")
    for s in range(n_exo):
        row = spec.exo_trans[s]
        if np.any(row < 0):
            report.add("negative", ("exo_trans", s), f"exo_trans row (s-={s}) has negative entries")
        if abs(row.sum() - 1.0) > ROW_TOL:
            report.add("row_sum", ("exo_trans", s), f"exo_trans row (s-={s}) sums to {row.sum()!r}")

    for s, a in np.argwhere((spec.reward < 0) | (spec.reward > 1)):
        report.add("reward_range", ("reward", int(s), int(a)), f"reward (s+={s}, a={a}) outside [0, 1]")

    for name in ("init_endo", "init_exo"):
        dist = getattr(spec, name)
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > ROW_TOL:
            report.add("init", name, f"{name} is not a distribution (sum {dist.sum()!r})")

    if not 0.0 <= spec.discount < 1.0:
        report.add("discount", "discount", f"discount {spec.discount} outside [0, 1)")

    seen: dict = {}
    for (s_endo, s_exo), obs in np.ndenumerate(spec.emission):
        if obs < 0:
            report.add("emission", (s_endo, s_exo), f"negative observation id {obs}")
        if obs in seen:
            report.add(
                "block_structure", (seen[obs], (s_endo, s_exo)),
                f"latent states {seen[obs]} and {(s_endo, s_exo)} share observation {obs}",
            )
        else:
            seen[obs] = (s_endo, s_exo)
    return report


def _check_state(spec: EXBMDPSpec, state, action: int):
    if not (0 <= state[0] < spec.n_endo and 0 <= state[1] < spec.n_exo):
        raise IndexError(f"latent state {tuple(state)} out of range")
    if not 0 <= action < spec.n_act:
        raise IndexError(f"action {action} out of range")


def step(spec: EXBMDPSpec, state, action: int, rng: np.random.Generator):
    """Advance one step; returns ``(next_state, reward, next_observation)``."""
    endo, exo = int(state[0]), int(state[1])
    _check_state(spec, (endo, exo), action)
    next_endo = sample_index(spec._endo_cdf[endo, action], rng)
    next_exo = sample_index(spec._exo_cdf[exo], rng)
    reward = float(spec.reward[endo, action])
    return LatentState(next_endo, next_exo), reward, int(spec.emission[next_endo, next_exo])


def sample_index(cdf: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one index from a cumulative probability row."""
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(cdf) - 1)


def reset(spec: EXBMDPSpec, rng: np.random.Generator):
    endo = sample_index(np.cumsum(spec.init_endo), rng)
    exo = sample_index(np.cumsum(spec.init_exo), rng)
    return LatentState(endo, exo), int(spec.emission[endo, exo])


# ---------------------------------------------------------------------------
# exact dynamic programming on the endogenous chain

def policy_matrix(trans: np.ndarray, policy) -> np.ndarray:
    """State-to-state kernel ``P[s, s2] = sum_a pi(a|s) T(s2|s, a)``."""
    probs = _probs(policy)
    return np.einsum("sa,sat->st", probs, trans)


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, PolicyTable) else np.asarray(policy, dtype=float)


def policy_values(trans, reward, policy, discount: float) -> np.ndarray:
    """Solve ``(I - gamma P_pi) V = r_pi`` for the state values."""
    check_discount(discount)
    probs = _probs(policy)
    p_pi = policy_matrix(trans, probs)
    r_pi = np.sum(probs * reward, axis=1)
    n = len(r_pi)
    values = np.linalg.solve(np.eye(n) - discount * p_pi, r_pi)
    # one step of iterative refinement keeps the residual at machine level
    resid = r_pi - (values - discount * p_pi @ values)
    values = values + np.linalg.solve(np.eye(n) - discount * p_pi, resid)
    return values


def exact_return(spec: EXBMDPSpec, policy, trans=None) -> float:
    """Expected discounted return from the initial endogenous distribution."""
    trans = spec.endo_trans if trans is None else trans
    values = policy_values(trans, spec.reward, policy, spec.discount)
    return float(spec.init_endo @ values)


def occupancy(trans, policy, discount: float, init, tol: float = 1e-12, max_iter: int = 1_000_000) -> OccupancyMeasure:
    """Discounted state-action occupancy by forward flow propagation."""
    check_discount(discount)
    probs = _probs(policy)
    p_pi = policy_matrix(trans, probs)
    flow = np.asarray(init, dtype=float).copy()
    state_occ = np.zeros_like(flow)
    weight = 1.0
    for _ in range(max_iter):
        state_occ += weight * flow
        weight *= discount
        flow = flow @ p_pi
        if weight * flow.sum() <= tol * (1.0 - discount):
            break
    else:  # pragma: no cover - geometric decay always terminates
        raise ConfigurationError("occupancy propagation did not converge")
    return OccupancyMeasure(state_occ[:, None] * probs, discount)


def q_values(trans, reward, values, discount: float) -> np.ndarray:
    return reward + discount * np.einsum("sat,t->sa", trans, values)


def value_iteration(trans, reward, discount: float, tol: float = 1e-10, max_iter: int = 100_000, sign: float = 1.0):
    """Optimal values by value iteration.

    Returns ``(values, residuals)`` where ``residuals`` is the sup-norm Bellman
    residual after every sweep.  ``sign=-1`` computes the pessimal values.
    """
    check_discount(discount)
    reward = np.asarray(reward, dtype=float)
    if not np.all(np.isfinite(reward)):
        raise ConfigurationError("reward table has non-finite entries")
    values = np.zeros(reward.shape[0])
    residuals = []
    for _ in range(max_iter):
        q = q_values(trans, reward, values, discount)
        new = q.max(axis=1) if sign > 0 else q.min(axis=1)
        resid = float(np.max(np.abs(new - values))) if len(values) else 0.0
        values = new
        residuals.append(resid)
        if resid <= tol:
            break
    return values, residuals


def greedy_policy(q: np.ndarray, sign: float = 1.0, tie_tol: float = 1e-12) -> PolicyTable:
    """Deterministic greedy policy; ties go to the lowest action id."""
    q = sign * q
    best = q.max(axis=1, keepdims=True)
    actions = np.argmax(q >= best - tie_tol, axis=1)
    return PolicyTable.from_actions(actions, q.shape[1])


def optimal_policy(spec: EXBMDPSpec, tol: float = 1e-12) -> PolicyTable:
    values, _ = value_iteration(spec.endo_trans, spec.reward, spec.discount, tol=tol)
    return greedy_policy(q_values(spec.endo_trans, spec.reward, values, spec.discount))


def pessimal_policy(spec: EXBMDPSpec, tol: float = 1e-12) -> PolicyTable:
    values, _ = value_iteration(spec.endo_trans, spec.reward, spec.discount, tol=tol, sign=-1.0)
    return greedy_policy(q_values(spec.endo_trans, spec.reward, values, spec.discount), sign=-1.0)


# ---------------------------------------------------------------------------
# joint latent chain, for policies that look at both factors

def joint_transitions(spec: EXBMDPSpec) -> np.ndarray:
    """Kernel on ``z = endo * n_exo + exo``; shape (n_z, n_act, n_z)."""
    n_endo, n_exo, n_act = spec.n_endo, spec.n_exo, spec.n_act
    # T(z2|z,a) = T(e2|e,a) * T(x2|x)
    joint = np.einsum("eaf,xy->exafy", spec.endo_trans, spec.exo_trans)
    return joint.reshape(n_endo * n_exo, n_act, n_endo * n_exo)


def latent_return(spec: EXBMDPSpec, latent_policy) -> float:
    """Exact return of a policy over joint latent states ``z``."""
    probs = _probs(latent_policy)
    trans = joint_transitions(spec)
    reward = np.repeat(spec.reward, spec.n_exo, axis=0)
    init = np.outer(spec.init_endo, spec.init_exo).ravel()
    values = policy_values(trans, reward, probs, spec.discount)
    return float(init @ values)


def lift_policy(spec: EXBMDPSpec, policy) -> np.ndarray:
    """Endogenous policy as a table over joint latent states."""
    return np.repeat(_probs(policy), spec.n_exo, axis=0)


# ---------------------------------------------------------------------------
# generation

def random_spec(
    n_endo: int,
    n_exo: int,
    n_act: int,
    rng: np.random.Generator,
    drift: str = "fast_random_walk",
    discount: float = 0.9,
    concentration: float = 0.3,
    n_goals: int = 1,
    action_influence: float = 1.0,
) -> EXBMDPSpec:
    """Random EX-BMDP with sparse reward and a chosen exogenous drift profile.

    Endogenous rows are Dirichlet(``concentration``) so that actions matter;
    ``action_influence < 1`` blends them with a shared per-state row, making
    the endogenous chain only weakly action-driven.  Reward is 1 on ``n_goals`` random (s+, a) cells and small elsewhere, which
    keeps the uniform policy well below optimal.
    """
    if min(n_endo, n_exo, n_act) < 1:
        raise ConfigurationError(f"invalid sizes n_endo={n_endo}, n_exo={n_exo}, n_act={n_act}")
    if not 0.0 <= action_influence <= 1.0:
        raise ConfigurationError(f"action_influence must lie in [0, 1], got {action_influence}")
    endo = rng.dirichlet(np.full(n_endo, concentration), size=(n_endo, n_act))
    if action_influence < 1.0:
        shared = rng.dirichlet(np.full(n_endo, concentration), size=n_endo)
        endo = (1.0 - action_influence) * shared[:, None, :] + action_influence * endo
    endo = _fix_rows(endo)
    reward = 0.05 * rng.random((n_endo, n_act))
    goal_cells = rng.choice(n_endo * n_act, size=min(n_goals, n_endo * n_act), replace=False)
    reward.flat[goal_cells] = 1.0
    exo = exo_chain(n_exo, drift, rng)
    emission = rng.permutation(n_endo * n_exo).reshape(n_endo, n_exo)
    init_endo = _fix_rows(rng.dirichlet(np.ones(n_endo)))
    init_exo = np.full(n_exo, 1.0 / n_exo)
    return EXBMDPSpec(endo, exo, reward, emission, init_endo, init_exo, discount)


def exo_chain(n_exo: int, drift: str, rng: np.random.Generator) -> np.ndarray:
    if drift == "static":
        return np.eye(n_exo)
    if drift == "slow_cycle":
        chain = 0.9 * np.eye(n_exo) + 0.1 * np.roll(np.eye(n_exo), 1, axis=1)
        return _fix_rows(chain)
    if drift == "fast_random_walk":
        if n_exo == 1:
            return np.ones((1, 1))
        chain = rng.dirichlet(np.ones(n_exo), size=n_exo)
        # guarantee at least two successors per row
        chain = 0.5 * chain + 0.25 * np.eye(n_exo) + 0.25 * np.roll(np.eye(n_exo), 1, axis=1)
        return _fix_rows(chain)
    raise ConfigurationError(f"unknown drift profile {drift!r}; expected one of {DRIFT_PROFILES}")


def _fix_rows(arr: np.ndarray) -> np.ndarray:
    """Renormalize rows and push the rounding residue onto the largest entry."""
    arr = np.array(arr, dtype=float)
    arr /= arr.sum(axis=-1, keepdims=True)
    idx = np.argmax(arr, axis=-1)
    resid = 1.0 - arr.sum(axis=-1)
    np.put_along_axis(arr, idx[..., None], np.take_along_axis(arr, idx[..., None], -1) + resid[..., None], -1)
    return arr


# ---------------------------------------------------------------------------
# serialization

def _encode(arr) -> dict:
    arr = np.asarray(arr)
    if arr.dtype.kind in "iu":
        data = [int(x) for x in arr.ravel()]
    else:
        data = [repr(float(x)) for x in arr.ravel()]
    return {"shape": list(arr.shape), "data": data}


def _decode(obj: dict, dtype=float) -> np.ndarray:
    if dtype is float:
        values = [float(x) for x in obj["data"]]
    else:
        values = [int(x) for x in obj["data"]]
    return np.array(values, dtype=dtype).reshape(obj["shape"])


def spec_to_dict(spec: EXBMDPSpec) -> dict:
    return {
        "format_version": SPEC_FORMAT_VERSION,
        "kind": "exbmdp_spec",
        "discount": repr(spec.discount),
        "endo_trans": _encode(spec.endo_trans),
        "exo_trans": _encode(spec.exo_trans),
        "reward": _encode(spec.reward),
        "emission": _encode(spec.emission),
        "init_endo": _encode(spec.init_endo),
        "init_exo": _encode(spec.init_exo),
    }


def spec_from_dict(obj: dict) -> EXBMDPSpec:
    if obj.get("format_version") != SPEC_FORMAT_VERSION:
        raise FormatVersionError(f"spec format version {obj.get('format_version')!r}, expected {SPEC_FORMAT_VERSION}")
    return EXBMDPSpec(
        endo_trans=_decode(obj["endo_trans"]),
        exo_trans=_decode(obj["exo_trans"]),
        reward=_decode(obj["reward"]),
        emission=_decode(obj["emission"], int),
        init_endo=_decode(obj["init_endo"]),
        init_exo=_decode(obj["init_exo"]),
        discount=float(obj["discount"]),
    )


def _canonical_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_spec(spec: EXBMDPSpec, path, extra: dict | None = None):
    obj = spec_to_dict(spec)
    if extra:
        obj.update(extra)
    atomic_write_text(path, dumps_json(obj))


def load_spec(path) -> EXBMDPSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))
