"""Ensemble uncertainty, the penalized MDP, exact planning and evaluation."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from ._validation import check_discount, check_nonnegative
from .exbmdp import (
    EXBMDPSpec,
    PolicyTable,
    greedy_policy,
    latent_return,
    lift_policy,
    q_values,
    value_iteration,
)
from .exceptions import ConfigurationError, PlanningError
from .sepmodel import EnsembleModel

ESTIMATORS = ("md", "vlp")


def md_rows(rows) -> float:
    """Summed squared distance of each member row from the ensemble mean row."""
    rows = np.asarray(rows, dtype=float)
    if np.all(rows == rows[0]):
        return 0.0  # the float mean of equal rows can be off by an ulp
    return float(np.sum((rows - rows.mean(axis=0)) ** 2))


def vlp_rows(rows, law=None) -> float:
    """Across-member variance of log-probability, averaged over successors.

    ``law`` weights the successors; the default is the ensemble-mean row.
    Returns ``inf`` when a member gives zero probability to a weighted successor.
    """
    rows = np.asarray(rows, dtype=float)
    law = rows.mean(axis=0) if law is None else np.asarray(law, dtype=float)
    support = law > 0
    if np.any(rows[:, support] <= 0):
        return float("inf")
    if np.all(rows == rows[0]):
        return 0.0
    logs = np.log(rows[:, support])
    return float(law[support] @ logs.var(axis=0))


def uncertainty_md(model: EnsembleModel, s: int, a: int) -> float:
    """Mean-disagreement penalty of cell ``(s, a)``."""
    if model.K < 2:
        warnings.warn("ensemble of one member has no disagreement; returning 0", stacklevel=2)
        return 0.0
    return md_rows(model.members[:, s, a, :])


def uncertainty_vlp(model: EnsembleModel, s: int, a: int) -> float:
    """Log-probability variance penalty of cell ``(s, a)`` under the mean successor law.

    Returns ``inf`` when a member assigns zero probability to a successor the
    ensemble mean can reach (possible only with ``alpha = 0``).
    """
    if model.K < 2:
        warnings.warn("ensemble of one member has no disagreement; returning 0", stacklevel=2)
        return 0.0
    return vlp_rows(model.members[:, s, a, :])


_ESTIMATOR_FNS = {"md": uncertainty_md, "vlp": uncertainty_vlp}


@dataclass(frozen=True, eq=False)
class UncertaintyTable:
    u: np.ndarray
    estimator: str

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.u)))


def uncertainty_table(model: EnsembleModel, estimator: str = "md") -> UncertaintyTable:
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    fn = _ESTIMATOR_FNS[estimator]
    with warnings.catch_warnings():
        if model.K < 2:
            warnings.simplefilter("ignore")
        u = np.array([[fn(model, s, a) for a in range(model.n_act)] for s in range(model.n_states)])
    return UncertaintyTable(u, estimator)


def mean_uncertainty(model: EnsembleModel, ds, estimator: str = "md") -> float:
    """Average uncertainty over the dataset's own (state, action) visits."""
    table = uncertainty_table(model, estimator).u
    total, n = 0.0, 0
    for traj in ds.trajectories:
        states = model.state_of(ds.decode(traj.observations))
        total += float(table[states, traj.actions].sum())
        n += len(traj)
    return total / n


@dataclass(frozen=True, eq=False)
class PenalizedMDP:
    """Ensemble-mean dynamics with reward ``r_hat - lam * u``."""

    trans: np.ndarray
    reward_hat: np.ndarray
    uncertainty: UncertaintyTable
    lam: float
    discount: float
    init: np.ndarray | None = None

    @property
    def reward(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.reward_hat - self.lam * self.uncertainty.u

    def to_dict(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": [repr(float(v)) for v in np.ravel(a)]}

        return {
            "kind": "penalized_mdp",
            "estimator": self.uncertainty.estimator,
            "lam": repr(self.lam),
            "discount": repr(self.discount),
            "trans": enc(self.trans),
            "reward_hat": enc(self.reward_hat),
            "uncertainty": enc(self.uncertainty.u),
            "reward": enc(self.reward),
        }


def build_penalized(model: EnsembleModel, estimator: str = "md", lam: float = 1.0, discount: float = 0.9) -> PenalizedMDP:
    check_nonnegative(lam, "lam")
    check_discount(discount)
    trans = model.mean_trans
    trans = trans / trans.sum(axis=-1, keepdims=True)
    return PenalizedMDP(trans, model.reward, uncertainty_table(model, estimator), float(lam), float(discount), model.init)


def plan(pm: PenalizedMDP, tol: float = 1e-10) -> PolicyTable:
    """Greedy policy from value iteration on the penalized MDP."""
    reward = pm.reward
    if not np.all(np.isfinite(reward)):
        raise PlanningError(
            "penalized reward has non-finite entries (zero-probability successors under vlp); "
            "refit the model with alpha > 0"
        )
    values, _ = value_iteration(pm.trans, reward, pm.discount, tol=tol)
    return greedy_policy(q_values(pm.trans, reward, values, pm.discount))


def penalized_values(pm: PenalizedMDP, tol: float = 1e-10):
    """``(values, residuals)`` of value iteration, for inspection."""
    return value_iteration(pm.trans, pm.reward, pm.discount, tol=tol)


def save_penalized(pm: PenalizedMDP, path):
    atomic_write_text(path, json.dumps(pm.to_dict(), sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# evaluation in the true environment

def normalized_score(score: float, s_min: float, s_max: float) -> float:
    """``(score - s_min) / (s_max - s_min)``."""
    if s_max <= s_min:
        raise ConfigurationError(f"cannot normalize: max {s_max} <= min {s_min}")
    return (score - s_min) / (s_max - s_min)


def normalization_bounds(tier_stats) -> tuple:
    """Min and max per-episode return across the tiers' summary statistics."""
    tier_stats = list(tier_stats)
    if not tier_stats:
        raise ConfigurationError("normalization needs at least one dataset's statistics")
    return min(s["min"] for s in tier_stats), max(s["max"] for s in tier_stats)


def latent_policy(spec: EXBMDPSpec, decoder, model: EnsembleModel, policy: PolicyTable) -> np.ndarray:
    """Map a policy over the model's learned states onto true latent pairs.

    Row ``endo * n_exo + exo`` of the result is the learned policy's row for
    whatever learned state the observation of ``(endo, exo)`` decodes to.
    """
    decoder = np.asarray(decoder, dtype=np.int64)
    factors = decoder[spec.emission.ravel()]
    return policy.probs[model.state_of(factors)]


def evaluate_policy(spec: EXBMDPSpec, policy, bounds) -> tuple:
    """Exact return of ``policy`` and its normalized score.

    ``policy`` is either a table over endogenous states or over joint latent
    states ``z = endo * n_exo + exo``; ``bounds`` is ``(s_min, s_max)``.
    """
    probs = policy.probs if isinstance(policy, PolicyTable) else np.asarray(policy, dtype=float)
    if probs.shape[0] == spec.n_endo:
        probs = lift_policy(spec, probs)
    elif probs.shape[0] != spec.n_endo * spec.n_exo:
        raise ConfigurationError(f"policy has {probs.shape[0]} rows; spec has {spec.n_endo} endogenous states")
    ret = latent_return(spec, probs)
    return ret, normalized_score(ret, *bounds)


def distractor_swap_eval(spec: EXBMDPSpec, policy: PolicyTable, new_exo_trans) -> tuple:
    """Exact returns before and after replacing the exogenous chain.

    Both returns are computed on the full joint chain, so the exogenous
    dynamics genuinely enter the computation.
    """
    new_exo_trans = np.asarray(new_exo_trans, dtype=float)
    if new_exo_trans.ndim != 2 or new_exo_trans.shape[0] != new_exo_trans.shape[1]:
        raise ConfigurationError(f"exogenous table must be square, got shape {new_exo_trans.shape}")
    if policy.n_states != spec.n_endo or policy.n_act != spec.n_act:
        raise ConfigurationError(
            f"policy shape {policy.probs.shape} does not match spec ({spec.n_endo}, {spec.n_act})"
        )
    swapped = spec.with_exo(new_exo_trans)
    before = latent_return(spec, lift_policy(spec, policy))
    after = latent_return(swapped, lift_policy(swapped, policy))
    return before, after
