"""Behavior policies at three quality tiers, offline collection, dataset files."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from ._validation import check_positive_int
from .exbmdp import (
    EXBMDPSpec,
    PolicyTable,
    exact_return,
    greedy_policy,
    optimal_policy,
    pessimal_policy,
    policy_values,
    q_values,
    reset,
    sample_index,
    step,
)
from .exceptions import (
    ConstructionError,
    DatasetParseError,
    FingerprintMismatchError,
    FormatVersionError,
)

DATASET_FORMAT_VERSION = 1
TIERS = ("random", "medium_replay", "medium")
MEDIUM_BAND = (0.4, 0.6)
TRAJECTORIES_PER_RANDOM_POLICY = 10


@dataclass(eq=False)
class Trajectory:
    policy_id: str
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if not (len(self.observations) == len(self.actions) == len(self.rewards)):
            raise ValueError(
                f"trajectory lengths differ: {len(self.observations)} observations, "
                f"{len(self.actions)} actions, {len(self.rewards)} rewards"
            )
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise ValueError("trajectory rewards must lie in [0, 1]")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.policy_id == other.policy_id
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
        )

    def discounted_return(self, discount: float) -> float:
        weights = discount ** np.arange(len(self.rewards))
        return float(np.sum(weights * self.rewards))

    def chunk(self, start: int, length: int) -> "Trajectory":
        stop = start + length
        return Trajectory(
            self.policy_id, self.observations[start:stop], self.actions[start:stop], self.rewards[start:stop]
        )


@dataclass
class BehaviorPolicySet:
    tier: str
    policies: list
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.policies:
            raise ValueError("behavior policy set is empty")
        if not self.ids:
            self.ids = [f"{self.tier}-{i}" for i in range(len(self.policies))]
        shapes = {p.probs.shape for p in self.policies}
        if len(shapes) != 1:
            raise ValueError(f"policies have mismatched shapes {sorted(shapes)}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("policy ids must be unique")

    def __len__(self):
        return len(self.policies)


def return_stats(returns) -> dict:
    """Per-episode return summary (episodes, mean, std, min, quartiles, max)."""
    returns = np.asarray(returns, dtype=float)
    p25, median, p75 = np.percentile(returns, [25, 50, 75])
    return {
        "episodes": int(len(returns)),
        "mean": float(np.mean(returns)),
        "std": float(np.std(returns)),
        "min": float(np.min(returns)),
        "p25": float(p25),
        "median": float(median),
        "p75": float(p75),
        "max": float(np.max(returns)),
    }


@dataclass(eq=False)
class OfflineDataset:
    """Ordered trajectories plus everything a learner may legitimately see.

    ``decoder[obs]`` gives the two factor ids of an observation.  The order of
    the two factors is arbitrary, so a learner cannot tell which one is
    action-driven without looking at the data.
    """

    trajectories: list
    tier: str
    env_fingerprint: str
    decoder: np.ndarray
    discount: float
    policy_ids: list
    horizon: int
    seed: int | None = None

    def __post_init__(self):
        self.decoder = np.asarray(self.decoder, dtype=np.int64)
        registered = set(self.policy_ids)
        for i, traj in enumerate(self.trajectories):
            if traj.policy_id not in registered:
                raise ValueError(f"trajectory {i} has unregistered policy id {traj.policy_id!r}")

    def __len__(self):
        return len(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            self.tier == other.tier
            and self.env_fingerprint == other.env_fingerprint
            and np.array_equal(self.decoder, other.decoder)
            and self.discount == other.discount
            and list(self.policy_ids) == list(other.policy_ids)
            and self.horizon == other.horizon
            and self.seed == other.seed
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    @property
    def factor_sizes(self) -> tuple:
        return int(self.decoder[:, 0].max()) + 1, int(self.decoder[:, 1].max()) + 1

    def episode_returns(self) -> np.ndarray:
        return np.array([t.discounted_return(self.discount) for t in self.trajectories])

    @property
    def stats(self) -> dict:
        return return_stats(self.episode_returns())

    def decode(self, observations) -> np.ndarray:
        """Factor pairs for a sequence of observation ids, shape (T, 2)."""
        return self.decoder[np.asarray(observations, dtype=np.int64)]

    def fingerprint(self) -> str:
        return hashlib.sha256(dataset_to_text(self).encode()).hexdigest()


# ---------------------------------------------------------------------------
# behavior policies

def _mix(p: PolicyTable, q: PolicyTable, weight: float) -> PolicyTable:
    probs = (1.0 - weight) * p.probs + weight * q.probs
    return PolicyTable(probs / probs.sum(axis=1, keepdims=True))


def _bisect_mix(spec, low: PolicyTable, high: PolicyTable, target: float, iters: int = 80):
    """Smallest-found weight ``w`` with return(mix(low, high, w)) >= target."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if exact_return(spec, _mix(low, high, mid)) >= target:
            hi = mid
        else:
            lo = mid
    return _mix(low, high, hi)


def medium_policy(spec: EXBMDPSpec, band=MEDIUM_BAND):
    """Mix of the optimal policy with a weak anchor at about half the optimal return.

    The anchor is the uniform policy, or the pessimal policy when uniform is
    already above the band.  Returns ``(policy, anchor)``.
    """
    best = optimal_policy(spec)
    eta_best = exact_return(spec, best)
    if eta_best <= 0:
        raise ConstructionError(f"optimal return is {eta_best} for spec {spec.fingerprint()[:12]}; no medium policy")
    anchor = PolicyTable.uniform(spec.n_endo, spec.n_act)
    if exact_return(spec, anchor) / eta_best > band[0]:
        anchor = pessimal_policy(spec)
        if exact_return(spec, anchor) / eta_best > band[0]:
            raise ConstructionError(
                f"every policy of spec {spec.fingerprint()[:12]} earns more than "
                f"{band[0]:.0%} of optimal; medium tier unreachable"
            )
    target = 0.5 * (band[0] + band[1]) * eta_best
    return _bisect_mix(spec, anchor, best, target), anchor


def improvement_snapshots(spec: EXBMDPSpec, start: PolicyTable, goal_return: float, count: int) -> list:
    """Soft policy-iteration snapshots from ``start`` up to ``goal_return``.

    Snapshot ``k`` is the first policy along the improvement path whose return
    reaches the ``k``-th of ``count`` evenly spaced targets, so returns along
    the list never decrease.
    """
    eta_start = exact_return(spec, start)
    targets = np.linspace(eta_start, goal_return, count) if count > 1 else np.array([goal_return])
    current, eta_cur = start, eta_start
    snapshots = []
    for target in targets:
        while eta_cur < target:
            values = policy_values(spec.endo_trans, spec.reward, current, spec.discount)
            greedy = greedy_policy(q_values(spec.endo_trans, spec.reward, values, spec.discount))
            eta_greedy = exact_return(spec, greedy)
            if eta_greedy <= eta_cur:
                break  # already optimal
            if eta_greedy <= target:
                current, eta_cur = greedy, eta_greedy
            else:
                current = _bisect_mix(spec, current, greedy, target)
                eta_cur = exact_return(spec, current)
        snapshots.append(current)
    return snapshots


def make_behavior_policies(spec: EXBMDPSpec, tier: str, count: int, rng) -> BehaviorPolicySet:
    """Behavior policies for one dataset tier.

    ``random`` draws ``count`` policies with Dirichlet(1) rows; ``medium`` is a
    single fixed policy at 40-60% of the optimal return; ``medium_replay`` is
    ``count`` improvement snapshots from the weak anchor up to that policy.
    """
    check_positive_int(count, "count")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if tier == "random":
        policies = [PolicyTable(rng.dirichlet(np.ones(spec.n_act), size=spec.n_endo)) for _ in range(count)]
        return BehaviorPolicySet(tier, policies)
    if tier == "medium":
        policy, _ = medium_policy(spec)
        return BehaviorPolicySet(tier, [policy])
    if tier == "medium_replay":
        policy, anchor = medium_policy(spec)
        goal = exact_return(spec, policy)
        return BehaviorPolicySet(tier, improvement_snapshots(spec, anchor, goal, count))
    raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")


def default_policy_count(tier: str, n_traj: int) -> int:
    if tier == "medium":
        return 1
    if tier == "random":
        return max(1, math.ceil(n_traj / TRAJECTORIES_PER_RANDOM_POLICY))
    return max(1, min(n_traj, 10))


def distinct_deterministic_policies(spec: EXBMDPSpec, count: int, rng, dominance: float = 0.8) -> BehaviorPolicySet:
    """``count`` pairwise-distinct deterministic policies.

    Each policy has a dominant action (cycling over action ids) that it plays in
    roughly a ``dominance`` share of the states; the rest are random.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if count > spec.n_act ** spec.n_endo:
        raise ConstructionError(f"only {spec.n_act ** spec.n_endo} deterministic policies exist")
    seen, policies = set(), []
    i = attempts = 0
    while len(policies) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise ConstructionError(
                f"could not draw {count} distinct policies with dominance={dominance}; lower the dominance"
            )
        base = i % spec.n_act
        actions = np.where(rng.random(spec.n_endo) < dominance, base, rng.integers(spec.n_act, size=spec.n_endo))
        key = tuple(int(a) for a in actions)
        if key not in seen:
            seen.add(key)
            policies.append(PolicyTable.from_actions(actions, spec.n_act))
            i += 1
    return BehaviorPolicySet("deterministic", policies)


# ---------------------------------------------------------------------------
# collection

def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def rollout(spec: EXBMDPSpec, policy: PolicyTable, horizon: int, rng, policy_id: str = "") -> Trajectory:
    state, obs = reset(spec, rng)
    policy_cdf = np.cumsum(policy.probs, axis=1)
    observations, actions, rewards = [], [], []
    for _ in range(horizon):
        action = sample_index(policy_cdf[state.endo], rng)
        observations.append(obs)
        actions.append(action)
        state, reward, obs = step(spec, state, action, rng)
        rewards.append(reward)
    return Trajectory(policy_id, observations, actions, rewards)


def make_decoder(spec: EXBMDPSpec, swap: bool) -> np.ndarray:
    decoder = np.full((spec.n_obs, 2), -1, dtype=np.int64)
    for (endo, exo), obs in np.ndenumerate(spec.emission):
        decoder[obs] = (exo, endo) if swap else (endo, exo)
    return decoder


def true_endo_factor(spec: EXBMDPSpec, decoder) -> int:
    """Which decoded factor carries the endogenous state, read off the emission."""
    decoder = np.asarray(decoder, dtype=np.int64)
    factors = decoder[spec.emission.ravel()]
    endo = np.repeat(np.arange(spec.n_endo), spec.n_exo)
    return 0 if np.array_equal(factors[:, 0], endo) else 1


def collect(
    spec: EXBMDPSpec,
    policies: BehaviorPolicySet,
    n_traj: int,
    horizon: int,
    seed: int,
    swap_factors: bool | None = None,
) -> OfflineDataset:
    """Roll out ``n_traj`` trajectories, assigning policies round-robin.

    Trajectory ``i`` draws from its own stream seeded by ``(seed, i)`` so the
    result does not depend on evaluation order.  ``swap_factors`` fixes the
    factor order in the decoder; by default it is drawn from the seed.
    """
    check_positive_int(n_traj, "n_traj")
    check_positive_int(horizon, "horizon", minimum=2)
    if swap_factors is None:
        swap_factors = bool(np.random.default_rng(np.random.SeedSequence([int(seed), 2**31])).integers(2))
    trajectories = []
    for i in range(n_traj):
        k = i % len(policies)
        trajectories.append(rollout(spec, policies.policies[k], horizon, trajectory_rng(seed, i), policies.ids[k]))
    return OfflineDataset(
        trajectories=trajectories,
        tier=policies.tier,
        env_fingerprint=spec.fingerprint(),
        decoder=make_decoder(spec, swap_factors),
        discount=spec.discount,
        policy_ids=list(policies.ids),
        horizon=horizon,
        seed=int(seed),
    )


def action_entropy(batch) -> float:
    """Shannon entropy (nats) of the pooled action frequencies of ``batch``."""
    batch = list(batch)
    if not batch:
        raise ValueError("action_entropy needs a non-empty batch")
    actions = np.concatenate([np.asarray(t.actions, dtype=np.int64) for t in batch])
    if actions.size == 0:
        raise ValueError("batch contains no actions")
    counts = np.bincount(actions)
    freqs = counts[counts > 0] / actions.size
    return float(-np.sum(freqs * np.log(freqs)))


# ---------------------------------------------------------------------------
# file format: JSON header line, then one JSON object per trajectory

def _header(ds: OfflineDataset) -> dict:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "offline_dataset",
        "tier": ds.tier,
        "env_fingerprint": ds.env_fingerprint,
        "n_trajectories": len(ds),
        "horizon": ds.horizon,
        "seed": ds.seed,
        "discount": repr(float(ds.discount)),
        "policy_ids": list(ds.policy_ids),
        "decoder": ds.decoder.tolist(),
        "stats": {k: (v if isinstance(v, int) else repr(v)) for k, v in ds.stats.items()},
    }


def dataset_to_text(ds: OfflineDataset, extra_header: dict | None = None) -> str:
    header = _header(ds)
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for traj in ds.trajectories:
        record = {
            "policy_id": traj.policy_id,
            "observations": [int(o) for o in traj.observations],
            "actions": [int(a) for a in traj.actions],
            "rewards": [repr(float(r)) for r in traj.rewards],
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save_dataset(ds: OfflineDataset, path, extra_header: dict | None = None):
    atomic_write_text(path, dataset_to_text(ds, extra_header))


def read_dataset_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    try:
        return json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: line 1: malformed header ({exc.msg})") from None


def load_dataset(path, spec: EXBMDPSpec | None = None) -> OfflineDataset:
    """Read a dataset file; pass ``spec`` to check the environment fingerprint."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetParseError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: dataset format version {header.get('format_version')!r}, expected {DATASET_FORMAT_VERSION}"
        )
    if spec is not None and header["env_fingerprint"] != spec.fingerprint():
        raise FingerprintMismatchError(
            f"{path}: dataset was collected on env {header['env_fingerprint']}, "
            f"supplied spec has {spec.fingerprint()}",
            expected=spec.fingerprint(), found=header["env_fingerprint"],
        )
    records = lines[1:]
    if len(records) != header["n_trajectories"]:
        raise DatasetParseError(
            f"{path}: truncated; header announces {header['n_trajectories']} trajectories, found {len(records)}"
        )
    trajectories = []
    for lineno, line in enumerate(records, start=2):
        try:
            rec = json.loads(line)
            trajectories.append(
                Trajectory(rec["policy_id"], rec["observations"], rec["actions"], [float(r) for r in rec["rewards"]])
            )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DatasetParseError(f"{path}: line {lineno}: {exc}") from None
    ds = OfflineDataset(
        trajectories=trajectories,
        tier=header["tier"],
        env_fingerprint=header["env_fingerprint"],
        decoder=np.array(header["decoder"], dtype=np.int64),
        discount=float(header["discount"]),
        policy_ids=header["policy_ids"],
        horizon=header["horizon"],
        seed=header.get("seed"),
    )
    stored = {k: (v if isinstance(v, int) else float(v)) for k, v in header["stats"].items()}
    if stored != ds.stats:
        raise DatasetParseError(f"{path}: stored return statistics do not match the trajectories")
    return ds
