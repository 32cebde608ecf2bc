"""Learning the separated (endogenous / exogenous) model from offline data.

The learner sees observation ids and a decoder that splits each observation
into two factor ids, without being told which factor the actions drive.  It
picks the split by factored plug-in likelihood over the batches of a sampling
schedule, then fits a bootstrap ensemble of count-based transition tables.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from ._validation import check_nonnegative, check_positive_int
from .datagen import OfflineDataset, Trajectory
from .exceptions import ConfigurationError, FormatVersionError

MODEL_FORMAT_VERSION = 1
SCHEDULE_MODES = ("conservative", "random")
TIE_TOL = 1e-9


@dataclass(frozen=True)
class Partition:
    """Which decoded factor is treated as endogenous.

    ``scores[k]`` is the accumulated factored log-likelihood with factor ``k``
    as the endogenous one.  ``degenerate`` is set when neither factor shows any
    action dependence in the data, in which case ``endo_factor`` is only a guess.
    """

    endo_factor: int
    scores: tuple = ()
    action_dependence: tuple = ()
    degenerate: bool = False

    def __post_init__(self):
        if self.endo_factor not in (0, 1):
            raise ValueError(f"endo_factor must be 0 or 1, got {self.endo_factor}")

    @property
    def exo_factor(self) -> int:
        return 1 - self.endo_factor

    def swapped(self) -> "Partition":
        return Partition(1 - self.endo_factor, self.scores, self.action_dependence, self.degenerate)


@dataclass
class SamplingSchedule:
    """Which trajectories feed the model at epoch ``m`` (1-based).

    Conservative mode serves trajectory ``j = m`` for ``m <= n`` and uniform
    draws over all trajectories afterwards; random mode always draws uniformly.
    A batch holds ``batch_size`` sub-sequences of ``chunk_len`` steps
    (``chunk_len=None`` means whole trajectories).
    """

    mode: str
    n: int
    m: int = 1
    batch_size: int = 4
    chunk_len: int | None = 25

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}; expected one of {SCHEDULE_MODES}")
        check_positive_int(self.n, "n")
        check_positive_int(self.m, "m")
        check_positive_int(self.batch_size, "batch_size")

    @property
    def index(self) -> int | None:
        """1-based trajectory index served this epoch, or None for uniform draws."""
        if self.mode == "conservative" and self.m <= self.n:
            return (self.m - 1) % min(self.m, self.n) + 1
        return None


def _chunk(traj: Trajectory, chunk_len, rng) -> Trajectory:
    if chunk_len is None or chunk_len >= len(traj):
        return traj
    start = int(rng.integers(len(traj) - chunk_len + 1))
    return traj.chunk(start, chunk_len)


def next_batch(schedule: SamplingSchedule, ds: OfflineDataset, rng) -> list:
    """Batch for the schedule's current epoch; advances the epoch counter."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    j = schedule.index
    if j is not None:
        source = [ds.trajectories[j - 1]] * schedule.batch_size
    else:
        picks = rng.integers(len(ds), size=schedule.batch_size)
        source = [ds.trajectories[i] for i in picks]
    schedule.m += 1
    return [_chunk(t, schedule.chunk_len, rng) for t in source]


# ---------------------------------------------------------------------------
# counting

def _steps(batch, decoder):
    """Stack per-step arrays over a batch.

    Returns ``(f, a, r, f_next, has_next)`` where ``f`` has shape (N, 2) and
    ``has_next`` marks steps whose successor lies in the same sequence.
    """
    fs, acts, rews, nxt, has = [], [], [], [], []
    for t in batch:
        f = decoder[np.asarray(t.observations, dtype=np.int64)]
        fs.append(f)
        acts.append(np.asarray(t.actions, dtype=np.int64))
        rews.append(np.asarray(t.rewards, dtype=float))
        nxt.append(np.vstack([f[1:], f[-1:]]))
        flag = np.ones(len(f), dtype=bool)
        flag[-1] = False
        has.append(flag)
    return np.vstack(fs), np.concatenate(acts), np.concatenate(rews), np.vstack(nxt), np.concatenate(has)


def _rows(counts: np.ndarray, alpha: float) -> np.ndarray:
    """Add-alpha rows; rows with no mass at all become uniform."""
    smoothed = counts + alpha
    totals = smoothed.sum(axis=-1, keepdims=True)
    n = counts.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = np.where(totals > 0, smoothed / np.where(totals > 0, totals, 1.0), 1.0 / n)
    return rows


@dataclass
class LogLikelihood:
    total: float
    terms: dict
    flagged: bool = False


def _log_terms(counts_eval, probs):
    """sum counts * log(probs), flagging zero-probability events that occur."""
    mask = counts_eval > 0
    if np.any(probs[mask] <= 0):
        return -np.inf, True
    return float(np.sum(counts_eval[mask] * np.log(probs[mask]))), False


def factored_loglik(batch, partition: Partition, alpha: float, decoder, n_act: int, fit_batch=None) -> LogLikelihood:
    """Plug-in factored log-likelihood of ``batch`` under ``partition``.

    Each conditional (action given endogenous factor, endogenous transition,
    exogenous transition, initial factor marginals) is the add-``alpha``
    estimate fit on ``fit_batch`` (default: the batch itself).  The observation
    term is zero because decoding is exact.
    """
    check_nonnegative(alpha, "alpha")
    decoder = np.asarray(decoder, dtype=np.int64)
    sizes = (int(decoder[:, 0].max()) + 1, int(decoder[:, 1].max()) + 1)
    e, x = partition.endo_factor, partition.exo_factor
    n_e, n_x = sizes[e], sizes[x]

    def counts(b):
        f, a, _, fn, has = _steps(b, decoder)
        act = np.zeros((n_e, n_act))
        np.add.at(act, (f[:, e], a), 1)
        endo = np.zeros((n_e, n_act, n_e))
        np.add.at(endo, (f[has, e], a[has], fn[has, e]), 1)
        exo = np.zeros((n_x, n_x))
        np.add.at(exo, (f[has, x], fn[has, x]), 1)
        firsts = np.array([decoder[int(t.observations[0])] for t in b])
        init_e = np.bincount(firsts[:, e], minlength=n_e).astype(float)
        init_x = np.bincount(firsts[:, x], minlength=n_x).astype(float)
        return {"action": act, "endo_transition": endo, "exo_transition": exo, "initial_endo": init_e, "initial_exo": init_x}

    eval_counts = counts(batch)
    fit_counts = eval_counts if fit_batch is None else counts(fit_batch)
    terms, flagged = {}, False
    for name, c in eval_counts.items():
        value, bad = _log_terms(c, _rows(fit_counts[name], alpha))
        terms[name] = value
        flagged |= bad
    terms["observation"] = 0.0
    total = float(sum(terms.values()))
    return LogLikelihood(total, terms, flagged)


def action_dependence(ds_or_batch, factor: int, decoder, n_act: int) -> float:
    """Largest total-variation gap between MLE rows ``T(.|s,a)`` and ``T(.|s,a')``.

    Only (s, a) cells visited in the data take part.
    """
    batch = ds_or_batch.trajectories if isinstance(ds_or_batch, OfflineDataset) else ds_or_batch
    decoder = np.asarray(decoder, dtype=np.int64)
    n = int(decoder[:, factor].max()) + 1
    f, a, _, fn, has = _steps(batch, decoder)
    counts = np.zeros((n, n_act, n))
    np.add.at(counts, (f[has, factor], a[has], fn[has, factor]), 1)
    totals = counts.sum(axis=-1)
    best = 0.0
    for s in range(n):
        seen = np.flatnonzero(totals[s] > 0)
        rows = counts[s, seen] / totals[s, seen, None]
        for i in range(len(seen)):
            for k in range(i + 1, len(seen)):
                best = max(best, 0.5 * float(np.abs(rows[i] - rows[k]).sum()))
    return best


def discover_partition(
    ds: OfflineDataset,
    schedule: SamplingSchedule,
    alpha: float = 0.1,
    epochs: int | None = None,
    rng=None,
    n_act: int | None = None,
    degenerate_tol: float = 0.0,
) -> Partition:
    """Choose the endogenous factor by accumulated factored log-likelihood.

    Both candidate splits are scored on the same ``epochs`` batches drawn from
    ``schedule``.  Near-ties go to the factor with the larger action dependence.
    """
    epochs = schedule.n if epochs is None else check_positive_int(epochs, "epochs")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_act = n_act or int(max(t.actions.max() for t in ds.trajectories)) + 1
    candidates = (Partition(0), Partition(1))
    scores = np.zeros(2)
    for _ in range(epochs):
        batch = next_batch(schedule, ds, rng)
        for k, cand in enumerate(candidates):
            scores[k] += factored_loglik(batch, cand, alpha, ds.decoder, n_act).total
    dependence = tuple(action_dependence(ds, k, ds.decoder, n_act) for k in (0, 1))
    degenerate = max(dependence) <= degenerate_tol
    if abs(scores[0] - scores[1]) <= TIE_TOL * max(1.0, abs(scores[0])):
        endo = int(dependence[1] > dependence[0])
    else:
        endo = int(scores[1] > scores[0])
    return Partition(endo, tuple(float(s) for s in scores), dependence, degenerate)


# ---------------------------------------------------------------------------
# ensembles

@dataclass(eq=False)
class EnsembleModel:
    """K bootstrap transition tables over the learned state space.

    For a separated model the state is the endogenous factor and
    ``exo_trans`` models the other factor.  For the joint baseline the state is
    ``z = f0 * n_f1 + f1`` and ``exo_trans`` is the trivial 1x1 chain.
    """

    kind: str
    members: np.ndarray
    exo_trans: np.ndarray
    reward: np.ndarray
    counts: np.ndarray
    init: np.ndarray
    alpha: float
    partition: Partition | None
    factor_sizes: tuple
    dataset_fingerprint: str = ""
    seed: int | None = None
    bootstrap: bool = True

    @property
    def K(self) -> int:
        return self.members.shape[0]

    @property
    def n_states(self) -> int:
        return self.members.shape[1]

    @property
    def n_act(self) -> int:
        return self.members.shape[2]

    @property
    def mean_trans(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def state_of(self, factors) -> np.ndarray:
        """Learned state index for decoded factor pairs of shape (..., 2)."""
        factors = np.asarray(factors, dtype=np.int64)
        if self.kind == "separated":
            return factors[..., self.partition.endo_factor]
        return factors[..., 0] * self.factor_sizes[1] + factors[..., 1]


def _member_seed(seed, i):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919, int(i)]))


def _fit(ds: OfflineDataset, state_fn, exo_fn, n_states, n_exo, K, alpha, seed, bootstrap, n_act):
    if len(ds) == 0:
        raise ValueError("cannot fit a model on an empty dataset")
    check_positive_int(K, "K")
    check_nonnegative(alpha, "alpha")
    per_traj = []
    for t in ds.trajectories:
        f, a, r, fn, has = _steps([t], ds.decoder)
        per_traj.append((state_fn(f), a, r, state_fn(fn), has, exo_fn(f), exo_fn(fn)))

    def trans_counts(indices):
        c = np.zeros((n_states, n_act, n_states))
        for i in indices:
            s, a, _, sn, has, _, _ = per_traj[i]
            np.add.at(c, (s[has], a[has], sn[has]), 1)
        return c

    members = []
    for i in range(K):
        if bootstrap:
            idx = _member_seed(seed, i).integers(len(ds), size=len(ds))
        else:
            idx = np.arange(len(ds))
        members.append(_rows(trans_counts(idx), alpha))
    members = np.stack(members)

    everything = np.arange(len(ds))
    counts = trans_counts(everything).sum(axis=-1)
    exo_counts = np.zeros((n_exo, n_exo))
    reward_sum = np.zeros((n_states, n_act))
    visits = np.zeros((n_states, n_act))
    init = np.zeros(n_states)
    for s, a, r, _, has, xs, xn in per_traj:
        np.add.at(exo_counts, (xs[has], xn[has]), 1)
        np.add.at(reward_sum, (s, a), r)
        np.add.at(visits, (s, a), 1)
        init[s[0]] += 1
    reward = np.divide(reward_sum, visits, out=np.zeros_like(reward_sum), where=visits > 0)
    return members, _rows(exo_counts, alpha), reward, counts, init / init.sum()


def fit_separated_model(
    ds: OfflineDataset,
    partition: Partition,
    K: int = 5,
    alpha: float = 0.1,
    seed: int = 0,
    bootstrap: bool = True,
    n_act: int | None = None,
) -> EnsembleModel:
    """Bootstrap ensemble of endogenous tables plus one exogenous table.

    Member ``i`` is fit on a trajectory-level resample drawn from the stream
    ``(seed, i)``; exogenous and reward tables use the full dataset.  Reward is
    the visit-weighted mean per (s+, a), zero where unvisited.
    """
    if partition.degenerate:
        warnings.warn("fitting on a degenerate partition", stacklevel=2)
    n_act = n_act or int(max(t.actions.max() for t in ds.trajectories)) + 1
    sizes = ds.factor_sizes
    e, x = partition.endo_factor, partition.exo_factor
    members, exo, reward, counts, init = _fit(
        ds, lambda f: f[:, e], lambda f: f[:, x], sizes[e], sizes[x], K, alpha, seed, bootstrap, n_act
    )
    return EnsembleModel(
        "separated", members, exo, reward, counts, init, float(alpha), partition, sizes,
        ds.fingerprint(), int(seed), bootstrap,
    )


def fit_joint_model(
    ds: OfflineDataset,
    K: int = 5,
    alpha: float = 0.1,
    seed: int = 0,
    bootstrap: bool = True,
    n_act: int | None = None,
) -> EnsembleModel:
    """Baseline ensemble over the undecomposed latent ``z = (f0, f1)``."""
    n_act = n_act or int(max(t.actions.max() for t in ds.trajectories)) + 1
    sizes = ds.factor_sizes
    n_z = sizes[0] * sizes[1]
    zero = lambda f: np.zeros(len(f), dtype=np.int64)  # noqa: E731
    members, exo, reward, counts, init = _fit(
        ds, lambda f: f[:, 0] * sizes[1] + f[:, 1], zero, n_z, 1, K, alpha, seed, bootstrap, n_act
    )
    return EnsembleModel(
        "joint", members, exo, reward, counts, init, float(alpha), None, sizes,
        ds.fingerprint(), int(seed), bootstrap,
    )


# ---------------------------------------------------------------------------
# serialization

def _arr(a):
    a = np.asarray(a)
    data = [int(v) for v in a.ravel()] if a.dtype.kind in "iu" else [repr(float(v)) for v in a.ravel()]
    return {"shape": list(a.shape), "data": data}


def _unarr(obj, dtype=float):
    conv = float if dtype is float else int
    return np.array([conv(v) for v in obj["data"]], dtype=dtype).reshape(obj["shape"])


def model_to_dict(model: EnsembleModel) -> dict:
    part = None
    if model.partition is not None:
        p = model.partition
        part = {
            "endo_factor": p.endo_factor,
            "scores": [repr(s) for s in p.scores],
            "action_dependence": [repr(d) for d in p.action_dependence],
            "degenerate": p.degenerate,
        }
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "ensemble_model",
        "model_kind": model.kind,
        "K": model.K,
        "alpha": repr(model.alpha),
        "seed": model.seed,
        "bootstrap": model.bootstrap,
        "partition": part,
        "factor_sizes": list(model.factor_sizes),
        "dataset_fingerprint": model.dataset_fingerprint,
        "members": _arr(model.members),
        "exo_trans": _arr(model.exo_trans),
        "reward": _arr(model.reward),
        "counts": _arr(model.counts.astype(np.int64)),
        "init": _arr(model.init),
    }


def model_from_dict(obj: dict) -> EnsembleModel:
    if obj.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatVersionError(f"model format version {obj.get('format_version')!r}, expected {MODEL_FORMAT_VERSION}")
    part = obj["partition"]
    if part is not None:
        part = Partition(
            part["endo_factor"],
            tuple(float(s) for s in part["scores"]),
            tuple(float(d) for d in part["action_dependence"]),
            part["degenerate"],
        )
    return EnsembleModel(
        kind=obj["model_kind"],
        members=_unarr(obj["members"]),
        exo_trans=_unarr(obj["exo_trans"]),
        reward=_unarr(obj["reward"]),
        counts=_unarr(obj["counts"], np.int64).astype(float),
        init=_unarr(obj["init"]),
        alpha=float(obj["alpha"]),
        partition=part,
        factor_sizes=tuple(obj["factor_sizes"]),
        dataset_fingerprint=obj["dataset_fingerprint"],
        seed=obj["seed"],
        bootstrap=obj["bootstrap"],
    )


def save_model(model: EnsembleModel, path, extra: dict | None = None):
    obj = model_to_dict(model)
    if extra:
        obj.update(extra)
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_model(path) -> EnsembleModel:
    return model_from_dict(json.loads(Path(path).read_text()))
