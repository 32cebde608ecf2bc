"""scikit-learn style front ends.

``fit`` takes an :class:`~exoplan.datagen.OfflineDataset` (or a fitted
ensemble, for the planner); hyper-parameters live in ``__init__`` so
``get_params`` / ``set_params`` / ``clone`` work as usual.
"""
import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted
from .datagen import OfflineDataset
from .exbmdp import PolicyTable
from .penalize import build_penalized, latent_policy, mean_uncertainty, plan
from .sepmodel import (
    EnsembleModel,
    SamplingSchedule,
    discover_partition,
    fit_joint_model,
    fit_separated_model,
)


def check_dataset(ds):
    if not isinstance(ds, OfflineDataset):
        raise TypeError(f"expected an OfflineDataset, got {type(ds).__name__}")
    if len(ds) == 0:
        raise ValueError("dataset has no trajectories")
    return ds


def _n_act(ds):
    return int(max(t.actions.max() for t in ds.trajectories)) + 1


class SeparatedModelLearner(BaseEstimator):
    """Discover the endogenous factor, then fit a bootstrap ensemble on it.

    Parameters
    ----------
    schedule : {"conservative", "random"}
        Batch schedule used while scoring the two candidate splits.
    K : int
        Ensemble size.
    alpha : float
        Add-alpha smoothing of every count table.
    epochs : int or None
        Scoring epochs; None means one per trajectory.
    batch_size, chunk_len : int
        Sub-sequences per batch and their length.
    random_state : int
    """

    def __init__(self, schedule="conservative", K=5, alpha=0.1, epochs=None,
                 batch_size=4, chunk_len=25, bootstrap=True, random_state=0):
        self.schedule = schedule
        self.K = K
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.chunk_len = chunk_len
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = check_dataset(X)
        self.n_act_ = _n_act(ds)
        schedule = SamplingSchedule(self.schedule, len(ds), batch_size=self.batch_size, chunk_len=self.chunk_len)
        rng = np.random.default_rng(np.random.SeedSequence([int(self.random_state), 1]))
        self.partition_ = discover_partition(ds, schedule, self.alpha, self.epochs, rng, n_act=self.n_act_)
        self.model_ = fit_separated_model(ds, self.partition_, self.K, self.alpha, self.random_state,
                                          self.bootstrap, n_act=self.n_act_)
        return self

    def uncertainty(self, X, estimator="md"):
        check_is_fitted(self, "model_")
        return mean_uncertainty(self.model_, check_dataset(X), estimator)


class JointModelLearner(BaseEstimator):
    """Baseline ensemble over the undecomposed latent state."""

    def __init__(self, K=5, alpha=0.1, bootstrap=True, random_state=0):
        self.K = K
        self.alpha = alpha
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = check_dataset(X)
        self.n_act_ = _n_act(ds)
        self.model_ = fit_joint_model(ds, self.K, self.alpha, self.random_state, self.bootstrap, n_act=self.n_act_)
        return self

    def uncertainty(self, X, estimator="md"):
        check_is_fitted(self, "model_")
        return mean_uncertainty(self.model_, check_dataset(X), estimator)


class PenalizedPlanner(BaseEstimator):
    """Value iteration on the uncertainty-penalized ensemble-mean MDP."""

    def __init__(self, estimator="md", lam=1.0, discount=0.9, tol=1e-10):
        self.estimator = estimator
        self.lam = lam
        self.discount = discount
        self.tol = tol

    def fit(self, X, y=None):
        if not isinstance(X, EnsembleModel):
            raise TypeError(f"expected an EnsembleModel, got {type(X).__name__}")
        self.penalized_ = build_penalized(X, self.estimator, self.lam, self.discount)
        self.policy_ = plan(self.penalized_, self.tol)
        return self

    def predict(self, states):
        """Greedy action for each learned state id."""
        check_is_fitted(self, "policy_")
        states = np.asarray(states, dtype=np.int64)
        if states.size and (states.min() < 0 or states.max() >= self.policy_.n_states):
            raise IndexError(f"state ids must lie in [0, {self.policy_.n_states})")
        return self.policy_.greedy_actions()[states]


class OfflinePolicyLearner(BaseEstimator):
    """Dataset in, policy out: model learning followed by penalized planning.

    ``model="separated"`` learns on the discovered endogenous factor;
    ``model="joint"`` is the undecomposed baseline.  ``predict`` maps raw
    observation ids to actions through the dataset's decoder.
    """

    def __init__(self, model="separated", schedule="conservative", K=5, alpha=0.1, lam=1.0,
                 estimator="md", discount=None, epochs=None, batch_size=4, chunk_len=25, random_state=0):
        self.model = model
        self.schedule = schedule
        self.K = K
        self.alpha = alpha
        self.lam = lam
        self.estimator = estimator
        self.discount = discount
        self.epochs = epochs
        self.batch_size = batch_size
        self.chunk_len = chunk_len
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = check_dataset(X)
        if self.model == "separated":
            learner = SeparatedModelLearner(self.schedule, self.K, self.alpha, self.epochs, self.batch_size,
                                            self.chunk_len, random_state=self.random_state).fit(ds)
            self.partition_ = learner.partition_
        elif self.model == "joint":
            learner = JointModelLearner(self.K, self.alpha, random_state=self.random_state).fit(ds)
            self.partition_ = None
        else:
            raise ValueError(f"unknown model {self.model!r}; expected 'separated' or 'joint'")
        self.model_ = learner.model_
        self.decoder_ = ds.decoder
        discount = ds.discount if self.discount is None else self.discount
        self.planner_ = PenalizedPlanner(self.estimator, self.lam, discount).fit(self.model_)
        self.policy_ = self.planner_.policy_
        return self

    def predict(self, observations):
        check_is_fitted(self, "policy_")
        factors = self.decoder_[np.asarray(observations, dtype=np.int64)]
        return self.planner_.predict(self.model_.state_of(factors))

    def latent_policy(self, spec) -> PolicyTable:
        """The learned policy expressed over the true latent pairs of ``spec``."""
        check_is_fitted(self, "policy_")
        return PolicyTable(latent_policy(spec, self.decoder_, self.model_, self.policy_))
