"""Linear level-identity probe and the mutual-information estimate built on it.

The probe is a softmax regression from the agent's (detached) trunk output
to the level id. With ``p(i)`` uniform over the training set the estimate is

    I(L, b) ~= H(p(i)) + mean_batch log p(i | b(H_t))

which is an upper bound on the information the policy carries about the
level identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn_core
from .level_store import UnknownLevelId


@dataclass(frozen=True)
class MiEstimate:
    entropy_term: float
    cross_term: float
    estimate: float
    classifier_accuracy: float


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError(f"level distribution sums to {p.sum()}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mi_from_log_probs(log_probs, p_i, accuracy: float = float("nan")) -> MiEstimate:
    """Combine per-sample log p(true id | h) with the level prior entropy."""
    lp = np.asarray(log_probs, dtype=np.float64)
    h = entropy(p_i)
    cross = float(lp.mean())
    return MiEstimate(h, cross, h + cross, accuracy)


def gen_bound(estimate: float, D: float = 2.0) -> float:
    """Generalisation-gap bound sqrt(2 D^2 I) from a batch MI estimate.

    The per-level sum over |L| levels is approximated by |L| times the batch
    estimate, which cancels the 1/|L| factor.
    """
    if D <= 0:
        raise ValueError("D must be positive")
    return math.sqrt(2.0 * D * D * max(0.0, float(estimate)))


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression over level ids with its own Adam optimiser.

    ``partial_fit`` takes exactly one gradient step on the batch, so the
    probe can track a representation that drifts during training.
    """

    def __init__(self, n_levels: int = 2, lr: float = 1e-2, steps: int = 1000, seed: int = 0):
        self.n_levels = n_levels
        self.lr = lr
        self.steps = steps
        self.seed = seed

    def _init(self, n_features: int):
        self.n_features_in_ = n_features
        self.classes_ = np.arange(self.n_levels)
        self.linear_ = nn_core.build(lambda: torch.nn.Linear(n_features, self.n_levels), self.seed)
        with torch.no_grad():
            self.linear_.weight.zero_()
            self.linear_.bias.zero_()
        self.opt_ = nn_core.Adam(self.linear_.parameters(), lr=self.lr)

    def _check_labels(self, y):
        y = np.asarray(y)
        if y.size and (y.min() < 0 or y.max() >= self.n_levels):
            bad = y[(y < 0) | (y >= self.n_levels)][0]
            raise UnknownLevelId(f"level id {bad} outside 0..{self.n_levels - 1}")
        return y.astype(np.int64)

    def loss(self, X, y) -> torch.Tensor:
        logits = self.linear_(nn_core.as_tensor(X))
        return F.cross_entropy(logits, torch.from_numpy(np.asarray(y, dtype=np.int64)))

    def partial_fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("partial_fit needs a non-empty 2D batch")
        y = self._check_labels(y)
        if not hasattr(self, "linear_"):
            self._init(X.shape[1])
        self.last_loss_ = self.opt_.minimize(lambda: self.loss(X, y))
        return self

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = self._check_labels(y)
        self._init(X.shape[1])
        for _ in range(self.steps):
            self.partial_fit(X, y)
        return self

    @torch.no_grad()
    def predict_log_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "linear_")
        X = check_array(X, dtype=np.float64)
        return F.log_softmax(self.linear_(nn_core.as_tensor(X)), dim=-1).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.predict_log_proba(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_log_proba(X).argmax(axis=1)

    def true_log_probs(self, X, y) -> np.ndarray:
        y = self._check_labels(y)
        return self.predict_log_proba(X)[np.arange(len(y)), y]

    def mi_estimate(self, X, y, p_i=None) -> MiEstimate:
        """MI estimate on a batch; ``p_i`` defaults to uniform over the ids."""
        y = self._check_labels(y)
        if p_i is None:
            p_i = np.full(self.n_levels, 1.0 / self.n_levels)
        lp_all = self.predict_log_proba(X)
        acc = float((lp_all.argmax(axis=1) == y).mean())
        return mi_from_log_probs(lp_all[np.arange(len(y)), y], p_i, acc)
