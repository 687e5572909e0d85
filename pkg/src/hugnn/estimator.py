"""Scikit-learn style facade over the training loop.

The model is transductive: `fit` consumes the whole graph (features, edge
list, labels with -1 for unlabeled nodes) and `predict`/`predict_proba`
answer for those same nodes. Passing X to predict is allowed for interface
compatibility but it must be the fitted feature matrix.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ContractError
from .graph import (ROLE_TRAIN, ROLE_UNLABELED, ROLE_VAL, DatasetBundle,
                    Graph)
from .model import HyperParams, forward, parse_ablate
from .rng import Rng
from .training import TrainConfig, train


class HUGNNClassifier(BaseEstimator, ClassifierMixin):
    """Semi-supervised node classifier over an explicit graph.

    Parameters mirror the training defaults; `ablate` accepts "none",
    "community", "global", "uncertainty", or plus-joined combinations.
    `val_fraction` of the labeled nodes is held out for early stopping and
    best-model selection (0 keeps everything in train and selects on train
    accuracy).
    """

    def __init__(self, hidden_dim=64, layers=2, communities=0,
                 temp_start=1.0, temp_end=0.1, dropout=0.5, tau_calib=0.1,
                 beta1=0.3, beta2=0.1, lr=1e-3, weight_decay=5e-4,
                 epochs=200, patience=50, seed=0, ablate="none",
                 val_fraction=0.2):
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.communities = communities
        self.temp_start = temp_start
        self.temp_end = temp_end
        self.dropout = dropout
        self.tau_calib = tau_calib
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.ablate = ablate
        self.val_fraction = val_fraction

    def _hyper(self) -> HyperParams:
        return HyperParams(
            hidden_dim=self.hidden_dim, layers=self.layers,
            communities=self.communities, temp_start=self.temp_start,
            temp_end=self.temp_end, dropout=self.dropout,
            tau_calib=self.tau_calib, beta1=self.beta1, beta2=self.beta2,
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            seed=self.seed, ablate=parse_ablate(self.ablate))

    def fit(self, X, y, edges):
        """Train on one graph.

        X: (n, d) features; y: (n,) integer labels with -1 for unlabeled
        nodes; edges: iterable of undirected (u, v) pairs.
        """
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise ContractError(f"y has {y.shape[0]} entries for {X.shape[0]} rows of X")
        labeled = np.flatnonzero(y >= 0)
        if labeled.size == 0:
            raise ContractError("fit needs at least one labeled node (y >= 0)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError(f"val_fraction must be in [0,1), got {self.val_fraction}")

        roles = np.full(X.shape[0], ROLE_UNLABELED, dtype=np.int8)
        roles[labeled] = ROLE_TRAIN
        if self.val_fraction > 0.0 and labeled.size >= 2:
            order = Rng(self.seed).child("holdout").permutation(labeled.size)
            hold = max(1, int(round(self.val_fraction * labeled.size)))
            hold = min(hold, labeled.size - 1)
            roles[labeled[order[:hold]]] = ROLE_VAL

        classes = np.unique(y[labeled])
        remap = {int(c): i for i, c in enumerate(classes)}
        y_mapped = np.array([remap[int(v)] if v >= 0 else -1 for v in y],
                            dtype=np.int64)

        bundle = DatasetBundle(graph=Graph(X.shape[0], edges), features=X,
                               labels=y_mapped, roles=roles, name="fit")
        config = TrainConfig(hyper=self._hyper(), patience=self.patience)
        result = train(bundle, config, Rng(self.seed))

        self.classes_ = classes
        self.bundle_ = bundle
        self.result_ = result
        self.n_features_in_ = X.shape[1]
        state = forward(bundle, result.params, config.hyper,
                        train_mode=False, u0=result.u0)
        self.proba_ = state.probs.copy()
        self.uncertainty_ = state.u_layers[-1].copy()
        self.fusion_weights_ = state.lam.copy()
        return self

    def _check_same_X(self, X) -> None:
        if X is None:
            return
        X = check_array(X, dtype=np.float64)
        if X.shape != self.bundle_.features.shape or not np.array_equal(
                X, self.bundle_.features):
            raise ContractError(
                "transductive model: predict only answers for the fitted "
                "graph's feature matrix")

    def predict_proba(self, X=None):
        check_is_fitted(self, "proba_")
        self._check_same_X(X)
        return self.proba_.copy()

    def predict(self, X=None):
        check_is_fitted(self, "proba_")
        self._check_same_X(X)
        return self.classes_[np.argmax(self.proba_, axis=1)]

    def score(self, X=None, y=None):
        """Accuracy over the nodes where y >= 0."""
        check_is_fitted(self, "proba_")
        self._check_same_X(X)
        if y is None:
            raise ContractError("score needs labels")
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        labeled = y >= 0
        if not labeled.any():
            raise ContractError("score needs at least one labeled node")
        pred = self.predict()
        return float(np.mean(pred[labeled] == y[labeled]))
