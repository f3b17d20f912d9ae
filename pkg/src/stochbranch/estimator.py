"""scikit-learn style classifier around a branched MLP."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import mlp_architecture
from .core import DTYPE, Rng
from .data import Dataset, Split
from .layers import Mode
from .network import build_network, collapsed_network
from .train import SGDConfig, TrainState, run_epoch


class StochasticBranchClassifier(ClassifierMixin, BaseEstimator):
    """Fully connected classifier whose linear layers are split into branches.

    ``regularizers`` is any subset of ``("sb", "bn", "do")``. Inputs are
    flattened, so ``X`` is ``(n_samples, n_features)``.
    """

    def __init__(self, hidden_layer_sizes=(256, 256), regularizers=("sb",), n_branches=10, keep_prob=0.5,
                 branch_init="random_split", activation="relu", learning_rate=0.05, momentum=0.9,
                 weight_decay=5e-4, batch_size=128, max_epochs=5, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.regularizers = regularizers
        self.n_branches = n_branches
        self.keep_prob = keep_prob
        self.branch_init = branch_init
        self.activation = activation
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _optimizer(self):
        return SGDConfig(self.learning_rate, self.momentum, self.weight_decay, self.batch_size, self.max_epochs)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=DTYPE)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(f"need at least 2 classes, got {len(self.classes_)}")
        self.n_features_in_ = X.shape[1]
        arch = mlp_architecture([X.shape[1]], list(self.hidden_layer_sizes), len(self.classes_),
                                self.regularizers, None, self.n_branches, self.keep_prob, self.branch_init,
                                self.activation)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.network_ = build_network(arch, Rng(seed).fork("init"))
        state = TrainState(self.network_)
        ds = Dataset(X, encoded.astype(np.int64), Split.TRAIN)
        rng = Rng(seed).fork("train")
        cfg = self._optimizer()
        for _ in range(cfg.epochs):
            run_epoch(state, ds, None, cfg, rng)
        self.history_ = state.metric_log
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=DTYPE)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.network_.forward(X, Mode.EVAL)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[z.argmax(axis=1)]

    def collapsed(self):
        """Plain network with every branched layer merged into one weight."""
        check_is_fitted(self, "network_")
        return collapsed_network(self.network_)
