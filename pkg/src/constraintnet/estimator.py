"""scikit-learn style wrapper around ConstraintNet training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .constraints import ConstraintClass
from .model import build_dense_model
from .training import TrainConfig, evaluate, train


class ConstraintNetRegressor(RegressorMixin, BaseEstimator):
    """Dense ConstraintNet regressor.

    ``fit(X, y)`` samples a fresh valid constraint parameter for every visit
    of every sample via ``sampler(y_i, rng)``; ``predict(X, s)`` needs the
    constraint parameters explicitly, and its output always lies in ``C(s)``.

    Parameters
    ----------
    constraint : ConstraintClass
        Constraint class enforced by the guard layer.
    sampler : callable
        ``sampler(y, rng) -> s`` with ``y`` inside ``C(s)``.
    hidden_layer_sizes : tuple of int
    insertion_layer : int or None
        Layer whose input receives g(s); None means the last layer.
    """

    def __init__(
        self,
        constraint: ConstraintClass | None = None,
        sampler=None,
        hidden_layer_sizes=(128, 64),
        insertion_layer=None,
        epochs=20,
        batch_size=32,
        learning_rate=1e-3,
        optimizer="adam",
        weight_decay=0.0,
        random_state=0,
    ):
        self.constraint = constraint
        self.sampler = sampler
        self.hidden_layer_sizes = hidden_layer_sizes
        self.insertion_layer = insertion_layer
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        if self.constraint is None or self.sampler is None:
            raise ValueError("ConstraintNetRegressor needs a constraint and a sampler")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        y = check_array(y, ensure_2d=False, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[1] != self.constraint.out_dim:
            raise ValueError(f"y has {y.shape[1]} columns, constraint output has {self.constraint.out_dim}")
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = build_dense_model(
            self.constraint,
            X.shape[1:],
            tuple(self.hidden_layer_sizes),
            insertion_layer=self.insertion_layer,
            seed=seed,
        )
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            weight_decay=self.weight_decay,
            seed=seed,
        )
        self.model_, self.report_ = train(self.model_, X, y, self.sampler, config)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X, s):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        s = check_array(s, dtype=np.float64)
        return self.model_.predict(X, s)

    def score(self, X, y, s=None, sample_weight=None):
        """Negative mean squared error under the given (or sampled) s."""
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(len(X), -1)
        result = evaluate(self.model_, X, y, S=s, sampler=None if s is not None else self.sampler)
        return -result.mean_loss
