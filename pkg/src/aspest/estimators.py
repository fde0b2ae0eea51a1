"""scikit-learn compatible wrappers around the model and the three runners.

The selective predictors are transductive: ``fit(X, y, ...)`` receives the
unlabeled target pool ``X`` and the labels ``y`` that the simulated oracle
reveals on request.  Only queried labels influence training.  Afterwards
``predict``/``predict_proba``/``selection_score`` describe the pool; SR and
DE can also score new inputs, ASPEST cannot (its classifier only exists as
recorded outputs on the pool).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .ensemble import deep_ensemble_probs
from .exceptions import ConfigurationError
from .loop import AspestConfig, Oracle, run_aspest, run_de, run_sr, source_train
from .metrics import EvalFrame
from .nn import MlpModel, TrainConfig, mlp_forward


class MLPClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Source classifier.  ``transform`` returns penultimate-layer embeddings.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, default=(64, 32)
    activation : {'relu', 'tanh'}, default='relu'
    dropout : float, default=0.0
    l2 : float, default=0.0
    learning_rate : float, default=1e-3
    batch_size : int, default=128
    epochs : int, default=200
    optimizer : {'sgd', 'adam'}, default='sgd'
    momentum : float, default=0.0
    random_state : int, default=0
    """

    def __init__(self, hidden_layer_sizes=(64, 32), activation="relu", dropout=0.0, l2=0.0,
                 learning_rate=1e-3, batch_size=128, epochs=200, optimizer="sgd",
                 momentum=0.0, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.dropout = dropout
        self.l2 = l2
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        n_classes = max(len(self.classes_), 2)
        self.model_ = source_train(X, y_idx, n_classes, tuple(self.hidden_layer_sizes),
                                   self.epochs, self.learning_rate, self.batch_size,
                                   int(self.random_state or 0), self.optimizer, self.dropout,
                                   self.l2, self.activation, self.momentum)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: MlpModel, classes=None) -> "MLPClassifier":
        """Wrap an already trained :class:`MlpModel`."""
        est = cls(hidden_layer_sizes=tuple(model.layer_sizes[1:-1]), activation=model.activation,
                  dropout=model.dropout_rate, l2=model.l2_coeff, random_state=model.seed)
        est.model_ = model
        est.classes_ = np.arange(model.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = model.n_features
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return mlp_forward(self.model_, X)[0]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return mlp_forward(self.model_, X)[1]


def _as_model(source_model) -> MlpModel:
    if isinstance(source_model, MlpModel):
        return source_model
    if isinstance(source_model, MLPClassifier):
        check_is_fitted(source_model, "model_")
        return source_model.model_
    raise ConfigurationError("source_model must be an MlpModel or a fitted MLPClassifier")


class _ActiveSelectiveBase(BaseEstimator):
    _ensemble_scores_new_inputs = True

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, min_epochs=self.min_epochs,
                           patience=self.patience, lam=self.lam, optimizer=self.optimizer,
                           momentum=self.momentum)

    def _run(self, model, X_source, y_source, X, oracle):
        raise NotImplementedError

    def fit(self, X, y, *, source_model, X_source, y_source):
        """Run active selective prediction on the pool ``X``.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
            Unlabeled target pool.
        y : array-like of shape (n_samples,)
            Ground truth, revealed only through oracle queries (and used for
            per-round evaluation logs).
        source_model : MlpModel or fitted MLPClassifier
        X_source, y_source : array-like
            Source training data for the joint objective.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        X_source, y_source = check_X_y(X_source, y_source, dtype=np.float64)
        model = _as_model(source_model)
        if X.shape[1] != model.n_features or X_source.shape[1] != model.n_features:
            raise ConfigurationError("feature count does not match the source model")
        oracle = Oracle(y, self.budget)
        self.result_ = self._run(model, X_source, y_source.astype(np.int64), X, oracle)
        self.X_pool_ = X
        self.probs_ = self.result_.probs
        self.labeled_indices_ = self.result_.selection.selected
        self.rounds_ = self.result_.rounds
        self.n_labels_used_ = oracle.consumed
        self.n_features_in_ = X.shape[1]
        return self

    def _pool_probs(self, X):
        check_is_fitted(self, "probs_")
        if X is None:
            return self.probs_
        X = check_array(X, dtype=np.float64)
        if X.shape == self.X_pool_.shape and np.array_equal(X, self.X_pool_):
            return self.probs_
        if not self._ensemble_scores_new_inputs:
            raise ValueError(f"{type(self).__name__} only scores the pool it was fitted on")
        return deep_ensemble_probs([mlp_forward(m, X)[0] for m in self.result_.models])

    def predict_proba(self, X=None):
        return self._pool_probs(X)

    def predict(self, X=None):
        return self._pool_probs(X).argmax(axis=1)

    def selection_score(self, X=None):
        """Confidence used to accept or reject predictions."""
        return self._pool_probs(X).max(axis=1)

    def predict_selective(self, threshold: float, X=None):
        """Predicted labels, with -1 where the confidence is below ``threshold``."""
        probs = self._pool_probs(X)
        out = probs.argmax(axis=1)
        out[probs.max(axis=1) < threshold] = -1
        return out

    def evaluation_frame(self, y) -> EvalFrame:
        check_is_fitted(self, "probs_")
        return self.result_.frame(np.asarray(y))


class SoftmaxResponse(_ActiveSelectiveBase):
    """Single fine-tuned model; confidence is the maximum softmax probability."""

    def __init__(self, acquisition="margin", budget=0, n_rounds=10, lam=1.0,
                 learning_rate=1e-3, batch_size=128, min_epochs=50, max_epochs=200,
                 patience=10, optimizer="sgd", momentum=0.0, temperature=1.0,
                 target_accuracy=0.8, target_coverage=0.8, random_state=0):
        self.acquisition = acquisition
        self.budget = budget
        self.n_rounds = n_rounds
        self.lam = lam
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.min_epochs = min_epochs
        self.max_epochs = max_epochs
        self.patience = patience
        self.optimizer = optimizer
        self.momentum = momentum
        self.temperature = temperature
        self.target_accuracy = target_accuracy
        self.target_coverage = target_coverage
        self.random_state = random_state

    def _run(self, model, X_source, y_source, X, oracle):
        return run_sr(model, X_source, y_source, X, oracle, self.acquisition, self.budget,
                      self.n_rounds, self._train_config(), int(self.random_state or 0),
                      self.temperature, self.target_accuracy, self.target_coverage)


class DeepEnsemble(_ActiveSelectiveBase):
    """Ensemble of independently fine-tuned copies of the source model."""

    def __init__(self, acquisition="margin", budget=0, n_rounds=10, n_members=5,
                 n_source_steps=1000, lam=1.0, learning_rate=1e-3, batch_size=128,
                 min_epochs=50, max_epochs=200, patience=10, optimizer="sgd", momentum=0.0,
                 temperature=1.0, target_accuracy=0.8, target_coverage=0.8, n_jobs=1,
                 random_state=0):
        self.acquisition = acquisition
        self.budget = budget
        self.n_rounds = n_rounds
        self.n_members = n_members
        self.n_source_steps = n_source_steps
        self.lam = lam
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.min_epochs = min_epochs
        self.max_epochs = max_epochs
        self.patience = patience
        self.optimizer = optimizer
        self.momentum = momentum
        self.temperature = temperature
        self.target_accuracy = target_accuracy
        self.target_coverage = target_coverage
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _run(self, model, X_source, y_source, X, oracle):
        return run_de(model, X_source, y_source, X, oracle, self.acquisition, self.budget,
                      self.n_rounds, self.n_members, self.n_source_steps, self._train_config(),
                      int(self.random_state or 0), int(self.n_jobs or 1), self.temperature,
                      self.target_accuracy, self.target_coverage)


class ASPEST(_ActiveSelectiveBase):
    """Checkpoint-ensemble selective predictor with self-training.

    Selection is always by the checkpoint ensemble's margin.  See
    :class:`aspest.loop.AspestConfig` for the meaning of the
    hyperparameters; defaults match its defaults.
    """

    _ensemble_scores_new_inputs = False

    def __init__(self, budget=0, n_rounds=10, n_members=5, n_source_steps=1000,
                 ckpt_steps=200, ckpt_epochs=5, pseudo_fraction=0.1, threshold=0.9,
                 self_train_epochs=20, lam=1.0, learning_rate=1e-3, batch_size=128,
                 min_epochs=50, max_epochs=200, patience=10, optimizer="sgd", momentum=0.0,
                 target_accuracy=0.8, target_coverage=0.8, n_jobs=1, random_state=0):
        self.budget = budget
        self.n_rounds = n_rounds
        self.n_members = n_members
        self.n_source_steps = n_source_steps
        self.ckpt_steps = ckpt_steps
        self.ckpt_epochs = ckpt_epochs
        self.pseudo_fraction = pseudo_fraction
        self.threshold = threshold
        self.self_train_epochs = self_train_epochs
        self.lam = lam
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.min_epochs = min_epochs
        self.max_epochs = max_epochs
        self.patience = patience
        self.optimizer = optimizer
        self.momentum = momentum
        self.target_accuracy = target_accuracy
        self.target_coverage = target_coverage
        self.n_jobs = n_jobs
        self.random_state = random_state

    def aspest_config(self) -> AspestConfig:
        return AspestConfig(self.lam, self.n_source_steps, self.n_members, self.n_rounds,
                            self.ckpt_steps, self.ckpt_epochs, self.pseudo_fraction,
                            self.threshold, self.self_train_epochs)

    def _run(self, model, X_source, y_source, X, oracle):
        return run_aspest(model, X_source, y_source, X, oracle, self.aspest_config(),
                          self.budget, self._train_config(), int(self.random_state or 0),
                          int(self.n_jobs or 1), self.target_accuracy, self.target_coverage)


METHODS = {"sr": SoftmaxResponse, "de": DeepEnsemble, "aspest": ASPEST}
