"""Scikit-learn style wrappers over the functional core.

The autoencoder is a plain estimator with fit/predict, and each explainer is
a transformer whose transform(X) returns one attribution row per sample, so
pipelines and model-selection tooling compose with the rest of the package.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .autonet import LossKind, TrainConfig, build_mlp_autoencoder, forward_batch, train
from .baselines import ShapConfig, kernel_shap_explain, residual_explain
from .corruption import ScoreCalibration, anomaly_score_batch
from .lrp import default_rule_config, explain


def _loss_kind(loss) -> LossKind:
    return loss if isinstance(loss, LossKind) else LossKind(str(loss).lower())


class ReconstructionAutoencoder(BaseEstimator):
    """Dense autoencoder trained with minibatch SGD on tabular rows.

    hidden_sizes describes the encoder half; the decoder mirrors it.  After
    fitting, predict(X) returns reconstructions and anomaly_score(X) a
    calibrated score in [0, 1].
    """

    def __init__(self, hidden_sizes=(16, 6), epochs=50, learning_rate=0.05,
                 momentum=0.9, batch_size=64, loss="l2", use_bias=True, seed=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.loss = loss
        self.use_bias = use_bias
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        sizes = (X.shape[1], *self.hidden_sizes, *reversed(self.hidden_sizes[:-1]), X.shape[1])
        model = build_mlp_autoencoder(sizes, seed=self.seed, use_bias=self.use_bias)
        cfg = TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, momentum=self.momentum,
            batch_size=self.batch_size, seed=self.seed, loss=_loss_kind(self.loss),
            use_bias=self.use_bias,
        )
        self.model_ = train(model, X, cfg)
        self.calibration_ = ScoreCalibration().fit(self.model_, X)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using the autoencoder")

    def predict(self, X):
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        return forward_batch(self.model_, X)

    def anomaly_score(self, X):
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        return anomaly_score_batch(self.model_, X, self.calibration_)

    def score(self, X, y=None):
        # negative mean squared reconstruction error, so larger is better
        X = check_array(X, dtype=np.float64)
        return -float(np.mean((X - self.predict(X)) ** 2))


class _FittedModelMixin:
    """Shared plumbing for explainers wrapping a fitted autoencoder."""

    def _resolve(self):
        if isinstance(self.autoencoder, ReconstructionAutoencoder):
            self.autoencoder._check_fitted()
            return self.autoencoder.model_
        if self.autoencoder is None:
            raise NotFittedError("explainer needs an autoencoder")
        return self.autoencoder  # a raw Model


class ResidualExplainer(BaseEstimator, TransformerMixin, _FittedModelMixin):
    """Attributions are the per-feature reconstruction errors."""

    def __init__(self, autoencoder=None, loss="l2"):
        self.autoencoder = autoencoder
        self.loss = loss

    def fit(self, X=None, y=None):
        self.model_ = self._resolve()
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before transform")
        X = check_array(X, dtype=np.float64)
        Xhat = forward_batch(self.model_, X)
        loss = _loss_kind(self.loss)
        return np.stack([residual_explain(x, xh, loss) for x, xh in zip(X, Xhat)])


class LRPExplainer(BaseEstimator, TransformerMixin, _FittedModelMixin):
    """Backward relevance propagation of the reconstruction error.

    first_layer_rule defaults per model family (w-squared for dense stacks,
    z-box for convolutional ones); the remaining layers use z-plus.
    """

    def __init__(self, autoencoder=None, loss="l2", first_layer_rule=None,
                 input_bounds=(0.0, 1.0), epsilon=0.0, gamma=0.25):
        self.autoencoder = autoencoder
        self.loss = loss
        self.first_layer_rule = first_layer_rule
        self.input_bounds = input_bounds
        self.epsilon = epsilon
        self.gamma = gamma

    def fit(self, X=None, y=None):
        self.model_ = self._resolve()
        self.rule_config_ = default_rule_config(
            self.model_, first_layer_rule=self.first_layer_rule,
            input_bounds=self.input_bounds, epsilon=self.epsilon, gamma=self.gamma,
        )
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before transform")
        X = check_array(X, dtype=np.float64)
        loss = _loss_kind(self.loss)
        return np.stack(
            [explain(self.model_, x, loss, self.rule_config_).input_relevance for x in X]
        )


class KernelShapExplainer(BaseEstimator, TransformerMixin):
    """Kernel SHAP attributions of a scalar score function.

    By default the score is the fitted autoencoder's calibrated anomaly
    score; any callable mapping an (n, M) batch to n scalars can be passed
    instead.  fit(X) takes the background dataset from X.
    """

    def __init__(self, autoencoder=None, score_fn=None, nsamples=1000,
                 n_background=100, seed=0):
        self.autoencoder = autoencoder
        self.score_fn = score_fn
        self.nsamples = nsamples
        self.n_background = n_background
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.score_fn is not None:
            self.score_fn_ = self.score_fn
        elif isinstance(self.autoencoder, ReconstructionAutoencoder):
            self.autoencoder._check_fitted()
            self.score_fn_ = self.autoencoder.anomaly_score
        else:
            raise NotFittedError("need a fitted autoencoder or an explicit score_fn")
        rng = np.random.default_rng(self.seed)
        n_bg = min(self.n_background, len(X))
        self.background_ = X[rng.choice(len(X), size=n_bg, replace=False)]
        return self

    def transform(self, X):
        if not hasattr(self, "score_fn_"):
            raise NotFittedError("call fit before transform")
        X = check_array(X, dtype=np.float64)
        cfg = ShapConfig(nsamples=self.nsamples, background=self.background_, seed=self.seed)
        return np.stack([kernel_shap_explain(self.score_fn_, x, cfg) for x in X])
