"""Relevance-propagation explanations for autoencoder reconstruction errors.

The package explains why an autoencoder reconstructs a sample badly by
redistributing the scalar reconstruction error backwards through the
network, layer by layer, down to the input features.  It also ships the
baseline explainers (per-feature residuals, kernel SHAP), a
corruption-based validation harness that manufactures ground-truth
anomalies, pixel-level evaluation metrics, synthetic dataset generators,
and a batch CLI tying everything together.
"""

from .autonet import (
    Conv2DLayer,
    DenseLayer,
    LossKind,
    Model,
    ReLULayer,
    TrainConfig,
    UpsampleLayer,
    build_conv_autoencoder,
    forward,
    forward_batch,
    forward_with_trace,
    grad_wrt_input,
    load_model,
    reconstruction_error,
    save_model,
    train,
)
from .lrp import RelevanceMap, RuleConfig, default_rule_config, explain, relevance_from_loss
from .baselines import ShapConfig, kernel_shap_explain, residual_explain, shapley_kernel_weight
from .corruption import (
    AdversarialConfig,
    CorruptionRecord,
    ScoreCalibration,
    ValidationConfig,
    anomaly_score,
    corrupt_adversarial,
    corrupt_null,
    corrupt_random,
    generate_validation_set,
)
from .metrics import average_precision, pr_curve_pixels, recall_at_m
from .estimators import KernelShapExplainer, LRPExplainer, ReconstructionAutoencoder, ResidualExplainer

__all__ = [
    "Conv2DLayer",
    "DenseLayer",
    "LossKind",
    "Model",
    "ReLULayer",
    "TrainConfig",
    "UpsampleLayer",
    "build_conv_autoencoder",
    "forward",
    "forward_batch",
    "forward_with_trace",
    "grad_wrt_input",
    "load_model",
    "reconstruction_error",
    "save_model",
    "train",
    "RelevanceMap",
    "RuleConfig",
    "default_rule_config",
    "explain",
    "relevance_from_loss",
    "ShapConfig",
    "kernel_shap_explain",
    "residual_explain",
    "shapley_kernel_weight",
    "AdversarialConfig",
    "CorruptionRecord",
    "ScoreCalibration",
    "ValidationConfig",
    "anomaly_score",
    "corrupt_adversarial",
    "corrupt_null",
    "corrupt_random",
    "generate_validation_set",
    "average_precision",
    "pr_curve_pixels",
    "recall_at_m",
    "KernelShapExplainer",
    "LRPExplainer",
    "ReconstructionAutoencoder",
    "ResidualExplainer",
]
