"""Backward relevance propagation from the reconstruction error to the input.

The scalar error is first decomposed onto the output layer (one closed-form
rule per loss kind), then pushed back through the stack with a per-layer
rule: basic / epsilon / gamma / z-plus for inner layers, w-squared or z-box
for the first layer.  Sums of relevance are conserved layer to layer on
bias-free models; bias terms absorb their share and never amplify it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autonet import (
    Conv2DLayer,
    DenseLayer,
    LossKind,
    Model,
    ReLULayer,
    UpsampleLayer,
    forward_with_trace,
    reconstruction_error,
)
from .tensor_ops import (
    STABILIZER,
    DimensionError,
    as_tensor,
    conv2d,
    conv2d_scatter,
    upsample_nearest_adjoint,
)

DENSE_RULES = ("basic", "epsilon", "gamma", "zplus", "wsq", "zbox")
CONV_RULES = ("basic", "epsilon", "gamma", "zplus", "zbox")
FIRST_LAYER_RULES = ("wsq", "zbox")


class RuleConfigError(ValueError):
    """A layer has no rule assigned, or an invalid one."""


@dataclass
class RuleConfig:
    """Rule assignment per parameterized layer index, plus rule parameters.

    input_bounds (low, high) feeds the z-box rule; strict_self_exclusion
    switches the basic-rule denominator to exclude the contributing input
    itself (an alternate reading of the rule; off by default).
    """

    rules: dict = field(default_factory=dict)  # layer index -> rule name
    epsilon: float = 0.0
    gamma: float = 0.25
    input_bounds: tuple = (0.0, 1.0)
    strict_self_exclusion: bool = False

    def rule_for(self, index: int) -> str:
        if index not in self.rules:
            raise RuleConfigError(f"no propagation rule configured for layer {index}")
        return self.rules[index]


@dataclass
class ExplanationContext:
    """Input, reconstruction, chosen root point (always the input) and error."""

    x: np.ndarray
    xhat: np.ndarray
    loss: LossKind
    error: float

    @property
    def root(self) -> np.ndarray:
        return self.x

    @property
    def m(self) -> int:
        return int(self.x.size)


@dataclass
class RelevanceMap:
    """Relevance tensors at every layer boundary.

    layer_relevances[l] is the relevance entering layer l (index 0 is the
    model input); the last entry sits at the model output.  loss_relevance
    is the scalar error assigned at the loss layer.
    """

    layer_relevances: list
    loss_relevance: float

    @property
    def input_relevance(self) -> np.ndarray:
        return self.layer_relevances[0]

    @property
    def output_relevance(self) -> np.ndarray:
        return self.layer_relevances[-1]


def make_context(model: Model, x: np.ndarray, loss: LossKind) -> ExplanationContext:
    xhat, _ = forward_with_trace(model, x)
    return ExplanationContext(as_tensor(x), xhat, loss, reconstruction_error(x, xhat, loss))


def relevance_from_loss(ctx: ExplanationContext) -> np.ndarray:
    """Decompose the scalar reconstruction error onto the output layer.

    Per-feature shares are (1/m)(x~_i - xhat_i)^2 for the squared loss and
    (1/m)|x~_i - xhat_i| for the absolute loss; they sum to the error exactly.
    """
    diff = ctx.root - ctx.xhat
    if ctx.loss is LossKind.L2:
        return diff * diff / ctx.m
    return np.abs(diff) / ctx.m


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0.0, 1.0, -1.0)


def _modified_params(layer, rule: str, cfg: RuleConfig):
    w = layer.weight
    b = layer.bias
    if rule in ("basic", "epsilon"):
        return w, b
    if rule == "gamma":
        wg = w + cfg.gamma * np.maximum(w, 0.0)
        bg = None if b is None else b + cfg.gamma * np.maximum(b, 0.0)
        return wg, bg
    if rule == "zplus":
        return np.maximum(w, 0.0), None if b is None else np.maximum(b, 0.0)
    raise RuleConfigError(f"rule {rule!r} has no weight modifier")


def propagate_dense(R_out: np.ndarray, a: np.ndarray, layer: DenseLayer, rule: str,
                    cfg: RuleConfig) -> np.ndarray:
    """Redistribute output relevance of one dense layer onto its inputs."""
    if rule not in DENSE_RULES:
        raise RuleConfigError(f"unknown dense rule {rule!r}")
    R_out = as_tensor(R_out)
    a = as_tensor(a)
    w = layer.weight
    if R_out.shape != (w.shape[0],) or a.shape != (w.shape[1],):
        raise DimensionError("relevance/activation shapes inconsistent with layer")

    eps = STABILIZER + (cfg.epsilon if rule == "epsilon" else 0.0)

    if rule == "wsq":
        # squared-weight split ignores activations and biases entirely, so it
        # conserves relevance exactly even on layers with bias terms
        w2 = w * w
        c = R_out / _stabilize(w2.sum(axis=1), eps)
        return w2.T @ c

    if rule == "zbox":
        low, high = cfg.input_bounds
        low = np.broadcast_to(np.asarray(low, dtype=np.float64), a.shape)
        high = np.broadcast_to(np.asarray(high, dtype=np.float64), a.shape)
        if np.any(low > high):
            raise RuleConfigError("z-box lower bound exceeds upper bound")
        wp = np.maximum(w, 0.0)
        wn = np.minimum(w, 0.0)
        z = a * w - low * wp - high * wn  # (out, in)
        denom = z.sum(axis=1)
        if layer.bias is not None:
            denom = denom + layer.bias
        c = R_out / _stabilize(denom, eps)
        return z.T @ c

    wr, br = _modified_params(layer, rule, cfg)
    z = wr * a  # (out, in), contribution of input i to unit k
    denom = z.sum(axis=1)
    if br is not None:
        denom = denom + br  # bias as a virtual always-on input; share absorbed
    if cfg.strict_self_exclusion:
        # denominator seen by input i excludes its own contribution
        denom_i = denom[:, None] - z
        return (z / _stabilize(denom_i, eps) * R_out[:, None]).sum(axis=0)
    c = R_out / _stabilize(denom, eps)
    return a * (wr.T @ c)


def propagate_conv(R_out: np.ndarray, a: np.ndarray, layer: Conv2DLayer, rule: str,
                   cfg: RuleConfig) -> np.ndarray:
    """Dense-rule formulas applied over the convolution's implicit linear map."""
    if rule not in CONV_RULES:
        raise RuleConfigError(f"unknown conv rule {rule!r}")
    R_out = as_tensor(R_out)
    a = as_tensor(a)
    s, p = layer.stride, layer.padding
    eps = STABILIZER + (cfg.epsilon if rule == "epsilon" else 0.0)

    if rule == "zbox":
        low, high = cfg.input_bounds
        low = np.broadcast_to(np.asarray(low, dtype=np.float64), a.shape).copy()
        high = np.broadcast_to(np.asarray(high, dtype=np.float64), a.shape).copy()
        if np.any(low > high):
            raise RuleConfigError("z-box lower bound exceeds upper bound")
        wp = np.maximum(layer.weight, 0.0)
        wn = np.minimum(layer.weight, 0.0)
        z = conv2d(a, layer.weight, s, p) - conv2d(low, wp, s, p) - conv2d(high, wn, s, p)
        if layer.bias is not None:
            z = z + layer.bias[:, None, None]
        c = R_out / _stabilize(z, eps)
        return (
            a * conv2d_scatter(c, layer.weight, s, p, a.shape)
            - low * conv2d_scatter(c, wp, s, p, a.shape)
            - high * conv2d_scatter(c, wn, s, p, a.shape)
        )

    wr, br = _modified_params(layer, rule, cfg)
    z = conv2d(a, wr, s, p)
    if br is not None:
        z = z + br[:, None, None]
    c = R_out / _stabilize(z, eps)
    return a * conv2d_scatter(c, wr, s, p, a.shape)


def propagate_relu(R_out: np.ndarray) -> np.ndarray:
    """Activations belong to their neuron; relevance passes through unchanged."""
    return as_tensor(R_out)


def propagate_upsample(R_out: np.ndarray, factor: float, in_shape) -> np.ndarray:
    """Each source cell collects the relevance of the cells it was copied to."""
    return upsample_nearest_adjoint(R_out, factor, in_shape)


def default_rule_config(model: Model, first_layer_rule: str | None = None,
                        input_bounds: tuple = (0.0, 1.0), epsilon: float = 0.0,
                        gamma: float = 0.25) -> RuleConfig:
    """z-plus everywhere with a dedicated first-layer rule.

    Dense stacks get w-squared on the first layer, convolutional stacks get
    z-box with the given input bounds; both choices can be overridden.
    """
    rules = {}
    first = None
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, (DenseLayer, Conv2DLayer)):
            if first is None:
                first = idx
                if first_layer_rule is None:
                    first_layer_rule = "wsq" if isinstance(layer, DenseLayer) else "zbox"
                rules[idx] = first_layer_rule
            else:
                rules[idx] = "zplus"
    return RuleConfig(rules=rules, epsilon=epsilon, gamma=gamma, input_bounds=input_bounds)


def explain(model: Model, x: np.ndarray, loss: LossKind, cfg: RuleConfig) -> RelevanceMap:
    """End-to-end explanation: forward pass, loss decomposition, backward rules."""
    xhat, trace = forward_with_trace(model, x)
    ctx = ExplanationContext(as_tensor(x), xhat, loss, reconstruction_error(x, xhat, loss))
    R = relevance_from_loss(ctx)

    relevances = [None] * (len(model.layers) + 1)
    relevances[-1] = R
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        a = trace.inputs[idx]
        if isinstance(layer, DenseLayer):
            R = propagate_dense(R, a, layer, cfg.rule_for(idx), cfg)
        elif isinstance(layer, Conv2DLayer):
            R = propagate_conv(R, a, layer, cfg.rule_for(idx), cfg)
        elif isinstance(layer, ReLULayer):
            R = propagate_relu(R)
        elif isinstance(layer, UpsampleLayer):
            R = propagate_upsample(R, layer.factor, a.shape)
        else:
            raise RuleConfigError(f"no rule for layer type {type(layer).__name__} at {idx}")
        relevances[idx] = R
    return RelevanceMap(relevances, ctx.error)
