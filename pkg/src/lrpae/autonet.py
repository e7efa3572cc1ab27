"""Autoencoder layers, forward/backward passes, SGD training and model files.

A model is an ordered stack of layers whose shapes compose and whose output
shape equals its input shape.  Dense layers operate on 1-d feature vectors,
convolutional layers on C x H x W tensors; the two families are not mixed
within one model.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor_ops import (
    DimensionError,
    as_tensor,
    conv2d,
    conv2d_output_shape,
    conv2d_scatter,
    relu,
    upsample_nearest,
    upsample_nearest_adjoint,
)

MODEL_MAGIC = b"LRPAE\x01"


class LossKind(enum.Enum):
    L1 = "l1"
    L2 = "l2"


class ModelFormatError(ValueError):
    """The model file is not readable: bad magic, version, or truncation."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None = None  # (out,)

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.bias.shape != (self.weight.shape[0],):
                raise DimensionError("dense bias shape inconsistent with weight")


@dataclass
class Conv2DLayer:
    weight: np.ndarray  # (c_out, c_in, kh, kw)
    bias: np.ndarray | None = None  # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.bias.shape != (self.weight.shape[0],):
                raise DimensionError("conv bias shape inconsistent with weight")


@dataclass
class ReLULayer:
    pass


@dataclass
class UpsampleLayer:
    factor: float = 2.0

    def __post_init__(self):
        if self.factor not in (2.0, 3.0):
            raise ValueError(f"upsample factor must be 2.0 or 3.0, got {self.factor}")


Layer = DenseLayer | Conv2DLayer | ReLULayer | UpsampleLayer


@dataclass
class Model:
    layers: list
    input_shape: tuple

    def is_dense(self) -> bool:
        return all(isinstance(l, (DenseLayer, ReLULayer)) for l in self.layers)


@dataclass
class LayerTrace:
    """Per-layer input activations recorded during one forward pass."""

    inputs: list = field(default_factory=list)  # inputs[i] is the input of layer i
    output: np.ndarray | None = None


def _layer_forward(layer, a):
    if isinstance(layer, DenseLayer):
        if a.ndim != 1 or a.shape[0] != layer.weight.shape[1]:
            raise DimensionError(f"dense layer expects ({layer.weight.shape[1]},), got {a.shape}")
        z = layer.weight @ a
        return z + layer.bias if layer.bias is not None else z
    if isinstance(layer, Conv2DLayer):
        z = conv2d(a, layer.weight, layer.stride, layer.padding)
        return z + layer.bias[:, None, None] if layer.bias is not None else z
    if isinstance(layer, ReLULayer):
        return relu(a)
    if isinstance(layer, UpsampleLayer):
        return upsample_nearest(a, layer.factor)
    raise TypeError(f"unknown layer {layer!r}")


def forward_with_trace(model: Model, x: np.ndarray):
    """Run x through the model, recording every layer's input activation."""
    a = as_tensor(x)
    if tuple(a.shape) != tuple(model.input_shape):
        raise DimensionError(f"input shape {a.shape} != model input {model.input_shape}")
    trace = LayerTrace()
    for layer in model.layers:
        trace.inputs.append(a)
        a = _layer_forward(layer, a)
    trace.output = a
    return a, trace


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    return forward_with_trace(model, x)[0]


def forward_batch(model: Model, X: np.ndarray) -> np.ndarray:
    """Vectorized forward for dense models over an (n, m) batch."""
    if not model.is_dense():
        return np.stack([forward(model, row) for row in np.asarray(X, dtype=np.float64)])
    A = np.asarray(X, dtype=np.float64)
    for layer in model.layers:
        if isinstance(layer, DenseLayer):
            A = A @ layer.weight.T
            if layer.bias is not None:
                A = A + layer.bias
        else:
            A = np.maximum(A, 0.0)
    return A


def reconstruction_error(x: np.ndarray, xhat: np.ndarray, loss: LossKind) -> float:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {xhat.shape}")
    diff = x - xhat
    if loss is LossKind.L2:
        return float(np.mean(diff * diff))
    return float(np.mean(np.abs(diff)))


def _layer_backward_input(layer, a, g):
    """Gradient of a scalar w.r.t. the layer input, given a = input, g = d/d(output)."""
    if isinstance(layer, DenseLayer):
        return layer.weight.T @ g
    if isinstance(layer, Conv2DLayer):
        return conv2d_scatter(g, layer.weight, layer.stride, layer.padding, a.shape)
    if isinstance(layer, ReLULayer):
        return g * (a > 0)
    if isinstance(layer, UpsampleLayer):
        return upsample_nearest_adjoint(g, layer.factor, a.shape)
    raise TypeError(f"unknown layer {layer!r}")


def backprop_to_input(model: Model, trace: LayerTrace, g_out: np.ndarray) -> np.ndarray:
    g = g_out
    for layer, a in zip(reversed(model.layers), reversed(trace.inputs)):
        g = _layer_backward_input(layer, a, g)
    return g


class ReconstructionObjective:
    """Scalar e(x, model(x)); exposes the partials the input gradient needs.

    At the L1 kink (x_i == xhat_i) the subgradient 0 is used.
    """

    def __init__(self, loss: LossKind, target: np.ndarray | None = None):
        self.loss = loss
        self.target = None if target is None else as_tensor(target)

    def _ref(self, x):
        return x if self.target is None else self.target

    def value(self, x, xhat) -> float:
        return reconstruction_error(self._ref(x), xhat, self.loss)

    def grad_output(self, x, xhat) -> np.ndarray:
        ref = self._ref(x)
        m = ref.size
        if self.loss is LossKind.L2:
            return (2.0 / m) * (xhat - ref)
        return np.sign(xhat - ref) / m

    def grad_input_direct(self, x, xhat) -> np.ndarray:
        if self.target is not None:
            return np.zeros_like(x)
        m = x.size
        if self.loss is LossKind.L2:
            return (2.0 / m) * (x - xhat)
        return np.sign(x - xhat) / m


def grad_wrt_input(model: Model, x: np.ndarray, objective) -> np.ndarray:
    """Full gradient of objective(x, model(x)) with respect to x.

    The objective contributes both through the reconstruction and, when it
    references x directly, through its own direct term.
    """
    x = as_tensor(x)
    xhat, trace = forward_with_trace(model, x)
    g = backprop_to_input(model, trace, objective.grad_output(x, xhat))
    return g + objective.grad_input_direct(x, xhat)


def _layer_param_grads(layer, a, g):
    """(dW, db, g_in) for one layer; dW/db are None for parameterless layers."""
    if isinstance(layer, DenseLayer):
        dW = np.outer(g, a)
        db = g.copy() if layer.bias is not None else None
        return dW, db, layer.weight.T @ g
    if isinstance(layer, Conv2DLayer):
        kh, kw = layer.weight.shape[2], layer.weight.shape[3]
        _, h_out, w_out = g.shape
        s, p = layer.stride, layer.padding
        ap = np.pad(a, ((0, 0), (p, p), (p, p))) if p else a
        dW = np.zeros_like(layer.weight)
        for u in range(kh):
            for v in range(kw):
                patch = ap[:, u : u + s * h_out : s, v : v + s * w_out : s]
                dW[:, :, u, v] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
        db = g.sum(axis=(1, 2)) if layer.bias is not None else None
        return dW, db, conv2d_scatter(g, layer.weight, s, p, a.shape)
    return None, None, _layer_backward_input(layer, a, g)


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    loss: LossKind = LossKind.L2
    use_bias: bool = True  # when False, biases are stripped before training


def _strip_bias(model: Model) -> Model:
    layers = []
    for l in model.layers:
        if isinstance(l, (DenseLayer, Conv2DLayer)) and l.bias is not None:
            layers.append(replace(l, bias=None))
        else:
            layers.append(l)
    return Model(layers, model.input_shape)


def _clone(model: Model) -> Model:
    layers = []
    for l in model.layers:
        if isinstance(l, (DenseLayer, Conv2DLayer)):
            layers.append(replace(l, weight=l.weight.copy(),
                                  bias=None if l.bias is None else l.bias.copy()))
        else:
            layers.append(replace(l))
    return Model(layers, model.input_shape)


def _mean_error_batch(model, X, loss):
    Xhat = forward_batch(model, X)
    diff = X - Xhat
    if loss is LossKind.L2:
        return float(np.mean(diff * diff))
    return float(np.mean(np.abs(diff)))


def train(model: Model, dataset, config: TrainConfig, val_data=None) -> Model:
    """Minibatch SGD with momentum on the reconstruction loss.

    Returns the epoch snapshot with the lowest validation error, so the
    result never reconstructs the validation set worse than the input model.
    Deterministic given config.seed.  Raises TrainingError on NaN loss.
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim == 1 or len(X) == 0:
        raise ValueError("dataset must be a nonempty batch of samples")
    Xval = X if val_data is None else np.asarray(val_data, dtype=np.float64)

    model = _clone(model)
    if not config.use_bias:
        model = _strip_bias(model)
    rng = np.random.default_rng(config.seed)

    best = _clone(model)
    best_err = _mean_error_batch(model, Xval, config.loss)

    params = [l for l in model.layers if isinstance(l, (DenseLayer, Conv2DLayer))]
    vel_w = [np.zeros_like(l.weight) for l in params]
    vel_b = [None if l.bias is None else np.zeros_like(l.bias) for l in params]

    dense_path = model.is_dense()
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            batch = X[order[start : start + config.batch_size]]
            if dense_path:
                loss_val, gw, gb = _dense_batch_grads(model, batch, config.loss)
            else:
                loss_val, gw, gb = _persample_grads(model, batch, config.loss)
            if not np.isfinite(loss_val):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            for i, layer in enumerate(params):
                vel_w[i] = config.momentum * vel_w[i] + gw[i]
                layer.weight -= config.learning_rate * vel_w[i]
                if layer.bias is not None:
                    vel_b[i] = config.momentum * vel_b[i] + gb[i]
                    layer.bias -= config.learning_rate * vel_b[i]
        err = _mean_error_batch(model, Xval, config.loss)
        if not np.isfinite(err):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        if err < best_err:
            best_err = err
            best = _clone(model)
    return best


def _dense_batch_grads(model, X, loss):
    """Loss and parameter gradients for a dense model over one batch, vectorized."""
    acts = []
    A = X
    for layer in model.layers:
        acts.append(A)
        if isinstance(layer, DenseLayer):
            A = A @ layer.weight.T
            if layer.bias is not None:
                A = A + layer.bias
        else:
            A = np.maximum(A, 0.0)
    n, m = X.shape
    diff = A - X
    if loss is LossKind.L2:
        loss_val = float(np.mean(diff * diff))
        G = (2.0 / (n * m)) * diff
    else:
        loss_val = float(np.mean(np.abs(diff)))
        G = np.sign(diff) / (n * m)
    gw, gb = [], []
    for layer, a in zip(reversed(model.layers), reversed(acts)):
        if isinstance(layer, DenseLayer):
            gw.append(G.T @ a)
            gb.append(G.sum(axis=0) if layer.bias is not None else None)
            G = G @ layer.weight
        else:
            G = G * (a > 0)
    gw.reverse()
    gb.reverse()
    return loss_val, gw, gb


def _persample_grads(model, X, loss):
    params = [l for l in model.layers if isinstance(l, (DenseLayer, Conv2DLayer))]
    gw = [np.zeros_like(l.weight) for l in params]
    gb = [None if l.bias is None else np.zeros_like(l.bias) for l in params]
    total = 0.0
    for x in X:
        xhat, trace = forward_with_trace(model, x)
        obj = ReconstructionObjective(loss, target=x)
        total += obj.value(x, xhat)
        g = obj.grad_output(x, xhat)
        pi = len(params) - 1
        for layer, a in zip(reversed(model.layers), reversed(trace.inputs)):
            dW, db, g = _layer_param_grads(layer, a, g)
            if dW is not None:
                gw[pi] += dW / len(X)
                if db is not None:
                    gb[pi] += db / len(X)
                pi -= 1
    return total / len(X), gw, gb


# ---------------------------------------------------------------------------
# model file format
#
# magic "LRPAE\x01", u32 LE layer count, u32 LE rank + u32 dims of the input
# shape, then one record per layer: u8 kind tag, kind-specific header ints
# (u32 LE), f32 LE weight/bias blobs.  Floats are stored in 32 bits.
# ---------------------------------------------------------------------------

_KIND_DENSE, _KIND_CONV, _KIND_RELU, _KIND_UPSAMPLE = 1, 2, 3, 4


def save_model(model: Model, path) -> None:
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<I", len(model.layers))
    out += struct.pack("<I", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    for layer in model.layers:
        if isinstance(layer, DenseLayer):
            o, i = layer.weight.shape
            out += struct.pack("<BIIB", _KIND_DENSE, o, i, int(layer.bias is not None))
            out += layer.weight.astype("<f4").tobytes()
            if layer.bias is not None:
                out += layer.bias.astype("<f4").tobytes()
        elif isinstance(layer, Conv2DLayer):
            co, ci, kh, kw = layer.weight.shape
            out += struct.pack(
                "<BIIIIIIB", _KIND_CONV, co, ci, kh, kw, layer.stride, layer.padding,
                int(layer.bias is not None),
            )
            out += layer.weight.astype("<f4").tobytes()
            if layer.bias is not None:
                out += layer.bias.astype("<f4").tobytes()
        elif isinstance(layer, ReLULayer):
            out += struct.pack("<B", _KIND_RELU)
        elif isinstance(layer, UpsampleLayer):
            out += struct.pack("<Bf", _KIND_UPSAMPLE, layer.factor)
        else:
            raise TypeError(f"unknown layer {layer!r}")
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, layer_ctx=None):
        self.buf = buf
        self.pos = 0
        self.layer_ctx = layer_ctx

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            where = f" in layer {self.layer_ctx}" if self.layer_ctx is not None else ""
            raise ModelFormatError(f"truncated model file{where}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def load_model(path) -> Model:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("bad magic bytes (not a model file or wrong version)")
    r = _Reader(buf)
    r.take(len(MODEL_MAGIC))
    (n_layers,) = r.unpack("<I")
    (rank,) = r.unpack("<I")
    input_shape = tuple(r.unpack(f"<{rank}I"))
    layers = []
    for idx in range(n_layers):
        r.layer_ctx = idx
        (kind,) = r.unpack("<B")
        if kind == _KIND_DENSE:
            o, i, has_bias = r.unpack("<IIB")
            w = r.floats(o * i).reshape(o, i)
            b = r.floats(o) if has_bias else None
            layers.append(DenseLayer(w, b))
        elif kind == _KIND_CONV:
            co, ci, kh, kw, stride, padding, has_bias = r.unpack("<IIIIIIB")
            w = r.floats(co * ci * kh * kw).reshape(co, ci, kh, kw)
            b = r.floats(co) if has_bias else None
            layers.append(Conv2DLayer(w, b, stride=stride, padding=padding))
        elif kind == _KIND_RELU:
            layers.append(ReLULayer())
        elif kind == _KIND_UPSAMPLE:
            (factor,) = r.unpack("<f")
            layers.append(UpsampleLayer(float(factor)))
        else:
            raise ModelFormatError(f"unknown layer kind tag {kind} at layer {idx}")
    return Model(layers, input_shape)


# ---------------------------------------------------------------------------
# architecture builders
# ---------------------------------------------------------------------------


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_mlp_autoencoder(layer_sizes, seed: int = 0, use_bias: bool = True) -> Model:
    """Symmetric dense autoencoder with ReLU between all but the last layer.

    layer_sizes runs input -> bottleneck -> ... -> input, e.g. (21, 16, 6, 16, 21).
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(layer_sizes) - 1):
        n_in, n_out = layer_sizes[i], layer_sizes[i + 1]
        w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        b = np.zeros(n_out) if use_bias else None
        layers.append(DenseLayer(w, b))
        if i < len(layer_sizes) - 2:
            layers.append(ReLULayer())
    return Model(layers, (layer_sizes[0],))


# (kernel, stride, out_channels) for the encoder; (factor, kernel,
# out_channels) for the decoder; output sizes compose back to the input
# resolution.
_FULL_ENCODER = [(5, 2, 32), (3, 2, 32), (3, 1, 32), (5, 2, 64), (3, 1, 64), (3, 2, 128), (3, 1, 512)]
_FULL_DECODER = [(3.0, 3, 128), (3.0, 3, 64), (2.0, 3, 64), (2.0, 3, 32), (2.0, 3, 32), (2.0, 3, 32)]
_FULL_FINAL = (3, 1)  # trailing conv back to 1 channel

_DESK_ENCODER = [(5, 2, 16), (3, 2, 16), (3, 1, 16), (5, 2, 32), (3, 1, 64)]
_DESK_DECODER = [(3.0, 3, 32), (3.0, 3, 32), (2.0, 3, 16), (2.0, 3, 16), (2.0, 3, 16)]
_DESK_FINAL = (3, 1)


def build_conv_autoencoder(scale: str = "full", seed: int = 0, use_bias: bool = True) -> Model:
    """Convolutional autoencoder; 'full' targets 128x128 inputs, 'desk' 64x64.

    Every convolution is followed by ReLU; decoding uses nearest-neighbour
    upsampling.  The desk variant halves channel counts and shortens the
    stack so it trains in minutes while exercising every layer kind.
    """
    if scale == "full":
        encoder, decoder, final, size = _FULL_ENCODER, _FULL_DECODER, _FULL_FINAL, 128
    elif scale == "desk":
        encoder, decoder, final, size = _DESK_ENCODER, _DESK_DECODER, _DESK_FINAL, 64
    else:
        raise ValueError(f"scale must be 'full' or 'desk', got {scale!r}")

    rng = np.random.default_rng(seed)
    layers = []
    c_in = 1

    def add_conv(c_out, k, stride):
        nonlocal c_in
        fan_in, fan_out = c_in * k * k, c_out * k * k
        w = glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out)
        b = np.zeros(c_out) if use_bias else None
        layers.append(Conv2DLayer(w, b, stride=stride, padding=0))
        layers.append(ReLULayer())
        c_in = c_out

    for k, stride, c_out in encoder:
        add_conv(c_out, k, stride)
    for factor, k, c_out in decoder:
        layers.append(UpsampleLayer(factor))
        add_conv(c_out, k, 1)
    k, stride = final
    add_conv(1, k, stride)
    model = Model(layers, (1, size, size))
    _check_autoencoder_shapes(model)
    return model


def _check_autoencoder_shapes(model: Model) -> None:
    shape = model.input_shape
    for layer in model.layers:
        if isinstance(layer, Conv2DLayer):
            shape = conv2d_output_shape(shape, layer.weight.shape, layer.stride, layer.padding)
        elif isinstance(layer, UpsampleLayer):
            c, h, w = shape
            shape = (c, int(layer.factor * h), int(layer.factor * w))
    if tuple(shape) != tuple(model.input_shape):
        raise DimensionError(f"stack output {shape} != input {model.input_shape}")


def layer_output_shapes(model: Model):
    """Activation shape after each layer, starting from the model input."""
    shapes = [tuple(model.input_shape)]
    shape = model.input_shape
    for layer in model.layers:
        if isinstance(layer, DenseLayer):
            shape = (layer.weight.shape[0],)
        elif isinstance(layer, Conv2DLayer):
            shape = conv2d_output_shape(shape, layer.weight.shape, layer.stride, layer.padding)
        elif isinstance(layer, UpsampleLayer):
            c, h, w = shape
            shape = (c, int(layer.factor * h), int(layer.factor * w))
        shapes.append(tuple(shape))
    return shapes
