"""Dense numeric primitives shared by the network and the propagation engine.

Arrays are plain float64 numpy ndarrays, row-major.  Convolution follows the
cross-correlation convention (no kernel flip), so stored weights mean the
same thing they do in the mainstream frameworks.
"""

from __future__ import annotations

import numpy as np

#: Added to every rule/gradient denominator so dead neurons cannot blow up
#: a ratio.  Small enough not to disturb finite relevance ratios.
STABILIZER = 1e-9


class DimensionError(ValueError):
    """Shapes of the operands do not compose."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def div_safe(num, den, eps: float = STABILIZER) -> np.ndarray:
    """Elementwise num / den with a sign-preserving stabilizer on den.

    den == 0 is treated as positive, so div_safe(1, 0) == 1 / eps.
    """
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    adj = den + eps * np.where(den >= 0.0, 1.0, -1.0)
    return num / adj


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not compose: {a.shape} x {b.shape}")
    return a @ b


def conv2d_output_shape(in_shape, kernel_shape, stride: int, padding: int):
    c_in, h, w = in_shape
    c_out, c_in_k, kh, kw = kernel_shape
    if c_in != c_in_k:
        raise DimensionError(f"input channels {c_in} != kernel channels {c_in_k}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or h_out < 1 or w_out < 1:
        raise DimensionError(
            f"conv2d output collapses: input {in_shape}, kernel {kernel_shape}, "
            f"stride {stride}, padding {padding}"
        )
    return c_out, h_out, w_out


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Strided cross-correlation of a C_in x H x W input with C_out kernels."""
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError("conv2d expects a 3-d input and a 4-d kernel stack")
    c_out, h_out, w_out = conv2d_output_shape(x.shape, kernels.shape, stride, padding)
    kh, kw = kernels.shape[2], kernels.shape[3]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((c_out, h_out, w_out))
    for u in range(kh):
        for v in range(kw):
            patch = x[:, u : u + stride * h_out : stride, v : v + stride * w_out : stride]
            out += np.tensordot(kernels[:, :, u, v], patch, axes=(1, 0))
    return out


def conv2d_scatter(
    grad_out: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    padding: int,
    in_shape,
) -> np.ndarray:
    """Adjoint of conv2d: redistributes an output-shaped tensor onto the input grid.

    Satisfies <conv2d(x, K), g> == <x, conv2d_scatter(g, K)> for all x, g.
    """
    grad_out = as_tensor(grad_out)
    kernels = as_tensor(kernels)
    expected = conv2d_output_shape(in_shape, kernels.shape, stride, padding)
    if tuple(grad_out.shape) != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != expected {expected}")
    c_in, h, w = in_shape
    kh, kw = kernels.shape[2], kernels.shape[3]
    _, h_out, w_out = expected
    padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(kernels[:, :, u, v], grad_out, axes=(0, 0))
            padded[:, u : u + stride * h_out : stride, v : v + stride * w_out : stride] += contrib
    if padding:
        return np.ascontiguousarray(padded[:, padding : padding + h, padding : padding + w])
    return padded


def upsample_nearest(x: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour upsampling of a C x H x W tensor by an integral factor."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError("upsample_nearest expects a 3-d tensor")
    c, h, w = x.shape
    fh, fw = factor * h, factor * w
    if fh != int(fh) or fw != int(fw):
        raise DimensionError(f"factor {factor} does not scale {x.shape} to integral size")
    rows = np.floor(np.arange(int(fh)) / factor).astype(int)
    cols = np.floor(np.arange(int(fw)) / factor).astype(int)
    return np.ascontiguousarray(x[:, rows][:, :, cols])


def upsample_nearest_adjoint(grad_out: np.ndarray, factor: float, in_shape) -> np.ndarray:
    """Each source cell accumulates the values of the output cells it produced."""
    grad_out = as_tensor(grad_out)
    c, h, w = in_shape
    if grad_out.shape != (c, int(factor * h), int(factor * w)):
        raise DimensionError(
            f"grad shape {grad_out.shape} inconsistent with input {in_shape} at factor {factor}"
        )
    rows = np.floor(np.arange(grad_out.shape[1]) / factor).astype(int)
    cols = np.floor(np.arange(grad_out.shape[2]) / factor).astype(int)
    out = np.zeros((c, h, w))
    np.add.at(out, (slice(None), rows[:, None], cols[None, :]), grad_out)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
