"""Comparison explainers: per-feature residuals and kernel SHAP.

Kernel SHAP follows the usual construction: sample (or fully enumerate)
feature coalitions, replace absent features by background values, average
the score over the background set, and fit a weighted least-squares model
whose coefficients are the attributions.  The empty and full coalitions
enter as equality constraints, which makes the efficiency identity
phi_0 + sum(phi) == score(x) hold by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .autonet import LossKind
from .tensor_ops import DimensionError


class DegenerateInputError(ValueError):
    """The coalition regression system is singular."""


def residual_explain(x: np.ndarray, xhat: np.ndarray, loss: LossKind) -> np.ndarray:
    """Per-feature reconstruction error used directly as an attribution."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {xhat.shape}")
    diff = x - xhat
    return diff * diff if loss is LossKind.L2 else np.abs(diff)


def shapley_kernel_weight(M: int, s: int) -> float:
    """Regression weight of a coalition of size s out of M features."""
    if not 0 < s < M:
        raise ValueError(f"coalition size {s} out of the weighted range for M={M}")
    return (M - 1) / (comb(M, s) * s * (M - s))


@dataclass
class ShapConfig:
    nsamples: int = 1000
    background: np.ndarray | None = None  # (n_bg, M)
    seed: int = 0
    enumeration_limit: int = 4096  # enumerate all coalitions when 2^M fits

    def validate(self, M: int) -> None:
        if self.background is None or len(self.background) == 0:
            raise ValueError("kernel SHAP needs a nonempty background dataset")
        if self.nsamples < M + 2:
            raise ValueError(f"nsamples={self.nsamples} too small for M={M} regression")


def _all_masks(M: int) -> np.ndarray:
    bits = np.arange(2**M, dtype=np.uint32)
    return ((bits[:, None] >> np.arange(M)) & 1).astype(np.float64)


def _sampled_masks(M: int, n: int, rng) -> np.ndarray:
    sizes = np.arange(1, M)
    probs = (M - 1) / (sizes * (M - sizes))
    probs = probs / probs.sum()
    masks = np.zeros((n, M))
    drawn = rng.choice(sizes, size=n, p=probs)
    for row, s in enumerate(drawn):
        masks[row, rng.choice(M, size=s, replace=False)] = 1.0
    return masks


def kernel_shap_explain(score_fn, x: np.ndarray, cfg: ShapConfig) -> np.ndarray:
    """Attribution vector for score_fn at x.

    score_fn maps an (n, M) batch of samples to n scalar scores.  Masked
    features are replaced by each background row in turn and the scores are
    averaged over the background.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    M = x.size
    cfg.validate(M)
    bg = np.asarray(cfg.background, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)

    if 2**M <= cfg.enumeration_limit:
        masks = _all_masks(M)
        inner = (masks.sum(axis=1) > 0) & (masks.sum(axis=1) < M)
        masks = masks[inner]
        weights = np.array([shapley_kernel_weight(M, int(s)) for s in masks.sum(axis=1)])
    else:
        masks = _sampled_masks(M, cfg.nsamples, rng)
        weights = np.ones(len(masks))  # sampling distribution already carries the kernel

    # one batched evaluation over every (coalition, background row) pair
    n_bg = len(bg)
    big = np.repeat(bg[None, :, :], len(masks), axis=0)  # (n_coal, n_bg, M)
    big = np.where(masks[:, None, :] > 0, x[None, None, :], big)
    scores = np.asarray(score_fn(big.reshape(-1, M)), dtype=np.float64).reshape(len(masks), n_bg)
    y = scores.mean(axis=1)

    phi0 = float(np.mean(score_fn(bg)))
    fx = float(np.mean(score_fn(x[None, :])))

    # eliminate the last coefficient via the efficiency constraint
    z_last = masks[:, -1]
    A = masks[:, :-1] - z_last[:, None]
    b = y - phi0 - z_last * (fx - phi0)
    sw = np.sqrt(weights)
    Aw = A * sw[:, None]
    bw = b * sw
    if np.linalg.matrix_rank(Aw) < M - 1:
        raise DegenerateInputError("coalition design matrix is rank-deficient")
    head, *_ = np.linalg.lstsq(Aw, bw, rcond=None)
    phi = np.empty(M)
    phi[:-1] = head
    phi[-1] = (fx - phi0) - head.sum()
    return phi
