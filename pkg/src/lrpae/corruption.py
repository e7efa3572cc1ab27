"""Self-supervised validation: manufacture anomalies with a known cause.

One feature of a clean sample is corrupted (zeroed, randomized, or pushed
adversarially) and the corrupted index becomes the ground-truth explanation.
Records are only kept when the model's anomaly score clears a threshold, so
every record is a genuine anomaly from the model's point of view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autonet import LossKind, Model, backprop_to_input, forward_batch, forward_with_trace


class CalibrationError(RuntimeError):
    """The score calibration has not been fitted."""


class CorruptionError(RuntimeError):
    """Corruption failed (NaN gradient or exhausted retry budget)."""


@dataclass
class ScoreCalibration:
    """Maps raw squared-reconstruction errors to anomaly scores in [0, 1].

    The reference error is the 99.5th percentile of the calibration set's
    errors, so roughly every clean sample scores below 1.
    """

    e_ref: float | None = None
    percentile: float = 99.5

    def fit(self, model: Model, clean_data: np.ndarray) -> "ScoreCalibration":
        X = np.asarray(clean_data, dtype=np.float64)
        Xhat = forward_batch(model, X)
        errors = np.mean((X - Xhat) ** 2, axis=1)
        self.e_ref = float(np.percentile(errors, self.percentile))
        return self

    def score(self, errors: np.ndarray) -> np.ndarray:
        if self.e_ref is None:
            raise CalibrationError("score calibration is not fitted")
        return np.clip(np.asarray(errors, dtype=np.float64) / self.e_ref, 0.0, 1.0)


def anomaly_score(model: Model, x: np.ndarray, calibration: ScoreCalibration) -> float:
    x = np.asarray(x, dtype=np.float64)
    xhat = forward_batch(model, x[None, :])[0]
    return float(calibration.score(np.array([np.mean((x - xhat) ** 2)]))[0])


def anomaly_score_batch(model: Model, X: np.ndarray, calibration: ScoreCalibration) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Xhat = forward_batch(model, X)
    return calibration.score(np.mean((X - Xhat) ** 2, axis=1))


def corrupt_null(x: np.ndarray, c: int) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    out[c] = 0.0
    return out


def corrupt_random(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    out[c] = rng.uniform(0.0, 1.0)
    return out


@dataclass
class AdversarialConfig:
    theta: float = 1.0  # weight on suppressing the corrupted feature's own error
    alpha: float = 0.05  # signed-gradient step size
    k: int = 10  # step-size updater cadence
    max_iters: int = 500
    seed_with_random: bool = True

    def __post_init__(self):
        if self.theta <= 0 or self.alpha <= 0 or self.k <= 0 or self.max_iters <= 0:
            raise ValueError("adversarial parameters must all be positive")


def _phi_terms(model: Model, x: np.ndarray):
    xhat, trace = forward_with_trace(model, x)
    return xhat, trace, (x - xhat) ** 2


def adversarial_loss(model: Model, x: np.ndarray, c: int, theta: float) -> float:
    """Mean of the other features' errors minus theta times the corrupted one's."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= c < x.size:
        raise IndexError(f"feature index {c} out of range for m={x.size}")
    _, _, phi = _phi_terms(model, x)
    return float((phi.sum() - phi[c] - theta * phi[c]) / x.size)


def _adversarial_grad_c(model: Model, x: np.ndarray, c: int, theta: float) -> float:
    """d(adversarial objective)/d(x_c), through the network and directly."""
    m = x.size
    xhat, trace, _ = _phi_terms(model, x)
    w = np.ones(m)
    w[c] = -theta
    # objective = (1/m) sum_i w_i (x_i - xhat_i)^2
    g_out = (-2.0 / m) * w * (x - xhat)
    g_in = backprop_to_input(model, trace, g_out)
    direct = (2.0 / m) * w[c] * (x[c] - xhat[c])
    return float(g_in[c] + direct)


def corrupt_adversarial(model: Model, x: np.ndarray, c: int, cfg: AdversarialConfig,
                        rng: np.random.Generator, with_trace: bool = False):
    """Iterative signed-gradient ascent on the adversarial objective, updating
    only feature c.

    Every k iterations the step size is halved if the corrupted feature's own
    error did not decrease and the other features' total error did not
    increase (both judged against the state k iterations earlier).  No
    clipping is applied; the result may leave the data range.  Returns the
    best iterate seen, so the objective never ends below its starting value.

    With with_trace=True, also returns the sequence of objective values at
    every accepted (best-so-far) iterate, starting value included.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= c < x.size:
        raise IndexError(f"feature index {c} out of range for m={x.size}")
    cur = np.array(x)
    if cfg.seed_with_random:
        cur = corrupt_random(cur, c, rng)

    def split_errors(v):
        _, _, phi = _phi_terms(model, v)
        return float(phi[c]), float(phi.sum() - phi[c])

    alpha = cfg.alpha
    best = np.array(cur)
    best_obj = adversarial_loss(model, cur, c, cfg.theta)
    accepted = [best_obj]
    phi_c_ref, phi_rest_ref = split_errors(cur)

    for it in range(1, cfg.max_iters + 1):
        g = _adversarial_grad_c(model, cur, c, cfg.theta)
        if not np.isfinite(g):
            raise CorruptionError(f"non-finite gradient at iteration {it}")
        cur[c] += alpha * np.sign(g)
        obj = adversarial_loss(model, cur, c, cfg.theta)
        if obj >= best_obj:
            best_obj = obj
            best = np.array(cur)
            accepted.append(obj)
        if it % cfg.k == 0:
            phi_c, phi_rest = split_errors(cur)
            if phi_c >= phi_c_ref and phi_rest <= phi_rest_ref:
                alpha *= 0.5
            phi_c_ref, phi_rest_ref = phi_c, phi_rest
    if with_trace:
        return best, np.array(accepted)
    return best


@dataclass
class CorruptionRecord:
    original: np.ndarray
    corrupted: np.ndarray
    c: int
    strategy: str
    anomaly_score: float


#: Default acceptance thresholds per strategy.
DEFAULT_THRESHOLDS = {"adversarial": 0.3, "random": 0.5, "null": 0.3}


@dataclass
class ValidationConfig:
    K: int = 100
    strategy: str = "null"  # null | random | adversarial
    threshold: float | None = None  # falls back to the per-strategy default
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    seed: int = 0
    retry_factor: int = 50  # retry budget = retry_factor * K

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.strategy not in DEFAULT_THRESHOLDS:
            raise ValueError(f"unknown corruption strategy {self.strategy!r}")
        if self.threshold is None:
            self.threshold = DEFAULT_THRESHOLDS[self.strategy]
        if not 0 <= self.threshold < 1:
            raise ValueError("threshold must lie in [0, 1)")


def generate_validation_set(model: Model, clean_data: np.ndarray, cfg: ValidationConfig,
                            calibration: ScoreCalibration | None = None):
    """Produce exactly cfg.K corruption records whose scores clear the threshold.

    Samples and features are drawn uniformly; candidates below the threshold
    are resampled within a bounded retry budget.  Deterministic given
    (seed, config, model).
    """
    X = np.asarray(clean_data, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("clean_data must be nonempty")
    if calibration is None:
        calibration = ScoreCalibration().fit(model, X)
    rng = np.random.default_rng(cfg.seed)
    m = X.shape[1]

    records = []
    attempts = 0
    budget = cfg.retry_factor * cfg.K
    while len(records) < cfg.K:
        if attempts >= budget:
            rate = len(records) / attempts
            raise CorruptionError(
                f"retry budget exhausted: {len(records)}/{cfg.K} records after "
                f"{attempts} attempts (acceptance rate {rate:.3f})"
            )
        attempts += 1
        x = X[rng.integers(len(X))]
        c = int(rng.integers(m))
        if cfg.strategy == "null":
            corrupted = corrupt_null(x, c)
        elif cfg.strategy == "random":
            corrupted = corrupt_random(x, c, rng)
        else:
            corrupted = corrupt_adversarial(model, x, c, cfg.adversarial, rng)
        score = anomaly_score(model, corrupted, calibration)
        if score > cfg.threshold:
            records.append(CorruptionRecord(np.array(x), corrupted, c, cfg.strategy, score))
    return records
