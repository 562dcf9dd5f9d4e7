"""Training objectives.

All losses are taped operations: they return scalar tensors whose backward
closures produce analytic gradients for the logits or embeddings. Softmax
and logistic terms are computed through log-sum-exp / softplus so saturated
scores stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _record, add, mul_scalar
from .errors import ConfigurationError, DataError

__all__ = [
    "LossConfig",
    "softmax_cross_entropy",
    "quantization_penalty",
    "weighted_binary_sigmoid_ce",
    "joint_cross_entropy",
    "total_loss",
]


@dataclass
class LossConfig:
    """quant_lambda weights the quantization penalty (0 disables it, the
    advocated setting); nu balances the two multilabel terms; rho scales
    the positive-label half of the binary term."""

    quant_lambda: float = 0.0
    nu: float = 2.0
    rho: float = 5.0

    def __post_init__(self):
        if self.quant_lambda < 0 or self.nu < 0:
            raise ConfigurationError("quant_lambda and nu must be >= 0")
        if self.rho < 1:
            raise ConfigurationError(f"rho must be >= 1, got {self.rho}")


def _class_indices(labels) -> np.ndarray:
    idx = getattr(labels, "indices", labels)
    return np.asarray(idx, dtype=np.int64)


def _membership_matrix(labels) -> np.ndarray:
    mat = getattr(labels, "matrix", labels)
    return np.asarray(mat)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    y = _class_indices(labels)
    n, c = logits.data.shape
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range "
                        f"[{y.min()}, {y.max()}]")
    logp = _log_softmax(logits.data)
    out = Tensor(np.asarray(-logp[np.arange(n), y].mean(), dtype=logits.dtype))

    def bwd(g):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        return (g * grad / n,)

    _record("softmax_ce", (logits,), out, bwd)
    return out


def quantization_penalty(z: Tensor) -> Tensor:
    """Mean over the batch of sum_l (|2 z_l - 1| - 1)^2.

    Zero exactly on {0,1} codes; for z in [0,1]^L this equals four times
    the squared distance to the thresholded code. Subgradient at
    z = 0.5 is taken as 0.
    """
    n = z.data.shape[0]
    u = 2.0 * z.data - 1.0
    r = np.abs(u) - 1.0
    out = Tensor(np.asarray((r * r).sum() / n, dtype=z.dtype))

    def bwd(g):
        return (g * (4.0 * r * np.sign(u)) / n,)

    _record("quantization_penalty", (z,), out, bwd)
    return out


def weighted_binary_sigmoid_ce(logits: Tensor, labels, rho: float = 1.0) -> Tensor:
    """Per-label logistic cross entropy, positives weighted by rho.

    Mean over the batch of
    -sum_p [rho * y_p * log sigmoid(s_p) + (1 - y_p) * log(1 - sigmoid(s_p))],
    oriented so the loss vanishes when positive labels score high.
    """
    y = _membership_matrix(labels)
    n, c = logits.data.shape
    if y.shape != (n, c):
        raise DataError(
            f"membership matrix shape {y.shape} does not match logits {(n, c)}"
        )
    y = y.astype(logits.data.dtype)
    s = logits.data
    # log sigmoid(s) = -softplus(-s); log(1 - sigmoid(s)) = -softplus(s)
    softplus = np.logaddexp(0.0, s)
    log_sig = s - softplus
    log_one_minus = -softplus
    per_elem = rho * y * log_sig + (1.0 - y) * log_one_minus
    out = Tensor(np.asarray(-per_elem.sum() / n, dtype=logits.dtype))

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-s))
        grad = (-rho * y * (1.0 - sig) + (1.0 - y) * sig) / n
        return (g * grad,)

    _record("weighted_binary_ce", (logits,), out, bwd)
    return out


def joint_cross_entropy(logits: Tensor, labels, nu: float = 2.0,
                        rho: float = 5.0) -> Tensor:
    """Multilabel objective: a softmax term averaged over each sample's
    positive labels (weight 1/c+) plus nu times the weighted binary
    sigmoid cross entropy."""
    y = _membership_matrix(labels)
    n, c = logits.data.shape
    if y.shape != (n, c):
        raise DataError(
            f"membership matrix shape {y.shape} does not match logits {(n, c)}"
        )
    c_plus = y.sum(axis=1)
    if (c_plus < 1).any():
        bad = int(np.argmin(c_plus))
        raise DataError(f"sample {bad} has zero positive labels")
    yf = y.astype(logits.data.dtype)
    weights = yf / c_plus[:, None].astype(logits.data.dtype)
    logp = _log_softmax(logits.data)
    softmax_term = Tensor(np.asarray(-(weights * logp).sum() / n, dtype=logits.dtype))

    def bwd(g):
        # sum_j weights_ij == 1 per sample, so the softmax factor is plain
        grad = (np.exp(logp) - weights) / n
        return (g * grad,)

    _record("multilabel_softmax_ce", (logits,), softmax_term, bwd)
    if nu == 0:
        return softmax_term
    bce = weighted_binary_sigmoid_ce(logits, y, rho=rho)
    return add(softmax_term, mul_scalar(bce, nu))


def total_loss(z: Tensor, logits: Tensor, labels, cfg: LossConfig,
               task: str = "multiclass") -> Tensor:
    """Task loss plus quant_lambda times the quantization penalty on the
    embedding output."""
    kind = getattr(labels, "kind", None)
    if kind is not None and kind != task:
        raise DataError(f"label kind {kind!r} does not match task {task!r}")
    if task == "multiclass":
        loss = softmax_cross_entropy(logits, labels)
    elif task == "multilabel":
        loss = joint_cross_entropy(logits, labels, nu=cfg.nu, rho=cfg.rho)
    else:
        raise ConfigurationError(f"unknown task {task!r}")
    if cfg.quant_lambda > 0:
        loss = add(loss, mul_scalar(quantization_penalty(z), cfg.quant_lambda))
    return loss
