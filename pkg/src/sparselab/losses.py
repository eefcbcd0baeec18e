"""Classification losses: plain mean cross-entropy and its group-reweighted form.

The reweighted objective multiplies each example's cross-entropy by a
per-group weight (``beta`` for bias-conflicting examples, 1 for bias-aligned)
and divides by the batch size. There is deliberately no renormalization by
the mean weight: that would silently rescale the learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor, make_node, mul, scale, tsum


@dataclass
class GroupWeights:
    """beta >= 1 multiplies the loss of bias-conflicting examples."""
    beta: float = 1.0

    def __post_init__(self):
        if self.beta < 1.0:
            raise ValueError(f"beta must be >= 1, got {self.beta}")

    def per_example(self, conflicting, dtype=np.float32):
        """Weight vector for a batch given a boolean conflicting mask."""
        w = np.ones(len(conflicting), dtype=dtype)
        if self.beta != 1.0:
            w[np.asarray(conflicting, dtype=bool)] = self.beta
        return w


def cross_entropy_per_example(logits: Tensor, targets) -> Tensor:
    """Per-example -log softmax(logits)[target], shape [B].

    Internals run in float64 (max-subtraction included) and cast back, so the
    value agrees with an arbitrary-precision evaluation to well under 1e-6.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross entropy expects [B,C] logits, got {tuple(logits.data.shape)}")
    b, c = logits.data.shape
    if c < 2:
        raise ShapeError(f"cross entropy needs at least 2 classes, got {c}")
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {b}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"targets must lie in [0, {c}), got range "
                         f"[{targets.min()}, {targets.max()}]")

    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    ce = (np.log(denom[:, 0]) - z[rows, targets]).astype(logits.dtype)
    softmax = (ez / denom).astype(logits.dtype)

    def _bw(g):
        dlogits = softmax.copy()
        dlogits[rows, targets] -= 1.0
        dlogits *= g[:, None]
        logits.accumulate_grad(dlogits)

    return make_node(ce, (logits,), _bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over the batch (scalar tensor)."""
    ce = cross_entropy_per_example(logits, targets)
    return scale(tsum(ce), 1.0 / ce.data.size)


def erm_loss(logits: Tensor, targets) -> Tensor:
    """Unweighted empirical risk: mean cross-entropy."""
    if logits.data.shape[0] == 0:
        raise ShapeError("erm_loss: empty batch")
    return softmax_cross_entropy(logits, targets)


def reweighted_loss(logits: Tensor, targets, conflicting, weights: GroupWeights) -> Tensor:
    """(1/B) * sum_i w_i * CE_i with w_i = beta on conflicting examples.

    ``conflicting`` is a boolean per-example mask. With beta == 1 this is
    bitwise identical to :func:`erm_loss`.
    """
    if logits.data.shape[0] == 0:
        raise ShapeError("reweighted_loss: empty batch")
    ce = cross_entropy_per_example(logits, targets)
    w = weights.per_example(conflicting, dtype=logits.dtype)
    weighted = mul(ce, Tensor(w))
    return scale(tsum(weighted), 1.0 / ce.data.size)
