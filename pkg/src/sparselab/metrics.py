"""Group-wise accuracy evaluation and analytic FLOPs / parameter accounting.

FLOPs are counted from the topology, not measured: a multiply-add is two
operations, biases cost one add per output element, and normalization /
activation / pooling layers are charged a fixed small per-element cost. A
training step is costed at 3x the forward pass (forward plus roughly twice
that for the backward). Sparse layers scale their weight-dependent terms by
the layer's active-weight count, so the sparse/dense ratio of those terms
equals the layer density exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor
from .layers import LayerSpec
from .models import Model, ModelSpec
from .sparsity import DensityAllocation


@dataclass
class EvalReport:
    overall_acc: float
    unbiased_acc: float
    conflicting_acc: float
    worst_group_acc: float
    n_examples: int


@dataclass
class CostReport:
    params_total: int
    params_active: int
    train_flops_per_step: int
    infer_flops_per_example: int
    cumulative_train_flops: int = 0


def predict(model: Model, images, batch_size=256):
    """Eval-mode argmax predictions for an [N,C,H,W] image array."""
    preds = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        stop = min(start + batch_size, len(images))
        logits = model.forward(Tensor(images[start:stop]), mode="eval")
        preds[start:stop] = logits.data.argmax(axis=1)
    return preds


def evaluate(model: Model, dataset, batch_size=256) -> EvalReport:
    """Accuracy overall, on the conflicting subset, and for the worst
    (label x alignment) group present in the dataset."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty test set")
    preds = predict(model, dataset.images, batch_size)
    correct = preds == dataset.labels
    overall = float(correct.mean())

    conflicting = ~dataset.aligned
    conflicting_acc = float(correct[conflicting].mean()) if conflicting.any() else math.nan

    worst = 1.0
    for label in np.unique(dataset.labels):
        for aligned in (True, False):
            grp = (dataset.labels == label) & (dataset.aligned == aligned)
            if grp.any():
                worst = min(worst, float(correct[grp].mean()))

    return EvalReport(overall_acc=overall, unbiased_acc=overall,
                      conflicting_acc=conflicting_acc, worst_group_acc=worst,
                      n_examples=len(dataset))


# -- analytic cost model -----------------------------------------------------

# fixed per-element charges for layers without weights
_ELEMENTWISE_COST = {"relu": 1, "batchnorm2d": 4}


def _layer_forward_flops(ls: LayerSpec, shape, nnz=None):
    """(flops, params_total, params_active, output shape) for one example."""
    if ls.kind == "conv2d":
        c, h, w = shape
        h_out = (h + 2 * ls.padding - ls.kernel_h) // ls.stride + 1
        w_out = (w + 2 * ls.padding - ls.kernel_w) // ls.stride + 1
        n_weights = ls.out_channels * ls.in_channels * ls.kernel_h * ls.kernel_w
        active = n_weights if nnz is None else nnz
        flops = 2 * h_out * w_out * active          # multiply-adds, active taps only
        flops += h_out * w_out * ls.out_channels    # bias adds
        return flops, n_weights + ls.out_channels, active + ls.out_channels, \
            (ls.out_channels, h_out, w_out)
    if ls.kind == "linear":
        n_weights = ls.in_features * ls.out_features
        active = n_weights if nnz is None else nnz
        flops = 2 * active + ls.out_features
        return flops, n_weights + ls.out_features, active + ls.out_features, \
            (ls.out_features,)
    if ls.kind == "batchnorm2d":
        n = int(np.prod(shape))
        return _ELEMENTWISE_COST["batchnorm2d"] * n, 2 * ls.num_features, \
            2 * ls.num_features, shape
    if ls.kind == "relu":
        n = int(np.prod(shape))
        return _ELEMENTWISE_COST["relu"] * n, 0, 0, shape
    if ls.kind == "maxpool2d":
        c, h, w = shape
        out = (c, h // ls.pool, w // ls.pool)
        comparisons = (ls.pool * ls.pool - 1) * int(np.prod(out))
        return comparisons, 0, 0, out
    if ls.kind == "global_avg_pool":
        c, h, w = shape
        return c * h * w + c, 0, 0, (c,)
    if ls.kind == "flatten":
        return 0, 0, 0, (int(np.prod(shape)),)
    raise ValueError(f"unknown layer kind {ls.kind!r}")


def _nnz_for(ls: LayerSpec, name, allocation: Optional[DensityAllocation]):
    if allocation is None or ls.kind not in ("conv2d", "linear"):
        return None
    density = allocation.density_of(name)
    if ls.kind == "conv2d":
        size = ls.out_channels * ls.in_channels * ls.kernel_h * ls.kernel_w
    else:
        size = ls.in_features * ls.out_features
    return int(round(density * size))


def spec_layer_names(spec: ModelSpec):
    """The qualified names Model assigns, in layer order."""
    counts, names = {}, []
    for ls in spec.layers:
        counts[ls.kind] = counts.get(ls.kind, 0) + 1
        names.append(f"{ls.kind}{counts[ls.kind]}")
    return names


def count_flops(spec: ModelSpec, input_shape, allocation=None, batch_size=1,
                phase="infer") -> CostReport:
    """Analytic parameter and FLOP counts for a model spec.

    ``input_shape`` is a single example's shape, e.g. (3, 28, 28), and
    ``allocation`` scales weight-term FLOPs of conv/linear layers by their
    density. Both phases are always reported: ``infer_flops_per_example`` is
    one forward pass, ``train_flops_per_step`` charges 3x forward at
    ``batch_size`` (forward plus roughly 2x for the backward).
    """
    if phase not in ("train", "infer"):
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    shape = tuple(input_shape)
    forward = 0
    params_total = 0
    params_active = 0
    for ls, name in zip(spec.layers, spec_layer_names(spec)):
        nnz = _nnz_for(ls, f"{name}.weight", allocation)
        flops, p_total, p_active, shape = _layer_forward_flops(ls, shape, nnz)
        forward += flops
        params_total += p_total
        params_active += p_active
    return CostReport(params_total=params_total, params_active=params_active,
                      train_flops_per_step=3 * forward * batch_size,
                      infer_flops_per_example=forward)
