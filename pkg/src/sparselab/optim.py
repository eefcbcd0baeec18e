"""Adam with classic (coupled) L2 weight decay.

Weight decay is added to the gradient before the moment updates, matching
the original Adam formulation rather than the decoupled variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingAborted(RuntimeError):
    """Raised when training hits a non-recoverable numeric failure."""


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=0.0):
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(state: AdamState, params, grads=None):
    """One Adam update over a parameter list (in place).

    ``grads`` defaults to each parameter's accumulated ``.grad``. Non-finite
    gradient entries abort the run with a diagnostic naming the offender.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("adam_step: params, grads and moments must align")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingAborted(
                f"non-finite gradient in parameter {i} (shape {p.data.shape}, "
                f"{bad} bad entries) at optimizer step {t}")
        if state.weight_decay != 0.0:
            g = g + p.data.dtype.type(state.weight_decay) * p.data
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.data -= state.lr * (m / bc1) / denom
