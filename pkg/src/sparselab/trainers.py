"""End-to-end training procedures.

All trainers are pure functions of (initial parameters, data, config, seed):
batch order, mask initialization, and random growth draw from separate named
seed streams, so e.g. a dense run and a density-1.0 sparse run consume
identical batch sequences and produce bitwise-identical trajectories.

Sparse runs keep masked weights at exactly zero: gradients are masked before
the optimizer step (so Adam moments of inactive weights stay zero) and the
mask is re-applied after it. Topology updates happen after the optimizer
step at every ``delta_t`` steps up to ``t_end``, ranking growth candidates
by the dense gradients captured from that step's backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor, backward, mul, scale, sigmoid, tsum, add
from .losses import GroupWeights, erm_loss, reweighted_loss, softmax_cross_entropy
from .metrics import CostReport, count_flops, evaluate
from .models import Model
from .optim import AdamState, TrainingAborted, adam_step
from .sparsity import (DensityAllocation, SparseLayerState, TopologySchedule,
                       topology_update)


@dataclass
class TrainLoopConfig:
    total_steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eval_every: Optional[int] = None    # defaults to total_steps // 10
    seed: int = 0

    def resolved_eval_every(self, total=None):
        total = total or self.total_steps
        every = self.eval_every if self.eval_every else max(1, total // 10)
        if total % every or total // every < 2:
            raise ValueError(
                f"eval_every={every} must divide total_steps={total} and report "
                f"at least twice")
        return every


@dataclass
class MrmConfig:
    n1_pretrain_steps: int = 600
    n2_probe_steps: int = 300
    alpha: float = 3e-4
    rounds: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class TrainRecord:
    step: int
    train_loss: float
    report: object                 # EvalReport
    params_active: int
    cumulative_train_flops: int


def _seed_streams(seed):
    """Named RNG streams so optional consumers never shift shared ones."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {"data": np.random.default_rng(children[0]),
            "masks": np.random.default_rng(children[1]),
            "growth": np.random.default_rng(children[2])}


def _batch_indices(n, batch_size, rng):
    """Endless shuffled batches, full batches only."""
    if n < batch_size:
        raise ValueError(f"dataset size {n} smaller than batch size {batch_size}")
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def _realized_allocation(model, states):
    if not states:
        return None
    per_layer = [(st.name, st.target_nnz / st.mask.size) for st in states]
    density = sum(st.target_nnz for st in states) / sum(st.mask.size for st in states)
    return DensityAllocation("realized", density, per_layer)


def _active_params(model, states):
    total = sum(p.data.size for _, p in model.params())
    if not states:
        return total
    sparse_total = sum(st.mask.size for st in states)
    sparse_active = sum(st.target_nnz for st in states)
    return total - sparse_total + sparse_active


def _run_steps(model, train_set, test_set, cfg, n_steps, *, weights=None,
               states=None, schedule=None, streams, records, step_offset=0,
               flops_offset=0, eval_every, cost: CostReport, params_active,
               adam=None):
    """The shared train loop; returns the running Adam state."""
    params = [p for _, p in model.params()]
    if adam is None:
        adam = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1,
                                    beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    batches = _batch_indices(len(train_set), cfg.batch_size, streams["data"])
    loss_acc, loss_n = 0.0, 0

    for local_step in range(1, n_steps + 1):
        step = step_offset + local_step
        idx = next(batches)
        x = Tensor(train_set.images[idx])
        targets = train_set.labels[idx]

        logits = model.forward(x, mode="train")
        if weights is None:
            loss = erm_loss(logits, targets)
        else:
            loss = reweighted_loss(logits, targets, ~train_set.aligned[idx], weights)
        if not np.isfinite(loss.data):
            raise TrainingAborted(f"non-finite loss at step {step}")
        backward(loss)

        update_now = (states is not None and schedule is not None
                      and schedule.is_update_step(local_step))
        dense_grads = None
        if update_now and schedule.growth == "gradient":
            dense_grads = {st.name: st.weight.grad.copy() for st in states}

        if states:
            for st in states:
                st.mask_grad()
        adam_step(adam, params)
        if states:
            for st in states:
                st.apply_mask()
        if update_now:
            topology_update(states, schedule, local_step, dense_grads,
                            rng=streams["growth"])

        model.zero_grad()
        loss_acc += float(loss.data)
        loss_n += 1

        if step % eval_every == 0 or local_step == n_steps:
            if records and records[-1].step == step:
                continue
            report = evaluate(model, test_set)
            records.append(TrainRecord(
                step=step,
                train_loss=loss_acc / loss_n,
                report=report,
                params_active=params_active,
                cumulative_train_flops=flops_offset
                + local_step * cost.train_flops_per_step))
            loss_acc, loss_n = 0.0, 0
    return adam


def train_erm(model: Model, train_set, test_set, cfg: TrainLoopConfig,
              weights: Optional[GroupWeights] = None):
    """Dense training with mean (or group-reweighted) cross-entropy."""
    streams = _seed_streams(cfg.seed)
    records = []
    cost = count_flops(model.spec, train_set.images.shape[1:],
                       batch_size=cfg.batch_size, phase="train")
    _run_steps(model, train_set, test_set, cfg, cfg.total_steps, weights=weights,
               streams=streams, records=records,
               eval_every=cfg.resolved_eval_every(),
               cost=cost, params_active=_active_params(model, None))
    return model, records


def init_sparse_states(model: Model, allocation: DensityAllocation, rng):
    """Create masked states for every conv/linear weight in the model."""
    states = []
    for name, weight in model.sparsifiable():
        states.append(SparseLayerState.create(
            name, weight, allocation.density_of(name), rng))
    return states


def train_rest(model: Model, train_set, test_set, cfg: TrainLoopConfig,
               allocation: DensityAllocation, schedule: TopologySchedule,
               weights: GroupWeights):
    """Group-reweighted dynamic sparse training (prune-and-grow)."""
    streams = _seed_streams(cfg.seed)
    states = init_sparse_states(model, allocation, streams["masks"])
    records = []
    cost = count_flops(model.spec, train_set.images.shape[1:],
                       allocation=_realized_allocation(model, states),
                       batch_size=cfg.batch_size, phase="train")
    _run_steps(model, train_set, test_set, cfg, cfg.total_steps, weights=weights,
               states=states, schedule=schedule, streams=streams, records=records,
               eval_every=cfg.resolved_eval_every(),
               cost=cost, params_active=_active_params(model, states))
    return model, records, states


def train_sparse_unweighted(model: Model, train_set, test_set,
                            cfg: TrainLoopConfig, allocation: DensityAllocation,
                            schedule: TopologySchedule):
    """Plain dynamic sparse training: the growth criterion picks the variant
    (random growth or gradient growth); mechanics are otherwise identical to
    the reweighted trainer with beta = 1."""
    return train_rest(model, train_set, test_set, cfg, allocation, schedule,
                      GroupWeights(beta=1.0))


# -- three-stage masked-retraining baseline ---------------------------------

def _probe_mask_logits(model, train_set, cfg, mrm, streams, round_idx, on_event):
    """Learn per-weight mask logits by minimizing CE(sigmoid(pi) * theta)
    plus alpha * sum(pi), with theta frozen. Returns hard-threshold masks."""
    layer_weights = model.sparsifiable()
    pis = [(name, Tensor(np.ones_like(w.data), requires_grad=True))
           for name, w in layer_weights]
    weight_layers = [ly for ly in model.layers if ly.spec.kind in ("conv2d", "linear")]
    originals = [ly.weight for ly in weight_layers]

    model.set_requires_grad(False)
    pi_params = [p for _, p in pis]
    if on_event:
        total = sum(p.data.size for p in pi_params)
        active = sum(int(np.count_nonzero(p.data > 0)) for p in pi_params)
        on_event("probe_start", round=round_idx, density=active / total)
    adam = AdamState.for_params(pi_params, lr=cfg.lr, beta1=cfg.beta1,
                                beta2=cfg.beta2, weight_decay=0.0)
    batches = _batch_indices(len(train_set), cfg.batch_size, streams["data"])
    try:
        for probe_step in range(1, mrm.n2_probe_steps + 1):
            idx = next(batches)
            for layer, orig, (_, pi) in zip(weight_layers, originals, pis):
                layer.weight = mul(orig.detach(), sigmoid(pi))
            logits = model.forward(Tensor(train_set.images[idx]), mode="train")
            loss = softmax_cross_entropy(logits, train_set.labels[idx])
            pi_total = tsum(pi_params[0])
            for p in pi_params[1:]:
                pi_total = add(pi_total, tsum(p))
            loss = add(loss, scale(pi_total, mrm.alpha))
            if not np.isfinite(loss.data):
                raise TrainingAborted(f"non-finite probe loss at step {probe_step}")
            backward(loss)
            adam_step(adam, pi_params)
            for p in pi_params:
                p.grad = None
            if on_event:
                on_event("probe_step", round=round_idx, step=probe_step,
                         pi_sum=float(sum(p.data.sum(dtype=np.float64)
                                          for p in pi_params)))
    finally:
        for layer, orig in zip(weight_layers, originals):
            layer.weight = orig
        model.set_requires_grad(True)

    masks = {}
    for name, pi in pis:
        masks[name] = (pi.data > 0).astype(np.float32)
        if not masks[name].any():
            raise TrainingAborted(
                f"probe produced an all-zero mask for {name} (round {round_idx})")
    return masks


def train_mrm(model: Model, train_set, test_set, cfg: TrainLoopConfig,
              mrm: MrmConfig, on_event=None):
    """Pretrain dense, learn a mask by penalized logits, hard-threshold,
    reset parameters to their initial values, retrain the subnetwork;
    stages 2-3 repeat ``mrm.rounds`` times."""
    streams = _seed_streams(cfg.seed)
    w0 = model.snapshot()
    if on_event:
        on_event("start", w0=w0)

    total_theta_steps = mrm.n1_pretrain_steps * (1 + mrm.rounds)
    eval_every = cfg.resolved_eval_every(total_theta_steps)
    records = []
    dense_cost = count_flops(model.spec, train_set.images.shape[1:],
                             batch_size=cfg.batch_size, phase="train")

    _run_steps(model, train_set, test_set, cfg, mrm.n1_pretrain_steps,
               streams=streams, records=records, eval_every=eval_every,
               cost=dense_cost, params_active=_active_params(model, None))
    step = mrm.n1_pretrain_steps
    flops = mrm.n1_pretrain_steps * dense_cost.train_flops_per_step

    states = None
    for round_idx in range(1, mrm.rounds + 1):
        masks = _probe_mask_logits(model, train_set, cfg, mrm, streams,
                                   round_idx, on_event)
        if on_event:
            total = sum(m.size for m in masks.values())
            active = sum(int(m.sum()) for m in masks.values())
            on_event("probe_end", round=round_idx, masks=masks,
                     density=active / total)

        model.restore(w0)
        states = [SparseLayerState(name, w, masks[name],
                                   int(np.count_nonzero(masks[name])))
                  for name, w in model.sparsifiable()]
        for st in states:
            st.apply_mask()
        if on_event:
            on_event("retrain_start", round=round_idx,
                     snapshot=model.snapshot(), states=states)

        flops += mrm.n2_probe_steps * dense_cost.train_flops_per_step
        cost = count_flops(model.spec, train_set.images.shape[1:],
                           allocation=_realized_allocation(model, states),
                           batch_size=cfg.batch_size, phase="train")
        _run_steps(model, train_set, test_set, cfg, mrm.n1_pretrain_steps,
                   states=states, streams=streams, records=records,
                   step_offset=step, flops_offset=flops, eval_every=eval_every,
                   cost=cost, params_active=_active_params(model, states))
        step += mrm.n1_pretrain_steps
        flops += mrm.n1_pretrain_steps * cost.train_flops_per_step

    return model, records, states
