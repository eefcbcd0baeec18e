"""Binary-mask bookkeeping and dynamic topology search for sparse training.

Layer-wise densities come from a uniform, ER, or ERK allocation solved
against a global parameter budget. During training, every ``delta_t`` steps
(up to ``t_end``) each sparsified layer prunes the smallest-magnitude active
weights and immediately grows the same number of inactive ones, chosen
either by largest dense-gradient magnitude or uniformly at random. The
exploration fraction follows a cosine decay from ``r0`` to zero at ``t_end``.

Masks are float 0/1 arrays over dense storage; newly grown weights start at
exactly zero so the loss is continuous across a topology update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


class SparsityError(ValueError):
    pass


@dataclass
class DensityAllocation:
    method: str
    global_density: float
    per_layer: list = field(default_factory=list)  # (layer id, density) pairs

    def density_of(self, name):
        for n, d in self.per_layer:
            if n == name:
                return d
        raise KeyError(name)


def _matrix_dims(shape):
    """View a weight shape as a 2-d [fan_in, fan_out] matrix."""
    if len(shape) == 2:      # linear [in, out]
        return shape[0], shape[1]
    if len(shape) == 4:      # conv [out, in, kh, kw]
        o, i, kh, kw = shape
        return i * kh * kw, o
    raise SparsityError(f"cannot sparsify weight of shape {shape}")


def _layer_scale(shape, method):
    """Relative density score: higher for layers with fewer parameters."""
    if method == "erk" and len(shape) == 4:
        o, i, kh, kw = shape
        return (i + o + kh + kw) / (i * o * kh * kw)
    n_in, n_out = _matrix_dims(shape)
    return (n_in + n_out) / (n_in * n_out)


def allocate_density(layer_shapes, method, global_density) -> DensityAllocation:
    """Solve per-layer densities meeting a global parameter budget.

    ``layer_shapes`` is a list of (layer id, weight shape) pairs. For ER/ERK
    a scalar c is found such that densities min(1, c * scale_l) use exactly
    ``global_density`` of the total parameters, re-solving whenever a layer
    saturates at density 1.
    """
    if not 0.0 < global_density <= 1.0:
        raise SparsityError(f"global density must be in (0,1], got {global_density}")
    if not layer_shapes:
        raise SparsityError("no sparsifiable layers")
    if method not in ("uniform", "er", "erk"):
        raise SparsityError(f"unknown allocation method {method!r}")

    names = [n for n, _ in layer_shapes]
    sizes = np.array([int(np.prod(s)) for _, s in layer_shapes], dtype=np.int64)

    if method == "uniform" or global_density == 1.0:
        d = 1.0 if global_density == 1.0 else global_density
        return DensityAllocation(method, global_density,
                                 [(n, d) for n in names])

    scales = np.array([_layer_scale(s, method) for _, s in layer_shapes])
    budget = global_density * sizes.sum()
    dense = np.zeros(len(sizes), dtype=bool)
    for _ in range(len(sizes) + 1):
        remaining = budget - sizes[dense].sum()
        weight = (scales * sizes)[~dense].sum()
        if remaining < 0 or weight <= 0:
            raise SparsityError(
                f"cannot meet global density {global_density}: budget exhausted "
                f"after saturating {int(dense.sum())} layers")
        c = remaining / weight
        over = (~dense) & (c * scales > 1.0)
        if not over.any():
            break
        dense |= over
    densities = np.where(dense, 1.0, np.minimum(1.0, c * scales))
    return DensityAllocation(method, global_density,
                             list(zip(names, densities.tolist())))


def init_mask(shape, density, rng) -> np.ndarray:
    """Random binary mask with exactly round(density * size) ones."""
    if not 0.0 < density <= 1.0:
        raise SparsityError(f"density must be in (0,1], got {density}")
    size = int(np.prod(shape))
    k = int(round(density * size))
    if k == 0:
        raise SparsityError(
            f"density {density} on {size} weights rounds to zero active weights "
            f"(layer would be dead)")
    mask = np.zeros(size, dtype=np.float32)
    if k == size:
        mask[:] = 1.0
    else:
        mask[rng.permutation(size)[:k]] = 1.0
    return mask.reshape(shape)


@dataclass
class SparseLayerState:
    """A weight tensor plus its mask and the invariant active count."""
    name: str
    weight: Tensor
    mask: np.ndarray
    target_nnz: int

    @classmethod
    def create(cls, name, weight, density, rng):
        mask = init_mask(weight.data.shape, density, rng)
        state = cls(name, weight, mask, int(np.count_nonzero(mask)))
        state.apply_mask()
        return state

    @property
    def nnz(self):
        return int(np.count_nonzero(self.mask))

    def apply_mask(self):
        self.weight.data *= self.mask

    def mask_grad(self):
        if self.weight.grad is not None:
            self.weight.grad *= self.mask


@dataclass
class TopologySchedule:
    """Cosine-decayed prune/grow exploration schedule."""
    r0: float = 0.3
    delta_t: int = 1000
    t_end: int = 0
    growth: str = "gradient"  # or "random"

    def __post_init__(self):
        if not 0.0 <= self.r0 < 1.0:
            raise SparsityError(f"r0 must be in [0,1), got {self.r0}")
        if self.growth not in ("gradient", "random"):
            raise SparsityError(f"unknown growth criterion {self.growth!r}")
        if self.delta_t < 1:
            raise SparsityError(f"delta_t must be >= 1, got {self.delta_t}")

    def rate(self, t):
        """Exploration fraction r_t = (r0/2) * (1 + cos(pi * t / t_end))."""
        if t > self.t_end or self.t_end == 0:
            return 0.0
        return 0.5 * self.r0 * (1.0 + np.cos(np.pi * t / self.t_end))

    def is_update_step(self, t):
        return t > 0 and t <= self.t_end and t % self.delta_t == 0


def prune_step(state: SparseLayerState, r_t):
    """Deactivate the round(r_t * target_nnz) smallest-magnitude active weights.

    Ties break toward the lowest flat index. Returns (pruned flat indices,
    their pre-prune values).
    """
    if not 0.0 <= r_t < 1.0:
        raise SparsityError(f"exploration rate must be in [0,1), got {r_t}")
    k = int(round(r_t * state.target_nnz))
    if k == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=state.weight.dtype)
    w = state.weight.data.reshape(-1)
    m = state.mask.reshape(-1)
    active = np.flatnonzero(m)
    order = np.argsort(np.abs(w[active]), kind="stable")
    pruned = active[order[:k]]
    old_values = w[pruned].copy()
    m[pruned] = 0.0
    w[pruned] = 0.0
    return pruned, old_values


def grow_step(state: SparseLayerState, k, criterion, dense_grad=None, rng=None,
              excluded=None, excluded_values=None):
    """Activate k currently-inactive weights, initialized to exactly zero.

    Candidates are the weights that were already inactive before this
    topology update (``excluded`` holds the just-pruned indices). The
    gradient criterion picks the largest |dense gradient| (ties toward the
    lowest flat index); the random criterion samples uniformly. If fewer
    than k candidates exist, the shortfall is restored from the just-pruned
    set, largest pre-prune magnitude first.
    """
    if k == 0:
        return
    m = state.mask.reshape(-1)
    w = state.weight.data.reshape(-1)
    cand_mask = m == 0.0
    if excluded is not None and len(excluded):
        cand_mask[excluded] = False
    candidates = np.flatnonzero(cand_mask)

    short = k - len(candidates)
    if short > 0:
        if excluded is None or excluded_values is None or short > len(excluded):
            raise SparsityError(
                f"{state.name}: need {k} growth candidates, only {len(candidates)} "
                f"inactive weights available")
        order = np.argsort(-np.abs(excluded_values), kind="stable")
        restore = excluded[order[:short]]
        m[restore] = 1.0
        w[restore] = excluded_values[order[:short]]
        k = len(candidates)
        if k == 0:
            return

    if criterion == "gradient":
        if dense_grad is None:
            raise SparsityError(
                f"{state.name}: gradient growth requires dense gradients")
        g = np.abs(dense_grad.reshape(-1)[candidates])
        order = np.argsort(-g, kind="stable")
        grown = candidates[order[:k]]
    elif criterion == "random":
        if rng is None:
            raise SparsityError(f"{state.name}: random growth requires an rng")
        grown = candidates[rng.permutation(len(candidates))[:k]]
    else:
        raise SparsityError(f"unknown growth criterion {criterion!r}")

    m[grown] = 1.0
    w[grown] = 0.0


def topology_update(states, schedule: TopologySchedule, step, dense_grads=None,
                    rng=None):
    """One prune-then-grow pass over every sparsified layer.

    ``dense_grads`` maps layer id to the gradient of the training loss with
    respect to the full (dense) weight array; masked-out weights are zero in
    storage, so their entries are exactly the potential gradients the
    gradient criterion ranks.
    """
    r_t = schedule.rate(step)
    if schedule.growth == "gradient" and r_t > 0 and dense_grads is None:
        raise SparsityError("gradient growth requires dense gradients")
    for state in states:
        pruned, old_values = prune_step(state, r_t)
        grow_step(state, len(pruned), schedule.growth,
                  dense_grad=None if dense_grads is None else dense_grads[state.name],
                  rng=rng, excluded=pruned, excluded_values=old_values)
        if state.nnz != state.target_nnz:
            raise SparsityError(
                f"{state.name}: active count {state.nnz} != target {state.target_nnz} "
                f"after topology update at step {step}")


# -- mask snapshots --------------------------------------------------------

_MASK_MAGIC = b"SLMK"


def export_masks(states, fileobj_or_path):
    """Write masks as flat 0/1 bytes with a (layer id, shape) header each."""
    own = isinstance(fileobj_or_path, (str, bytes)) or hasattr(fileobj_or_path, "__fspath__")
    f = open(fileobj_or_path, "wb") if own else fileobj_or_path
    try:
        f.write(_MASK_MAGIC)
        f.write(struct.pack("<I", len(states)))
        for st in states:
            name = st.name.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            shape = st.mask.shape
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(st.mask.astype(np.uint8).tobytes())
    finally:
        if own:
            f.close()


def import_masks(fileobj_or_path):
    """Read a mask snapshot back as {layer id: float mask array}."""
    own = isinstance(fileobj_or_path, (str, bytes)) or hasattr(fileobj_or_path, "__fspath__")
    f = open(fileobj_or_path, "rb") if own else fileobj_or_path
    try:
        if f.read(4) != _MASK_MAGIC:
            raise SparsityError("not a mask snapshot (bad magic)")
        (count,) = struct.unpack("<I", f.read(4))
        masks = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape))
            raw = np.frombuffer(f.read(size), dtype=np.uint8)
            if raw.size != size:
                raise SparsityError(f"truncated mask payload for {name!r}")
            masks[name] = raw.reshape(shape).astype(np.float32)
        return masks
    finally:
        if own:
            f.close()
