"""Model builders: the three-block CNN used for colored-digit runs and a
small MLP used as a test vehicle, plus a binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .layers import LayerSpec, build_layer


@dataclass
class ModelSpec:
    model_id: str
    layers: list          # ordered LayerSpec
    num_classes: int


class Model:
    def __init__(self, spec: ModelSpec, layers):
        self.spec = spec
        self.layers = layers

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def params(self):
        """All trainable parameters as (qualified name, Tensor) pairs."""
        out = []
        for i, layer in enumerate(self.layers):
            for pname, p in layer.params():
                out.append((f"{layer.name}.{pname}", p))
        return out

    def state_arrays(self):
        """Parameters plus non-trainable state (batchnorm running stats)."""
        out = list(self.params())
        for layer in self.layers:
            if hasattr(layer, "state"):
                for sname, arr in layer.state():
                    out.append((f"{layer.name}.{sname}", arr))
        return out

    def sparsifiable(self):
        """Conv and linear weight tensors, the sparse-training scope."""
        out = []
        for layer in self.layers:
            if layer.spec.kind in ("conv2d", "linear"):
                out.append((f"{layer.name}.weight", layer.weight))
        return out

    def snapshot(self):
        return {name: np.array(arr.data if isinstance(arr, Tensor) else arr)
                for name, arr in self.state_arrays()}

    def restore(self, snap):
        for name, arr in self.state_arrays():
            dst = arr.data if isinstance(arr, Tensor) else arr
            dst[...] = snap[name]

    def set_requires_grad(self, flag):
        for _, p in self.params():
            p.requires_grad = flag

    def zero_grad(self):
        for _, p in self.params():
            p.grad = None


def simple_cnn_spec(num_classes=10, in_channels=3):
    """Three conv blocks (64/128/256 maps, 3x3, BN+ReLU, 2x2 pools), GAP head."""
    widths = (64, 128, 256)
    layers = []
    c_in = in_channels
    for i, c_out in enumerate(widths):
        layers.append(LayerSpec("conv2d", in_channels=c_in, out_channels=c_out,
                                kernel_h=3, kernel_w=3, stride=1, padding=1))
        layers.append(LayerSpec("batchnorm2d", num_features=c_out))
        layers.append(LayerSpec("relu"))
        if i < 2:
            layers.append(LayerSpec("maxpool2d", pool=2))
        c_in = c_out
    layers.append(LayerSpec("global_avg_pool"))
    layers.append(LayerSpec("linear", in_features=widths[-1],
                            out_features=num_classes))
    return ModelSpec("simple_cnn", layers, num_classes)


def mlp_spec(widths):
    if len(widths) < 2:
        raise ValueError(f"an MLP needs at least 2 widths, got {widths}")
    layers = []
    for i in range(len(widths) - 1):
        layers.append(LayerSpec("linear", in_features=widths[i],
                                out_features=widths[i + 1]))
        if i < len(widths) - 2:
            layers.append(LayerSpec("relu"))
    return ModelSpec("mlp", layers, widths[-1])


def _instantiate(spec: ModelSpec, seed, dtype):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    layers = []
    counts = {}
    for ls in spec.layers:
        counts[ls.kind] = counts.get(ls.kind, 0) + 1
        name = f"{ls.kind}{counts[ls.kind]}"
        layers.append(build_layer(ls, rng=rng, dtype=dtype, name=name))
    return Model(spec, layers)


def build_simple_cnn(num_classes=10, seed=0, dtype=np.float32, in_channels=3):
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return _instantiate(simple_cnn_spec(num_classes, in_channels), seed, dtype)


def build_mlp(widths, seed=0, dtype=np.float32):
    return _instantiate(mlp_spec(widths), seed, dtype)


def build_model(spec: ModelSpec, seed=0, dtype=np.float32):
    """Instantiate an arbitrary ModelSpec with seeded initialization."""
    return _instantiate(spec, seed, dtype)


def param_count(spec: ModelSpec):
    """Closed-form total parameter count for a model spec."""
    total = 0
    for ls in spec.layers:
        if ls.kind == "conv2d":
            total += ls.out_channels * ls.in_channels * ls.kernel_h * ls.kernel_w
            total += ls.out_channels
        elif ls.kind == "linear":
            total += ls.in_features * ls.out_features + ls.out_features
        elif ls.kind == "batchnorm2d":
            total += 2 * ls.num_features
    return total


# -- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"SLCK"


def save_checkpoint(model: Model, path, masks=None):
    """Binary checkpoint: model id, entry count, then per-entry name, shape,
    float32-LE payload, and a 0/1 mask payload for sparsified weights."""
    masks = masks or {}
    entries = model.state_arrays()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        mid = model.spec.model_id.encode("utf-8")
        f.write(struct.pack("<H", len(mid)))
        f.write(mid)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            data = arr.data if isinstance(arr, Tensor) else arr
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())
            mask = masks.get(name)
            f.write(struct.pack("<B", 0 if mask is None else 1))
            if mask is not None:
                f.write(mask.astype(np.uint8).tobytes())


def load_checkpoint(path):
    """Returns (model_id, {name: float32 array}, {name: float mask})."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (mlen,) = struct.unpack("<H", f.read(2))
        model_id = f.read(mlen).decode("utf-8")
        (count,) = struct.unpack("<I", f.read(4))
        arrays, masks = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape).copy()
            (has_mask,) = struct.unpack("<B", f.read(1))
            if has_mask:
                raw = np.frombuffer(f.read(size), dtype=np.uint8)
                masks[name] = raw.reshape(shape).astype(np.float32)
        return model_id, arrays, masks
