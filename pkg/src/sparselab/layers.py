"""Layer zoo: conv / linear / batchnorm / relu / maxpool / pooling / flatten.

Each layer owns its parameter tensors and implements ``forward(x, mode)``
where ``mode`` is ``"train"`` or ``"eval"``. Activations keep the public
[B,C,H,W] shape, but internally every 4-d layer computes on a contiguous
channels-last buffer and returns a transposed view of it; composed layers
therefore hand contiguous storage to each other and the layout conversions
cost nothing. Convolution is lowered to one GEMM per layer via patch
expansion (im2col), and its data gradient folds back with one strided
slice-add per kernel offset, so the heavy lifting stays inside BLAS.

``LayerSpec`` is the declarative description used by model builders and by
the analytic cost model; ``build_layer`` turns a spec into a live layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .autograd import ShapeError, Tensor, make_node

LAYER_KINDS = ("conv2d", "linear", "batchnorm2d", "relu", "maxpool2d",
               "global_avg_pool", "flatten")


@dataclass
class LayerSpec:
    """Declarative layer description.

    Only the fields relevant for ``kind`` are set; the rest stay None.
    """
    kind: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_h: Optional[int] = None
    kernel_w: Optional[int] = None
    stride: int = 1
    padding: int = 0
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    num_features: Optional[int] = None  # batchnorm channel count
    pool: Optional[int] = None          # maxpool kernel == stride

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if min(self.kernel_h, self.kernel_w) < 1:
                raise ShapeError(f"conv2d kernel extents must be >= 1, "
                                 f"got {self.kernel_h}x{self.kernel_w}")
        if self.kind == "linear":
            if min(self.in_features, self.out_features) < 1:
                raise ShapeError("linear in/out features must be >= 1")


def kaiming_uniform(shape, fan_in, rng, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _cl(arr):
    """Channels-last [B,H,W,C] working copy; free when the array already
    views channels-last storage (the steady state between 4-d layers)."""
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def _require_4d(x, name):
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expects [B,C,H,W], got {tuple(x.data.shape)}")


class Conv2d:
    """Convolution via im2col + GEMM. Weight layout [O, I, kh, kw]."""

    def __init__(self, spec: LayerSpec, rng, dtype=np.float32, name="conv2d"):
        self.spec = spec
        self.name = name
        o, i = spec.out_channels, spec.in_channels
        kh, kw = spec.kernel_h, spec.kernel_w
        self.stride, self.padding = spec.stride, spec.padding
        self.weight = Tensor(kaiming_uniform((o, i, kh, kw), i * kh * kw, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(o, dtype=dtype), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode="train"):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding,
                      name=self.name)


def conv2d(x, weight, bias, stride=1, padding=0, name="conv2d"):
    o, i, kh, kw = weight.data.shape
    if x.data.ndim != 4 or x.data.shape[1] != i:
        raise ShapeError(f"{name}: input {tuple(x.data.shape)} incompatible with "
                         f"weight {tuple(weight.data.shape)} (expects [B,{i},H,W])")
    b, _, h, w = x.data.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"{name}: kernel {kh}x{kw} does not fit input "
                         f"{tuple(x.data.shape)} with padding {padding}")

    x_cl = _cl(x.data)
    cols = np.empty((b * h_out * w_out, kh * kw * i), dtype=x_cl.dtype)
    _kernels.im2col(x_cl, kh, kw, stride, padding, h_out, w_out, cols)
    # weight rearranged to [O, kh*kw*C] to match the patch-row layout
    w_mat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, kh * kw * i)
    out2 = cols @ w_mat.T
    out2 += bias.data[None, :]
    out_data = out2.reshape(b, h_out, w_out, o).transpose(0, 3, 1, 2)

    needs_w = weight.requires_grad or bias.requires_grad
    if not (needs_w or x.requires_grad):
        return Tensor(out_data)

    def _bw(g):
        g2 = _cl(g).reshape(b * h_out * w_out, o)
        if weight.requires_grad:
            dw = (g2.T @ cols).reshape(o, kh, kw, i)
            weight.accumulate_grad(np.ascontiguousarray(dw.transpose(0, 3, 1, 2)),
                                   owned=True)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0, dtype=np.float64).astype(g.dtype),
                                 owned=True)
        if x.requires_grad:
            dcols = g2 @ w_mat
            dx_cl = np.zeros((b, h, w, i), dtype=dcols.dtype)
            _kernels.col2im(dcols, kh, kw, stride, padding, h_out, w_out, dx_cl)
            x.accumulate_grad(dx_cl.transpose(0, 3, 1, 2), owned=True)

    return make_node(out_data, (x, weight, bias), _bw)


class Linear:
    """Affine layer; weight layout [in, out] so forward is x @ W + b."""

    def __init__(self, spec: LayerSpec, rng, dtype=np.float32, name="linear"):
        self.spec = spec
        self.name = name
        fi, fo = spec.in_features, spec.out_features
        self.weight = Tensor(kaiming_uniform((fi, fo), fi, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(fo, dtype=dtype), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode="train"):
        return linear(x, self.weight, self.bias, name=self.name)


def linear(x, weight, bias, name="linear"):
    fi, fo = weight.data.shape
    if x.data.ndim != 2 or x.data.shape[1] != fi:
        raise ShapeError(f"{name}: input {tuple(x.data.shape)} incompatible with "
                         f"weight {tuple(weight.data.shape)} (expects [B,{fi}])")
    out_data = x.data @ weight.data
    out_data += bias.data[None, :]

    def _bw(g):
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g, owned=True)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0, dtype=np.float64).astype(g.dtype),
                                 owned=True)
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T, owned=True)

    return make_node(out_data, (x, weight, bias), _bw)


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with biased batch statistics and updates running
    estimates (momentum 0.1, unbiased variance); eval mode uses the running
    estimates. Train mode requires batch size >= 2.
    """

    def __init__(self, spec: LayerSpec, dtype=np.float32, name="batchnorm2d",
                 eps=1e-5, momentum=0.1):
        self.spec = spec
        self.name = name
        c = spec.num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, mode="train"):
        c = self.gamma.data.size
        _require_4d(x, self.name)
        if x.data.shape[1] != c:
            raise ShapeError(f"{self.name}: input {tuple(x.data.shape)} has wrong "
                             f"channel count (expects [B,{c},H,W])")
        b, _, h, w = x.data.shape
        n = b * h * w
        dtype = x.data.dtype
        x_cl = _cl(x.data)

        if mode == "train":
            if b < 2:
                raise ShapeError(f"{self.name}: train mode needs batch size >= 2, got {b}")
            s, s2 = _kernels.bn_stats(x_cl)
            mean64 = s / n
            var64 = np.maximum(s2 / n - mean64 * mean64, 0.0)
            mean = mean64.astype(dtype)
            var = var64.astype(dtype)
            self.running_mean += self.momentum * (mean - self.running_mean)
            unbiased = (var64 * (n / (n - 1))).astype(dtype)
            self.running_var += self.momentum * (unbiased - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var

        inv_std = (1.0 / np.sqrt(var.astype(np.float64) + self.eps)).astype(dtype)
        a = self.gamma.data * inv_std
        shift = self.beta.data - mean * a
        out_cl = np.empty_like(x_cl)
        _kernels.bn_apply(x_cl, a, shift, out_cl)
        out_data = out_cl.transpose(0, 3, 1, 2)

        gamma, beta = self.gamma, self.beta
        train = mode == "train"

        def _bw(g):
            g_cl = _cl(g)
            gsum64, gx64 = _kernels.bn_backward_sums(g_cl, x_cl, mean, inv_std)
            if beta.requires_grad:
                beta.accumulate_grad(gsum64.astype(dtype), owned=True)
            if gamma.requires_grad:
                gamma.accumulate_grad(gx64.astype(dtype), owned=True)
            if x.requires_grad:
                coef = gamma.data * inv_std
                if train:
                    _kernels.bn_backward_dx(
                        g_cl, x_cl, mean, inv_std, coef,
                        (gsum64 / n).astype(dtype), (gx64 / n).astype(dtype))
                else:
                    g_cl *= coef[None, None, None, :]
                x.accumulate_grad(g_cl.transpose(0, 3, 1, 2), owned=True)

        return make_node(out_data, (x, gamma, beta), _bw)


class ReLU:
    def __init__(self, spec=None, name="relu"):
        self.spec = spec if spec is not None else LayerSpec(kind="relu")
        self.name = name

    def params(self):
        return []

    def forward(self, x, mode="train"):
        if x.data.ndim != 4:
            return x.relu()
        x_cl = _cl(x.data)
        out_cl = np.empty_like(x_cl)
        _kernels.relu_fwd(x_cl, out_cl)
        out_data = out_cl.transpose(0, 3, 1, 2)

        def _bw(g):
            g_cl = _cl(g)
            _kernels.relu_bwd(g_cl, out_cl)
            x.accumulate_grad(g_cl.transpose(0, 3, 1, 2), owned=True)

        return make_node(out_data, (x,), _bw)


class MaxPool2d:
    """Non-overlapping max pooling (kernel == stride); H and W must divide."""

    def __init__(self, spec: LayerSpec, name="maxpool2d"):
        self.spec = spec
        self.name = name
        self.k = spec.pool

    def params(self):
        return []

    def forward(self, x, mode="train"):
        k = self.k
        _require_4d(x, self.name)
        b, c, h, w = x.data.shape
        if h % k or w % k:
            raise ShapeError(f"{self.name}: input {tuple(x.data.shape)} not divisible "
                             f"by pool size {k}")
        h2, w2 = h // k, w // k
        if k == 2:
            return self._forward_2x2(x, b, c, h2, w2)

        windows = np.ascontiguousarray(
            x.data.reshape(b, c, h2, k, w2, k).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(b, c, h2, w2, k * k)
        # argmax takes the first maximum, so ties resolve deterministically
        idx = windows.argmax(axis=-1)
        out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        def _bw(g):
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(b, c, h2, w2, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
            x.accumulate_grad(np.ascontiguousarray(dx), owned=True)

        return make_node(out_data, (x,), _bw)

    def _forward_2x2(self, x, b, c, h2, w2):
        """Fused 2x2 path; ties resolve to the earliest window slot,
        matching argmax over the flattened (row, col) window."""
        x_cl = _cl(x.data)
        out_cl = np.empty((b, h2, w2, c), dtype=x_cl.dtype)
        win = np.empty((b, h2, w2, c), dtype=np.uint8)
        _kernels.maxpool2x2(x_cl, out_cl, win)
        out_data = out_cl.transpose(0, 3, 1, 2)

        def _bw(g):
            g_cl = _cl(g)
            dx_cl = np.zeros((b, 2 * h2, 2 * w2, c), dtype=g_cl.dtype)
            _kernels.maxpool2x2_bwd(g_cl, win, dx_cl)
            x.accumulate_grad(dx_cl.transpose(0, 3, 1, 2), owned=True)

        return make_node(out_data, (x,), _bw)


class GlobalAvgPool:
    def __init__(self, spec=None, name="global_avg_pool"):
        self.spec = spec if spec is not None else LayerSpec(kind="global_avg_pool")
        self.name = name

    def params(self):
        return []

    def forward(self, x, mode="train"):
        _require_4d(x, self.name)
        b, c, h, w = x.data.shape
        n = h * w
        x_cl = _cl(x.data)
        out_data = x_cl.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)

        def _bw(g):
            dx_cl = np.ascontiguousarray(
                np.broadcast_to((g / n)[:, None, None, :], (b, h, w, c)))
            x.accumulate_grad(dx_cl.transpose(0, 3, 1, 2), owned=True)

        return make_node(out_data, (x,), _bw)


class Flatten:
    def __init__(self, spec=None, name="flatten"):
        self.spec = spec if spec is not None else LayerSpec(kind="flatten")
        self.name = name

    def params(self):
        return []

    def forward(self, x, mode="train"):
        b = x.data.shape[0]
        shape = x.data.shape
        out_data = np.ascontiguousarray(x.data).reshape(b, -1)

        def _bw(g):
            x.accumulate_grad(g.reshape(shape))

        return make_node(out_data, (x,), _bw)


def build_layer(spec: LayerSpec, rng=None, dtype=np.float32, name=None):
    name = name or spec.kind
    if spec.kind == "conv2d":
        return Conv2d(spec, rng, dtype, name)
    if spec.kind == "linear":
        return Linear(spec, rng, dtype, name)
    if spec.kind == "batchnorm2d":
        return BatchNorm2d(spec, dtype, name)
    if spec.kind == "maxpool2d":
        return MaxPool2d(spec, name)
    if spec.kind == "relu":
        return ReLU(spec, name)
    if spec.kind == "global_avg_pool":
        return GlobalAvgPool(spec, name)
    if spec.kind == "flatten":
        return Flatten(spec, name)
    raise ShapeError(f"unknown layer kind {spec.kind!r}")
