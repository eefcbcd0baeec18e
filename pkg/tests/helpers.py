"""Shared test utilities: the finite-difference gradient oracle."""

import numpy as np

from sparselab.autograd import Tensor, backward


def numeric_grad(loss_fn, tensor, h=1e-3):
    """Central finite differences of a scalar-valued loss w.r.t. one tensor.

    ``loss_fn`` re-runs the full forward pass and returns the scalar loss as
    float; it must not capture stale state. Perturbs tensor.data in place.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def relative_error(analytic, numeric):
    """max |a - n| scaled by the largest gradient magnitude."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(build_loss, tensors, h=1e-3, tol=1e-4):
    """Assert analytic gradients match central differences for each tensor.

    Per element: |analytic - numeric| <= tol * max(|numeric|, |analytic|,
    floor), where the floor is tied to the largest gradient magnitude in the
    whole instance. Coordinates whose true gradient is structurally zero
    (e.g. a conv bias feeding train-mode batchnorm) otherwise produce
    meaningless 0-vs-0 relative errors.

    ``build_loss()`` constructs the graph and returns the scalar loss Tensor.
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    backward(loss)
    pairs = []
    for t in tensors:
        analytic = np.array(t.grad, dtype=np.float64)
        numeric = numeric_grad(lambda: float(build_loss().data), t, h)
        pairs.append((analytic, numeric))
    gscale = max(max(np.max(np.abs(n)) for _, n in pairs), 1e-8)
    floor = max(1e-3 * gscale, 1e-8)
    worst = 0.0
    for idx, (analytic, numeric) in enumerate(pairs):
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        err = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, err)
        assert err < tol, (f"gradient mismatch in tensor {idx}: relative "
                           f"error {err:.3e} (floor {floor:.1e})")
    return worst


def kink_margin(model, x):
    """Smallest distance to a ReLU/maxpool nondifferentiability along the
    forward pass; finite differences are only trustworthy when this margin
    comfortably exceeds the step size."""
    margin = np.inf
    t = Tensor(x) if isinstance(x, np.ndarray) else x
    for layer in model.layers:
        kind = layer.spec.kind
        if kind == "relu":
            margin = min(margin, float(np.min(np.abs(t.data))))
        elif kind == "maxpool2d":
            k = layer.k
            b, c, h, w = t.data.shape
            win = t.data.reshape(b, c, h // k, k, w // k, k)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // k, w // k, k * k)
            srt = np.sort(win, axis=-1)
            margin = min(margin, float(np.min(srt[..., -1] - srt[..., -2])))
        t = layer.forward(t, mode="train")
    return margin


def sampled_instance(make, min_margin, max_tries=50):
    """Draw (model, x, extras) instances until the kink margin is safe."""
    for attempt in range(max_tries):
        model, x, extras = make(attempt)
        if kink_margin(model, np.array(x)) > min_margin:
            return model, x, extras
    raise AssertionError(f"no instance with kink margin > {min_margin} "
                         f"in {max_tries} tries")
