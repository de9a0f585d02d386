"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import GraphError, NonFiniteError, Tensor


class ProbeFailure(FloatingPointError):
    """The checked function became non-finite at a probe point."""

    def __init__(self, input_index: int, element_index: tuple, detail):
        self.input_index = input_index
        self.element_index = element_index
        super().__init__(
            f"non-finite evaluation probing input {input_index} at {element_index}: {detail}")


def _eval_scalar(f, inputs, input_index: int, element_index: tuple) -> float:
    try:
        y = f(*inputs)
    except NonFiniteError as e:  # trapped inside the engine before reaching us
        raise ProbeFailure(input_index, element_index, e) from e
    v = y.item() if isinstance(y, Tensor) else float(y)
    if not np.isfinite(v):
        raise ProbeFailure(input_index, element_index, v)
    return v


def finite_diff_check(f, inputs, h: float = 1e-5, rel_floor: float = 1e-8) -> dict:
    """Compare reverse-mode gradients of a scalar function against central differences.

    `inputs` is one Tensor or a sequence of leaf Tensors; each is perturbed
    elementwise in place (and restored). Relative error per element uses the
    denominator max(|analytic|, |numeric|, rel_floor). Returns a report dict:
    {max_rel_err, worst_index: (input_index, element_index), analytic, numeric}.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise GraphError("finite_diff_check requires float64 inputs")
        t.requires_grad = True

    out = f(*inputs)
    if not isinstance(out, Tensor):
        raise GraphError("checked function must return a Tensor")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_rel, worst = 0.0, (0, ())
    worst_a = worst_n = 0.0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            eidx = np.unravel_index(i, t.data.shape)
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f, inputs, k, eidx)
            flat[i] = orig - h
            fm = _eval_scalar(f, inputs, k, eidx)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[k][eidx])
            rel = abs(ana - num) / max(abs(ana), abs(num), rel_floor)
            if rel > max_rel:
                max_rel, worst, worst_a, worst_n = rel, (k, eidx), ana, num
    return {"max_rel_err": max_rel, "worst_index": worst,
            "analytic": worst_a, "numeric": worst_n}
