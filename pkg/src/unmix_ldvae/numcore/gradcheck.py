"""Central-difference validation of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, Tape, Tensor, backward


def finite_diff_check(f, x, h: float = 1e-5) -> float:
    """Worst relative disagreement between tape and central-difference grads.

    ``f`` maps one Tensor to a scalar Tensor and must be deterministic (fix
    any sampling noise before checking). Per coordinate the error is
    |analytic - central| / (|analytic| + |central| + 1e-12); the max over
    coordinates is returned.
    """
    base = np.array(getattr(x, "data", x), dtype=np.float64)
    with Tape() as tape:
        probe = Tensor(base.copy(), requires_grad=True)
        y = f(probe)
        if not isinstance(y, Tensor) or y.data.size != 1:
            raise ShapeError("finite_diff_check needs a scalar-valued function")
        if not np.isfinite(y.data).all():
            raise NumericError("objective is non-finite at the base point")
        if y.requires_grad:
            backward(y, tape)
            analytic = probe.grad.reshape(-1).copy()
        else:
            analytic = np.zeros(base.size)

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        return float(out.data.reshape(()))

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        hi = evaluate((flat + step).reshape(base.shape))
        lo = evaluate((flat - step).reshape(base.shape))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite objective while perturbing coordinate {i}")
        central = (hi - lo) / (2.0 * h)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
