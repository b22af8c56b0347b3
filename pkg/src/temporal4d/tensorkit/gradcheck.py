from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = np.array(x.data, copy=True)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("function value is not finite")
    analytic = backward(y, [xt])[id(xt)].data

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            probe = base.copy().reshape(-1)
            probe[i] += eps
            fp = f(Tensor(probe.reshape(base.shape))).item()
            probe[i] -= 2 * eps
            fm = f(Tensor(probe.reshape(base.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite evaluation at element {i}")
            flat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
