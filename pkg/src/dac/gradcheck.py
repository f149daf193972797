"""Central finite-difference gradient verification.

Meant to run in float64 mode: analytic gradients from the tape are compared
against (f(x+h) - f(x-h)) / 2h elementwise.
"""

import numpy as np

from .tensor import Tape


def numerical_grad(f, tensor, h=1e-5):
    """Central-difference gradient of scalar-valued ``f()`` w.r.t. ``tensor``."""
    x = tensor.data
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-4):
    """Worst-case relative error, with tiny entries compared absolutely."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(f, tensors, h=1e-5, tol=1e-4):
    """Assert analytic gradients of scalar f() match central differences.

    ``f`` must rebuild the forward pass from the current values of
    ``tensors`` on every call. Returns the worst relative error seen.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a requires_grad leaf"
        num = numerical_grad(f, t, h=h)
        err = max_rel_error(t.grad.astype(np.float64), num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return worst
