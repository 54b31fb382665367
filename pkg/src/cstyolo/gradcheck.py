"""Central finite-difference verification of analytic gradients.

Checks run in float64. The error metric is
``|a - n| / max(|a|, |n|, floor)`` with a 0.01 floor, i.e. relative for
meaningful gradients and a 1e-6-grade absolute bound near zero.
"""

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(f, t, h=1e-3, indices=None):
    """Central differences of scalar ``f()`` w.r.t. selected flat indices of ``t``."""
    flat = t.data.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    grads = np.zeros(len(indices), dtype=np.float64)
    with no_grad():
        for n, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().data.reshape(-1)[0])
            flat[i] = orig - h
            lo = float(f().data.reshape(-1)[0])
            flat[i] = orig
            grads[n] = (hi - lo) / (2.0 * h)
    return grads


def check_gradients(f, wrt, h=1e-3, tol=1e-4, floor=1e-2, max_per_tensor=None, rng=None):
    """Compare backward() gradients of scalar ``f()`` against central differences.

    Returns (ok, max_rel_err, detail) where detail names the worst tensor.
    ``max_per_tensor`` caps how many elements are probed (deterministic
    subsample when set).
    """
    wrt = list(wrt)
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck tensors must be float64")
        t.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError("gradcheck target must be scalar")
    loss.backward()
    worst = 0.0
    detail = ""
    rng = rng or np.random.default_rng(0)
    for ti, t in enumerate(wrt):
        analytic_full = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        size = t.data.size
        if max_per_tensor is not None and size > max_per_tensor:
            indices = np.sort(rng.choice(size, size=max_per_tensor, replace=False))
        else:
            indices = np.arange(size)
        numeric = numerical_gradient(f, t, h=h, indices=indices)
        analytic = analytic_full[indices]
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        i = int(np.argmax(rel)) if rel.size else 0
        if rel.size and rel[i] > worst:
            worst = float(rel[i])
            detail = (
                f"tensor #{ti} shape {t.data.shape} flat index {int(indices[i])}: "
                f"analytic {analytic[i]:.3e} vs numeric {numeric[i]:.3e}"
            )
    return worst <= tol, worst, detail
