"""Central finite-difference verification of analytic gradients.

`grad_check` is the independent oracle for every differentiable operation
in the package: it compares the gradient produced by `backward()` against
central differences of the same scalar-valued closure, coordinate by
coordinate, and reports the worst relative error

    max over coordinates of |analytic - numeric| / max(1, |analytic|).

Checks should run on float64 tensors; float32 lacks the headroom for a
1e-4 threshold on composite graphs.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


def grad_check(fn, tensors, eps=DEFAULT_EPS, max_coords=None, rng=None, numeric_scale=1.0):
    """Max relative error between analytic and central-difference gradients.

    Args:
        fn: closure mapping the given tensors to a scalar Tensor; it must be
            re-evaluable (the graph is rebuilt on every call).
        tensors: leaf tensors with requires_grad=True that fn closes over.
        eps: central-difference step, must lie in [1e-7, 1e-3].
        max_coords: if set, check at most this many randomly sampled
            coordinates per tensor (for large composite graphs).
        rng: numpy Generator used for coordinate sampling.
        numeric_scale: expected ratio analytic/numeric. 1.0 for ordinary
            gradients; gradient-reversal compositions advertise a scaled
            backward (analytic == -coeff * true derivative), which is
            checked with numeric_scale=-coeff.

    Returns:
        Maximum relative error over all checked coordinates.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    out = fn(*tensors)
    if out.data.shape != ():
        raise ValueError("grad_check closure must return a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*tensors).item()
            flat[i] = orig - eps
            lo = fn(*tensors).item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(ana.reshape(-1)[i])
            err = abs(a - numeric_scale * numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst


def rand_tensor(rng, shape, scale=1.0, offset=0.0):
    """float64 leaf with requires_grad, values scale*N(0,1)+offset."""
    return Tensor(
        rng.standard_normal(shape) * scale + offset,
        requires_grad=True,
        dtype=np.float64,
    )
