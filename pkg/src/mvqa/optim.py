"""Adamax: the infinity-norm member of the Adam family.

Per coordinate: the first moment is an exponential average of gradients and
the scale is a decayed running maximum of gradient magnitudes; the update
divides the bias-corrected moment by that scale.
"""

import numpy as np

from .autodiff import ShapeError

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

CONSTANTS = {"beta1": BETA1, "beta2": BETA2, "epsilon": EPSILON}


class AdamaxState:
    """First moments, infinity norms, and the step counter for one model."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.u = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def names(self):
        return list(self.m)


def adamax_step(params, grads, state, lr):
    """One in-place update of every parameter; missing grads count as zero."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    correction = 1.0 - BETA1 ** state.t
    for name, param in params.items():
        if name not in state.m:
            raise ShapeError(f"optimizer state has no entry for {name}")
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.data.shape:
            raise ShapeError(
                f"{name}: gradient shape {grad.shape} does not match "
                f"parameter shape {param.data.shape}")
        m = state.m[name]
        u = state.u[name]
        m *= BETA1
        m += (1.0 - BETA1) * grad
        np.maximum(BETA2 * u, np.abs(grad), out=u)
        param.data -= (lr / correction) * m / (u + EPSILON)
