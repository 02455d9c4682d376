"""Parameters and the ADAM optimiser.

A Parameter couples a float64 value array with a same-shaped gradient
accumulator.  The Adam class owns the moment buffers and the step count,
keyed by parameter name, so optimiser state can be checkpointed and
restored independently of the model.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteGradientError


class Parameter:
    """A named trainable array with a gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        if value.dtype != np.float64:
            raise TypeError(f"parameter {name!r} must be float64, got {value.dtype}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Adam:
    """Bias-corrected ADAM over a fixed set of parameters.

    Update per step t (1-based):

        m = beta1*m + (1-beta1)*g
        v = beta2*v + (1-beta2)*g^2
        value -= lr * (m / (1-beta1^t)) / (sqrt(v / (1-beta2^t)) + eps)

    Gradients are zeroed after the step.  A NaN or Inf gradient aborts
    the step naming the offending parameter: silent propagation into the
    weights is never allowed.
    """

    def __init__(
        self,
        params: dict[str, Parameter],
        lr: float = 0.0005,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params.items()}

    def step(self) -> None:
        t = self.step_count + 1
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter {name!r} at step {t}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t
        for p in self.params.values():
            p.zero_grad()
