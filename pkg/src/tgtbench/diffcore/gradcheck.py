"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward


class NondeterministicClosure(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def lines(self) -> list[str]:
        return [f"{name:32s} {err:.3e}" for name, err in sorted(self.errors.items())]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return diff
    return diff / scale


def grad_check(
    closure: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of ``closure()`` against central differences.

    ``closure`` must rebuild the loss from the current ``params`` data each
    call. It is evaluated twice up front and must return bitwise-equal values.
    """
    first = closure().data.copy()
    second = closure().data.copy()
    if not np.array_equal(first, second):
        raise NondeterministicClosure(f"closure returned {first} then {second}")

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = closure()
    backward(tape, loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = closure().item()
            flat[i] = orig - step
            down = closure().item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        errors[name] = relative_error(analytic[name], numeric)
    return GradCheckReport(errors=errors, tol=tol)
