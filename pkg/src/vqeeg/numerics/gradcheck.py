"""Finite-difference validation of analytic gradients.

Loss functions that contain stop-gradient operators are, by definition,
differentiated as if the stopped values were constants. To make central
differences measure the same object, :class:`SgTape` captures every value
passing through a stop-gradient (and the quantizer's code assignments) on a
recording pass, then replays those frozen values verbatim on perturbed
re-evaluations. The analytic gradient is then the exact derivative of the
replayed function, and the checker compares against that.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import DimensionError, GradientError
from .tensor import Parameter, Tensor, backward
from .rng import Rng


class SgTape:
    """Capture-and-replay store for stop-gradient values.

    First evaluation runs with `recording=True` and appends every stopped
    value; subsequent evaluations call :meth:`start_replay` and read the
    stored values back in order.
    """

    def __init__(self):
        self.recording = True
        self._values: list = []
        self._cursor = 0

    def start_replay(self) -> None:
        self.recording = False
        self._cursor = 0

    def pass_through(self, value):
        if self.recording:
            stored = value.copy() if isinstance(value, np.ndarray) else value
            self._values.append(stored)
            return value
        if self._cursor >= len(self._values):
            raise GradientError("stop-gradient tape replay ran past its recording")
        out = self._values[self._cursor]
        self._cursor += 1
        return out


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], rng: Rng,
               h: float = 1e-5, coords_per_param: int = 64) -> float:
    """Max relative error between analytic and central-difference gradients.

    f re-evaluates the scalar loss from the current parameter values and
    must be deterministic given them. Up to `coords_per_param` coordinates
    are sampled per parameter (all of them for small parameters). Relative
    error is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = {}
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise GradientError(f"non-finite analytic gradient in {p.name!r}")
        analytic[p.name] = p.grad.copy()

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, coords_per_param, replace=False)
        ga_flat = analytic[p.name].reshape(-1)
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            up = f().item()
            flat[i] = original - h
            down = f().item()
            flat[i] = original
            fd = (up - down) / (2.0 * h)
            ga = ga_flat[i]
            rel = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
            if rel > worst:
                worst = rel
    return worst
