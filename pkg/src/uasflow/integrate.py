"""Fixed-step classical Runge-Kutta integration."""

from __future__ import annotations

from typing import Callable

import numpy as np

Rhs = Callable[[float, np.ndarray], np.ndarray]


def rk4_step(f: Rhs, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f: Rhs, t0: float, y0: np.ndarray, h: float, steps: int) -> np.ndarray:
    """States at t0 + k*h for k = 0..steps (times built by multiplication, not summation)."""
    out = np.empty((steps + 1,) + np.shape(y0))
    out[0] = y0
    y = np.asarray(y0, dtype=float)
    for k in range(steps):
        y = rk4_step(f, t0 + k * h, y, h)
        out[k + 1] = y
    return out
