"""ODE integrators: fixed-step RK4 and an embedded Fehlberg 4(5) pair.

The RK4 path solver drives the deterministic bridge skeleton (one step
per Euler sub-interval, so its O(h^4) error is dominated by the Euler
bias). The adaptive RKF45 integrator drives the LNA moment equations.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import OdeStepFailure

# Fehlberg 4(5) tableau. The fourth-order solution is propagated; the
# TR row gives the coefficients of the local truncation error estimate.
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_TR = np.array([1 / 360, 0.0, -128 / 4275, -2197 / 75240, 1 / 50, 2 / 55])


def rk4_path(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Classic RK4 over a fixed time grid, one step per sub-interval.

    ``f`` maps states ``(..., d) -> (..., d)`` (autonomous) and ``x0``
    may be batched; returns ``(..., len(times), d)``.
    """
    x0 = np.asarray(x0, dtype=float)
    times = np.asarray(times, dtype=float)
    out = np.empty(x0.shape[:-1] + (times.size, x0.shape[-1]))
    out[..., 0, :] = x0
    x = x0
    for k in range(times.size - 1):
        h = times[k + 1] - times[k]
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[..., k + 1, :] = x
    return out


def rkf45(
    f: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t0: float,
    t1: float,
    rtol: float = 1e-8,
    atol: float = 1e-8,
    h0: float | None = None,
    max_steps: int = 100_000,
) -> np.ndarray:
    """Integrate ``dy/dt = f(t, y)`` from t0 to t1 with adaptive steps.

    Explicit embedded Runge-Kutta-Fehlberg 4(5): the 4th-order solution
    is advanced and the 5th-order comparison controls the step size.

    Raises:
        OdeStepFailure: if the step size underflows or the right-hand
            side stops being finite (stiff or invalid parameters).
    """
    y = np.asarray(y0, dtype=float).copy()
    t = float(t0)
    span = float(t1) - t
    if span <= 0:
        if span == 0:
            return y
        raise ValueError("t1 must exceed t0")
    h = span / 16.0 if h0 is None else float(h0)
    h_min = max(span * 1e-14, 1e-300)
    ks = [None] * 6
    for _ in range(max_steps):
        if t >= t1:
            return y
        h = min(h, t1 - t)
        ks[0] = f(t, y)
        for i in range(1, 6):
            yi = y + h * sum(a * ks[j] for j, a in enumerate(_A[i]))
            ks[i] = f(t + _C[i] * h, yi)
        y4 = y + h * sum(b * k for b, k in zip(_B4, ks) if b != 0.0)
        err = h * sum(c * k for c, k in zip(_TR, ks) if c != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y4))
        enorm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not np.isfinite(enorm):
            raise OdeStepFailure("non-finite right-hand side during integration")
        if enorm <= 1.0:
            t += h
            y = y4
            grow = 0.9 * enorm ** -0.2 if enorm > 0 else 5.0
            h *= min(5.0, grow)
        else:
            h *= max(0.2, 0.9 * enorm ** -0.2)
            if h < h_min:
                raise OdeStepFailure("step size underflow")
    raise OdeStepFailure("step budget exhausted")
