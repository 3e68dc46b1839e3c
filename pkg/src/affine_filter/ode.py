"""Adaptive Dormand-Prince 5(4) integrator with dense output and blow-up detection.

Complex-valued problems are integrated as real systems of doubled dimension.
The state may have any shape; it is flattened internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

BLOWUP_THRESHOLD = 1e8
DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_A = [np.array(row) for row in _A]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# quartic continuous extension, y(t0 + s h) = y0 + h K^T P [s, s^2, s^3, s^4]
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


class IntegrationError(RuntimeError):
    pass


class StepSizeUnderflow(IntegrationError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size {h:.3e} underflowed at t={t:.6g} before meeting tolerance")
        self.t = t
        self.h = h


class BlowUp(IntegrationError):
    """Solution sup-norm exceeded the blow-up threshold (or became non-finite)."""

    def __init__(self, t: float, trajectory: Optional["OdeTrajectory"] = None):
        super().__init__(f"solution blew up at t={t:.6g}")
        self.t = t
        self.trajectory = trajectory


@dataclass(frozen=True)
class OdeTrajectory:
    """Accepted steps of an integration, evaluable anywhere in its range.

    ``values[k]`` is the state at ``grid[k]``. ``coeffs[k]`` holds the
    (flat, real) dense-output coefficients of step ``k``; it is ``None`` when
    the integration was run with ``dense=False``.
    """

    grid: np.ndarray
    values: np.ndarray
    coeffs: Optional[np.ndarray]
    shape: tuple
    is_complex: bool
    status: str = "completed"
    blowup_time: Optional[float] = None
    nfev: int = 0
    _flat: np.ndarray = field(default=None, repr=False)

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def t1(self) -> float:
        return float(self.grid[-1])

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def __call__(self, t):
        """Dense evaluation at scalar ``t`` (inside the integrated range)."""
        if self.coeffs is None:
            raise ValueError("trajectory was computed without dense output")
        grid = self.grid
        forward = grid[-1] >= grid[0]
        lo, hi = (grid[0], grid[-1]) if forward else (grid[-1], grid[0])
        span = abs(grid[-1] - grid[0])
        if not (lo - 1e-12 * max(1.0, span) <= t <= hi + 1e-12 * max(1.0, span)):
            raise ValueError(f"t={t} outside integrated range [{lo}, {hi}]")
        if len(grid) == 1:
            return self.values[0]
        if forward:
            k = int(np.searchsorted(grid, t, side="right")) - 1
        else:
            k = int(np.searchsorted(-grid, -t, side="right")) - 1
        k = min(max(k, 0), len(grid) - 2)
        h = grid[k + 1] - grid[k]
        s = (t - grid[k]) / h
        y = self._flat[k] + h * (self.coeffs[k] @ np.array([s, s * s, s ** 3, s ** 4]))
        return _unflatten(y, self.shape, self.is_complex)


def _flatten(y: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(y):
        flat = y.ravel()
        return np.concatenate([flat.real, flat.imag])
    return np.asarray(y, dtype=float).ravel().copy()


def _unflatten(v: np.ndarray, shape: tuple, is_complex: bool) -> np.ndarray:
    if is_complex:
        n = v.size // 2
        return (v[:n] + 1j * v[n:]).reshape(shape)
    return v.reshape(shape)


def _initial_step(fun, t0, y0, f0, direction, rtol, atol, span):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = fun(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def integrate(
    field_fn: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    t1: float,
    y0,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    tstops: Optional[Sequence[float]] = None,
    dense: bool = True,
    blowup_threshold: float = BLOWUP_THRESHOLD,
    raise_on_blowup: bool = True,
    max_steps: int = 1_000_000,
) -> OdeTrajectory:
    """Integrate ``y' = field_fn(t, y)`` from ``t0`` to ``t1``.

    ``t1 < t0`` integrates backward in time. ``tstops`` are points the
    stepper never steps across (kinks of a piecewise-smooth field). On
    blow-up the partial trajectory is attached to the raised :class:`BlowUp`,
    or returned with ``status="blew-up"`` when ``raise_on_blowup`` is False.
    """
    y0 = np.asarray(y0)
    is_complex = np.iscomplexobj(y0)
    shape = y0.shape
    t0 = float(t0)
    t1 = float(t1)
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    direction = 1.0 if t1 > t0 else -1.0

    nfev = 0

    def fun(t, v):
        nonlocal nfev
        nfev += 1
        out = field_fn(t, _unflatten(v, shape, is_complex))
        return _flatten(np.asarray(out, dtype=complex if is_complex else float))

    stops = [t1]
    if tstops is not None:
        inner = [float(s) for s in tstops if (s - t0) * direction > 0 and (t1 - s) * direction > 0]
        stops = sorted(inner, key=lambda s: direction * s) + [t1]

    t = t0
    y = _flatten(y0)
    ts = [t]
    ys = [y]
    qs = []
    f = fun(t, y)
    span = abs(t1 - t0)
    h = _initial_step(fun, t, y, f, direction, rtol, atol, abs(stops[0] - t0))
    stop_idx = 0
    K = np.empty((7, y.size))
    status = "completed"
    blowup_time = None

    for _ in range(max_steps):
        if stop_idx >= len(stops):
            break
        target = stops[stop_idx]
        remaining = abs(target - t)
        hit_stop = False
        if h >= remaining:
            h = remaining
            hit_stop = True
        min_step = 10 * np.finfo(float).eps * max(abs(t), span)
        if hit_stop and h <= min_step:
            t = target
            stop_idx += 1
            h = min_step if stop_idx >= len(stops) else abs(stops[stop_idx] - t)
            continue
        if h < min_step:
            raise StepSizeUnderflow(t, h)

        hd = direction * h
        K[0] = f
        for s in range(1, 6):
            dy = hd * (_A[s] @ K[:s])
            K[s] = fun(t + _C[s] * hd, y + dy)
        y_new = y + hd * (_B @ K[:6])
        t_new = target if hit_stop else t + hd
        f_new = fun(t_new, y_new)
        K[6] = f_new

        scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
        err_vec = hd * (_E @ K) / scale
        if not np.all(np.isfinite(y_new)):
            err = np.inf
        else:
            err = float(np.sqrt(np.mean(err_vec ** 2)))

        if err <= 1.0:
            ys.append(y_new)
            ts.append(t_new)
            if dense:
                qs.append(K.T @ _P)
            t, y, f = t_new, y_new, f_new
            if np.max(np.abs(y)) > blowup_threshold:
                status = "blew-up"
                blowup_time = t
                break
            factor = _MAX_FACTOR if err == 0 else min(_MAX_FACTOR, _SAFETY * err ** -0.2)
            if hit_stop:
                stop_idx += 1
                if stop_idx < len(stops):
                    # re-seed derivative after a kink
                    f = fun(t, y)
                    h = min(h * max(factor, 1.0), abs(stops[stop_idx] - t))
                continue
            h *= factor
        else:
            if not np.isfinite(err):
                # non-finite trial step: shrink hard, treat as blow-up if it persists
                if np.max(np.abs(y)) > blowup_threshold / 10:
                    status = "blew-up"
                    blowup_time = t
                    break
                h *= _MIN_FACTOR
            else:
                h *= max(_MIN_FACTOR, _SAFETY * err ** -0.2)
            if h < 10 * np.finfo(float).eps * max(abs(t), span):
                if np.max(np.abs(y)) > blowup_threshold / 10:
                    status = "blew-up"
                    blowup_time = t
                    break
                raise StepSizeUnderflow(t, h)
    else:
        raise IntegrationError(f"max_steps={max_steps} exceeded at t={t}")

    flat = np.array(ys)
    traj = OdeTrajectory(
        grid=np.array(ts),
        values=np.array([_unflatten(v, shape, is_complex) for v in ys]),
        coeffs=np.array(qs) if dense and qs else (None if not dense else np.empty((0, y.size, 4))),
        shape=shape,
        is_complex=is_complex,
        status=status,
        blowup_time=blowup_time,
        nfev=nfev,
        _flat=flat,
    )
    if status == "blew-up" and raise_on_blowup:
        raise BlowUp(blowup_time, traj)
    return traj
