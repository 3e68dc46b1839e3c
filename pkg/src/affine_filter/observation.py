"""Discrete observations, continuous observation paths and linearization schedules."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .models import SignalPath


class OutOfDomain(ValueError):
    def __init__(self, t: float, lo: float, hi: float):
        super().__init__(f"t={t} outside observation domain [{lo}, {hi}]")
        self.t = t


class SingularGamma(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ObservationModel:
    """``dY = C X dt + Gamma dW`` with ``C`` of shape ``(p, d)``."""

    C: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        G = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Gamma", G)
        if G.shape != (C.shape[0], C.shape[0]):
            raise ValueError(f"Gamma must be {C.shape[0]} x {C.shape[0]}, got {G.shape}")
        if not np.allclose(G, G.T):
            raise ValueError("Gamma must be symmetric")

    @classmethod
    def scalar(cls, gamma: float, c: float = 1.0) -> "ObservationModel":
        return cls(C=[[c]], Gamma=[[gamma]])

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def d(self) -> int:
        return self.C.shape[1]

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.Gamma))

    def gamma_inv(self) -> np.ndarray:
        try:
            inv = np.linalg.inv(self.Gamma)
        except np.linalg.LinAlgError as exc:
            raise SingularGamma("observation noise scale Gamma is singular") from exc
        if not np.all(np.isfinite(inv)) or self.condition_number > 1e14:
            raise SingularGamma("observation noise scale Gamma is numerically singular")
        return inv


class PathInterpolant:
    """Continuous observation path through cumulative sums, ``y(0) = 0``."""

    def __init__(self, grid: np.ndarray, cumulative: np.ndarray, scheme: str = "linear"):
        if scheme not in ("linear", "cubic-spline"):
            raise ValueError(f"unknown interpolation scheme {scheme!r}")
        self.grid = np.asarray(grid, dtype=float)
        self.values = np.asarray(cumulative, dtype=float)
        self.scheme = scheme
        self._lo, self._hi = float(self.grid[0]), float(self.grid[-1])
        if scheme == "linear":
            self._slopes = np.diff(self.values, axis=0) / np.diff(self.grid)[:, None]
        else:
            self._spline = CubicSpline(self.grid, self.values, axis=0, bc_type="natural")

    @property
    def knots(self) -> np.ndarray:
        return self.grid

    def __call__(self, t: float) -> np.ndarray:
        tol = 1e-12 * max(1.0, abs(self._hi))
        if not (self._lo - tol <= t <= self._hi + tol):
            raise OutOfDomain(t, self._lo, self._hi)
        if self.scheme == "cubic-spline":
            return self._spline(min(max(t, self._lo), self._hi))
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        k = min(max(k, 0), len(self.grid) - 2)
        return self.values[k] + (t - self.grid[k]) * self._slopes[k]


def build_path(increments, grid, scheme: str = "linear") -> PathInterpolant:
    """Interpolate the cumulative sums of ``increments`` on ``grid``.

    ``grid`` has one more point than ``increments`` has rows; the path is
    anchored at zero on ``grid[0]``.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 1:
        inc = inc[:, None]
    grid = np.asarray(grid, dtype=float)
    if len(grid) != len(inc) + 1:
        raise ValueError("grid must have len(increments) + 1 points")
    cumulative = np.vstack([np.zeros((1, inc.shape[1])), np.cumsum(inc, axis=0)])
    return PathInterpolant(grid, cumulative, scheme)


@dataclass(frozen=True)
class ObservationRecord:
    grid: np.ndarray
    increments: np.ndarray
    model: ObservationModel
    scheme: str = "linear"
    seed: Optional[int] = None
    path: PathInterpolant = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if grid[0] != 0:
            raise ValueError("observation grid must start at 0")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if inc.shape[1] != self.model.p:
            raise ValueError(f"increments have {inc.shape[1]} components, model expects {self.model.p}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "path", build_path(inc, grid, self.scheme))

    @property
    def N(self) -> int:
        return len(self.increments)

    @property
    def cumulative(self) -> np.ndarray:
        return self.path.values

    def with_scheme(self, scheme: str) -> "ObservationRecord":
        return replace(self, scheme=scheme, path=None)

    def rescaled(self) -> "ObservationRecord":
        """Equivalent record with unit noise: increments and ``C`` scaled by ``Gamma^-1``."""
        gi = self.model.gamma_inv()
        model = ObservationModel(C=gi @ self.model.C, Gamma=np.eye(self.model.p))
        return replace(self, increments=self.increments @ gi.T, model=model, path=None)

    def truncated(self, n: int) -> "ObservationRecord":
        """Record restricted to the first ``n`` increments."""
        return replace(self, grid=self.grid[: n + 1], increments=self.increments[:n], path=None)

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "t"] + [f"y{k}" for k in range(self.model.p)])
            for i in range(self.N):
                w.writerow([i + 1, repr(float(self.grid[i + 1]))] + [repr(float(v)) for v in self.increments[i]])
        sidecar = {
            "seed": self.seed,
            "scheme": self.scheme,
            "C": self.model.C.tolist(),
            "Gamma": self.model.Gamma.tolist(),
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> "ObservationRecord":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        grid = np.concatenate([[0.0], data[:, 1]])
        model = ObservationModel(C=meta["C"], Gamma=meta["Gamma"])
        return cls(grid=grid, increments=data[:, 2:], model=model, scheme=meta["scheme"], seed=meta["seed"])


def generate_observations(rng: np.random.Generator, path: SignalPath, model: ObservationModel,
                          scheme: str = "linear", eps: Optional[np.ndarray] = None,
                          seed: Optional[int] = None) -> ObservationRecord:
    """Right-endpoint Riemann-sum observations ``y_i = C X_{t_i} dt_i + Gamma sqrt(dt_i) eps_i``.

    ``eps`` overrides the standard normal draws (pass zeros for a noiseless channel).
    """
    grid = np.asarray(path.grid, dtype=float)
    dt = np.diff(grid)
    states = path.flat_states()[1:]
    if eps is None:
        eps = rng.standard_normal((len(dt), model.p))
    eps = np.asarray(eps, dtype=float).reshape(len(dt), model.p)
    signal = (states @ model.C.T) * dt[:, None]
    noise = (eps @ model.Gamma.T) * np.sqrt(dt)[:, None]
    return ObservationRecord(grid=grid, increments=signal + noise, model=model, scheme=scheme, seed=seed)


@dataclass(frozen=True)
class LinearizationSchedule:
    """Affine replacement ``gamma_t^T x + c_t`` of the quadratic term.

    ``h`` is the unit-noise observation map ``Gamma^-1 C`` and ``drive_map``
    the matrix ``(Gamma^-1 C)^T Gamma^-1`` turning the raw observation path
    into the path that enters the filter equations.
    """

    gamma: Callable[[float], np.ndarray]
    c: Callable[[float], float]
    x0: np.ndarray
    h: np.ndarray
    drive_map: np.ndarray
    gamma_const: Optional[np.ndarray] = None
    c_const: Optional[float] = None

    def drive(self, record: ObservationRecord) -> Callable[[float], np.ndarray]:
        K = self.drive_map
        path = record.path
        return lambda t: K @ path(t)

    @classmethod
    def zero(cls, d: int) -> "LinearizationSchedule":
        z = np.zeros(d)
        return cls(gamma=lambda t: z, c=lambda t: 0.0, x0=z, h=np.eye(d), drive_map=np.eye(d),
                   gamma_const=z, c_const=0.0)


def make_schedule(model: ObservationModel, x0) -> LinearizationSchedule:
    """Constant schedule linearizing ``|Gamma^-1 C x|^2 / 2`` around ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.d,):
        raise ValueError(f"x0 must have {model.d} components")
    gi = model.gamma_inv()
    h = gi @ model.C
    hx = h @ x0
    gamma = h.T @ hx
    c = 0.5 * float(hx @ hx)
    return LinearizationSchedule(gamma=lambda t: gamma, c=lambda t: c, x0=x0, h=h, drive_map=h.T @ gi,
                                 gamma_const=gamma, c_const=c)
