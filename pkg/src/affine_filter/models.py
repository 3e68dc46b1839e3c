"""CIR and Wishart signal models: affine embeddings, exact samplers, moments."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import AffineModel, DiffusionParams
from .vech import adjoint, dual, mat, tril_indices, vech, vech_size

PSD_TOL = 1e-10


class InvalidParams(ValueError):
    pass


class FactorizationError(ValueError):
    pass


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class CirModel:
    """``dX = (b + beta X) dt + sigma sqrt(X) dB``."""

    b: float
    beta: float
    sigma: float

    def __post_init__(self):
        if self.b < 0:
            raise InvalidParams(f"b must be nonnegative, got {self.b}")
        if not self.sigma > 0:
            raise InvalidParams(f"sigma must be positive, got {self.sigma}")

    @property
    def label(self) -> str:
        return "cir"

    def params(self) -> DiffusionParams:
        return DiffusionParams.build(m=1, d=1, alpha=[[[self.sigma ** 2]]], b=[self.b], beta=[[self.beta]])

    def to_affine(self) -> AffineModel:
        return AffineModel.from_params(self.params(), label="cir")


@dataclass(frozen=True)
class WishartModel:
    """Wishart process with ``H = 0`` and ``b = n Sigma^2``.

    As an affine model it lives on ``vech`` coordinates (``p = d(d+1)/2``,
    all cone-type); arguments of ``F`` and ``R`` are dual coordinates.
    """

    d: int
    n: int
    Sigma: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.Sigma, dtype=float)
        object.__setattr__(self, "Sigma", S)
        if S.shape != (self.d, self.d):
            raise InvalidParams("Sigma must be d x d")
        if self.n < self.d + 1:
            raise InvalidParams(f"need n >= d + 1, got n={self.n}, d={self.d}")
        if not np.allclose(S, S.T):
            raise InvalidParams("Sigma must be symmetric")
        if np.min(np.linalg.eigvalsh(S)) < -1e-14:
            raise InvalidParams("Sigma must be positive semidefinite")

    @property
    def label(self) -> str:
        return "wishart"

    @property
    def p(self) -> int:
        return vech_size(self.d)

    @property
    def Sigma2(self) -> np.ndarray:
        return self.Sigma @ self.Sigma

    def F_matrix(self, U: np.ndarray):
        return self.n * np.trace(self.Sigma2 @ U, axis1=-2, axis2=-1)

    def R_matrix(self, U: np.ndarray) -> np.ndarray:
        return 2 * U @ self.Sigma2 @ U

    def to_affine(self) -> AffineModel:
        S2 = self.Sigma2
        n, d, p = self.n, self.d, self.p
        drift_const = vech(n * S2)
        basis = mat(np.eye(p))

        def F(w):
            return self.F_matrix(adjoint(w))

        def R(w):
            return dual(self.R_matrix(adjoint(w)))

        def tilt(g):
            g = np.asarray(g, dtype=float)
            H = 2 * S2 @ adjoint(g)
            Hx = H[..., None, :, :] @ basis
            lin = vech(Hx + np.swapaxes(Hx, -1, -2))
            bt = np.broadcast_to(drift_const, g.shape).copy()
            return bt, np.swapaxes(lin, -1, -2)

        return AffineModel(label="wishart", d=p, m=p, F=F, R=R, tilt=tilt)


@dataclass(frozen=True)
class SignalPath:
    grid: np.ndarray
    states: np.ndarray
    seed: Optional[int] = None

    @property
    def is_matrix(self) -> bool:
        return self.states.ndim == 3

    def flat_states(self) -> np.ndarray:
        if self.is_matrix:
            return vech(self.states)
        return self.states.reshape(len(self.grid), -1)

    def to_csv(self, path) -> None:
        flat = self.flat_states()
        if self.is_matrix:
            rows, cols = tril_indices(self.states.shape[-1])
            names = [f"x{i}{j}" for i, j in zip(rows, cols)]
        else:
            names = ["x"] if flat.shape[1] == 1 else [f"x{k}" for k in range(flat.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + names)
            for t, row in zip(self.grid, flat):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, matrix: bool = False, seed: Optional[int] = None) -> "SignalPath":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        grid, flat = data[:, 0], data[:, 1:]
        states = mat(flat) if matrix else (flat[:, 0] if flat.shape[1] == 1 else flat)
        return cls(grid=grid, states=states, seed=seed)


def _expm1_ratio(beta: float, t):
    """``(exp(beta t) - 1) / beta`` with the ``beta -> 0`` limit ``t``."""
    t = np.asarray(t, dtype=float)
    if beta == 0:
        return t
    return np.expm1(beta * t) / beta


def cir_moments(x, t, params: CirModel):
    """Mean and variance of ``X_t`` given ``X_0 = x``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    b, beta, s2 = params.b, params.beta, params.sigma ** 2
    e = np.exp(beta * t)
    e1 = _expm1_ratio(beta, t)
    mean = x * e + b * e1
    var = x * s2 * e * e1 + 0.5 * b * s2 * e1 ** 2
    return mean, var


def cir_mixture_moments(atoms: np.ndarray, weights: np.ndarray, t, params: CirModel):
    """Mean and variance of ``X_t`` when ``X_0`` is a discrete mixture."""
    m, v = cir_moments(np.asarray(atoms)[:, None], np.atleast_1d(t)[None, :], params)
    w = np.asarray(weights)[:, None]
    mean = np.sum(w * m, axis=0)
    var = np.sum(w * (v + m ** 2), axis=0) - mean ** 2
    return mean, np.maximum(var, 0.0)


def cir_exact_step(rng: np.random.Generator, x, dt: float, params: CirModel):
    """Draw ``X_{t+dt}`` given ``X_t = x`` from the exact transition law.

    The transition is a scaled noncentral chi-square, sampled as a
    Poisson mixture of Gamma variables (valid for any ``df >= 0``).
    """
    if not params.sigma > 0:
        raise InvalidParams("sigma must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    s2 = params.sigma ** 2
    scale = s2 * _expm1_ratio(params.beta, dt) / 4.0
    df = 4.0 * params.b / s2
    lam = x * np.exp(params.beta * dt) / scale
    k = rng.poisson(lam / 2.0)
    shape = df / 2.0 + k
    # gamma(shape=0) is exactly 0: absorbing case b = 0 with no Poisson jumps
    return 2.0 * scale * rng.gamma(shape)


def cir_initial(rng: np.random.Generator, x0: float, s0: float, size=None):
    """``max(0, Z)`` with ``Z ~ N(x0, s0^2)``."""
    if s0 == 0:
        return np.full(size, float(x0)) if size is not None else float(x0)
    z = rng.normal(x0, s0, size=size)
    return np.maximum(0.0, z)


def cir_sample_path(rng: np.random.Generator, x0: float, s0: float, grid: Sequence[float],
                    params: CirModel, seed: Optional[int] = None) -> SignalPath:
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    states = np.empty(len(grid))
    states[0] = cir_initial(rng, x0, s0)
    for i in range(1, len(grid)):
        states[i] = cir_exact_step(rng, states[i - 1], grid[i] - grid[i - 1], params)
    return SignalPath(grid=grid, states=states, seed=seed)


def wishart_factor(x0: np.ndarray, n: int) -> np.ndarray:
    """An ``n x d`` matrix ``z0`` with ``z0.T @ z0 == x0``."""
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[0]
    lam, V = np.linalg.eigh(x0)
    scale = max(1.0, float(np.max(np.abs(lam))))
    if lam.min() < -PSD_TOL * scale:
        raise FactorizationError("x0 is not positive semidefinite")
    lam = np.clip(lam, 0.0, None)
    rank = int(np.sum(lam > PSD_TOL * scale))
    if rank > n:
        raise FactorizationError(f"rank {rank} of x0 exceeds n={n}")
    keep = np.argsort(lam)[::-1][: min(n, d)]
    top = np.sqrt(lam[keep])[:, None] * V[:, keep].T
    z0 = np.zeros((n, d))
    z0[: top.shape[0]] = top
    return z0


def wishart_sample_path(rng: np.random.Generator, z0: np.ndarray, grid: Sequence[float],
                        model: WishartModel, seed: Optional[int] = None) -> SignalPath:
    """Exact-in-law path ``X_t = Z_t^T Z_t`` with ``Z_t = W_t Sigma + z0``."""
    grid = np.asarray(grid, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (model.n, model.d):
        raise FactorizationError(f"z0 must be {model.n} x {model.d}")
    dt = np.diff(grid)
    if np.any(dt <= 0):
        raise ValueError("grid must be strictly increasing")
    dW = rng.standard_normal((len(dt), model.n, model.d)) * np.sqrt(dt)[:, None, None]
    W = np.concatenate([np.zeros((1, model.n, model.d)), np.cumsum(dW, axis=0)])
    if grid[0] != 0:
        W = W + rng.standard_normal((model.n, model.d)) * np.sqrt(grid[0])
    Z = W @ model.Sigma + z0
    X = np.swapaxes(Z, -1, -2) @ Z
    return SignalPath(grid=grid, states=0.5 * (X + np.swapaxes(X, -1, -2)), seed=seed)


def is_psd(x: np.ndarray, tol: float = PSD_TOL) -> bool:
    return bool(np.all(np.linalg.eigvalsh(x) >= -tol))
