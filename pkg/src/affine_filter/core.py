"""Affine diffusion parameters, vector fields and homogeneous Riccati solves.

State space is ``R_+^m x R^(d-m)``; coordinates ``0..m-1`` are the cone
coordinates. Only the diffusion part of the vector fields is supported::

    F(u)   = 1/2 <u, a u> + <b, u>
    R_i(u) = 1/2 <u, alpha_i u> + <beta^i, u>     i < m
    R_i(u) = <beta^i, u>                          i >= m

with ``beta^i`` the i-th column of ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ode import DEFAULT_ATOL, DEFAULT_RTOL, OdeTrajectory, integrate

_PSD_TOL = 1e-12


class Inadmissible(ValueError):
    """A diffusion parameter set violates an admissibility condition."""

    def __init__(self, rule: str, index, detail: str = ""):
        msg = f"inadmissible parameters: rule {rule} violated at {index}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.rule = rule
        self.index = index


@dataclass(frozen=True)
class DiffusionParams:
    m: int
    d: int
    a: np.ndarray
    alpha: tuple
    b: np.ndarray
    beta: np.ndarray

    @classmethod
    def build(cls, m, d, a=None, alpha=None, b=None, beta=None) -> "DiffusionParams":
        a = np.zeros((d, d)) if a is None else np.atleast_2d(np.asarray(a, dtype=float))
        if alpha is None:
            alpha = [np.zeros((d, d)) for _ in range(m)]
        alpha = tuple(np.atleast_2d(np.asarray(x, dtype=float)) for x in alpha)
        b = np.zeros(d) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
        beta = np.zeros((d, d)) if beta is None else np.atleast_2d(np.asarray(beta, dtype=float))
        return cls(m=int(m), d=int(d), a=a, alpha=alpha, b=b, beta=beta)


def _is_psd(x: np.ndarray) -> bool:
    if not np.allclose(x, x.T, atol=_PSD_TOL):
        return False
    scale = max(1.0, float(np.max(np.abs(x))))
    return bool(np.min(np.linalg.eigvalsh(x)) >= -_PSD_TOL * scale)


def validate_params(p: DiffusionParams) -> DiffusionParams:
    """Return ``p`` unchanged if it is admissible, else raise :class:`Inadmissible`.

    Rule ids: ``admiss1`` (a), ``alphacond``, ``driftcond1`` (b),
    ``driftcond2`` (off-diagonal cone block of beta), ``driftcond3``
    (cone rows, free columns of beta).
    """
    m, d = p.m, p.d
    if not 0 <= m <= d:
        raise ValueError(f"need 0 <= m <= d, got m={m}, d={d}")
    if p.a.shape != (d, d) or p.b.shape != (d,) or p.beta.shape != (d, d):
        raise ValueError("parameter shapes inconsistent with d")
    if len(p.alpha) != m or any(al.shape != (d, d) for al in p.alpha):
        raise ValueError("alpha must hold m matrices of shape (d, d)")

    if not _is_psd(p.a):
        raise Inadmissible("admiss1", "a", "a must be symmetric positive semidefinite")
    for i in range(m):
        for j in range(m):
            if p.a[i, j] != 0:
                raise Inadmissible("admiss1", (i, j), "a vanishes on the cone block")

    for i, al in enumerate(p.alpha):
        if not _is_psd(al):
            raise Inadmissible("alphacond", i, f"alpha[{i}] must be positive semidefinite")
        for k in range(m):
            for j in range(m):
                if k != i and j != i and al[k, j] != 0:
                    raise Inadmissible("alphacond", (i, k, j))

    for i in range(m):
        if p.b[i] < 0:
            raise Inadmissible("driftcond1", i, f"b[{i}]={p.b[i]} < 0")
    for i in range(m):
        for j in range(m):
            if i != j and p.beta[i, j] < 0:
                raise Inadmissible("driftcond2", (i, j), f"beta[{i},{j}]={p.beta[i, j]} < 0")
    for i in range(m):
        for k in range(m, d):
            if p.beta[i, k] != 0:
                raise Inadmissible("driftcond3", (i, k), f"beta[{i},{k}]={p.beta[i, k]} != 0")
    return p


@dataclass(frozen=True)
class AffineModel:
    """Affine diffusion given through its vector fields.

    ``F`` and ``R`` act on the last axis of complex arrays of shape
    ``(..., d)``. ``tilt`` returns the drift ``(b(g), B(g))`` of the
    exponentially tilted process ``dX = (b(g) + B(g) X) dt + ...`` for a real
    tilt ``g`` of shape ``(..., d)``; ``b(g) = grad F(g)`` and
    ``B(g) = (dR/du)(g)^T``.
    """

    label: str
    d: int
    m: int
    F: Callable[[np.ndarray], np.ndarray]
    R: Callable[[np.ndarray], np.ndarray]
    tilt: Callable[[np.ndarray], tuple]
    params: Optional[DiffusionParams] = field(default=None, repr=False)

    @classmethod
    def from_params(cls, params: DiffusionParams, label: str = "affine") -> "AffineModel":
        p = validate_params(params)
        d, m = p.d, p.m
        a, b, beta = p.a, p.b, p.beta
        alpha = np.array(p.alpha) if m else np.zeros((0, d, d))

        def F(u):
            u = np.asarray(u)
            return 0.5 * np.einsum("...i,ij,...j->...", u, a, u) + u @ b

        def R(u):
            u = np.asarray(u)
            lin = u @ beta
            if m == 0:
                return lin
            quad = 0.5 * np.einsum("...k,ikj,...j->...i", u, alpha, u)
            pad = np.zeros(u.shape[:-1] + (d - m,), dtype=quad.dtype)
            return lin + np.concatenate([quad, pad], axis=-1)

        def tilt(g):
            g = np.asarray(g, dtype=float)
            bt = b + g @ a
            Bt = np.broadcast_to(beta, g.shape[:-1] + (d, d)).copy()
            if m:
                # column j < m gains alpha_j g
                Bt[..., :, :m] += np.einsum("jik,...k->...ij", alpha, g)
            return bt, Bt

        return cls(label=label, d=d, m=m, F=F, R=R, tilt=tilt, params=p)


def eval_vector_fields(model: AffineModel, u) -> tuple:
    """Return ``(F(u), R(u))``."""
    u = np.asarray(u, dtype=complex)
    return model.F(u), model.R(u)


@dataclass(frozen=True)
class RiccatiSolution:
    """Solution of a (generalized) Riccati system at horizon ``T``.

    For the homogeneous system ``phi``/``psi`` are ``phi(T, u)``/``psi(T, u)``;
    for the filter system they are ``Phi(0, T, u)``/``Psi(0, T, u)``. The
    trajectory stores ``[Phi, Psi...]`` stacked on the last axis.
    """

    u: np.ndarray
    T: float
    phi: complex
    psi: np.ndarray
    trajectory: OdeTrajectory = field(repr=False)

    @property
    def Phi0(self):
        return self.phi

    @property
    def Psi0(self):
        return self.psi

    def psi_at(self, t: float) -> np.ndarray:
        return self.trajectory(t)[..., 1:]

    def phi_at(self, t: float):
        return self.trajectory(t)[..., 0]


def solve_homogeneous_riccati(model: AffineModel, T: float, u, rtol: float = DEFAULT_RTOL,
                              atol: float = DEFAULT_ATOL, dense: bool = True) -> RiccatiSolution:
    """Solve ``phi' = F(psi)``, ``psi' = R(psi)``, ``psi(0) = u`` on ``[0, T]``.

    ``u`` may carry leading batch axes. Raises :class:`~affine_filter.ode.BlowUp`
    when ``u`` lies outside the exponential-moment domain for horizon ``T``.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    u = np.asarray(u, dtype=complex)
    y0 = np.concatenate([np.zeros(u.shape[:-1] + (1,), dtype=complex), u], axis=-1)

    def rhs(t, y):
        psi = y[..., 1:]
        return np.concatenate([model.F(psi)[..., None], model.R(psi)], axis=-1)

    traj = integrate(rhs, 0.0, T, y0, rtol=rtol, atol=atol, dense=dense)
    end = traj.final
    return RiccatiSolution(u=u, T=float(T), phi=end[..., 0], psi=end[..., 1:], trajectory=traj)
