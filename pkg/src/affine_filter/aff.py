"""Affine functional filter: observation-driven Riccati solves, conditional
characteristic functions, approximate conditional moments and smoother paths.

All quantities are built from the backward system::

    -dPhi/dt = F(Psi - y_t) - c_t,       Phi(T) = 0
    -dPsi/dt = R(Psi - y_t) - gamma_t,   Psi(T) = u + y_T

where ``y`` is the filter drive path ``(Gamma^-1 C)^T Gamma^-1 Ybar``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import AffineModel, RiccatiSolution
from .models import CirModel, WishartModel, cir_mixture_moments
from .observation import LinearizationSchedule, ObservationRecord
from .ode import DEFAULT_ATOL, DEFAULT_RTOL, BlowUp, IntegrationError, integrate
from .vech import adjoint, mat, vech

log = logging.getLogger(__name__)

METHODS = ("AFF", "PF", "EKF", "GAMMA", "UNCOND")


class DegenerateNormalizer(ArithmeticError):
    pass


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PriorMixture:
    """Finite Dirac mixture ``sum_j w_j delta_{x_j}`` used as initial law."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(atoms):
            raise ValueError("one weight per atom required")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x) -> "PriorMixture":
        return cls(atoms=np.atleast_1d(np.asarray(x, dtype=float))[None, :], weights=np.ones(1))

    @classmethod
    def clamped_normal(cls, x0: float, s0: float, nodes: int = 64) -> "PriorMixture":
        """Law of ``max(0, Z)``, ``Z ~ N(x0, s0^2)``.

        The positive part uses Gauss-Legendre nodes on ``z in [max(a, -12), 12]``
        (``a = -x0/s0``) weighted by the normal density; the clamped mass
        ``P(Z <= 0)`` becomes an atom at zero.
        """
        if s0 == 0:
            return cls.dirac([max(0.0, x0)])
        a = -x0 / s0
        lo = max(a, -12.0)
        if lo >= 12.0:
            return cls.dirac([0.0])
        z, w = np.polynomial.legendre.leggauss(nodes)
        z = lo + (12.0 - lo) * (z + 1) / 2
        w = w * (12.0 - lo) / 2 * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        atoms, weights = x0 + s0 * z, w
        if a > -12.0:
            atoms = np.append(atoms, 0.0)
            weights = np.append(weights, ndtr(a))
        return cls(atoms=atoms[:, None], weights=weights / weights.sum())

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def tilted(self, psi0: np.ndarray) -> np.ndarray:
        """Normalized weights ``w_j exp(<x_j, psi0>)`` (real ``psi0``)."""
        logw = np.log(np.where(self.weights > 0, self.weights, np.finfo(float).tiny)) + self.atoms @ np.real(psi0)
        logw -= logsumexp(logw)
        return np.exp(logw)


@dataclass(frozen=True)
class PosteriorSummary:
    t: float
    mean: np.ndarray
    variance: Optional[np.ndarray]
    method: str
    available: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")

    @classmethod
    def unavailable(cls, t: float, shape, method: str) -> "PosteriorSummary":
        return cls(t=t, mean=np.full(shape, np.nan), variance=None, method=method, available=False)


def write_summaries(path, summaries: Sequence[PosteriorSummary]) -> None:
    """CSV with columns ``t, mean*, var*, method`` (matrices flattened by vech)."""
    rows = []
    width_m = width_v = 0
    for s in summaries:
        m = np.asarray(s.mean, dtype=float)
        m = vech(m) if m.ndim == 2 else np.atleast_1d(m)
        v = np.atleast_1d(np.asarray(s.variance, dtype=float)) if s.variance is not None else np.array([])
        if v.ndim == 2:
            v = vech(v)
        width_m, width_v = max(width_m, m.size), max(width_v, v.size)
        rows.append((s.t, m, v, s.method))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"mean{k}" for k in range(width_m)] + [f"var{k}" for k in range(width_v)] + ["method"])
        for t, m, v, method in rows:
            mv = [repr(float(x)) for x in m] + [""] * (width_m - m.size)
            vv = [repr(float(x)) for x in v] + [""] * (width_v - v.size)
            w.writerow([repr(float(t))] + mv + vv + [method])


def _affine(model) -> AffineModel:
    if isinstance(model, AffineModel):
        return model
    return model.to_affine()


def _inputs(model, record: ObservationRecord, sched: LinearizationSchedule, T: float):
    am = _affine(model)
    if T > record.grid[-1] * (1 + 1e-12) or T <= 0:
        raise ValueError(f"T={T} outside (0, {record.grid[-1]}]")
    drive = sched.drive(record)
    return am, drive


def _riccati_rhs(am: AffineModel, drive, sched: LinearizationSchedule):
    def rhs(t, y):
        yt = drive(t)
        g = y[..., 1:] - yt
        dphi = -(am.F(g) - sched.c(t))
        dpsi = -(am.R(g) - sched.gamma(t))
        return np.concatenate([dphi[..., None], dpsi], axis=-1)

    return rhs


def solve_filter_riccati(model, record: ObservationRecord, sched: LinearizationSchedule, T: float, u,
                         rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                         dense: bool = True) -> RiccatiSolution:
    """Integrate the filter Riccati system backward from ``T`` to 0.

    ``u`` may carry leading batch axes. Raises :class:`BlowUp` when ``T``
    exceeds the existence horizon for this observation path.
    """
    am, drive = _inputs(model, record, sched, T)
    u = np.asarray(u)
    if u.shape[-1] != am.d:
        raise ValueError(f"u must have {am.d} components")
    cplx = np.iscomplexobj(u)
    u = u.astype(complex if cplx else float)
    yT = drive(T)
    y0 = np.concatenate([np.zeros(u.shape[:-1] + (1,), dtype=u.dtype), u + yT], axis=-1)
    traj = integrate(_riccati_rhs(am, drive, sched), T, 0.0, y0, rtol=rtol, atol=atol,
                     tstops=record.grid, dense=dense)
    end = traj.final
    return RiccatiSolution(u=u, T=float(T), phi=end[..., 0], psi=end[..., 1:], trajectory=traj)


def _log_mixture(prior: PriorMixture, phi, psi):
    """``log sum_j w_j exp(phi + <x_j, psi>)`` for complex ``phi``/``psi`` with batch axes."""
    expo = phi[..., None] + psi @ prior.atoms.T
    return logsumexp(expo, axis=-1, b=prior.weights)


def aff_cf(model, record: ObservationRecord, sched: LinearizationSchedule, prior: PriorMixture, T: float, v,
           rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL):
    """Normalized conditional characteristic function ``E[exp(i <v, X_T>)]`` under the AFF.

    ``v`` is a real vector or a batch of shape ``(k, d)``; the result has the
    matching batch shape.
    """
    am = _affine(model)
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 1
    vb = np.atleast_2d(v)
    if vb.shape[-1] != am.d:
        raise ValueError(f"v must have {am.d} components")
    u = np.concatenate([np.zeros((1, am.d)), vb]).astype(complex)
    u[1:] *= 1j
    sol = solve_filter_riccati(am, record, sched, T, u, rtol=rtol, atol=atol, dense=False)
    logs = _log_mixture(prior, sol.phi, sol.psi)
    log_den = logs[0]
    if not np.isfinite(log_den.real):
        raise DegenerateNormalizer("normalizer rho_T(1, y) is not finite and positive")
    out = np.exp(logs[1:] - log_den)
    out[np.all(vb == 0, axis=-1)] = 1.0
    return out[0] if scalar else out


def lff_log_normalizer(model, record, sched, prior: PriorMixture, T: float, **kw) -> float:
    """``log rho_T(1, y)`` of the unnormalized functional."""
    am = _affine(model)
    sol = solve_filter_riccati(am, record, sched, T, np.zeros(am.d), dense=False, **kw)
    return float(np.real(_log_mixture(prior, sol.phi, sol.psi)))


def _tilt_field(am: AffineModel, sol: RiccatiSolution, drive):
    """``g(s) = Psi(s, T, 0) - y_s`` from a dense u = 0 solve."""
    return lambda s: np.real(sol.psi_at(s)) - drive(s)


def aff_moments_cir(model: CirModel, record: ObservationRecord, sched: LinearizationSchedule, T: float,
                    prior: Optional[PriorMixture] = None, rtol: float = DEFAULT_RTOL,
                    atol: float = DEFAULT_ATOL) -> PosteriorSummary:
    """AFF mean and variance at ``T`` from the forward moment ODEs of the tilted CIR."""
    if prior is None:
        prior = PriorMixture.dirac([sched.x0[0]])
    am, drive = _inputs(model, record, sched, T)
    sol = solve_filter_riccati(am, record, sched, T, np.zeros(1), rtol=rtol, atol=atol)
    w = prior.tilted(sol.psi)
    x = prior.atoms[:, 0]
    m0, p0 = w @ x, w @ x ** 2
    g = _tilt_field(am, sol, drive)
    b, beta, s2 = model.b, model.beta, model.sigma ** 2

    def rhs(s, y):
        m, p = y
        a = beta + s2 * g(s)[0]
        return np.array([b + a * m, 2 * b * m + 2 * a * p + s2 * m])

    traj = integrate(rhs, 0.0, T, np.array([m0, p0]), rtol=rtol, atol=atol, tstops=record.grid, dense=False)
    m, p = traj.final
    return PosteriorSummary(t=float(T), mean=np.array([m]), variance=np.array([max(p - m * m, 0.0)]), method="AFF")


def aff_mean(model, record: ObservationRecord, sched: LinearizationSchedule, T: float,
             prior: Optional[PriorMixture] = None, rtol: float = DEFAULT_RTOL,
             atol: float = DEFAULT_ATOL) -> PosteriorSummary:
    """AFF mean for any affine diffusion: forward ``m' = b(g) + B(g) m``."""
    am, drive = _inputs(model, record, sched, T)
    if prior is None:
        prior = PriorMixture.dirac(sched.x0)
    sol = solve_filter_riccati(am, record, sched, T, np.zeros(am.d), rtol=rtol, atol=atol)
    m0 = prior.tilted(sol.psi) @ prior.atoms
    g = _tilt_field(am, sol, drive)

    def rhs(s, m):
        bt, Bt = am.tilt(g(s))
        return bt + Bt @ m

    traj = integrate(rhs, 0.0, T, m0, rtol=rtol, atol=atol, tstops=record.grid, dense=False)
    return PosteriorSummary(t=float(T), mean=traj.final, variance=None, method="AFF")


def aff_mean_wishart(model: WishartModel, record: ObservationRecord, sched: LinearizationSchedule, T: float,
                     x0: Optional[np.ndarray] = None, rtol: float = DEFAULT_RTOL,
                     atol: float = DEFAULT_ATOL) -> PosteriorSummary:
    """Approximate conditional mean matrix from ``dX/ds = n Sigma^2 + H X + X H^T``.

    ``H_s = 2 Sigma^2 (Psi(s) - ybar_s)`` in matrix form, with ``Psi`` the
    u = 0 backward solution. Experimental: the filter theory is only
    established for canonical state spaces.
    """
    am, drive = _inputs(model, record, sched, T)
    x0 = mat(sched.x0) if x0 is None else np.asarray(x0, dtype=float)
    sol = solve_filter_riccati(am, record, sched, T, np.zeros(am.d), rtol=rtol, atol=atol)
    S2 = model.Sigma2
    nS2 = model.n * S2

    def rhs(s, X):
        H = 2 * S2 @ adjoint(np.real(sol.psi_at(s)) - drive(s))
        return nS2 + H @ X + X @ H.T

    traj = integrate(rhs, 0.0, T, x0, rtol=rtol, atol=atol, tstops=record.grid, dense=False)
    X = traj.final
    return PosteriorSummary(t=float(T), mean=0.5 * (X + X.T), variance=None, method="AFF")


def _sweep_state(am: AffineModel, with_j: bool):
    d = am.d
    sl_psi = slice(0, d)
    sl_P = slice(d, d + d * d)
    sl_q = slice(d + d * d, 2 * d + d * d)
    size = 2 * d + d * d + (1 if with_j else 0)
    return sl_psi, sl_P, sl_q, size


def _sweep(am: AffineModel, record: ObservationRecord, sched: LinearizationSchedule, drive,
           n_out: int, with_j: bool, rtol: float, atol: float):
    """All u = 0 backward systems for output times ``t_1..t_n`` in one sweep.

    Besides ``Psi`` each system carries the propagator ``P(s)`` of the tilted
    mean ODE (``P' = -P B``, ``P(T) = I``), ``q(s) = int_s^T P b`` and for
    scalar models ``J(s) = int_s^T P``, so that
    ``m(T) = P(0) m(0) + q(0)``. Returns the time-0 states and a failure mask.
    """
    d = am.d
    sl_psi, sl_P, sl_q, size = _sweep_state(am, with_j)
    grid = record.grid
    states = np.zeros((n_out, size))
    active = np.zeros(n_out, dtype=bool)
    failed = np.zeros(n_out, dtype=bool)
    eye = np.eye(d).ravel()

    def rhs(t, Y):
        psi = Y[:, sl_psi]
        P = Y[:, sl_P].reshape(-1, d, d)
        g = psi - drive(t)
        bt, Bt = am.tilt(g)
        out = np.empty_like(Y)
        out[:, sl_psi] = -(np.real(am.R(g)) - sched.gamma(t))
        out[:, sl_P] = -(P @ Bt).reshape(len(Y), -1)
        out[:, sl_q] = -(P @ bt[..., None])[..., 0]
        if with_j:
            out[:, -1] = -P[:, 0, 0]
        return out

    for i in range(n_out, 0, -1):
        init = np.zeros(size)
        init[sl_psi] = drive(grid[i])
        init[sl_P] = eye
        states[i - 1] = init
        active[i - 1] = True
        idx = np.flatnonzero(active)
        if idx.size == 0:
            continue
        try:
            traj = integrate(rhs, grid[i], grid[i - 1], states[idx], rtol=rtol, atol=atol, dense=False)
            states[idx] = traj.final
        except IntegrationError:
            for k in idx:
                try:
                    traj = integrate(rhs, grid[i], grid[i - 1], states[k:k + 1], rtol=rtol, atol=atol, dense=False)
                    states[k] = traj.final[0]
                except IntegrationError:
                    log.info("AFF system for t=%g blew up near t=%g", grid[k + 1], grid[i - 1])
                    active[k] = False
                    failed[k] = True
    return states, failed


def aff_filter_sequence(model, record: ObservationRecord, sched: LinearizationSchedule,
                        prior: Optional[PriorMixture] = None, method: str = "batch",
                        n_out: Optional[int] = None, rtol: float = DEFAULT_RTOL,
                        atol: float = DEFAULT_ATOL) -> list:
    """AFF summaries at ``t_1..t_N``, one backward solve per output time.

    ``method="loop"`` re-solves each output time separately with the forward
    moment ODEs; ``method="batch"`` integrates all backward systems jointly
    and reads the moments off the accumulated propagators. Output times at
    and after the first blow-up are returned with ``available=False``.
    """
    n_out = record.N if n_out is None else n_out
    grid = record.grid
    is_cir = isinstance(model, CirModel)
    is_wishart = isinstance(model, WishartModel)
    am = _affine(model)
    if prior is None:
        prior = PriorMixture.dirac(sched.x0)

    if method == "loop":
        out = []
        for n in range(1, n_out + 1):
            T = float(grid[n])
            try:
                if is_cir:
                    out.append(aff_moments_cir(model, record, sched, T, prior, rtol, atol))
                elif is_wishart:
                    res = aff_mean_wishart(model, record, sched, T, mat(prior.mean()), rtol, atol)
                    out.append(res)
                else:
                    out.append(aff_mean(am, record, sched, T, prior, rtol, atol))
            except BlowUp:
                shape = (model.d, model.d) if is_wishart else (am.d,)
                out.extend(PosteriorSummary.unavailable(float(grid[k]), shape, "AFF") for k in range(n, n_out + 1))
                break
        return out
    if method != "batch":
        raise ValueError(f"unknown method {method!r}")

    drive = sched.drive(record)
    d = am.d
    sl_psi, sl_P, sl_q, _ = _sweep_state(am, is_cir)
    states, failed = _sweep(am, record, sched, drive, n_out, is_cir, rtol, atol)
    first_fail = int(np.argmax(failed)) if failed.any() else n_out
    out = []
    for n in range(n_out):
        T = float(grid[n + 1])
        if n >= first_fail:
            shape = (model.d, model.d) if is_wishart else (d,)
            out.append(PosteriorSummary.unavailable(T, shape, "AFF"))
            continue
        st = states[n]
        psi0 = st[sl_psi]
        P0 = st[sl_P].reshape(d, d)
        q0 = st[sl_q]
        w = prior.tilted(psi0)
        m0 = w @ prior.atoms
        mean = P0 @ m0 + q0
        if is_cir:
            E0, J0 = P0[0, 0], st[-1]
            p0 = w @ prior.atoms[:, 0] ** 2
            b, s2 = model.b, model.sigma ** 2
            second = E0 ** 2 * p0 + (2 * b + s2) * (E0 * m0[0] * J0 + 0.5 * b * J0 ** 2)
            var = np.array([max(second - mean[0] ** 2, 0.0)])
            out.append(PosteriorSummary(t=T, mean=mean, variance=var, method="AFF"))
        elif is_wishart:
            X = mat(mean)
            out.append(PosteriorSummary(t=T, mean=X, variance=None, method="AFF"))
        else:
            out.append(PosteriorSummary(t=T, mean=mean, variance=None, method="AFF"))
    return out


def unconditional_cir(model: CirModel, prior: PriorMixture, times: Sequence[float]) -> list:
    mean, var = cir_mixture_moments(prior.atoms[:, 0], prior.weights, np.asarray(times, dtype=float), model)
    return [PosteriorSummary(t=float(t), mean=np.array([m]), variance=np.array([v]), method="UNCOND")
            for t, m, v in zip(times, mean, var)]


def smoother_ensemble_cir(rng: np.random.Generator, model: CirModel, x0, record: ObservationRecord,
                          sched: LinearizationSchedule, t: float, nsteps: int, npaths: int,
                          rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> np.ndarray:
    """Full-truncation Euler paths of the tilted CIR on ``[0, t]``.

    ``x0`` is a start point or a :class:`PriorMixture` (atoms drawn with the
    tilted weights). Returns an array of shape ``(nsteps + 1, npaths)``.
    """
    am, drive = _inputs(model, record, sched, t)
    sol = solve_filter_riccati(am, record, sched, t, np.zeros(1), rtol=rtol, atol=atol)
    if isinstance(x0, PriorMixture):
        w = x0.tilted(sol.psi)
        start = x0.atoms[rng.choice(len(w), size=npaths, p=w), 0]
    else:
        start = np.full(npaths, float(x0))
    h = t / nsteps
    times = np.linspace(0.0, t, nsteps + 1)
    tilt = np.array([np.real(sol.psi_at(s))[0] - drive(s)[0] for s in times[:-1]])
    b, beta, sig = model.b, model.beta, model.sigma
    s2 = sig ** 2
    out = np.empty((nsteps + 1, npaths))
    x = start.copy()
    out[0] = x
    sq = np.sqrt(h)
    for k in range(nsteps):
        xp = np.maximum(x, 0.0)
        x = x + (b + (beta + s2 * tilt[k]) * xp) * h + sig * np.sqrt(xp) * sq * rng.standard_normal(npaths)
        out[k + 1] = np.maximum(x, 0.0)
    return out


def smoother_sample_cir(rng: np.random.Generator, model: CirModel, x0, record: ObservationRecord,
                        sched: LinearizationSchedule, t: float, nsteps: int):
    from .models import SignalPath

    states = smoother_ensemble_cir(rng, model, x0, record, sched, t, nsteps, 1)[:, 0]
    return SignalPath(grid=np.linspace(0.0, t, nsteps + 1), states=states)


def fourier_invert(cf: Callable[[np.ndarray], np.ndarray], v_max: float, n_nodes: int, x_grid) -> tuple:
    """Trapezoidal inversion ``f(x) = (1/2pi) int_{-V}^{V} exp(-ivx) cf(v) dv`` of a scalar CF.

    Uses Hermitian symmetry to fold onto ``[0, V]``; ``cf`` must accept a
    1-d array of frequencies. Returns ``(density, |cf(V)|)``.
    """
    if n_nodes % 2:
        raise ValueError("n_nodes must be even")
    x = np.asarray(x_grid, dtype=float)
    half = n_nodes // 2
    v = np.linspace(0.0, v_max, half + 1)
    vals = np.asarray(cf(v), dtype=complex)
    tail = float(abs(vals[-1]))
    if tail > 1e-4:
        warnings.warn(f"|cf(V)| = {tail:.2e} exceeds 1e-4; truncation error likely", TruncationWarning)
    wts = np.full(half + 1, v[1] - v[0])
    wts[[0, -1]] *= 0.5
    integrand = np.real(np.exp(-1j * np.outer(x, v)) * vals)
    return integrand @ wts / np.pi, tail


def aff_density_cir(model: CirModel, record, sched, prior: PriorMixture, T: float, v_max: float,
                    n_nodes: int, x_grid, **kw):
    """Inverted AFF density of ``X_T`` on ``x_grid``."""
    return fourier_invert(lambda v: aff_cf(model, record, sched, prior, T, v[:, None], **kw),
                          v_max, n_nodes, x_grid)
