"""Reference filters: bootstrap particle filter, CIR extended Kalman filter and
Gamma assumed-density filter."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special, stats

from .aff import PosteriorSummary
from .models import CirModel, WishartModel, cir_exact_step, cir_initial, cir_moments
from .observation import ObservationRecord
from .vech import mat, vech

VAR_FLOOR = 1e-18


class WeightCollapse(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"all particle likelihoods vanished at step {step}")
        self.step = step


class QuadratureFailure(ArithmeticError):
    pass


class DegenerateGamma(ValueError):
    pass


@dataclass(frozen=True)
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


@dataclass(frozen=True)
class GaussianState:
    mean: float
    variance: float


@dataclass(frozen=True)
class GammaState:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise DegenerateGamma(f"Gamma parameters must be positive, got k={self.shape}, theta={self.scale}")

    @classmethod
    def from_moments(cls, mean: float, variance: float) -> "GammaState":
        if not (mean > 0 and variance > 0):
            raise DegenerateGamma(f"cannot match Gamma to mean={mean}, variance={variance}")
        return cls(shape=mean * mean / variance, scale=variance / mean)

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def variance(self) -> float:
        return self.shape * self.scale ** 2


def systematic_resample(rng: np.random.Generator, weights: np.ndarray) -> np.ndarray:
    """Offspring indices; particle ``j`` is copied ``Np w_j`` times in expectation."""
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def bootstrap_pf(rng: np.random.Generator, transition: Callable, record: ObservationRecord, Np: int,
                 init: Callable, state: Optional[Callable] = None, resample_frac: float = 0.5,
                 matrix_summary: bool = False) -> list:
    """Bootstrap particle filter on the discrete observation model.

    ``init(rng, Np)`` draws initial particles, ``transition(rng, particles, dt)``
    propagates them and ``state(particles)`` maps them to ``(Np, d)`` signal
    states (identity by default). Weights use the exact Gaussian likelihood
    of ``y_i ~ N(C x dt, Gamma Gamma^T dt)``; systematic resampling is done
    when the ESS falls below ``resample_frac * Np``.
    """
    if Np < 2:
        raise ValueError("need at least two particles")
    state = state or (lambda p: np.asarray(p, dtype=float).reshape(len(p), -1))
    C = record.model.C
    gi = record.model.gamma_inv()
    particles = init(rng, Np)
    logw = np.full(Np, -math.log(Np))
    out = []
    for i in range(1, record.N + 1):
        dt = record.grid[i] - record.grid[i - 1]
        particles = transition(rng, particles, dt)
        x = state(particles)
        resid = (record.increments[i - 1] - (x @ C.T) * dt) @ gi.T
        logw = logw - 0.5 * np.sum(resid ** 2, axis=1) / dt
        top = np.max(logw)
        if not np.isfinite(top):
            raise WeightCollapse(i)
        w = np.exp(logw - top)
        w /= w.sum()
        mean = w @ x
        dev = x - mean
        cov = (w[:, None] * dev).T @ dev
        if matrix_summary:
            out.append(PosteriorSummary(t=float(record.grid[i]), mean=mat(mean), variance=cov, method="PF"))
        else:
            var = np.diag(cov) if cov.shape[0] > 1 else cov[0]
            out.append(PosteriorSummary(t=float(record.grid[i]), mean=mean, variance=np.maximum(var, 0.0),
                                        method="PF"))
        ens = ParticleEnsemble(particles=particles, weights=w)
        if ens.ess < resample_frac * Np:
            idx = systematic_resample(rng, w)
            particles = particles[idx]
            logw = np.full(Np, -math.log(Np))
        else:
            logw = np.log(np.maximum(w, np.finfo(float).tiny))
    return out


def cir_pf(rng: np.random.Generator, model: CirModel, record: ObservationRecord, Np: int,
           x0: float, s0: float = 0.0) -> list:
    return bootstrap_pf(
        rng,
        transition=lambda r, p, dt: cir_exact_step(r, p, dt, model),
        record=record,
        Np=Np,
        init=lambda r, n: np.asarray(cir_initial(r, x0, s0, size=n), dtype=float),
    )


def wishart_pf(rng: np.random.Generator, model: WishartModel, record: ObservationRecord, Np: int,
               z0: np.ndarray) -> list:
    """PF carrying factors ``Z`` (``X = Z^T Z``); the factor step is exact in law."""
    S = model.Sigma

    def transition(r, Z, dt):
        return Z + (r.standard_normal(Z.shape) * math.sqrt(dt)) @ S

    def state(Z):
        return vech(np.swapaxes(Z, -1, -2) @ Z)

    return bootstrap_pf(rng, transition, record, Np,
                        init=lambda r, n: np.broadcast_to(z0, (n,) + z0.shape).copy(),
                        state=state, matrix_summary=True)


def ekf_cir(record: ObservationRecord, params: CirModel, prior_mean: float, prior_var: float) -> list:
    """Gaussian filter with exact CIR moment prediction and a scalar Kalman update.

    Prediction: mean from the CIR mean map at the current mean; variance is
    the transition variance at the mean plus ``exp(2 beta dt)`` times the
    current variance. Update: ``H = C dt``, ``R = Gamma^2 dt``. Means are
    kept in the state space (clamped at 0) and variances floored.
    """
    c = float(record.model.C[0, 0])
    g2 = float(record.model.Gamma[0, 0]) ** 2
    m, P = float(prior_mean), float(prior_var)
    out = []
    for i in range(1, record.N + 1):
        dt = record.grid[i] - record.grid[i - 1]
        m_pred, v_trans = cir_moments(max(m, 0.0), dt, params)
        P_pred = float(v_trans) + math.exp(2 * params.beta * dt) * P
        m_pred = float(m_pred)
        H = c * dt
        S = H * H * P_pred + g2 * dt
        K = P_pred * H / S
        m = max(m_pred + K * (record.increments[i - 1, 0] - H * m_pred), 0.0)
        P = max((1.0 - K * H) * P_pred, VAR_FLOOR)
        out.append(PosteriorSummary(t=float(record.grid[i]), mean=np.array([m]), variance=np.array([P]),
                                    method="EKF"))
    return out


def _gamma_update(state: GammaState, x_obs: float, s_obs: float, rtol: float = 1e-10):
    """Posterior mean/variance of ``Gamma(k, theta)`` prior times ``N(x; x_obs, s_obs^2)``.

    Moments are taken about the prior mean to avoid cancellation in the variance.
    """
    k, th = state.shape, state.scale
    mu = k * th
    hi = float(stats.gamma.isf(1e-17, k, scale=th))
    lognorm = -math.lgamma(k) - k * math.log(th)

    def loglik(x):
        return -0.5 * ((x - x_obs) ** 2 - (mu - x_obs) ** 2) / s_obs ** 2

    def make(j, with_power):
        def f(x):
            if x <= 0:
                return 0.0
            lp = lognorm - x / th + loglik(x)
            if with_power:
                lp += (k - 1) * math.log(x)
            return (x - mu) ** j * math.exp(lp)
        return f

    if k < 1:
        # integrable singularity x^(k-1) at the origin is handled as an algebraic weight
        calls = [dict(func=make(j, False), a=0.0, b=hi, weight="alg", wvar=(k - 1.0, 0.0), limit=200)
                 for j in range(3)]
    else:
        lo = float(stats.gamma.ppf(1e-17, k, scale=th))
        pts = sorted({float(stats.gamma.ppf(q, k, scale=th)) for q in (1e-4, 0.1, 0.5, 0.9, 0.9999)}
                     | ({x_obs} if lo < x_obs < hi else set()))
        calls = [dict(func=make(j, True), a=lo, b=hi, points=pts, limit=400) for j in range(3)]
    with warnings.catch_warnings():
        # roundoff notices are superseded by the explicit error check below
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        results = [integrate.quad(epsabs=0.0, epsrel=rtol, **kw) for kw in calls]
    (z0, _), (z1, _), (z2, _) = results
    if not z0 > 0:
        raise QuadratureFailure("posterior normalizer vanished")
    sd = math.sqrt(state.variance)
    for j, (val, err) in enumerate(results):
        # central moments may vanish; errors are judged against z0 * sd^j
        if not np.isfinite(val) or err > max(1e3 * rtol, 1e-6) * (abs(val) + z0 * sd ** j):
            raise QuadratureFailure(f"Gamma update quadrature error {err:.2e} on value {val:.3e}")
    shift = z1 / z0
    return mu + shift, z2 / z0 - shift * shift


def gamma_adf(record: ObservationRecord, params: CirModel, prior: GammaState) -> list:
    """Gamma assumed-density filter with exact moment prediction and quadrature update."""
    c = float(record.model.C[0, 0])
    g = float(record.model.Gamma[0, 0])
    st = prior
    out = []
    b, beta, s2 = params.b, params.beta, params.sigma ** 2
    for i in range(1, record.N + 1):
        dt = record.grid[i] - record.grid[i - 1]
        mu, var = st.mean, st.variance
        e = math.exp(beta * dt)
        e1 = math.expm1(beta * dt) / beta if beta != 0 else dt
        m_pred = e * mu + b * e1
        v_pred = mu * s2 * e * e1 + 0.5 * b * s2 * e1 ** 2 + e * e * var
        st = GammaState.from_moments(m_pred, v_pred)
        y = record.increments[i - 1, 0]
        mean, var = _gamma_update(st, y / (c * dt), g / (abs(c) * math.sqrt(dt)))
        st = GammaState.from_moments(mean, var)
        out.append(PosteriorSummary(t=float(record.grid[i]), mean=np.array([mean]), variance=np.array([var]),
                                    method="GAMMA"))
    return out
