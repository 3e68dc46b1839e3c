import math
import warnings

import numpy as np
import pytest

from affine_filter.aff import (PosteriorSummary, PriorMixture, TruncationWarning, aff_cf, aff_filter_sequence,
                               aff_mean, aff_mean_wishart, aff_moments_cir, fourier_invert,
                               smoother_ensemble_cir, solve_filter_riccati, unconditional_cir, write_summaries)
from affine_filter.models import CirModel, WishartModel, cir_moments, derive_rng
from affine_filter.observation import LinearizationSchedule, ObservationModel, ObservationRecord, make_schedule
from affine_filter.ode import BlowUp
from affine_filter.vech import mat, vech

from conftest import X0

X0_WISHART = np.diag([0.75 ** 2, 0.5 ** 2, 0.25 ** 2])


def silent_record(N=10, T=1.0, p=1, gamma=1.0):
    om = ObservationModel(C=np.eye(p), Gamma=gamma * np.eye(p))
    return ObservationRecord(grid=np.linspace(0, T, N + 1), increments=np.zeros((N, p)), model=om)


def drift_record(u, T, N, beta=0.2, sigma=0.04):
    """Record whose drive path is ``y_s = u s`` (unit C and Gamma)."""
    om = ObservationModel.scalar(1.0)
    grid = np.linspace(0, T, N + 1)
    return ObservationRecord(grid=grid, increments=np.full(N, u * T / N), model=om)


def explosion_horizon(u, beta, sigma):
    g = math.sqrt(beta ** 2 - 2 * sigma ** 2 * u)
    return 2 / g * math.atanh(g / beta)


def test_prior_mixture():
    p = PriorMixture.clamped_normal(X0, 2e-5)
    assert abs(p.weights.sum() - 1) < 1e-12
    assert abs(p.mean()[0] - X0) < 1e-12
    q = PriorMixture.clamped_normal(0.0, 1.0)
    assert q.atoms.min() == 0.0
    assert abs(q.mean()[0] - 1 / math.sqrt(2 * math.pi)) < 1e-12
    assert PriorMixture.clamped_normal(X0, 0.0).atoms.shape == (1, 1)
    with pytest.raises(ValueError):
        PriorMixture(atoms=[1.0, 2.0], weights=[0.5, 0.6])


def test_zero_inputs_give_zero_solution(cir):
    rec = silent_record()
    sol = solve_filter_riccati(cir, rec, LinearizationSchedule.zero(1), 1.0, np.zeros(1))
    assert sol.phi == 0 and sol.psi[0] == 0


def test_zero_inputs_reduce_to_homogeneous(cir):
    rec = silent_record(N=5, T=1.0)
    u = np.linspace(-50, 0, 7)[:, None]
    sol = solve_filter_riccati(cir, rec, LinearizationSchedule.zero(1), 1.0, u)
    e = math.exp(-0.2)
    exact = u[:, 0] * e / (1 - u[:, 0] * 0.0016 * (e - 1) / -0.4)
    np.testing.assert_allclose(sol.psi[:, 0], exact, rtol=1e-9, atol=1e-15)


def test_linear_drive_blows_up_past_horizon():
    cir = CirModel(1e-6, 0.2, 0.04)
    u = 10.0
    T0 = explosion_horizon(u, 0.2, 0.04)
    T = 1.1 * T0
    g = math.sqrt(0.04 - 2 * 0.0016 * u)
    assert math.tanh(g * T / 2) >= g / 0.2
    rec = drift_record(u, T, 200)
    with pytest.raises(BlowUp):
        solve_filter_riccati(cir, rec, LinearizationSchedule.zero(1), T, np.zeros(1))
    half = drift_record(u, T / 2, 100)
    sol = solve_filter_riccati(cir, half, LinearizationSchedule.zero(1), T / 2, np.zeros(1))
    assert np.isfinite(sol.psi[0])


def test_cf_normalization_and_symmetry(cir, case1):
    _, rec, sched, prior = case1
    vs = np.array([[0.0], [5.0], [-5.0], [300.0], [-300.0]])
    cf = aff_cf(cir, rec, sched, prior, 0.2, vs)
    assert cf[0] == 1.0
    assert abs(cf[1] - np.conj(cf[2])) < 1e-12
    assert abs(cf[3] - np.conj(cf[4])) < 1e-12
    assert np.all(np.abs(cf) <= 1 + 1e-12)


def test_no_observations_gives_prior_moments(cir):
    rec = silent_record(N=20, T=1.0, gamma=0.005)
    sched = LinearizationSchedule.zero(1)
    out = aff_moments_cir(cir, rec, sched, 1.0, PriorMixture.dirac([X0]))
    m, v = cir_moments(X0, 1.0, cir)
    assert abs(out.mean[0] - m) < 1e-10 * m
    assert abs(out.variance[0] - v) < 1e-8 * v


def test_mean_matches_cf_derivative(cir, case1):
    _, rec, sched, prior = case1
    T, h = 1e-3, 1e-4
    cf = aff_cf(cir, rec, sched, prior, T, np.array([[h], [-h]]))
    fd = (np.log(cf[0]).imag - np.log(cf[1]).imag) / (2 * h)
    mean = aff_moments_cir(cir, rec, sched, T, prior).mean[0]
    assert abs(mean - fd) < 1e-6 * X0


def test_sequence_single_step(cir, case1):
    _, rec, sched, prior = case1
    short = rec.truncated(1)
    seq = aff_filter_sequence(cir, short, sched, prior)
    one = aff_moments_cir(cir, short, sched, short.grid[1], prior)
    assert len(seq) == 1
    assert abs(seq[0].mean[0] - one.mean[0]) < 1e-12
    assert abs(seq[0].variance[0] - one.variance[0]) < 1e-14


def test_batch_equals_loop(cir, case1):
    _, rec, sched, prior = case1
    short = rec.truncated(60)
    a = aff_filter_sequence(cir, short, sched, prior, method="batch")
    b = aff_filter_sequence(cir, short, sched, prior, method="loop")
    for x, y in zip(a, b):
        assert abs(x.mean[0] - y.mean[0]) < 1e-10 * X0
        assert abs(x.variance[0] - y.variance[0]) < 1e-8 * y.variance[0] + 1e-18


def test_sequence_invariant_under_refinement(cir, case1):
    _, rec, sched, prior = case1
    short = rec.truncated(200)
    a = aff_filter_sequence(cir, short, sched, prior)
    b = aff_filter_sequence(cir, short, sched, prior, rtol=1e-11, atol=1e-14)
    assert max(abs(x.mean[0] - y.mean[0]) for x, y in zip(a, b)) < 1e-8


def test_sequence_marks_tail_after_blowup():
    cir = CirModel(1e-6, 0.2, 0.04)
    u = 10.0
    T0 = explosion_horizon(u, 0.2, 0.04)
    N = 12
    rec = drift_record(u, 12.0, N)
    for method in ("batch", "loop"):
        seq = aff_filter_sequence(cir, rec, LinearizationSchedule.zero(1), PriorMixture.dirac([0.01]),
                                  method=method)
        assert len(seq) == N
        for s in seq:
            assert s.available == (s.t < T0)


def test_unconditional(cir):
    prior = PriorMixture.dirac([X0])
    out = unconditional_cir(cir, prior, [0.0, 0.5, 1.0])
    assert out[0].mean[0] == pytest.approx(X0)
    assert out[2].mean[0] == pytest.approx(cir_moments(X0, 1.0, cir)[0])


def test_wishart_without_observations():
    wm = WishartModel(3, 4, 0.04 * np.eye(3))
    rec = silent_record(N=10, T=1.0, p=6, gamma=0.06)
    out = aff_mean_wishart(wm, rec, LinearizationSchedule.zero(6), 1.0, X0_WISHART)
    np.testing.assert_allclose(out.mean, X0_WISHART + 4 * wm.Sigma2, atol=1e-12)


def test_wishart_symmetric_and_matches_generic_route():
    wm = WishartModel(3, 4, 0.04 * np.eye(3))
    om = ObservationModel(C=np.eye(6), Gamma=0.06 * np.eye(6))
    rng = derive_rng(1)
    rec = ObservationRecord(grid=np.linspace(0, 1, 21), increments=rng.normal(0, 0.01, (20, 6)) + 0.02, model=om,
                            scheme="cubic-spline")
    sched = make_schedule(om, vech(X0_WISHART))
    X = aff_mean_wishart(wm, rec, sched, 1.0, X0_WISHART).mean
    assert np.abs(X - X.T).max() < 1e-10
    g = aff_mean(wm.to_affine(), rec, sched, 1.0, PriorMixture.dirac(vech(X0_WISHART))).mean
    np.testing.assert_allclose(mat(g), X, atol=1e-9)
    seq = aff_filter_sequence(wm, rec, sched)
    np.testing.assert_allclose(seq[-1].mean, X, atol=1e-9)


def test_fourier_standard_normal():
    x = np.linspace(-4, 4, 33)
    dens, tail = fourier_invert(lambda v: np.exp(-v ** 2 / 2), 12.0, 2 ** 12, x)
    np.testing.assert_allclose(dens, np.exp(-x ** 2 / 2) / math.sqrt(2 * math.pi), atol=1e-6)
    assert tail < 1e-4


def test_fourier_truncation_warning():
    with pytest.warns(TruncationWarning):
        fourier_invert(lambda v: np.exp(-np.abs(v)), 2.0, 64, np.zeros(1))
    with pytest.raises(ValueError):
        fourier_invert(lambda v: v, 1.0, 3, np.zeros(1))


def test_smoother_without_tilt_is_prior_law(cir):
    rec = silent_record(N=10, T=0.5, gamma=0.005)
    ens = smoother_ensemble_cir(derive_rng(2), cir, X0, rec, LinearizationSchedule.zero(1), 0.5, 500, 20000)
    m, v = cir_moments(X0, 0.5, cir)
    assert abs(ens[-1].mean() - m) < 3 * ens[-1].std() / math.sqrt(20000) + 1e-7
    assert np.all(ens >= 0)


def test_write_summaries(tmp_path):
    rows = [PosteriorSummary(t=0.1, mean=np.array([1.0]), variance=np.array([0.5]), method="AFF"),
            PosteriorSummary.unavailable(0.2, (1,), "AFF"),
            PosteriorSummary(t=0.1, mean=np.eye(2), variance=None, method="PF")]
    write_summaries(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,mean0,mean1,mean2,var0,method"
    assert len(lines) == 4
    with pytest.raises(ValueError):
        PosteriorSummary(t=0.0, mean=np.zeros(1), variance=None, method="UKF")
