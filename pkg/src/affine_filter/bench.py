"""Configuration-driven experiments: single filter runs, Wishart MSE studies and plot data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .aff import PriorMixture, PosteriorSummary, aff_filter_sequence, unconditional_cir
from .baselines import GammaState, cir_pf, ekf_cir, gamma_adf, wishart_pf
from .core import validate_params
from .models import (CirModel, SignalPath, WishartModel, cir_sample_path, derive_rng, wishart_factor,
                     wishart_sample_path)
from .observation import ObservationModel, ObservationRecord, generate_observations, make_schedule
from .ode import DEFAULT_ATOL, DEFAULT_RTOL
from .vech import vech, vech_size

log = logging.getLogger(__name__)

CIR_METHODS = ("AFF", "PF", "EKF", "GAMMA")
WISHART_METHODS = ("AFF", "PF")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "cir"
    # CIR parameters
    b: float = 1e-6
    beta: float = -0.2
    sigma: float = 0.04
    # Wishart parameters (Sigma = sigma * I unless sigma_matrix is given)
    dim: int = 3
    n: int = 4
    sigma_matrix: Optional[list] = None
    T: float = 1.0
    N: int = 1000
    gamma: float = 0.005
    c: float = 1.0
    x0: object = 0.005
    s0: float = 2e-5
    methods: tuple = CIR_METHODS
    Np: int = 10 ** 5
    M: int = 1
    seed: int = 0
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    scheme: str = "linear"
    prior_nodes: int = 64
    threads: int = 1
    out: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(str(m).upper() for m in self.methods))
        if self.model not in ("cir", "wishart"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        if self.Np < 2:
            raise ConfigError("Np must be at least 2")
        if self.scheme not in ("linear", "cubic-spline"):
            raise ConfigError(f"unknown interpolation scheme {self.scheme!r}")
        allowed = CIR_METHODS if self.model == "cir" else WISHART_METHODS
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ConfigError(f"methods {bad} not available for model {self.model}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data)

    def override(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring the output location and thread count."""
        d = self.to_dict()
        d.pop("out")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def signal_model(self):
        if self.model == "cir":
            m = CirModel(self.b, self.beta, self.sigma)
            validate_params(m.params())
            return m
        S = np.asarray(self.sigma_matrix, dtype=float) if self.sigma_matrix is not None \
            else self.sigma * np.eye(self.dim)
        return WishartModel(self.dim, self.n, S)

    def observation_model(self) -> ObservationModel:
        if self.model == "cir":
            return ObservationModel.scalar(self.gamma, self.c)
        p = vech_size(self.dim)
        return ObservationModel(C=self.c * np.eye(p), Gamma=self.gamma * np.eye(p))

    def initial_matrix(self) -> np.ndarray:
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim == 1:
            x0 = np.diag(x0)
        if x0.shape != (self.dim, self.dim):
            raise ConfigError(f"x0 must be a {self.dim} x {self.dim} matrix or its diagonal")
        return x0

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)


PRESETS = {
    "case1": dict(model="cir", b=1e-6, beta=-0.2, sigma=0.04, gamma=0.005, x0=0.005, s0=2e-5, T=1.0, N=1000),
    "case2": dict(model="cir", b=2e-5, beta=-0.2, sigma=0.04, gamma=1e-4, x0=1e-4, s0=2e-5, T=1.0, N=1000),
    "wishart-mse": dict(model="wishart", dim=3, n=4, sigma=0.04, x0=[0.75 ** 2, 0.5 ** 2, 0.25 ** 2], gamma=0.06,
                        T=1.0, N=100, M=100, Np=10 ** 4, methods=WISHART_METHODS, scheme="cubic-spline"),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return ExperimentConfig.from_dict({**PRESETS[name], **overrides})


@dataclass
class CaseResult:
    config: ExperimentConfig
    signal: SignalPath
    record: ObservationRecord
    summaries: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


@dataclass
class MseTable:
    times: np.ndarray
    errors: dict
    effective_M: dict
    wall_clock: dict

    def __post_init__(self):
        for m, e in self.errors.items():
            if len(e) != len(self.times):
                raise ValueError(f"error curve for {m} has wrong length")

    def median_time(self, method: str) -> float:
        return float(np.median(self.wall_clock[method])) if self.wall_clock[method] else math.nan

    def window_mean(self, method: str, lo: float, hi: float) -> float:
        sel = (self.times >= lo - 1e-12) & (self.times <= hi + 1e-12)
        return float(np.mean(self.errors[method][sel]))


def simulate(cfg: ExperimentConfig, rng: np.random.Generator, seed: Optional[int] = None):
    """One signal path and its observation record."""
    model = cfg.signal_model()
    om = cfg.observation_model()
    if cfg.model == "cir":
        path = cir_sample_path(rng, float(cfg.x0), cfg.s0, cfg.grid, model, seed=seed)
    else:
        z0 = wishart_factor(cfg.initial_matrix(), cfg.n)
        path = wishart_sample_path(rng, z0, cfg.grid, model, seed=seed)
    return path, generate_observations(rng, path, om, scheme=cfg.scheme, seed=seed)


def _prior(cfg: ExperimentConfig) -> PriorMixture:
    if cfg.model == "cir":
        return PriorMixture.clamped_normal(float(cfg.x0), cfg.s0, cfg.prior_nodes)
    return PriorMixture.dirac(vech(cfg.initial_matrix()))


def _run_method(method: str, cfg: ExperimentConfig, record: ObservationRecord, rng: np.random.Generator) -> list:
    model = cfg.signal_model()
    prior = _prior(cfg)
    if cfg.model == "cir":
        x0 = float(cfg.x0)
        sched = make_schedule(record.model, [x0])
        pm = float(prior.mean()[0])
        pv = float(prior.weights @ (prior.atoms[:, 0] - pm) ** 2)
        if method == "AFF":
            return aff_filter_sequence(model, record, sched, prior, rtol=cfg.rtol, atol=cfg.atol)
        if method == "PF":
            return cir_pf(rng, model, record, cfg.Np, x0, cfg.s0)
        if method == "EKF":
            return ekf_cir(record, model, pm, pv)
        return gamma_adf(record, model, GammaState.from_moments(pm, pv))
    x0 = cfg.initial_matrix()
    sched = make_schedule(record.model, vech(x0))
    if method == "AFF":
        return aff_filter_sequence(model, record, sched, prior, rtol=cfg.rtol, atol=cfg.atol)
    return wishart_pf(rng, model, record, cfg.Np, wishart_factor(x0, cfg.n))


def run_filter_case(cfg: ExperimentConfig, out_dir=None) -> CaseResult:
    """Simulate one signal/observation pair and run every requested filter on it.

    Stream ``(seed, 0)`` drives the data; method ``k`` owns stream ``(seed, 1, k)``.
    A method that raises is recorded in ``failures`` and the others still run.
    """
    path, record = simulate(cfg, derive_rng(cfg.seed, 0), seed=cfg.seed)
    res = CaseResult(config=cfg, signal=path, record=record)
    for k, method in enumerate(cfg.methods):
        t0 = time.perf_counter()
        try:
            res.summaries[method] = _run_method(method, cfg, record, derive_rng(cfg.seed, 1, k))
        except Exception as exc:  # recorded per method, see failures
            log.warning("method %s failed: %s", method, exc)
            res.failures[method] = f"{type(exc).__name__}: {exc}"
        res.timings[method] = time.perf_counter() - t0
    if out_dir is not None:
        write_case_csv(res, Path(out_dir) / "filter.csv")
    return res


def _fmt(x) -> str:
    return repr(float(x))


def write_case_csv(res: CaseResult, path) -> None:
    cfg = res.config
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    truth = res.signal.flat_states()
    width = truth.shape[1]
    suffix = [""] if width == 1 else [str(k) for k in range(width)]
    header = ["t"] + [f"X_true{s}" for s in suffix]
    prior = _prior(cfg)
    pm = prior.mean()
    pv = prior.weights @ (prior.atoms - pm) ** 2
    cols = []
    for method in cfg.methods:
        if method in res.summaries:
            header += [f"{method}_mean{s}" for s in suffix] + [f"{method}_var{s}" for s in suffix]
            cols.append(res.summaries[method])
    uncond = None
    if cfg.model == "cir":
        uncond = unconditional_cir(cfg.signal_model(), _prior(cfg), res.signal.grid)
        header += ["uncond_mean", "uncond_var"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(res.signal.grid):
            row = [_fmt(t)] + [_fmt(v) for v in truth[i]]
            for summaries in cols:
                mean, var = (pm, pv) if i == 0 else _summary_at(summaries, i, width)
                row += [_fmt(v) for v in mean] + [_fmt(v) for v in var]
            if uncond is not None:
                row += [_fmt(uncond[i].mean[0]), _fmt(uncond[i].variance[0])]
            w.writerow(row)


def _summary_at(summaries: list, i: int, width: int):
    """Mean/variance row for grid index ``i >= 1``."""
    s = summaries[i - 1]
    mean = np.asarray(s.mean, dtype=float)
    mean = vech(mean) if mean.ndim == 2 else np.atleast_1d(mean)
    if s.variance is None:
        var = np.full(width, math.nan)
    else:
        var = np.asarray(s.variance, dtype=float)
        var = np.diag(var) if var.ndim == 2 else np.atleast_1d(var)
    return mean, var


def _replication(cfg: ExperimentConfig, j: int):
    """Squared trace-norm errors and wall-clock for replication ``j``."""
    path, record = simulate(cfg, derive_rng(cfg.seed, j, 0), seed=None)
    x0 = cfg.initial_matrix()
    out = {}
    for k, method in enumerate(cfg.methods):
        t0 = time.perf_counter()
        try:
            summaries = _run_method(method, cfg, record, derive_rng(cfg.seed, j, 1, k))
        except Exception as exc:
            log.warning("replication %d, method %s failed: %s", j, method, exc)
            out[method] = None
            continue
        elapsed = time.perf_counter() - t0
        if not all(s.available for s in summaries):
            out[method] = None
            continue
        est = np.array([x0] + [np.asarray(s.mean) for s in summaries])
        out[method] = (np.sum((path.states - est) ** 2, axis=(1, 2)), elapsed)
    return out


def run_mse_experiment(cfg: ExperimentConfig, out_dir=None) -> MseTable:
    """Average squared trace-norm error over ``cfg.M`` replications of the Wishart model.

    Replication ``j`` uses streams derived from ``(seed, j)``; a failed
    replication is dropped for that method and ``effective_M`` counts the rest.
    """
    if cfg.model != "wishart":
        raise ConfigError("the MSE experiment needs the wishart model")
    jobs = range(cfg.M)
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            reps = list(ex.map(_replication, [cfg] * cfg.M, jobs))
    else:
        reps = [_replication(cfg, j) for j in jobs]
    errors, eff, clock = {}, {}, {}
    for method in cfg.methods:
        ok = [r[method] for r in reps if r[method] is not None]
        eff[method] = len(ok)
        errors[method] = np.mean([e for e, _ in ok], axis=0) if ok else np.full(cfg.N + 1, math.nan)
        clock[method] = [t for _, t in ok]
    table = MseTable(times=cfg.grid, errors=errors, effective_M=eff, wall_clock=clock)
    if out_dir is not None:
        write_mse(table, Path(out_dir))
    return table


def write_mse(table: MseTable, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = list(table.errors)
    with open(out_dir / "mse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"e_{m}" for m in methods])
        for i, t in enumerate(table.times):
            w.writerow([_fmt(t)] + [_fmt(table.errors[m][i]) for m in methods])
    timing = {m: {"effective_M": table.effective_M[m], "median_seconds": table.median_time(m),
                  "seconds": table.wall_clock[m]} for m in methods}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"affine_filter": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def emit_plotdata(results, out_dir, cfg: Optional[ExperimentConfig] = None) -> list:
    """Write plot CSVs for ``results`` plus ``manifest.json``; returns the written paths.

    ``results`` is a :class:`CaseResult`, a :class:`MseTable` or ``None``.
    Only deterministic content is written (no timings), so the same config
    and seed reproduce the bundle byte for byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(results, CaseResult):
        cfg = cfg or results.config
        grid = results.signal.grid
        for method, summaries in sorted(results.summaries.items()):
            p = out_dir / f"plot_{method.lower()}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "xhat", "band_lo", "band_hi"])
                for s in summaries:
                    if not s.available:
                        continue
                    m = float(np.ravel(s.mean)[0])
                    sd = math.sqrt(float(np.ravel(s.variance)[0])) if s.variance is not None else math.nan
                    w.writerow([_fmt(s.t), _fmt(m), _fmt(m - sd), _fmt(m + sd)])
            written.append(p)
        p = out_dir / "plot_truth.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x"])
            for t, x in zip(grid, results.signal.flat_states()[:, 0]):
                w.writerow([_fmt(t), _fmt(x)])
        written.append(p)
    elif isinstance(results, MseTable):
        p = out_dir / "plot_mse.csv"
        methods = list(results.errors)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"e_{m}" for m in methods])
            for i, t in enumerate(results.times):
                w.writerow([_fmt(t)] + [_fmt(results.errors[m][i]) for m in methods])
        written.append(p)
    manifest = {
        "config_hash": cfg.digest() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "files": [p.name for p in written],
        "versions": _versions(),
    }
    if isinstance(results, CaseResult):
        manifest["failures"] = dict(sorted(results.failures.items()))
    if isinstance(results, MseTable):
        manifest["effective_M"] = dict(sorted(results.effective_M.items()))
    mp = out_dir / "manifest.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(mp)
    return written
