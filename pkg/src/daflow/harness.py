"""Experiment runner: scenario configs, the planar-range update study, the
attitude Monte Carlo, timing benchmarks, and CSV emission.

All randomness flows from one master seed; run ``i`` of a Monte Carlo batch
draws from ``default_rng([seed, i])`` so runs are independent and the whole
batch is reproducible byte-for-byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import models
from .filter import (
    FilterConfig,
    FilterState,
    StepTiming,
    baseline_pff_step,
    daruff_step,
)
from .flow import (
    Ensemble,
    FlowError,
    GaussianBelief,
    LambdaSchedule,
    build_flow_map,
    flow_ensemble_ode,
    geometric_schedule,
)
from .integrate import IntegrationError, IntegratorSpec

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "ToyResult",
    "AttitudeRun",
    "MCSummary",
    "TimingTable",
    "run_toy",
    "run_attitude_mc",
    "bench_timing",
    "emit_csv",
]

SCENARIOS = ("toy_range", "attitude")
METHODS = ("da", "ode", "both")
FLOAT_FMT = "%.17g"

# planar toy constants
TOY_PRIOR_MEAN = np.array([-3.5, 0.0])
TOY_PRIOR_COV = np.array([[1.0, 0.5], [0.5, 1.0]])
TOY_MEASUREMENT = 1.0
TOY_NOISE_SIGMA = 0.1


class ConfigError(ValueError):
    """A scenario configuration is malformed or inconsistent."""


@dataclass
class ScenarioConfig:
    """Flat, JSON-compatible description of one experiment."""

    scenario: str = "attitude"
    order: int = 2
    n_particles_per_dim: int = 250
    n_mc: int = 100
    duration: float = 120.0
    dt: float = 0.01
    meas_period: float = 2.0
    lambda_schedule: tuple = (0.001, 1.0, 50)
    integrator: str = "rk4_fixed"
    step_size: float = 0.01
    rel_tol: float = 1e-10
    abs_tol: float = 1e-10
    max_steps: int = 1_000_000
    seed: int = 0
    method: str = "both"
    innovation: str = "nonlinear"
    cov_coupling: str = "mean"

    def __post_init__(self):
        self.lambda_schedule = tuple(self.lambda_schedule)
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.order < 1:
            raise ConfigError("order must be >= 1")
        for name in ("n_particles_per_dim", "n_mc", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("duration", "dt", "meas_period", "step_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if len(self.lambda_schedule) != 3:
            raise ConfigError("lambda_schedule must be (first, last, count)")
        first, last, count = self.lambda_schedule
        if not (0.0 < first < last <= 1.0) or int(count) < 2:
            raise ConfigError("lambda_schedule must satisfy 0 < first < last <= 1, count >= 2")
        if self.integrator not in ("rk4_fixed", "rk78_adaptive"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.innovation not in ("nonlinear", "linearized"):
            raise ConfigError(f"unknown innovation {self.innovation!r}")
        if self.cov_coupling not in ("mean", "particle"):
            raise ConfigError(f"unknown cov_coupling {self.cov_coupling!r}")
        if self.cov_coupling == "particle" and self.innovation == "linearized":
            raise ConfigError("innovation 'linearized' requires cov_coupling 'mean'")
        if self.scenario == "attitude":
            ratio = self.meas_period / self.dt
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError("meas_period must be a multiple of dt")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def toy_defaults(cls, **overrides) -> "ScenarioConfig":
        base = dict(
            scenario="toy_range",
            order=8,
            n_particles_per_dim=500,
            n_mc=1,
            duration=1.0,
            dt=1.0,
            meas_period=1.0,
            integrator="rk78_adaptive",
            step_size=1.0,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def attitude_defaults(cls, **overrides) -> "ScenarioConfig":
        return cls(**overrides)

    def schedule(self) -> LambdaSchedule:
        first, last, count = self.lambda_schedule
        return geometric_schedule(first, last, int(count))

    def dynamics_spec(self) -> IntegratorSpec:
        return IntegratorSpec(self.integrator, step_size=self.step_size,
                              rel_tol=self.rel_tol, abs_tol=self.abs_tol,
                              max_steps=self.max_steps)

    def flow_spec(self) -> IntegratorSpec:
        # one fixed step per pseudo-time segment; adaptive specs adapt inside
        return IntegratorSpec(self.integrator, step_size=1.0,
                              rel_tol=self.rel_tol, abs_tol=self.abs_tol,
                              max_steps=self.max_steps)

    def filter_config(self, particle_postprocess=None, rng=None) -> FilterConfig:
        return FilterConfig(
            order=self.order,
            schedule=self.schedule(),
            dynamics_spec=self.dynamics_spec(),
            flow_spec=self.flow_spec(),
            meas_period=self.meas_period,
            innovation=self.innovation,
            cov_coupling=self.cov_coupling,
            particle_postprocess=particle_postprocess,
            rng=rng,
        )


def _run_seed(master: int, index: int):
    return np.random.default_rng([master, index]), f"{master}:{index}"


# ---------------------------------------------------------------------------
# toy range scenario


@dataclass
class ToyResult:
    """Prior cloud, posterior clouds per method, and their agreement."""

    order: int
    seed_label: str
    prior: np.ndarray
    posterior_da: np.ndarray | None
    posterior_ode: np.ndarray | None
    rms_discrepancy: float | None
    ring_fraction_da: float | None
    ring_fraction_ode: float | None


def _ring_fraction(cloud: np.ndarray, radius: float = 1.0,
                   tol: float = 3.0 * TOY_NOISE_SIGMA) -> float:
    return float(np.mean(np.abs(np.linalg.norm(cloud, axis=1) - radius) < tol))


def run_toy(cfg: ScenarioConfig) -> ToyResult:
    """Flow one range measurement through a sampled planar prior."""
    if cfg.scenario != "toy_range":
        raise ConfigError(f"run_toy needs scenario 'toy_range', got {cfg.scenario!r}")
    rng, seed_label = _run_seed(cfg.seed, 0)
    n = cfg.n_particles_per_dim * 2
    prior_cloud = rng.multivariate_normal(TOY_PRIOR_MEAN, TOY_PRIOR_COV, size=n)
    prior = GaussianBelief(TOY_PRIOR_MEAN, TOY_PRIOR_COV)
    model = models.range_model(TOY_NOISE_SIGMA)
    schedule = cfg.schedule()
    spec = cfg.flow_spec()
    y = [TOY_MEASUREMENT]

    post_da = post_ode = None
    if cfg.method in ("da", "both"):
        fmap = build_flow_map(prior, model, y, schedule, cfg.order, spec,
                              cfg.innovation, cfg.cov_coupling)
        post_da = fmap.evaluate_many(prior_cloud - TOY_PRIOR_MEAN)
    if cfg.method in ("ode", "both"):
        post_ode = flow_ensemble_ode(prior_cloud, prior, model, y, schedule,
                                     spec, cfg.innovation, cfg.cov_coupling)

    rms = None
    if post_da is not None and post_ode is not None:
        rms = float(np.sqrt(np.mean(np.sum((post_da - post_ode) ** 2, axis=1))))
    return ToyResult(
        order=cfg.order,
        seed_label=seed_label,
        prior=prior_cloud,
        posterior_da=post_da,
        posterior_ode=post_ode,
        rms_discrepancy=rms,
        ring_fraction_da=None if post_da is None else _ring_fraction(post_da),
        ring_fraction_ode=None if post_ode is None else _ring_fraction(post_ode),
    )


# ---------------------------------------------------------------------------
# attitude Monte Carlo


@dataclass
class AttitudeRun:
    """Per-epoch filter output of one Monte Carlo run and one method."""

    seed_label: str
    times: np.ndarray
    estimates: np.ndarray
    covariances: np.ndarray
    errors: np.ndarray
    timing: StepTiming


@dataclass
class MCSummary:
    """Aggregated Monte Carlo output for the attitude scenario."""

    times: np.ndarray
    rmse: dict
    coverage: dict
    runs: dict
    run_seeds: list
    failed_runs: list

    def time_averaged_rmse(self, method: str) -> np.ndarray:
        return self.rmse[method].mean(axis=0)


BLOCKS = {"q": slice(0, 4), "omega": slice(4, 7), "bias": slice(7, 10)}


def _attitude_filter_run(method: str, cfg: ScenarioConfig, truth, xhat0, particles):
    fcfg = cfg.filter_config(particle_postprocess=models.normalize_quaternion_block)
    dynamics = models.attitude_dynamics()
    measurement = models.stacked_measurement()
    step = daruff_step if method == "da" else baseline_pff_step
    state = FilterState(0.0, GaussianBelief(xhat0, models.INITIAL_STATE_COV),
                        Ensemble(particles))
    n_epochs = len(truth.times)
    estimates = np.empty((n_epochs, models.STATE_DIM))
    covs = np.empty((n_epochs, models.STATE_DIM, models.STATE_DIM))
    timing = StepTiming()
    for k in range(n_epochs):
        state = step(state, dynamics, measurement, truth.measurements[k], fcfg)
        est = models.normalize_quaternion_block(state.belief.mean)
        estimates[k] = est
        covs[k] = state.belief.cov
        timing.propagate += state.timing.propagate
        timing.flow += state.timing.flow
        timing.evaluate += state.timing.evaluate
    errors = truth.states - estimates
    return estimates, covs, errors, timing


def run_attitude_mc(cfg: ScenarioConfig) -> MCSummary:
    """Monte Carlo attitude estimation: fresh truth, noise, and initial
    ensemble per run; per-epoch block RMSE and 3-sigma coverage per method."""
    if cfg.scenario != "attitude":
        raise ConfigError(f"run_attitude_mc needs scenario 'attitude', got {cfg.scenario!r}")
    methods = ["da", "ode"] if cfg.method == "both" else [cfg.method]
    n_particles = cfg.n_particles_per_dim * models.STATE_DIM

    runs = {m: [] for m in methods}
    run_seeds = []
    failed = []
    times = None
    for i in range(cfg.n_mc):
        rng, seed_label = _run_seed(cfg.seed, i)
        run_seeds.append(seed_label)
        truth = models.simulate_truth(models.DEFAULT_INITIAL_STATE,
                                      models.DEFAULT_PARAMS, cfg.duration,
                                      cfg.dt, cfg.meas_period,
                                      seed=rng.integers(2 ** 32))
        times = truth.times
        xhat0 = models.normalize_quaternion_block(
            truth.initial_state
            + rng.multivariate_normal(np.zeros(models.STATE_DIM), models.INITIAL_STATE_COV)
        )
        particles = xhat0 + rng.multivariate_normal(
            np.zeros(models.STATE_DIM), models.INITIAL_STATE_COV, size=n_particles
        )
        for method in methods:
            try:
                est, covs, errors, timing = _attitude_filter_run(
                    method, cfg, truth, xhat0, particles)
            except (FlowError, IntegrationError) as exc:
                failed.append((i, method, str(exc)))
                continue
            runs[method].append(AttitudeRun(seed_label, truth.times, est, covs,
                                            errors, timing))

    rmse = {}
    coverage = {}
    for method in methods:
        if not runs[method]:
            raise RuntimeError(f"every Monte Carlo run diverged for method {method!r}")
        errs = np.stack([r.errors for r in runs[method]])          # (runs, epochs, 10)
        covs = np.stack([r.covariances for r in runs[method]])
        rmse[method] = np.stack(
            [np.sqrt(np.mean(np.sum(errs[:, :, blk] ** 2, axis=2), axis=0))
             for blk in BLOCKS.values()],
            axis=1,
        )                                                          # (epochs, 3)
        sigma = np.sqrt(np.maximum(np.diagonal(covs, axis1=2, axis2=3), 0.0))
        coverage[method] = np.mean(np.abs(errs) <= 3.0 * sigma, axis=(0, 1))
    return MCSummary(times=times, rmse=rmse, coverage=coverage, runs=runs,
                     run_seeds=run_seeds, failed_runs=failed)


# ---------------------------------------------------------------------------
# timing benchmark


@dataclass
class TimingTable:
    """Median per-step wall clock per (method, ensemble size), plus the
    fitted log-log slope of step time versus particle count per method."""

    rows: list
    slopes: dict
    repetitions: int


def bench_timing(cfg: ScenarioConfig, particle_grid, repetitions: int = 5) -> TimingTable:
    """Time one filter step per method across ensemble sizes.

    ``particle_grid`` is in particles per state dimension.  Each cell runs
    one warm-up step plus ``repetitions`` timed steps from an identical
    state and reports the medians.
    """
    if cfg.method != "both":
        raise ConfigError("bench_timing requires method 'both'")
    rng, _ = _run_seed(cfg.seed, 0)
    truth = models.simulate_truth(models.DEFAULT_INITIAL_STATE,
                                  models.DEFAULT_PARAMS, cfg.meas_period,
                                  cfg.dt, cfg.meas_period,
                                  seed=rng.integers(2 ** 32))
    xhat0 = models.normalize_quaternion_block(
        truth.initial_state
        + rng.multivariate_normal(np.zeros(models.STATE_DIM), models.INITIAL_STATE_COV)
    )
    fcfg = cfg.filter_config(particle_postprocess=models.normalize_quaternion_block)
    dynamics = models.attitude_dynamics()
    measurement = models.stacked_measurement()
    y = truth.measurements[0]

    rows = []
    for per_dim in particle_grid:
        n_particles = int(per_dim) * models.STATE_DIM
        particles = xhat0 + rng.multivariate_normal(
            np.zeros(models.STATE_DIM), models.INITIAL_STATE_COV, size=n_particles
        )
        for method, step in (("da", daruff_step), ("ode", baseline_pff_step)):
            samples = []
            for rep in range(repetitions + 1):
                state = FilterState(0.0, GaussianBelief(xhat0, models.INITIAL_STATE_COV),
                                    Ensemble(particles))
                tic = time.perf_counter()
                out = step(state, dynamics, measurement, y, fcfg)
                elapsed = time.perf_counter() - tic
                if rep > 0:  # discard warm-up
                    samples.append((elapsed, out.timing))
            med = int(np.argsort([s[0] for s in samples])[len(samples) // 2])
            elapsed, timing = samples[med]
            rows.append(dict(method=method, n_per_dim=int(per_dim),
                             n_particles=n_particles, step_seconds=elapsed,
                             propagate=timing.propagate, flow=timing.flow,
                             evaluate=timing.evaluate))

    slopes = {}
    for method in ("da", "ode"):
        pts = [(r["n_particles"], r["step_seconds"]) for r in rows if r["method"] == method]
        logn = np.log([p[0] for p in pts])
        logt = np.log([p[1] for p in pts])
        slopes[method] = float(np.polyfit(logn, logt, 1)[0])
    return TimingTable(rows=rows, slopes=slopes, repetitions=repetitions)


# ---------------------------------------------------------------------------
# CSV emission


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "nan"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FMT % float(value)


def _write_csv(path: Path, header: list, rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def emit_csv(result, out_dir) -> list:
    """Write a result object to its fixed-schema CSV file(s); returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(result, ToyResult):
        return _emit_toy(result, out)
    if isinstance(result, MCSummary):
        return _emit_mc(result, out)
    if isinstance(result, TimingTable):
        return _emit_timing(result, out)
    raise TypeError(f"no CSV schema for {type(result).__name__}")


def _emit_toy(result: ToyResult, out: Path) -> list:
    n = result.prior.shape[0]
    nanpair = np.full((n, 2), np.nan)
    da = result.posterior_da if result.posterior_da is not None else nanpair
    ode = result.posterior_ode if result.posterior_ode is not None else nanpair
    rows = (
        [i, result.prior[i, 0], result.prior[i, 1], da[i, 0], da[i, 1], ode[i, 0], ode[i, 1]]
        for i in range(n)
    )
    particles = _write_csv(
        out / "particles.csv",
        ["particle_id", "x0_prior", "x1_prior", "x0_post_da", "x1_post_da",
         "x0_post_ode", "x1_post_ode"],
        rows,
    )
    summary = _write_csv(
        out / "toy_summary.csv",
        ["order", "seed", "rms_da_vs_ode", "ring_fraction_da", "ring_fraction_ode"],
        [[result.order, result.seed_label, result.rms_discrepancy,
          result.ring_fraction_da, result.ring_fraction_ode]],
    )
    return [particles, summary]


def _emit_mc(summary: MCSummary, out: Path) -> list:
    methods = sorted(summary.rmse)
    header = ["time"] + [f"xi_{blk}_{m}" for m in ("da", "ode") for blk in BLOCKS]
    rows = []
    for k, t in enumerate(summary.times):
        row = [t]
        for m in ("da", "ode"):
            if m in summary.rmse:
                row.extend(summary.rmse[m][k])
            else:
                row.extend([np.nan] * 3)
        rows.append(row)
    rmse_path = _write_csv(out / "rmse.csv", header, rows)

    cov_rows = []
    for m in methods:
        for comp in range(models.STATE_DIM):
            cov_rows.append([m, comp, summary.coverage[m][comp]])
    coverage_path = _write_csv(out / "coverage.csv",
                               ["method", "component", "coverage_3sigma"],
                               cov_rows)
    seeds_path = _write_csv(out / "runs.csv", ["run_index", "seed"],
                            ([i, s] for i, s in enumerate(summary.run_seeds)))
    return [rmse_path, coverage_path, seeds_path]


def _emit_timing(table: TimingTable, out: Path) -> list:
    rows = (
        [r["method"], r["n_per_dim"], r["n_particles"], r["step_seconds"],
         r["propagate"], r["flow"], r["evaluate"]]
        for r in table.rows
    )
    timing_path = _write_csv(
        out / "timing.csv",
        ["method", "n_per_dim", "n_particles", "step_seconds",
         "propagate_seconds", "flow_seconds", "evaluate_seconds"],
        rows,
    )
    slopes_path = _write_csv(out / "slopes.csv", ["method", "loglog_slope"],
                             ([m, s] for m, s in sorted(table.slopes.items())))
    return [timing_path, slopes_path]
