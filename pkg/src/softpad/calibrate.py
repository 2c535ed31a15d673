"""Fit material parameters to measured force-time curves over the whole trajectory."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .droptest import DropConfig, DropResult, ForceTrace, run_drop
from .errors import CalibrationInfeasible, ConfigError, SoftpadError
from .material import MaterialParams, format_material

log = logging.getLogger(__name__)

FIT_PARAMS = ("young_modulus", "damping", "rate_gain", "rate_exponent")
ALIASES = {"E0": "young_modulus", "beta": "damping", "k": "rate_gain", "p": "rate_exponent"}
LOG_SCALED = {"young_modulus", "rate_gain"}
PENALTY = 1e6
ALIGN_FRACTION = 0.02
SIM_MARGIN = 2e-3

DEFAULT_BOUNDS = {
    "young_modulus": (1e5, 1e7),
    "damping": (1e-4, 1e-2),
    "rate_gain": (0.1, 50.0),
    "rate_exponent": (0.2, 1.5),
}


def canonical(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in FIT_PARAMS:
        raise ConfigError(f"{name!r} is not a fittable parameter (choose from {FIT_PARAMS})", field="free_params")
    return name


@dataclass
class CalibrationProblem:
    observed: list[tuple[DropConfig, ForceTrace]]
    free_params: tuple[str, ...] = FIT_PARAMS
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    weights: list[float] | None = None
    base: MaterialParams = field(default_factory=MaterialParams)

    def __post_init__(self):
        if not self.observed:
            raise ConfigError("calibration needs at least one observation", field="observed")
        self.free_params = tuple(canonical(p) for p in self.free_params)
        if len(set(self.free_params)) != len(self.free_params):
            raise ConfigError("duplicate free parameter", field="free_params")
        bounds = {}
        for name in self.free_params:
            lo, hi = self.bounds.get(name, self.bounds.get(_alias_of(name), DEFAULT_BOUNDS[name]))
            lo, hi = float(lo), float(hi)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ConfigError(f"bounds for {name} must be finite with lo < hi", field=name)
            if name in LOG_SCALED and lo <= 0:
                raise ConfigError(f"{name} is fitted in log space; lower bound must be > 0", field=name)
            bounds[name] = (lo, hi)
        self.bounds = bounds
        if self.weights is None:
            self.weights = [1.0] * len(self.observed)
        if len(self.weights) != len(self.observed):
            raise ConfigError("one weight per observed trace", field="weights")

    @property
    def dim(self) -> int:
        return len(self.free_params)

    def to_unit(self, params: MaterialParams) -> np.ndarray:
        u = []
        for name in self.free_params:
            lo, hi = self.bounds[name]
            v = getattr(params, name)
            if name in LOG_SCALED:
                u.append((math.log(v) - math.log(lo)) / (math.log(hi) - math.log(lo)))
            else:
                u.append((v - lo) / (hi - lo))
        return np.array(u)

    def from_unit(self, u) -> MaterialParams:
        values = {}
        for name, x in zip(self.free_params, np.clip(np.asarray(u, dtype=float), 0.0, 1.0)):
            lo, hi = self.bounds[name]
            if name in LOG_SCALED:
                values[name] = math.exp(math.log(lo) + x * (math.log(hi) - math.log(lo)))
            else:
                values[name] = lo + x * (hi - lo)
        return replace(self.base, **values)


def _alias_of(name: str) -> str:
    return next((k for k, v in ALIASES.items() if v == name), name)


def onset_time(trace: ForceTrace, fraction: float = ALIGN_FRACTION) -> float:
    """Time where the trace first reaches ``fraction`` of its peak, linearly interpolated between samples."""
    f = trace.samples
    peak = f.max()
    if peak <= 0:
        return float(trace.t0)
    level = fraction * peak
    i = int(np.argmax(f >= level))
    t = trace.times
    if i == 0:
        return float(t[0])
    f0, f1 = f[i - 1], f[i]
    return float(t[i - 1] + (level - f0) / (f1 - f0) * (t[i] - t[i - 1]))


def aligned_misfit(sim: ForceTrace, obs: ForceTrace) -> float:
    """||F_sim - F_obs||^2 / ||F_obs||^2 after aligning onsets, on the observation's samples."""
    t_obs = obs.times - onset_time(obs)
    t_sim = sim.times - onset_time(sim)
    f_sim = np.interp(t_obs, t_sim, sim.samples, left=0.0, right=0.0)
    denom = float(np.dot(obs.samples, obs.samples))
    if denom <= 0:
        raise ConfigError("observed trace is identically zero")
    diff = f_sim - obs.samples
    return float(np.dot(diff, diff)) / denom


def simulate(params: MaterialParams, config: DropConfig) -> DropResult:
    return run_drop(replace(config, material=params))


def trace_residuals(params: MaterialParams, problem: CalibrationProblem) -> list[float]:
    out = []
    for (config, obs) in problem.observed:
        # runs that outlast the observed window cannot change the misfit
        window = obs.t0 + len(obs) / obs.sample_rate + SIM_MARGIN
        res = simulate(params, replace(config, max_time=min(config.max_time, window)))
        out.append(aligned_misfit(res.trace, obs))
    return out


def objective(params: MaterialParams, problem: CalibrationProblem) -> float:
    """Weighted sum of normalised squared trace misfits; simulation failure costs ``PENALTY``."""
    try:
        res = trace_residuals(params, problem)
    except (SoftpadError, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        log.info("simulation failed for %s: %s", params, exc)
        return PENALTY
    total = sum(w * r for w, r in zip(problem.weights, res))
    return float(total) if math.isfinite(total) else PENALTY


@dataclass
class CalibrationResult:
    params: MaterialParams
    residual: float
    per_trace: list[float]
    iterations: int
    evaluations: int
    converged: bool
    restarts_used: int
    at_bound: tuple[str, ...] = ()
    history: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class _RunOutcome:
    index: int
    u: np.ndarray
    value: float
    iterations: int
    evaluations: int
    converged: bool


class _Memo:
    def __init__(self, problem: CalibrationProblem):
        self.problem = problem
        self.cache: dict[tuple, float] = {}

    def __call__(self, u) -> float:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        key = tuple(np.round(u, 12))
        if key not in self.cache:
            self.cache[key] = objective(self.problem.from_unit(u), self.problem)
        return self.cache[key]


def _simplex(u0: np.ndarray, size: float) -> np.ndarray:
    d = len(u0)
    pts = [u0.copy()]
    for i in range(d):
        p = u0.copy()
        # step inward so every vertex stays inside the unit box
        p[i] = p[i] + size if p[i] + size <= 1.0 else p[i] - size
        pts.append(p)
    return np.array(pts)


def _nelder_mead(problem, index, u0, xatol, fatol, max_evals, simplex_size) -> _RunOutcome:
    f = _Memo(problem)
    res = minimize(
        f,
        u0,
        method="Nelder-Mead",
        bounds=[(0.0, 1.0)] * problem.dim,
        options={
            "initial_simplex": _simplex(u0, simplex_size),
            "xatol": xatol,
            "fatol": fatol,
            "maxfev": max_evals,
            "adaptive": problem.dim > 2,
        },
    )
    sim = res.final_simplex
    size = float(np.max(np.abs(sim[0] - sim[0][0]))) if len(sim[0]) > 1 else 0.0
    spread = float(np.max(sim[1]) - np.min(sim[1]))
    ok = size <= xatol * 1.0001 and spread <= fatol * 1.0001
    return _RunOutcome(index, np.clip(res.x, 0, 1), float(res.fun), int(res.nit), len(f.cache), ok)


def _run_start(args):
    return _nelder_mead(*args)


def fit(
    problem: CalibrationProblem,
    restarts: int = 4,
    seed: int = 0,
    *,
    screen: int | None = None,
    xatol: float = 1e-3,
    fatol: float = 1e-9,
    max_evals: int = 400,
    simplex_size: float = 0.1,
    jobs: int = 1,
) -> CalibrationResult:
    """Bounded Nelder-Mead from quasi-random starts.

    A scrambled Sobol design of ``screen`` points (default ``4 * restarts``)
    is evaluated first and the ``restarts`` best points seed independent
    simplex searches.  The best run wins; ties go to the lower start index.
    """
    if restarts < 1:
        raise ConfigError("restarts must be >= 1", field="restarts")
    n_screen = max(restarts, screen if screen is not None else 4 * restarts)
    sampler = qmc.Sobol(d=problem.dim, scramble=True, seed=seed)
    m = int(math.ceil(math.log2(n_screen)))
    design = sampler.random_base2(m)[:n_screen]
    memo = _Memo(problem)
    scores = np.array([memo(u) for u in design])
    order = np.argsort(scores, kind="stable")[:restarts]
    starts = [design[i] for i in order]
    if np.all(scores >= PENALTY):
        log.warning("every screening point failed to simulate")

    tasks = [(problem, i, u0, xatol, fatol, max_evals, simplex_size) for i, u0 in enumerate(starts)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_start, tasks))
    else:
        outcomes = [_run_start(t) for t in tasks]
    outcomes.sort(key=lambda o: (o.value, o.index))
    best = outcomes[0]
    if best.value >= PENALTY:
        raise CalibrationInfeasible("every calibration start failed to simulate")
    params = problem.from_unit(best.u)
    at_bound = tuple(
        name for name, x in zip(problem.free_params, best.u) if x <= 1e-6 or x >= 1 - 1e-6
    )
    per_trace = trace_residuals(params, problem)
    return CalibrationResult(
        params=params,
        residual=best.value,
        per_trace=per_trace,
        iterations=sum(o.iterations for o in outcomes),
        evaluations=len(design) + sum(o.evaluations for o in outcomes),
        converged=best.converged and not at_bound,
        restarts_used=len(outcomes),
        at_bound=at_bound,
        history=[(o.index, o.value) for o in sorted(outcomes, key=lambda o: o.index)],
    )


def predict_holdout(params: MaterialParams, config: DropConfig) -> DropResult:
    return simulate(params, config)


def add_noise(trace: ForceTrace, level: float, seed: int) -> ForceTrace:
    """Multiplicative Gaussian noise: each sample times (1 + level * N(0, 1))."""
    rng = np.random.default_rng(seed)
    noisy = trace.samples * (1.0 + level * rng.standard_normal(len(trace.samples)))
    return ForceTrace(trace.sample_rate, noisy, trace.t0)


def format_report(result: CalibrationResult) -> str:
    extra = (
        f"# residual={float(result.residual)!r}\n"
        f"# converged={str(result.converged).lower()}\n"
        f"# evaluations={result.evaluations}\n"
        f"# restarts_used={result.restarts_used}\n"
    )
    if result.at_bound:
        extra += f"# at_bound={','.join(result.at_bound)}\n"
    return extra + format_material(result.params)


def format_residuals(result: CalibrationResult, labels=None) -> str:
    labels = labels or [str(i) for i in range(len(result.per_trace))]
    rows = ["trace,residual"] + [f"{lab},{float(r)!r}" for lab, r in zip(labels, result.per_trace)]
    return "\n".join(rows) + "\n"


def save_report(result: CalibrationResult, material_path, residual_path=None, labels=None) -> None:
    Path(material_path).write_text(format_report(result))
    if residual_path is not None:
        Path(residual_path).write_text(format_residuals(result, labels))


def reference_configs(
    thickness: float = 0.012,
    velocities=(1.0, 2.0, 4.0),
    material: MaterialParams | None = None,
    payload_mass: float = 1.0,
    footprint: float = 0.012,
    resolution: float = 0.006,
) -> list[DropConfig]:
    """Small flat-impactor drops at several speeds.

    Several impact speeds spread the strain rates so that stiffness, damping
    and the rate law separate; the footprint is kept small so each forward
    run costs a fraction of a second.
    """
    from .mesh import SlabSpec
    from .solver import BOX, Collider

    material = material or MaterialParams()
    box = Collider(BOX, half_extents=(footprint, footprint, 0.005), friction=0.0)
    return [
        DropConfig(
            payload_mass=payload_mass,
            drop_height=None,
            impact_velocity=float(v),
            impactor=box,
            slab=SlabSpec(footprint, footprint, thickness, min(resolution, thickness)),
            material=material,
            spawn_gap=0.0,
            max_time=0.1,
            ground_friction=1.0,
        )
        for v in velocities
    ]


def synthetic_problem(
    truth: MaterialParams,
    configs: list[DropConfig],
    free_params=FIT_PARAMS,
    noise: float = 0.0,
    seed: int = 0,
    bounds=None,
) -> CalibrationProblem:
    observed = []
    for i, cfg in enumerate(configs):
        trace = simulate(truth, cfg).trace
        if noise > 0:
            trace = add_noise(trace, noise, seed + i)
        observed.append((cfg, trace))
    base = replace(truth, **{canonical(p): getattr(MaterialParams(), canonical(p)) for p in free_params})
    return CalibrationProblem(observed, tuple(free_params), dict(bounds or {}), None, base)
