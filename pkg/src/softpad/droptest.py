"""Drop-weight impact scenario: payload onto a pad lying on a rigid force plate."""

from __future__ import annotations

import hashlib
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, SolverAbort
from .material import MaterialParams
from .mesh import SENSOR_FACE, SlabSpec, generate_slab, validate
from .pressure import PressureField, rasterize_pressures, tributary_areas
from .solver import BALLISTIC, BOX, HALF_SPACE, SPHERE, Collider, Solver, SolverConfig

log = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.81
DURATION_FRACTION = 0.10
SETTLE_FRACTION = 0.01
SETTLE_TIME = 5e-3


def impact_velocity(height: float, g: float = STANDARD_GRAVITY) -> float:
    if height < 0:
        raise DomainError(f"drop height must be >= 0, got {height}")
    return math.sqrt(2.0 * g * height)


def default_impactor() -> Collider:
    return Collider(SPHERE, radius=0.025, friction=0.0)


@dataclass(frozen=True)
class DropConfig:
    payload_mass: float = 5.0
    drop_height: float | None = 1.0
    impact_velocity: float | None = None
    impactor: Collider = field(default_factory=default_impactor)
    slab: SlabSpec = field(default_factory=lambda: SlabSpec(0.1, 0.1, 0.012, 0.004))
    material: MaterialParams = field(default_factory=MaterialParams)
    sample_rate: float = 25_000.0
    sim: SolverConfig = field(default_factory=SolverConfig)
    spawn_gap: float = 1e-3
    max_time: float = 0.05
    ground_friction: float = 0.8
    grid_spacing: float = 1e-3

    def __post_init__(self):
        if not self.payload_mass > 0:
            raise ConfigError("payload_mass must be > 0", field="payload_mass")
        h, v = self.drop_height, self.impact_velocity
        if (h is not None and h > 0) == (v is not None and v > 0):
            raise ConfigError("give exactly one of drop_height > 0 or impact_velocity > 0", field="drop_height")
        if not self.sample_rate > 0:
            raise ConfigError("sample_rate must be > 0", field="sample_rate")
        if self.spawn_gap < 0:
            raise ConfigError("spawn_gap must be >= 0", field="spawn_gap")
        if not self.max_time > 0:
            raise ConfigError("max_time must be > 0", field="max_time")
        if self.impactor.kind not in (SPHERE, BOX):
            raise ConfigError("impactor must be a sphere or a box", field="impactor")

    @property
    def gravity(self) -> float:
        return -float(self.sim.gravity[2])

    @property
    def velocity(self) -> float:
        if self.impact_velocity is not None and self.impact_velocity > 0:
            return float(self.impact_velocity)
        return impact_velocity(self.drop_height, self.gravity)

    def as_dict(self) -> dict:
        imp = self.impactor
        out = {
            "payload_mass": self.payload_mass,
            "drop_height": self.drop_height if self.drop_height is not None else 0.0,
            "impact_velocity": self.velocity,
            "impactor_kind": imp.kind,
            "impactor_radius": imp.radius,
            "impactor_half_extents": ",".join(repr(v) for v in imp.half_extents),
            "impactor_friction": imp.friction,
            "slab_length_x": self.slab.length_x,
            "slab_length_y": self.slab.length_y,
            "slab_thickness": self.slab.thickness,
            "slab_resolution": self.slab.resolution,
            "sample_rate": self.sample_rate,
            "spawn_gap": self.spawn_gap,
            "max_time": self.max_time,
            "ground_friction": self.ground_friction,
            "grid_spacing": self.grid_spacing,
        }
        out.update({k: v for k, v in self.material.as_dict().items()})
        sim = self.sim
        out.update(
            dt=sim.dt,
            local_global_iters=sim.local_global_iters,
            linear_iters=sim.linear_iters,
            contact_tol=sim.contact_tol,
            gravity=",".join(repr(v) for v in sim.gravity),
            seed=sim.seed,
        )
        return out

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.as_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_thickness(self, thickness: float) -> "DropConfig":
        return replace(self, slab=replace(self.slab, thickness=thickness))


@dataclass
class ForceTrace:
    sample_rate: float
    samples: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.sample_rate > 0:
            raise ConfigError("sample_rate must be > 0", field="sample_rate")
        if self.samples.ndim != 1 or len(self.samples) == 0:
            raise ConfigError("force trace must be a non-empty 1-D series", field="samples")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("force trace contains non-finite samples")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def resample(times, values, sample_rate: float, t_end: float | None = None) -> ForceTrace:
    times = np.asarray(times, dtype=float)
    t_end = times[-1] if t_end is None else t_end
    n = int(math.floor(t_end * sample_rate + 1e-9)) + 1
    grid = times[0] + np.arange(n) / sample_rate
    return ForceTrace(sample_rate, np.interp(grid, times, values), float(times[0]))


def impulse_metrics(trace: ForceTrace) -> tuple[float, float, float]:
    """Peak force, time above 10% of peak, and second-peak / peak ratio."""
    f = trace.samples
    k = int(np.argmax(f))
    peak = float(f[k])
    if peak <= 0:
        return peak, 0.0, 0.0
    duration = float(np.count_nonzero(f >= DURATION_FRACTION * peak)) / trace.sample_rate
    tail = f[k:]
    # local maxima after the main peak (plateaus count once)
    d = np.diff(tail)
    nz = np.nonzero(d)[0]
    second = 0.0
    if len(nz) >= 2:
        signs = np.sign(d[nz])
        turns = np.nonzero((signs[:-1] > 0) & (signs[1:] < 0))[0]
        if len(turns):
            idx = nz[turns + 1]
            second = float(tail[idx].max())
    return peak, duration, second / peak


@dataclass
class ConvergenceSummary:
    steps: int
    nonconverged_steps: int
    max_residual: float
    max_penetration: float
    mean_iterations: float
    mean_step_ms: float
    max_step_ms: float


@dataclass
class DropResult:
    trace: ForceTrace
    peak_force: float
    impulse_duration: float
    rebound_ratio: float
    restitution: float
    pressure_field: PressureField
    convergence: ConvergenceSummary
    truncated: bool
    config_hash: str
    impact_speed: float
    exit_speed: float
    impulse: float
    step_times: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "peak_force_N": self.peak_force,
            "impulse_duration_s": self.impulse_duration,
            "rebound_ratio": self.rebound_ratio,
            "restitution": self.restitution,
            "peak_pressure_Pa": float(self.pressure_field.grid.max()),
            "impulse_Ns": self.impulse,
            "impact_speed_mps": self.impact_speed,
            "exit_speed_mps": self.exit_speed,
            "truncated": int(self.truncated),
            "steps": self.convergence.steps,
            "nonconverged_steps": self.convergence.nonconverged_steps,
            "max_penetration_m": self.convergence.max_penetration,
        }


def place_impactor(config: DropConfig, top: float) -> tuple[Collider, float]:
    """Impactor posed ``spawn_gap`` above the pad top, moving down at the speed it has after falling the gap."""
    v = config.velocity
    g = config.gravity
    v_spawn = math.sqrt(max(v * v - 2.0 * g * config.spawn_gap, 0.0))
    imp = config.impactor
    lift = imp.radius if imp.kind == SPHERE else _vertical_half_extent(imp)
    pos = (0.0, 0.0, top + config.spawn_gap + lift)
    col = replace(imp, position=pos, motion=BALLISTIC, mass=config.payload_mass, velocity=(0.0, 0.0, -v_spawn))
    return col, v_spawn


def _vertical_half_extent(box: Collider) -> float:
    from .solver import _quat_matrix

    R = _quat_matrix(box.orientation)
    return float(np.abs(R[2]) @ np.asarray(box.half_extents))


def run_drop(config: DropConfig) -> DropResult:
    mesh = generate_slab(config.slab)
    report = validate(mesh)
    if not report.valid:
        raise ConfigError(f"pad mesh has {report.defects} defects", field="slab")
    sim = config.sim
    dt = sim.dt
    ground = Collider(HALF_SPACE, friction=config.ground_friction)
    impactor, v_spawn = place_impactor(config, float(mesh.vertices[:, 2].max()))
    solver = Solver(mesh, config.material, sim)
    state = solver.initial_state([ground, impactor])

    sensor = np.zeros(mesh.n_vertices, dtype=bool)
    sensor[mesh.tagged(SENSOR_FACE)] = True
    area = tributary_areas(mesh, SENSOR_FACE)
    peak_pressure = np.zeros(mesh.n_vertices)

    times = [0.0]
    forces = [0.0]
    step_ms = []
    reports = []
    peak = 0.0
    quiet_since = None
    contact_started = False
    truncated = True
    max_steps = int(math.ceil(config.max_time / dt))
    for _ in range(max_steps):
        t0 = time.perf_counter()
        try:
            state, rep = solver.step(state)
        except SolverAbort as exc:
            partial = resample(times, forces, config.sample_rate) if len(times) > 1 else None
            raise SolverAbort(str(exc), state=exc.state, partial=partial) from exc
        step_ms.append(1e3 * (time.perf_counter() - t0))
        reports.append(rep)
        c = state.contacts
        on_plate = (c.collider == 0) & sensor[c.vertex]
        f = float(c.normal_force[on_plate].sum())
        if on_plate.any():
            v = c.vertex[on_plate]
            np.maximum.at(peak_pressure, v, c.normal_force[on_plate] / area[v])
        times.append(state.time)
        forces.append(f)
        peak = max(peak, f)
        touching = bool(np.any(c.collider == 1))
        contact_started |= touching
        separated = contact_started and not touching and state.colliders[1].velocity[2] > 0
        if separated and f < SETTLE_FRACTION * peak:
            quiet_since = state.time if quiet_since is None else quiet_since
            if state.time - quiet_since >= SETTLE_TIME - 1e-12:
                truncated = False
                break
        else:
            quiet_since = None

    times = np.asarray(times)
    forces = np.asarray(forces)
    trace = resample(times, forces, config.sample_rate)
    pk, duration, rebound = impulse_metrics(trace)
    exit_v = float(state.colliders[1].velocity[2])
    restitution = min(max(exit_v, 0.0) / config.velocity, 1.0) if config.velocity > 0 else 0.0

    L = config.slab
    field_ = PressureField.empty(L.length_x, L.length_y, (-L.length_x / 2, -L.length_y / 2), config.grid_spacing)
    hit = np.nonzero(peak_pressure > 0)[0]
    field_ = rasterize_pressures(field_, mesh.vertices[hit, :2], area[hit], peak_pressure[hit])

    summary = ConvergenceSummary(
        steps=len(reports),
        nonconverged_steps=sum(not r.converged for r in reports),
        max_residual=max((r.residual for r in reports), default=0.0),
        max_penetration=max((r.max_penetration for r in reports), default=0.0),
        mean_iterations=float(np.mean([r.iterations for r in reports])) if reports else 0.0,
        mean_step_ms=float(np.mean(step_ms)) if step_ms else 0.0,
        max_step_ms=float(np.max(step_ms)) if step_ms else 0.0,
    )
    if truncated:
        log.info("drop %s reached max_time %.3g s before settling", config.config_hash(), config.max_time)
    return DropResult(
        trace=trace,
        peak_force=pk,
        impulse_duration=duration,
        rebound_ratio=rebound,
        restitution=restitution,
        pressure_field=field_,
        convergence=summary,
        truncated=truncated,
        config_hash=config.config_hash(),
        impact_speed=config.velocity,
        exit_speed=exit_v,
        impulse=float(np.trapezoid(forces, times)),
        step_times=np.asarray(step_ms),
    )


def run_batch(configs, jobs: int = 1) -> list[DropResult]:
    """Run drops, in parallel processes when ``jobs > 1``; results keep input order."""
    configs = list(configs)
    if jobs <= 1 or len(configs) <= 1:
        return [run_drop(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_drop, configs))


@dataclass
class CompressionResult:
    speed: float
    strain: np.ndarray
    stress: np.ndarray
    slope: float


def compression_test(
    material: MaterialParams,
    speed: float,
    max_strain: float = 0.2,
    thickness: float = 0.01,
    footprint: float = 0.01,
    steps: int = 400,
    fit_from: float = 0.5,
    sim: SolverConfig | None = None,
) -> CompressionResult:
    """Uniaxial compression of a single-cell pad between a plate and a platen moving at ``speed``.

    Both faces stick to their plates.  ``slope`` is the least-squares
    stress-strain slope over strains above ``fit_from * max_strain``.
    """
    if not speed > 0:
        raise ConfigError("crosshead speed must be > 0", field="speed")
    if not 0 < max_strain < 1:
        raise ConfigError("max_strain must lie in (0, 1)", field="max_strain")
    duration = max_strain * thickness / speed
    sim = replace(sim or SolverConfig(), dt=duration / steps, gravity=0.0)
    mesh = generate_slab(SlabSpec(footprint, footprint, thickness, thickness))
    ground = Collider(HALF_SPACE, friction=1e3)
    half = (footprint, footprint, 0.5 * thickness)
    platen = Collider(BOX, position=(0.0, 0.0, thickness + half[2]), half_extents=half, friction=1e3)
    solver = Solver(mesh, material, sim)
    state = solver.initial_state([ground, platen])
    area = footprint * footprint
    strain, stress = [], []
    for k in range(1, steps + 1):
        # the platen sits where it will be at the end of the step
        z = thickness + half[2] - speed * k * sim.dt
        state = replace(state, colliders=(ground, platen.moved((0.0, 0.0, z), (0.0, 0.0, -speed))))
        state, _ = solver.step(state)
        strain.append(speed * k * sim.dt / thickness)
        stress.append(state.contacts.total_normal(collider=0) / area)
    strain = np.asarray(strain)
    stress = np.asarray(stress)
    use = strain >= fit_from * max_strain
    slope = float(np.polyfit(strain[use], stress[use], 1)[0])
    return CompressionResult(speed, strain, stress, slope)


TRACE_HEADER = "time_s,force_N"


def format_trace(trace: ForceTrace) -> str:
    buf = io.StringIO()
    buf.write(TRACE_HEADER + "\n")
    for t, f in zip(trace.times, trace.samples):
        buf.write(f"{float(t)!r},{float(f)!r}\n")
    return buf.getvalue()


def save_trace(trace: ForceTrace, path) -> None:
    Path(path).write_text(format_trace(trace))


def load_trace(path) -> ForceTrace:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise ConfigError(f"{path}: expected header {TRACE_HEADER!r}")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
    if len(data) == 0:
        raise ConfigError(f"{path}: empty trace")
    t = data[:, 0]
    if len(t) > 1:
        steps = np.diff(t)
        rate = 1.0 / float(np.mean(steps))
        if np.max(np.abs(steps - 1.0 / rate)) > 1e-6 / rate:
            raise ConfigError(f"{path}: samples are not uniformly spaced")
    else:
        rate = 25_000.0
    return ForceTrace(rate, data[:, 1], float(t[0]))


SUMMARY_FIELDS = (
    "config_hash",
    "peak_force_N",
    "impulse_duration_s",
    "rebound_ratio",
    "restitution",
    "peak_pressure_Pa",
    "impulse_Ns",
    "impact_speed_mps",
    "exit_speed_mps",
    "truncated",
    "steps",
    "nonconverged_steps",
    "max_penetration_m",
)


def format_summary(results, extra: list[dict] | None = None) -> str:
    extra = extra or [{} for _ in results]
    keys = list(extra[0].keys()) if extra else []
    rows = [",".join(keys + list(SUMMARY_FIELDS))]
    for res, ex in zip(results, extra):
        s = res.summary()
        cells = [_cell(ex[k]) for k in keys] + [_cell(s[k]) for k in SUMMARY_FIELDS]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)
