"""Protector thickness design from force-by-thickness peak-pressure sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .droptest import DropConfig, run_drop
from .errors import ConfigError, DomainError, ExtrapolationError, SoftpadError

log = logging.getLogger(__name__)

REFERENCE_PULSE = 5e-3
DEFAULT_THRESHOLD = 10e6
SURFACE_HEADER = ("force_N", "thickness_m", "peak_pressure_Pa")
SPEC_HEADER = ("link", "force_N", "thickness_m", "threshold_Pa", "feasible")


def _strictly_increasing(values, name: str) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if a.ndim != 1 or len(a) == 0:
        raise ConfigError(f"{name} must be a non-empty list", field=name)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ConfigError(f"{name} must be positive and finite", field=name)
    if np.any(np.diff(a) <= 0):
        raise ConfigError(f"{name} must be strictly increasing", field=name)
    return a


@dataclass
class ResponseSurface:
    """Peak pressure (Pa) over a force x thickness grid; NaN marks a failed cell."""

    forces: np.ndarray
    thicknesses: np.ndarray
    peak_pressure: np.ndarray
    scenario_hash: str = ""

    def __post_init__(self):
        self.forces = _strictly_increasing(self.forces, "forces")
        self.thicknesses = _strictly_increasing(self.thicknesses, "thicknesses")
        self.peak_pressure = np.array(self.peak_pressure, dtype=float)
        if self.peak_pressure.shape != (len(self.forces), len(self.thicknesses)):
            raise ConfigError("peak_pressure must be [forces x thicknesses]", field="peak_pressure")
        ok = np.isfinite(self.peak_pressure)
        if np.any(self.peak_pressure[ok] <= 0):
            raise DomainError("peak pressures must be > 0")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.peak_pressure)

    @property
    def complete(self) -> bool:
        return bool(self.valid.all())

    def monotone_violations(self) -> list[tuple[int, int]]:
        """(force index, thickness index) where pressure rises with thickness."""
        p = self.peak_pressure
        bad = np.argwhere(np.diff(p, axis=1) > 0)
        return [(int(i), int(j) + 1) for i, j in bad]

    def row(self, force: float, interp: str = "log") -> np.ndarray:
        """Pressure versus thickness at ``force``, interpolated between force levels."""
        f = self.forces
        if not f[0] - 1e-9 * f[0] <= force <= f[-1] + 1e-9 * f[-1]:
            raise ExtrapolationError(f"force {force:g} N outside the swept range [{f[0]:g}, {f[-1]:g}] N")
        p = self.peak_pressure
        if len(f) == 1:
            return p[0].copy()
        i = int(np.clip(np.searchsorted(f, force, side="right") - 1, 0, len(f) - 2))
        w = float(np.clip((force - f[i]) / (f[i + 1] - f[i]), 0.0, 1.0))
        return np.array(_blend(p[i], p[i + 1], w, interp), dtype=float)

    def pressure(self, force: float, thickness: float, interp: str = "log") -> float:
        t = self.thicknesses
        if not t[0] <= thickness <= t[-1]:
            raise ExtrapolationError(f"thickness {thickness:g} m outside the swept range")
        row = self.row(force, interp)
        j = int(np.clip(np.searchsorted(t, thickness, side="right") - 1, 0, max(len(t) - 2, 0)))
        if len(t) == 1:
            return float(row[0])
        w = (thickness - t[j]) / (t[j + 1] - t[j])
        return float(_blend(row[j], row[j + 1], w, interp))


def _blend(a, b, w: float, interp: str):
    """Interpolate between grid values; the end points come back exactly."""
    if interp not in ("log", "linear"):
        raise ConfigError(f"unknown interpolation {interp!r}", field="interp")
    if w == 0.0:
        return a
    if w == 1.0:
        return b
    if interp == "log":
        return np.exp((1 - w) * np.log(a) + w * np.log(b))
    return (1 - w) * a + w * b


def _crossing(p0: float, p1: float, threshold: float, interp: str) -> float:
    """Fraction along a segment where the interpolant drops to ``threshold``."""
    if interp == "log":
        return (math.log(p0) - math.log(threshold)) / (math.log(p0) - math.log(p1))
    return (p0 - threshold) / (p0 - p1)


def min_thickness(surface: ResponseSurface, force: float, threshold: float = DEFAULT_THRESHOLD, interp: str = "log") -> float | None:
    """Smallest thickness keeping peak pressure at or below ``threshold``; None when infeasible.

    Pressure is piecewise-linear between grid points, in log-pressure by default.
    """
    if not threshold > 0:
        raise ConfigError("threshold must be > 0", field="threshold")
    row = surface.row(force, interp)
    if not np.all(np.isfinite(row)):
        raise DomainError(f"surface has failed cells at force {force:g} N")
    t = surface.thicknesses
    if row[0] <= threshold:
        return float(t[0])
    for j in range(len(t) - 1):
        if row[j + 1] <= threshold:
            w = _crossing(row[j], row[j + 1], threshold, interp)
            return float(t[j] + w * (t[j + 1] - t[j]))
    return None


def force_to_velocity(force: float, mass: float, pulse: float = REFERENCE_PULSE) -> float:
    """Impact speed whose momentum delivered over ``pulse`` averages ``force``."""
    if not force > 0 or not mass > 0:
        raise ConfigError("force and mass must be > 0", field="force")
    return force * pulse / mass


def _cell(config: DropConfig) -> float:
    try:
        res = run_drop(config)
    except SoftpadError as exc:
        log.warning("sweep cell %s failed: %s", config.config_hash(), exc)
        return math.nan
    if res.truncated:
        return math.nan
    peak = float(res.pressure_field.grid.max())
    return peak if peak > 0 else math.nan


def sweep(forces, thicknesses, template: DropConfig | None = None, material=None, jobs: int = 1, pulse: float = REFERENCE_PULSE) -> ResponseSurface:
    """One drop per (force, thickness); failed or truncated cells come back as NaN."""
    forces = _strictly_increasing(forces, "forces")
    thicknesses = _strictly_increasing(thicknesses, "thicknesses")
    template = template or DropConfig()
    if material is not None:
        template = replace(template, material=material)
    configs = [
        replace(
            template.with_thickness(float(t)),
            drop_height=None,
            impact_velocity=force_to_velocity(float(f), template.payload_mass, pulse),
        )
        for f in forces
        for t in thicknesses
    ]
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            peaks = list(pool.map(_cell, configs))
    else:
        peaks = [_cell(c) for c in configs]
    h = hashlib.sha256()
    h.update(template.config_hash().encode())
    h.update(forces.tobytes() + thicknesses.tobytes() + repr(pulse).encode())
    surface = ResponseSurface(forces, thicknesses, np.reshape(peaks, (len(forces), len(thicknesses))), h.hexdigest()[:16])
    if not surface.complete:
        log.warning("response surface has %d failed cells", int((~surface.valid).sum()))
    return surface


def format_surface(surface: ResponseSurface) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SURFACE_HEADER)
    for i, f in enumerate(surface.forces):
        for j, t in enumerate(surface.thicknesses):
            w.writerow([repr(float(f)), repr(float(t)), repr(float(surface.peak_pressure[i, j]))])
    return buf.getvalue()


def save_surface(surface: ResponseSurface, path) -> None:
    Path(path).write_text(format_surface(surface))


def load_surface(path) -> ResponseSurface:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or tuple(c.strip() for c in rows[0]) != SURFACE_HEADER:
        raise ConfigError(f"{path}: expected header {','.join(SURFACE_HEADER)}")
    try:
        data = [tuple(float(c) for c in r) for r in rows[1:] if r]
    except ValueError:
        raise ConfigError(f"{path}: non-numeric surface entry") from None
    forces = sorted({r[0] for r in data})
    thick = sorted({r[1] for r in data})
    grid = np.full((len(forces), len(thick)), math.nan)
    for f, t, p in data:
        grid[forces.index(f), thick.index(t)] = p
    return ResponseSurface(forces, thick, grid)


@dataclass(frozen=True)
class LinkProtector:
    link: str
    design_force: float
    thickness: float
    threshold: float
    patch_ids: tuple = ()
    feasible: bool = True


@dataclass
class ProtectorSpec:
    links: list[LinkProtector] = field(default_factory=list)

    @property
    def infeasible(self) -> list[str]:
        return [p.link for p in self.links if not p.feasible]

    def thickness(self, link: str) -> float:
        for p in self.links:
            if p.link == link:
                return p.thickness
        raise KeyError(link)


def protector_spec(
    peak_forces,
    surface: ResponseSurface,
    threshold: float = DEFAULT_THRESHOLD,
    no_pad_floor: float = 0.0,
    patch_ids: dict | None = None,
    interp: str = "log",
) -> ProtectorSpec:
    """Per-link thickness from each link's peak contact force.

    ``peak_forces`` is a link -> force mapping or a damage map. Links below
    ``no_pad_floor`` get no pad; links that no swept thickness protects are
    marked infeasible with NaN thickness.
    """
    if hasattr(peak_forces, "peak_forces"):
        peak_forces = peak_forces.peak_forces()
    patch_ids = patch_ids or {}
    out = []
    for link in sorted(peak_forces):
        f = float(peak_forces[link])
        ids = tuple(patch_ids.get(link, ()))
        if f < no_pad_floor or f == 0.0:
            out.append(LinkProtector(link, f, 0.0, threshold, ids, True))
            continue
        t = min_thickness(surface, f, threshold, interp)
        if t is None:
            out.append(LinkProtector(link, f, math.nan, threshold, ids, False))
        else:
            out.append(LinkProtector(link, f, t, threshold, ids, True))
    return ProtectorSpec(out)


def format_spec(spec: ProtectorSpec) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPEC_HEADER)
    for p in spec.links:
        w.writerow([p.link, repr(float(p.design_force)), repr(float(p.thickness)), repr(float(p.threshold)), str(p.feasible).lower()])
    return buf.getvalue()


def save_spec(spec: ProtectorSpec, path) -> None:
    Path(path).write_text(format_spec(spec))
