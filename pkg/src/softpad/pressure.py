"""Peak-pressure fields in the style of pressure-indicating film."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .mesh import SENSOR_FACE, TetMesh

BELOW = 0
IN_RANGE = 1
SATURATED = 2


@dataclass(frozen=True)
class FilmSpec:
    name: str
    lower_bound: float
    upper_bound: float

    def __post_init__(self):
        if not 0 < self.lower_bound < self.upper_bound:
            raise ConfigError(f"film {self.name}: need 0 < lower < upper", field="lower_bound")


FILMS = {
    "LW": FilmSpec("LW", 2.5e6, 10e6),
    "MS": FilmSpec("MS", 10e6, 50e6),
    "HS": FilmSpec("HS", 50e6, 130e6),
}


@dataclass
class PressureField:
    """Per-cell peak pressure (Pa) on a regular grid; ``grid[j, i]`` is cell (i, j)."""

    grid: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    spacing: float = 1e-3
    saturated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = np.array(self.grid, dtype=float)
        if self.grid.ndim != 2:
            raise ConfigError("pressure grid must be 2-D", field="grid")
        if not self.spacing > 0:
            raise ConfigError("grid spacing must be > 0", field="spacing")
        if np.any(self.grid < 0):
            raise DomainError("pressures must be non-negative")
        if self.saturated is None:
            self.saturated = np.zeros(self.grid.shape, dtype=bool)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @classmethod
    def empty(cls, extent_x: float, extent_y: float, origin=(0.0, 0.0), spacing: float = 1e-3) -> "PressureField":
        nx = max(1, int(math.ceil(extent_x / spacing - 1e-9)))
        ny = max(1, int(math.ceil(extent_y / spacing - 1e-9)))
        return cls(np.zeros((ny, nx)), origin, spacing)

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def copy(self) -> "PressureField":
        return PressureField(self.grid.copy(), self.origin, self.spacing, self.saturated.copy())

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ny, nx = self.grid.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.spacing
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.spacing
        return xs, ys


@dataclass(frozen=True)
class Footprint:
    """Rest-position xy and tributary area of every mesh vertex (zero when not on the sensed face)."""

    xy: np.ndarray
    area: np.ndarray


def tributary_areas(mesh: TetMesh, tag: str | None = SENSOR_FACE) -> np.ndarray:
    """One third of the incident surface-triangle area per vertex.

    With ``tag`` set, only triangles whose three vertices carry that tag count.
    """
    tris = mesh.surface_tris
    if tag is not None:
        tagged = np.zeros(mesh.n_vertices, dtype=bool)
        tagged[mesh.tagged(tag)] = True
        tris = tris[tagged[tris].all(axis=1)]
    x = mesh.vertices
    area = 0.5 * np.linalg.norm(np.cross(x[tris[:, 1]] - x[tris[:, 0]], x[tris[:, 2]] - x[tris[:, 0]]), axis=1)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, tris.ravel(), np.repeat(area / 3.0, 3))
    return out


def sensor_footprint(mesh: TetMesh, tag: str = SENSOR_FACE) -> Footprint:
    return Footprint(np.array(mesh.vertices[:, :2]), tributary_areas(mesh, tag))


def _cover(field: PressureField, xy: np.ndarray, area: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(cell, contact) pairs: cells whose centres lie in the contact's square patch of equal area.

    A patch smaller than a cell falls back to the nearest cell.
    """
    ny, nx = field.grid.shape
    h = field.spacing
    half = 0.5 * np.sqrt(area)
    u = (xy[:, 0] - field.origin[0]) / h - 0.5
    v = (xy[:, 1] - field.origin[1]) / h - 0.5
    i0 = np.ceil(u - half / h - 1e-12).astype(np.int64)
    i1 = np.floor(u + half / h + 1e-12).astype(np.int64)
    j0 = np.ceil(v - half / h - 1e-12).astype(np.int64)
    j1 = np.floor(v + half / h + 1e-12).astype(np.int64)
    nearest_i = np.rint(u).astype(np.int64)
    nearest_j = np.rint(v).astype(np.int64)
    small = (i1 < i0) | (j1 < j0)
    i0 = np.where(small, nearest_i, i0)
    i1 = np.where(small, nearest_i, i1)
    j0 = np.where(small, nearest_j, j0)
    j1 = np.where(small, nearest_j, j1)
    cells, owners = [], []
    for c in range(len(xy)):
        ii = np.arange(max(i0[c], 0), min(i1[c], nx - 1) + 1)
        jj = np.arange(max(j0[c], 0), min(j1[c], ny - 1) + 1)
        if len(ii) == 0 or len(jj) == 0:
            continue
        flat = (jj[:, None] * nx + ii[None, :]).ravel()
        cells.append(flat)
        owners.append(np.full(len(flat), c))
    if not cells:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(cells), np.concatenate(owners)


def rasterize_pressures(field: PressureField, xy, area, pressure) -> PressureField:
    """Max-merge point pressures with given tributary areas into a copy of ``field``."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    area = np.asarray(area, dtype=float)
    pressure = np.asarray(pressure, dtype=float)
    out = field.copy()
    if len(pressure) == 0:
        return out
    if np.any(area <= 0):
        raise DomainError("contact vertex with zero tributary area; footprint does not match the mesh")
    cells, owners = _cover(field, xy, area)
    flat = out.grid.ravel()
    np.maximum.at(flat, cells, pressure[owners])
    out.grid = flat.reshape(out.grid.shape)
    return out


def accumulate(field: PressureField, contacts, footprint: Footprint) -> PressureField:
    """Peak-merge one contact set: each contact presses F/A on its tributary square."""
    v = np.asarray(contacts.vertex, dtype=np.int64)
    force = np.maximum(np.asarray(contacts.normal_force, dtype=float), 0.0)
    area = footprint.area[v]
    if np.any(area <= 0):
        raise DomainError("contact vertex with zero tributary area; footprint does not match the mesh")
    return rasterize_pressures(field, footprint.xy[v], area, force / area)


@dataclass
class ClassifiedMap:
    labels: np.ndarray
    values: np.ndarray
    film: FilmSpec

    def counts(self) -> dict[str, int]:
        return {
            "below": int((self.labels == BELOW).sum()),
            "in_range": int((self.labels == IN_RANGE).sum()),
            "saturated": int((self.labels == SATURATED).sum()),
        }


def classify(field: PressureField, film: FilmSpec) -> ClassifiedMap:
    g = field.grid
    labels = np.full(g.shape, IN_RANGE, dtype=np.int8)
    labels[g < film.lower_bound] = BELOW
    labels[g > film.upper_bound] = SATURATED
    values = np.where(labels == BELOW, 0.0, np.minimum(g, film.upper_bound))
    return ClassifiedMap(labels, values, film)


@dataclass(frozen=True)
class FieldStats:
    area_above: float
    median: float | None
    max: float


def stats(field: PressureField, threshold: float) -> FieldStats:
    g = field.grid
    nonzero = g[g > 0]
    median = float(np.median(nonzero)) if len(nonzero) else None
    return FieldStats(field.cell_area * int((g > threshold).sum()), median, float(g.max()) if g.size else 0.0)


def reduction(before: float, after: float) -> float:
    """Percent reduction, rounded to one decimal."""
    if not before > 0:
        raise DomainError(f"reduction needs before > 0, got {before}")
    return round(100.0 * (before - after) / before + 0.0, 1)


def format_field_csv(field: PressureField) -> str:
    ny, nx = field.grid.shape
    rows = ["i,j,pressure_Pa"]
    for j in range(ny):
        for i in range(nx):
            rows.append(f"{i},{j},{float(field.grid[j, i])!r}")
    return "\n".join(rows) + "\n"


def save_field_csv(field: PressureField, path) -> None:
    Path(path).write_text(format_field_csv(field))


def load_field_csv(path, origin=(0.0, 0.0), spacing: float = 1e-3) -> PressureField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    i = data[:, 0].astype(int)
    j = data[:, 1].astype(int)
    grid = np.zeros((j.max() + 1, i.max() + 1))
    grid[j, i] = data[:, 2]
    return PressureField(grid, origin, spacing)


def pgm_bytes(field: PressureField, film: FilmSpec) -> bytes:
    """16-bit binary PGM: [0, upper bound] maps linearly onto [0, 65535]; below-film cells are 0."""
    cm = classify(field, film)
    scaled = np.rint(cm.values / film.upper_bound * 65535.0).astype(">u2")
    ny, nx = scaled.shape
    header = f"P5\n{nx} {ny}\n65535\n".encode("ascii")
    return header + scaled.tobytes()


def save_pgm(field: PressureField, film: FilmSpec, path) -> None:
    Path(path).write_bytes(pgm_bytes(field, film))
