"""Tetrahedral meshes: slab generation, validation and plain-text I/O."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MeshFormatError

SENSOR_FACE = "sensor-face"
TOP_FACE = "top-face"
FREE = "free"

# outward faces of a positively oriented tet (v0, v1, v2, v3)
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    x0 = vertices[tets[:, 0]]
    d = np.stack([vertices[tets[:, k]] - x0 for k in (1, 2, 3)], axis=-1)
    return np.linalg.det(d) / 6.0


def extract_surface(tets: np.ndarray) -> np.ndarray:
    """Faces that belong to exactly one tet, keeping the tet's outward winding."""
    if len(tets) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inverse.ravel()] == 1
    return np.ascontiguousarray(faces[once])


@dataclass(frozen=True, eq=False)
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    boundary_tags: dict[int, str] = field(default_factory=dict)
    surface_tris: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "tets", t)
        object.__setattr__(self, "boundary_tags", dict(self.boundary_tags))
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ConfigError("tet index out of range", field="tets")
        s = extract_surface(t)
        s.setflags(write=False)
        object.__setattr__(self, "surface_tris", s)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.tets)

    def vertex_masses(self, density: float) -> np.ndarray:
        """Lumped masses: each tet hands density*V/4 to each of its vertices."""
        m = np.zeros(self.n_vertices)
        share = np.repeat(density * np.abs(self.volumes()) / 4.0, 4)
        np.add.at(m, self.tets.ravel(), share)
        return m

    def tag_of(self, vertex: int) -> str:
        return self.boundary_tags.get(int(vertex), FREE)

    def tagged(self, tag: str) -> np.ndarray:
        idx = [i for i, name in self.boundary_tags.items() if name == tag]
        return np.array(sorted(idx), dtype=np.int64)

    def translated(self, offset) -> "TetMesh":
        return TetMesh(self.vertices + np.asarray(offset, dtype=float), self.tets, self.boundary_tags)

    def same_as(self, other: "TetMesh") -> bool:
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.tets, other.tets)
            and self.boundary_tags == other.boundary_tags
        )


@dataclass(frozen=True)
class SlabSpec:
    length_x: float
    length_y: float
    thickness: float
    resolution: float

    def __post_init__(self):
        for name in ("length_x", "length_y", "thickness", "resolution"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite length, got {value!r}", field=name)
        if self.thickness < self.resolution * (1 - 1e-9):
            raise ConfigError(
                f"thickness ({self.thickness}) must be >= resolution ({self.resolution})", field="thickness"
            )

    def cell_counts(self) -> tuple[int, int, int]:
        nx = max(1, int(math.floor(self.length_x / self.resolution + 1e-9)))
        ny = max(1, int(math.floor(self.length_y / self.resolution + 1e-9)))
        nz = max(1, int(round(self.thickness / self.resolution)))
        return nx, ny, nz


def _kuhn_tets() -> list[tuple[int, int, int, int]]:
    # corner id = a + 2b + 4c for offsets (a, b, c)
    out = []
    for perm in itertools.permutations(range(3)):
        path = [0]
        corner = [0, 0, 0]
        for axis in perm:
            corner[axis] = 1
            path.append(corner[0] + 2 * corner[1] + 4 * corner[2])
        out.append(tuple(path))
    return out


def generate_slab(spec: SlabSpec) -> TetMesh:
    """Structured slab, six Kuhn tets per hex cell, bottom face at z=0 centred on the z axis.

    Bottom vertices are tagged ``sensor-face``, top vertices ``top-face``.
    """
    nx, ny, nz = spec.cell_counts()
    xs = np.linspace(-spec.length_x / 2, spec.length_x / 2, nx + 1)
    ys = np.linspace(-spec.length_y / 2, spec.length_y / 2, ny + 1)
    zs = np.linspace(0.0, spec.thickness, nz + 1)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    vertices = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def vid(i, j, k):
        return (k * (ny + 1) + j) * (nx + 1) + i

    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corners = np.stack(
        [vid(i + a, j + b, k + c) for c in (0, 1) for b in (0, 1) for a in (0, 1)], axis=1
    )
    tets = np.concatenate([corners[:, list(t)] for t in _kuhn_tets()], axis=0)
    vol = signed_volumes(vertices, tets)
    flip = vol < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()

    tags = {}
    top = nz * (ny + 1) * (nx + 1)
    for v in range((ny + 1) * (nx + 1)):
        tags[v] = SENSOR_FACE
        tags[top + v] = TOP_FACE
    return TetMesh(vertices, tets, tags)


@dataclass
class ValidationReport:
    n_vertices: int
    n_tets: int
    min_volume: float
    max_volume: float
    inverted_tets: int
    orphan_vertices: int
    nonmanifold_edges: int
    duplicate_tets: int
    out_of_range: int

    @property
    def defects(self) -> int:
        return (
            self.inverted_tets
            + self.orphan_vertices
            + self.nonmanifold_edges
            + self.duplicate_tets
            + self.out_of_range
        )

    @property
    def valid(self) -> bool:
        return self.defects == 0


def surface_edges(tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges of a triangle set and how many triangles use each."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def validate(mesh) -> ValidationReport:
    """Collect defects; never raises."""
    vertices = np.asarray(mesh.vertices, dtype=float).reshape(-1, 3)
    tets = np.asarray(mesh.tets, dtype=np.int64).reshape(-1, 4)
    n = len(vertices)
    bad = (tets < 0) | (tets >= n)
    out_of_range = int(bad.any(axis=1).sum())
    good = tets[~bad.any(axis=1)]
    vol = signed_volumes(vertices, good) if len(good) else np.zeros(0)
    used = np.zeros(n, dtype=bool)
    used[good.ravel()] = True
    dup = 0
    if len(good):
        _, counts = np.unique(np.sort(good, axis=1), axis=0, return_counts=True)
        dup = int((counts - 1).sum())
    tris = extract_surface(good)
    nonmanifold = 0
    if len(tris):
        _, counts = surface_edges(tris)
        nonmanifold = int((counts != 2).sum())
    return ValidationReport(
        n_vertices=n,
        n_tets=len(tets),
        min_volume=float(vol.min()) if len(vol) else 0.0,
        max_volume=float(vol.max()) if len(vol) else 0.0,
        inverted_tets=int((vol <= 0).sum()),
        orphan_vertices=int((~used).sum()),
        nonmanifold_edges=nonmanifold,
        duplicate_tets=dup,
        out_of_range=out_of_range,
    )


def euler_characteristic(tris: np.ndarray) -> int:
    verts = np.unique(tris)
    edges, _ = surface_edges(tris)
    return len(verts) - len(edges) + len(tris)


def format_mesh(mesh: TetMesh) -> str:
    lines = ["tetmesh v1"]
    lines += ["v %.17g %.17g %.17g" % tuple(p) for p in mesh.vertices.tolist()]
    lines += ["t %d %d %d %d" % tuple(t) for t in mesh.tets.tolist()]
    lines += [f"tag {i} {name}" for i, name in sorted(mesh.boundary_tags.items())]
    return "\n".join(lines) + "\n"


def save_mesh(mesh: TetMesh, path) -> None:
    Path(path).write_text(format_mesh(mesh))


def parse_mesh(text: str) -> TetMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "tetmesh v1":
        raise MeshFormatError("expected header 'tetmesh v1'", line=1)
    verts, tets, tags = [], [], {}
    tet_lines, tag_lines = [], {}
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        kind = parts[0]
        try:
            if kind == "v" and len(parts) == 4:
                verts.append([float(p) for p in parts[1:]])
            elif kind == "t" and len(parts) == 5:
                tets.append([int(p) for p in parts[1:]])
                tet_lines.append(lineno)
            elif kind == "tag" and len(parts) == 3:
                tags[int(parts[1])] = parts[2]
                tag_lines[int(parts[1])] = lineno
            else:
                raise MeshFormatError(f"unrecognised record {raw.strip()!r}", line=lineno)
        except ValueError as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(f"bad number in {raw.strip()!r}", line=lineno) from None
    if not tets:
        raise MeshFormatError("no tetrahedra")
    n = len(verts)
    for lineno, t in zip(tet_lines, tets):
        if min(t) < 0 or max(t) >= n:
            raise MeshFormatError(f"tet index out of range (vertex count {n})", line=lineno)
    for i in tags:
        if not 0 <= i < n:
            raise MeshFormatError(f"tag refers to missing vertex {i}", line=tag_lines[i])
    return TetMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tets, dtype=np.int64), tags)


def load_mesh(path) -> TetMesh:
    return parse_mesh(Path(path).read_text())
