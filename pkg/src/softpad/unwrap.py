"""Least-squares conformal flattening of surface patches into cut templates."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.sparse.linalg import splu
from shapely.geometry import LinearRing

from .errors import ConfigError, DomainError, FormatError, NumericalError, TopologyError

DEGENERATE_FRACTION = 1e-12
LABEL_HEADER = ("triangle_index", "patch_id")


@dataclass
class SurfacePatch:
    vertices: np.ndarray
    triangles: np.ndarray
    patch_id: str = "0"
    boundary: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.patch_id = str(self.patch_id)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ConfigError("vertices must be (n, 3)", field="vertices")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3 or len(self.triangles) == 0:
            raise ConfigError("triangles must be a non-empty (m, 3) array", field="triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ConfigError("triangle index out of range", field="triangles")
        self.boundary = check_disk(self.vertices, self.triangles, self.patch_id)

    @property
    def areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def check_disk(vertices: np.ndarray, triangles: np.ndarray, patch_id: str = "0") -> np.ndarray:
    """Validate disk topology and return the ordered boundary loop."""
    n = len(vertices)
    area = triangle_areas(vertices, triangles)
    if np.any(area <= DEGENERATE_FRACTION * max(area.max(), 1e-300)):
        raise DomainError(f"patch {patch_id}: degenerate triangle(s) {np.nonzero(area <= DEGENERATE_FRACTION * area.max())[0][:5].tolist()}")
    used = np.unique(triangles)
    if len(used) != n:
        raise TopologyError(f"patch {patch_id}: {n - len(used)} vertices not referenced by any triangle")

    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for a, b in directed.tolist():
        counts[(a, b)] += 1
    if any(c > 1 for c in counts.values()):
        raise TopologyError(f"patch {patch_id}: non-manifold or inconsistently oriented edge")
    undirected = {tuple(sorted(e)) for e in counts}
    boundary_edges = [(a, b) for (a, b) in counts if (b, a) not in counts]

    adj = sp.coo_matrix((np.ones(len(directed)), (directed[:, 0], directed[:, 1])), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise TopologyError(f"patch {patch_id}: {n_comp} connected components")
    euler = n - len(undirected) + len(triangles)
    if euler != 1 or not boundary_edges:
        raise TopologyError(f"patch {patch_id}: not a disk (Euler characteristic {euler})")

    nxt: dict[int, int] = {}
    for a, b in boundary_edges:
        if a in nxt:
            raise TopologyError(f"patch {patch_id}: boundary pinches at vertex {a}")
        nxt[a] = b
    start = min(nxt)
    loop = [start]
    while True:
        v = nxt[loop[-1]]
        if v == start:
            break
        loop.append(v)
        if len(loop) > len(nxt):
            break
    if len(loop) != len(boundary_edges):
        raise TopologyError(f"patch {patch_id}: boundary has more than one loop")
    return np.asarray(loop, dtype=np.int64)


def _local_frames(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Each triangle's corners in its own orthonormal 2-D frame, shape (m, 3, 2)."""
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    x = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    nrm = np.cross(e1, e2)
    y = np.cross(nrm / np.linalg.norm(nrm, axis=1, keepdims=True), x)
    out = np.zeros((len(triangles), 3, 2))
    out[:, 1, 0] = np.linalg.norm(e1, axis=1)
    out[:, 2, 0] = np.einsum("ij,ij->i", e2, x)
    out[:, 2, 1] = np.einsum("ij,ij->i", e2, y)
    return out


def _gradients(local: np.ndarray) -> np.ndarray:
    """Gradients of the three hat functions in the local frame, shape (m, 3, 2)."""
    q = local
    area2 = (q[:, 1, 0] - q[:, 0, 0]) * (q[:, 2, 1] - q[:, 0, 1]) - (q[:, 2, 0] - q[:, 0, 0]) * (q[:, 1, 1] - q[:, 0, 1])
    g = np.zeros_like(q)
    for j in range(3):
        a, b = q[:, (j + 1) % 3], q[:, (j + 2) % 3]
        g[:, j, 0] = (a[:, 1] - b[:, 1]) / area2
        g[:, j, 1] = (b[:, 0] - a[:, 0]) / area2
    return g


def conformal_operator(patch: SurfacePatch) -> sp.csr_matrix:
    """Sparse M with |M [u; v]|^2 equal to the conformal energy sum A (s1 - s2)^2."""
    tris = patch.triangles
    m, n = len(tris), len(patch.vertices)
    g = _gradients(_local_frames(patch.vertices, tris))
    w = np.sqrt(patch.areas)[:, None]
    gx, gy = g[:, :, 0] * w, g[:, :, 1] * w
    r0 = np.repeat(2 * np.arange(m), 3)
    r1 = r0 + 1
    cols = tris.ravel()
    # u_x - v_y = 0 and u_y + v_x = 0
    rows = np.concatenate([r0, r0, r1, r1])
    cc = np.concatenate([cols, cols + n, cols, cols + n])
    vals = np.concatenate([gx.ravel(), -gy.ravel(), gy.ravel(), gx.ravel()])
    return sp.csr_matrix((vals, (rows, cc)), shape=(2 * m, 2 * n))


@dataclass(frozen=True)
class Distortion:
    conformal_energy: float
    area_ratio_spread: float
    max_angle_error_deg: float
    singular_values: np.ndarray = field(repr=False)
    flipped: np.ndarray = field(repr=False)
    degenerate: np.ndarray = field(repr=False)

    @property
    def flipped_count(self) -> int:
        return int(self.flipped.sum())

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())


def distortion(patch: SurfacePatch, uv) -> Distortion:
    """Per-triangle singular values of the surface-to-plane map and their aggregates.

    The angle error of a triangle is the largest change any corner angle can
    undergo, 2 asin((s1 - s2) / (s1 + s2)).  Degenerate uv triangles are
    excluded from the aggregates; orientation flips are flagged.
    """
    uv = np.asarray(uv, dtype=float)
    if uv.shape != (len(patch.vertices), 2):
        raise ConfigError("uv must have one row per vertex", field="uv")
    tris = patch.triangles
    g = _gradients(_local_frames(patch.vertices, tris))
    J = np.einsum("tjk,tjd->tdk", g, uv[tris])
    det = np.linalg.det(J)
    sv = np.linalg.svd(J, compute_uv=False)
    area = patch.areas
    uv_area = np.abs(det) * area
    degenerate = uv_area <= DEGENERATE_FRACTION * max(float(uv_area.max()), 1e-300)
    ok = ~degenerate
    s1, s2 = sv[:, 0], sv[:, 1]
    energy = float(np.sum(area[ok] * (s1[ok] - s2[ok]) ** 2))
    jac = (s1 * s2)[ok]
    spread = float(jac.max() / jac.min()) if ok.any() else math.nan
    ang = 2.0 * np.degrees(np.arcsin(np.clip((s1[ok] - s2[ok]) / (s1[ok] + s2[ok]), 0.0, 1.0)))
    return Distortion(energy, spread, float(ang.max()) if ok.any() else math.nan, sv, det < 0, degenerate)


@dataclass
class FlatTemplate:
    patch_id: str
    uv: np.ndarray
    outline: np.ndarray
    distortion: Distortion
    pins: tuple

    @property
    def outline_valid(self) -> bool:
        return outline_is_simple(self.outline)


def outline_is_simple(outline: np.ndarray) -> bool:
    pts = np.asarray(outline, dtype=float)
    if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        return False
    return bool(LinearRing(pts).is_simple)


def default_pins(patch: SurfacePatch) -> tuple[tuple[int, tuple[float, float]], tuple[int, tuple[float, float]]]:
    """Two boundary vertices farthest apart along mesh edges, placed at (0, 0) and (d, 0)."""
    tris = patch.triangles
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    length = np.linalg.norm(patch.vertices[e[:, 0]] - patch.vertices[e[:, 1]], axis=1)
    n = len(patch.vertices)
    graph = sp.coo_matrix((length, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    b = np.sort(patch.boundary)
    dist = dijkstra(graph, directed=False, indices=b)[:, b]
    i, j = np.unravel_index(int(np.argmax(dist)), dist.shape)
    a, c = int(b[min(i, j)]), int(b[max(i, j)])
    d = float(np.linalg.norm(patch.vertices[a] - patch.vertices[c]))
    return (a, (0.0, 0.0)), (c, (d, 0.0))


def lscm(patch: SurfacePatch, pins=None) -> FlatTemplate:
    """Flatten ``patch`` by minimising the conformal energy with two pinned vertices."""
    pins = tuple(pins) if pins is not None else default_pins(patch)
    if len(pins) != 2:
        raise ConfigError("exactly two pins are required", field="pins")
    (i0, p0), (i1, p1) = ((int(i), np.asarray(p, dtype=float)) for i, p in pins)
    n = len(patch.vertices)
    if i0 == i1 or not (0 <= i0 < n and 0 <= i1 < n):
        raise ConfigError("pins must be two distinct vertices of the patch", field="pins")
    if np.allclose(p0, p1):
        raise ConfigError("pins must have distinct uv", field="pins")

    M = conformal_operator(patch)
    fixed = np.array([i0, i1, i0 + n, i1 + n])
    fixed_val = np.array([p0[0], p1[0], p0[1], p1[1]])
    free = np.setdiff1d(np.arange(2 * n), fixed)
    Mf = M[:, free].tocsc()
    rhs = -M[:, fixed] @ fixed_val
    try:
        lu = splu((Mf.T @ Mf).tocsc())
        x = lu.solve(Mf.T @ rhs)
    except RuntimeError as exc:
        raise NumericalError(f"patch {patch.patch_id}: rank-deficient conformal system ({exc})") from None
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"patch {patch.patch_id}: rank-deficient conformal system")
    flat = np.empty(2 * n)
    flat[free] = x
    flat[fixed] = fixed_val
    uv = np.column_stack([flat[:n], flat[n:]])
    outline = uv[np.append(patch.boundary, patch.boundary[0])]
    return FlatTemplate(patch.patch_id, uv, outline, distortion(patch, uv), ((i0, (float(p0[0]), float(p0[1]))), (i1, (float(p1[0]), float(p1[1])))))


def _flatten(patch: SurfacePatch) -> FlatTemplate:
    return lscm(patch)


def flatten_all(patches, jobs: int = 1) -> list[FlatTemplate]:
    """Flatten independent patches; results are ordered by patch id."""
    patches = sorted(patches, key=lambda p: _natural(p.patch_id))
    if jobs > 1 and len(patches) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_flatten, patches))
    return [_flatten(p) for p in patches]


def _natural(s: str):
    """Sort key treating digit runs as numbers, so "elbow-2" precedes "elbow-10"."""
    return [(0, int(part), "") if part.isdigit() else (1, 0, part) for part in re.split(r"(\d+)", s)]


def split_patches(vertices, triangles, labels) -> list[SurfacePatch]:
    """One patch per label value, with vertices re-indexed compactly."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    labels = [str(v) for v in labels]
    if len(labels) != len(triangles):
        raise ConfigError("one patch label per triangle is required", field="labels")
    groups: dict[str, list[int]] = defaultdict(list)
    for t, lab in enumerate(labels):
        groups[lab].append(t)
    out = []
    for lab in sorted(groups, key=_natural):
        tris = triangles[groups[lab]]
        used, local = np.unique(tris, return_inverse=True)
        out.append(SurfacePatch(vertices[used], local.reshape(-1, 3), lab))
    return out


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles of a Wavefront OBJ (``v`` and triangular ``f`` records only)."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise FormatError("only triangular faces are supported", line=lineno)
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError:
            raise FormatError(f"malformed {parts[0]} record", line=lineno) from None
    if not verts or not faces:
        raise FormatError("no vertices or faces found", line=1)
    return np.array(verts), np.array(faces, dtype=np.int64)


def save_obj(path, vertices, triangles) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=float).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_labels(path, n_triangles: int | None = None) -> list[str]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or tuple(c.strip() for c in rows[0]) != LABEL_HEADER:
        raise FormatError(f"expected header {','.join(LABEL_HEADER)}", line=1)
    found: dict[int, str] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            found[int(row[0])] = row[1].strip()
        except (ValueError, IndexError):
            raise FormatError("malformed label row", line=lineno) from None
    n = n_triangles if n_triangles is not None else len(found)
    missing = [t for t in range(n) if t not in found]
    if missing:
        raise FormatError(f"no label for triangle {missing[0]}", line=len(rows))
    return [found[t] for t in range(n)]


def _check_exportable(templates) -> None:
    for tpl in templates:
        if not tpl.outline_valid:
            raise DomainError(f"patch {tpl.patch_id}: outline self-intersects; refusing to export")


def outline_csv(templates) -> str:
    templates = [templates] if isinstance(templates, FlatTemplate) else list(templates)
    _check_exportable(templates)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("patch_id", "x_mm", "y_mm"))
    for tpl in templates:
        for x, y in tpl.outline * 1e3:
            w.writerow([tpl.patch_id, f"{x:.6f}", f"{y:.6f}"])
    return buf.getvalue()


def outline_svg(templates, gap_mm: float = 10.0) -> str:
    """Closed outlines in millimetres, laid out left to right, one labelled path per patch."""
    templates = [templates] if isinstance(templates, FlatTemplate) else list(templates)
    _check_exportable(templates)
    paths, cursor, height = [], 0.0, 0.0
    for tpl in templates:
        pts = tpl.outline[:-1] * 1e3
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        height = max(height, float(hi[1] - lo[1]))
        paths.append((tpl.patch_id, pts - lo + np.array([cursor, 0.0]), hi - lo))
        cursor += float(hi[0] - lo[0]) + gap_mm
    width = max(cursor - gap_mm, 0.0)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.6f}mm" height="{height:.6f}mm" '
        f'viewBox="0 0 {width:.6f} {height:.6f}">',
    ]
    for pid, pts, _ in paths:
        # svg y grows downward
        d = " ".join(f"{'M' if k == 0 else 'L'} {x:.6f} {height - y:.6f}" for k, (x, y) in enumerate(pts))
        out.append(f'  <path id="patch-{pid}" data-patch-id="{pid}" d="{d} Z" fill="none" stroke="black" stroke-width="0.1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_outline(templates, path, fmt: str | None = None) -> None:
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if fmt == "svg":
        Path(path).write_text(outline_svg(templates))
    elif fmt == "csv":
        Path(path).write_text(outline_csv(templates))
    else:
        raise ConfigError(f"unknown outline format {fmt!r}", field="format")


def uv_csv(template: FlatTemplate) -> str:
    rows = ["vertex,u_m,v_m"] + [f"{i},{u!r},{v!r}" for i, (u, v) in enumerate(np.asarray(template.uv).tolist())]
    return "\n".join(rows) + "\n"


def grid_patch(nx: int, ny: int, size_x: float = 1.0, size_y: float = 1.0, bend: float = 0.0, patch_id: str = "0") -> SurfacePatch:
    """Triangulated rectangle, optionally rolled onto a cylinder through ``bend`` radians."""
    xs = np.linspace(0.0, size_x, nx + 1)
    ys = np.linspace(0.0, size_y, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    if bend > 0:
        r = size_x / bend
        a = X / r
        pts = np.column_stack([(r * np.sin(a)).ravel(), Y.ravel(), (r * (1 - np.cos(a))).ravel()])
    else:
        pts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return SurfacePatch(pts, tris, patch_id)
