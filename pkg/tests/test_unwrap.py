from __future__ import annotations

import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from softpad.errors import ConfigError, DomainError, TopologyError
from softpad.unwrap import (
    FlatTemplate,
    SurfacePatch,
    conformal_operator,
    default_pins,
    distortion,
    export_outline,
    flatten_all,
    grid_patch,
    load_labels,
    load_obj,
    lscm,
    outline_csv,
    outline_svg,
    save_obj,
    split_patches,
)


def paraboloid(n=8, curvature=0.6, patch_id="0") -> SurfacePatch:
    flat = grid_patch(n, n, 1.0, 1.0)
    v = flat.vertices.copy()
    v[:, 2] = curvature * ((v[:, 0] - 0.5) ** 2 + (v[:, 1] - 0.5) ** 2)
    return SurfacePatch(v, flat.triangles, patch_id)


def similarity_residual(a: np.ndarray, b: np.ndarray) -> float:
    """Max distance after the best similarity (with reflection excluded) maps ``a`` onto ``b``."""
    za = (a[:, 0] + 1j * a[:, 1]) - (a[:, 0] + 1j * a[:, 1]).mean()
    zb = (b[:, 0] + 1j * b[:, 1]) - (b[:, 0] + 1j * b[:, 1]).mean()
    s = np.vdot(za, zb) / np.vdot(za, za)
    return float(np.abs(s * za - zb).max())


def test_flat_square_is_its_own_conformal_map():
    patch = grid_patch(6, 6, 0.1, 0.1)
    corners = [0, 6]
    tpl = lscm(patch, [(corners[0], (0.0, 0.0)), (corners[1], (0.1, 0.0))])
    assert tpl.distortion.conformal_energy < 1e-10
    assert similarity_residual(tpl.uv, patch.vertices[:, :2]) < 1e-12
    assert_allclose(tpl.distortion.singular_values, 1.0, atol=1e-9)


def test_pins_are_exact():
    patch = paraboloid()
    b = patch.boundary
    tpl = lscm(patch, [(int(b[0]), (0.0, 0.0)), (int(b[5]), (1.0, 0.0))])
    assert tuple(tpl.uv[b[0]]) == (0.0, 0.0)
    assert tuple(tpl.uv[b[5]]) == (1.0, 0.0)


def test_default_pins_are_far_boundary_pair():
    patch = grid_patch(4, 4, 1.0, 1.0)
    (a, pa), (c, pc) = default_pins(patch)
    assert {a, c} in ({0, 24}, {4, 20})
    assert pa == (0.0, 0.0)
    assert_allclose(pc[0], np.sqrt(2.0))


def test_curved_patch_has_distortion_and_matches_dense_least_squares():
    patch = paraboloid(6)
    tpl = lscm(patch)
    d = tpl.distortion
    assert d.conformal_energy > 1e-6
    assert d.max_angle_error_deg > 0.1
    assert d.flipped_count == 0
    # same problem solved densely
    M = conformal_operator(patch).toarray()
    n = len(patch.vertices)
    (i0, p0), (i1, p1) = tpl.pins
    fixed = [i0, i1, i0 + n, i1 + n]
    free = np.setdiff1d(np.arange(2 * n), fixed)
    rhs = -M[:, fixed] @ np.array([p0[0], p1[0], p0[1], p1[1]])
    x = np.linalg.lstsq(M[:, free], rhs, rcond=None)[0]
    flat = np.concatenate([tpl.uv[:, 0], tpl.uv[:, 1]])
    assert_allclose(flat[free], x, atol=1e-10)
    assert_allclose(np.sum((M @ flat) ** 2), d.conformal_energy, rtol=1e-8)


def test_quarter_cylinder_is_developable():
    patch = grid_patch(8, 4, np.pi / 2, 1.0, bend=np.pi / 2)
    tpl = lscm(patch)
    assert tpl.distortion.conformal_energy < 1e-4 * patch.areas.sum()


def test_scaling_and_reflection():
    patch = paraboloid(5)
    tpl = lscm(patch)
    d1 = tpl.distortion
    d2 = distortion(patch, 2.0 * tpl.uv)
    assert_allclose(d2.conformal_energy, 4.0 * d1.conformal_energy, rtol=1e-10)
    assert_allclose(d2.max_angle_error_deg, d1.max_angle_error_deg, rtol=1e-10)
    mirrored = tpl.uv * np.array([1.0, -1.0])
    assert distortion(patch, mirrored).flipped_count == len(patch.triangles)


def test_identity_flattening():
    patch = grid_patch(3, 2, 2.0, 1.0)
    d = distortion(patch, patch.vertices[:, :2])
    assert d.conformal_energy == pytest.approx(0.0, abs=1e-28)
    assert_allclose(d.area_ratio_spread, 1.0)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3),
    st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3),
)
def test_similarity_invariance(angles, shift):
    patch = paraboloid(5)
    R = Rotation.from_euler("xyz", angles).as_matrix()
    moved = SurfacePatch(patch.vertices @ R.T + shift, patch.triangles)
    a, b = lscm(patch).distortion, lscm(moved).distortion
    assert abs(a.conformal_energy - b.conformal_energy) < 1e-9
    assert abs(a.max_angle_error_deg - b.max_angle_error_deg) < 1e-9
    assert abs(a.area_ratio_spread - b.area_ratio_spread) < 1e-9


def test_pin_independence_on_developable_patch():
    patch = grid_patch(8, 5, np.pi / 2, 1.0, bend=np.pi / 2)
    b = patch.boundary
    t1 = lscm(patch)
    t2 = lscm(patch, [(int(b[3]), (0.2, -1.0)), (int(b[11]), (0.5, 0.7))])
    assert similarity_residual(t1.uv, t2.uv) < 1e-6


def test_energy_optimal_under_random_perturbation():
    patch = paraboloid(6)
    tpl = lscm(patch)
    e0 = tpl.distortion.conformal_energy
    rng = np.random.default_rng(11)
    pinned = [i for i, _ in tpl.pins]
    for _ in range(100):
        du = rng.normal(scale=1e-3, size=tpl.uv.shape)
        du[pinned] = 0.0
        assert distortion(patch, tpl.uv + du).conformal_energy >= e0


def test_rejects_bad_pins():
    patch = grid_patch(2, 2)
    with pytest.raises(ConfigError):
        lscm(patch, [(0, (0.0, 0.0)), (0, (1.0, 0.0))])
    with pytest.raises(ConfigError):
        lscm(patch, [(0, (0.0, 0.0)), (1, (0.0, 0.0))])


def test_topology_errors():
    sq = grid_patch(2, 2)
    # two disjoint squares
    v = np.vstack([sq.vertices, sq.vertices + [5.0, 0, 0]])
    t = np.vstack([sq.triangles, sq.triangles + len(sq.vertices)])
    with pytest.raises(TopologyError):
        SurfacePatch(v, t)
    # closed tetrahedron surface
    tet_v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tet_t = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    with pytest.raises(TopologyError):
        SurfacePatch(tet_v, tet_t)
    # inconsistent winding
    bad = sq.triangles.copy()
    bad[0] = bad[0][::-1]
    with pytest.raises(TopologyError):
        SurfacePatch(sq.vertices, bad)
    with pytest.raises(DomainError):
        SurfacePatch([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_annulus_is_not_a_disk():
    ring = grid_patch(3, 3)
    # drop the centre quad's two triangles
    centre = {5, 6, 9, 10}
    tris = np.array([t for t in ring.triangles if not set(t) <= centre])
    with pytest.raises(TopologyError):
        SurfacePatch(ring.vertices, tris)


def test_svg_and_csv_export(tmp_path):
    tpl = lscm(grid_patch(1, 1, 1.0, 1.0), [(0, (0.0, 0.0)), (1, (1.0, 0.0))])
    svg = outline_svg(tpl)
    assert 'width="1000.000000mm"' in svg
    assert svg.count("<path") == 1
    rows = outline_csv(tpl).strip().splitlines()
    assert rows[0] == "patch_id,x_mm,y_mm"
    assert rows[1] == rows[-1]
    assert len(rows) == 6
    export_outline(tpl, tmp_path / "o.svg")
    export_outline(tpl, tmp_path / "o.csv")
    assert (tmp_path / "o.svg").read_text() == svg


def test_export_refuses_self_intersecting_outline():
    tpl = lscm(grid_patch(1, 1))
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]], dtype=float)
    broken = FlatTemplate(tpl.patch_id, tpl.uv, bowtie, tpl.distortion, tpl.pins)
    assert not broken.outline_valid
    with pytest.raises(DomainError):
        outline_svg(broken)


def test_twenty_one_labelled_patches(tmp_path):
    verts, tris, labels = [], [], []
    offset = 0
    for k in range(21):
        p = paraboloid(3, 0.2 + 0.02 * k)
        verts.append(p.vertices + [2.0 * k, 0, 0])
        tris.append(p.triangles + offset)
        labels += [f"elbow-{k + 1}"] * len(p.triangles)
        offset += len(p.vertices)
    v, t = np.vstack(verts), np.vstack(tris)
    save_obj(tmp_path / "m.obj", v, t)
    (tmp_path / "labels.csv").write_text(
        "triangle_index,patch_id\n" + "".join(f"{i},{lab}\n" for i, lab in enumerate(labels))
    )
    v2, t2 = load_obj(tmp_path / "m.obj")
    assert_allclose(v2, v)
    patches = split_patches(v2, t2, load_labels(tmp_path / "labels.csv", len(t2)))
    templates = flatten_all(patches)
    assert [tp.patch_id for tp in templates] == [f"elbow-{k}" for k in range(1, 22)]
    svg = outline_svg(templates)
    ids = re.findall(r'data-patch-id="([^"]+)"', svg)
    assert len(ids) == 21 and len(set(ids)) == 21
