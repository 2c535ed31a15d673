from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softpad.errors import ConfigError, MeshFormatError
from softpad.kvfile import format_kv, get_list, parse_kv
from softpad.mesh import (
    SENSOR_FACE,
    TOP_FACE,
    SlabSpec,
    TetMesh,
    euler_characteristic,
    format_mesh,
    generate_slab,
    load_mesh,
    parse_mesh,
    save_mesh,
    validate,
)


def test_slab_counts_and_volume():
    spec = SlabSpec(0.1, 0.1, 0.012, 0.004)
    mesh = generate_slab(spec)
    nx, ny, nz = spec.cell_counts()
    assert (nx, ny, nz) == (25, 25, 3)
    assert mesh.n_vertices == 26 * 26 * 4
    assert mesh.n_tets == 6 * 25 * 25 * 3
    np.testing.assert_allclose(mesh.volumes().sum(), 0.1 * 0.1 * 0.012, rtol=1e-12)
    assert np.all(mesh.volumes() > 0)


def test_slab_is_valid_and_closed():
    mesh = generate_slab(SlabSpec(0.02, 0.03, 0.01, 0.005))
    report = validate(mesh)
    assert report.valid
    assert euler_characteristic(mesh.surface_tris) == 2


def test_face_tags():
    mesh = generate_slab(SlabSpec(0.02, 0.02, 0.01, 0.005))
    z = mesh.vertices[:, 2]
    np.testing.assert_array_equal(np.sort(mesh.tagged(SENSOR_FACE)), np.nonzero(z == 0)[0])
    np.testing.assert_array_equal(np.sort(mesh.tagged(TOP_FACE)), np.nonzero(np.isclose(z, 0.01))[0])


def test_thin_slab_single_layer():
    mesh = generate_slab(SlabSpec(0.01, 0.01, 0.01, 0.01))
    assert mesh.n_tets == 6
    assert validate(mesh).valid


@pytest.mark.parametrize("bad", [dict(thickness=0.0), dict(resolution=-1.0), dict(thickness=0.001, resolution=0.004)])
def test_bad_slab_spec(bad):
    args = dict(length_x=0.1, length_y=0.1, thickness=0.012, resolution=0.004)
    args.update(bad)
    with pytest.raises(ConfigError):
        SlabSpec(**args)


def test_round_trip_bit_exact(tmp_path):
    mesh = generate_slab(SlabSpec(0.02, 0.02, 0.006, 0.003))
    mesh = mesh.translated((1e-9 / 3, np.pi * 1e-3, 0.0))
    path = tmp_path / "m.tet"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert back.same_as(mesh)


def test_validation_counts_defects():
    mesh = generate_slab(SlabSpec(0.01, 0.01, 0.01, 0.01))
    tets = mesh.tets.copy()
    tets[0] = tets[0][[1, 0, 2, 3]]
    verts = np.vstack([mesh.vertices, [[5.0, 5.0, 5.0]]])
    report = validate(TetMesh(verts, np.vstack([tets, tets[1:2]]), {}))
    assert report.inverted_tets == 1
    assert report.orphan_vertices == 1
    assert report.duplicate_tets == 1
    assert not report.valid


def test_parse_errors_carry_line_numbers():
    with pytest.raises(MeshFormatError, match="line 1"):
        parse_mesh("nope\n")
    text = "tetmesh v1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nt 0 1 2 9\n"
    with pytest.raises(MeshFormatError, match="line 6"):
        parse_mesh(text)
    with pytest.raises(MeshFormatError, match="line 3"):
        parse_mesh("tetmesh v1\nv 0 0 0\nv 1 x 0\n")


@settings(max_examples=20, deadline=None)
@given(
    st.floats(0.005, 0.03), st.floats(0.005, 0.03), st.integers(1, 3), st.floats(0.002, 0.006)
)
def test_generated_slabs_valid(lx, ly, nz, res):
    mesh = generate_slab(SlabSpec(lx, ly, nz * res, res))
    assert validate(mesh).valid
    assert parse_mesh(format_mesh(mesh)).same_as(mesh)


def test_kv_round_trip_and_errors():
    text = format_kv({"a": 1.5, "b": "x", "c": True})
    assert parse_kv(text) == {"a": "1.5", "b": "x", "c": "true"}
    assert parse_kv("# comment\nx = 1 # trailing\n") == {"x": "1"}
    with pytest.raises(ConfigError):
        parse_kv("x=1\nx=2\n")
    with pytest.raises(ConfigError):
        parse_kv("novalue\n")
    assert get_list({"v": "1, 2,3"}, "v") == [1.0, 2.0, 3.0]
