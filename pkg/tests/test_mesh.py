import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eitqmc.mesh import MESH_SLACK, ElectrodeConfig, MeshError, build_disk_mesh, read_mesh, write_mesh


def boundary_is_closed_cycle(mesh):
    be = mesh.boundary_edges
    return np.array_equal(be[:, 1], np.roll(be[:, 0], -1))


def test_reference_geometry_has_sixteen_disjoint_electrodes(coarse_mesh, electrodes16):
    coarse_mesh.validate(electrodes16)
    assert coarse_mesh.n_electrodes == 16
    assert coarse_mesh.mesh_width_h <= 1.496 * MESH_SLACK
    longest = coarse_mesh.edge_lengths().max()
    assert np.all(np.abs(coarse_mesh.electrode_lengths() - 2.8) <= longest)
    assert np.all(coarse_mesh.signed_areas > 0)
    assert boundary_is_closed_cycle(coarse_mesh)


def test_boundary_edges_lie_on_the_circle_and_cover_it(coarse_mesh):
    v = coarse_mesh.vertices[coarse_mesh.boundary_edges[:, 0]]
    assert np.allclose(np.hypot(v[:, 0], v[:, 1]), 14.0)
    ang = np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
    assert abs(abs(ang[-1] - ang[0]) + (2 * math.pi / len(v)) - 2 * math.pi) < 0.2


def test_electrode_runs_are_contiguous(coarse_mesh):
    tags = coarse_mesh.electrode_of_edge
    starts = [i for i in range(len(tags)) if tags[i] >= 0 and tags[i - 1] != tags[i]]
    assert len(starts) == 16


def test_total_area_approximates_disk(coarse_mesh):
    area = coarse_mesh.signed_areas.sum()
    assert area == pytest.approx(math.pi * 14**2, rel=0.01)


def test_minimal_two_electrode_unit_disk(unit_mesh, unit_electrodes):
    unit_mesh.validate(unit_electrodes)
    assert unit_mesh.n_electrodes == 2
    assert unit_mesh.mesh_width_h <= 0.5 * MESH_SLACK


def test_infeasible_layout_is_rejected():
    with pytest.raises(MeshError, match="do not fit"):
        build_disk_mesh(14.0, 1.496, ElectrodeConfig.uniform(16, 6.0, 0.005))


@pytest.mark.parametrize("h", [0.0, -1.0])
def test_degenerate_target_width(h):
    with pytest.raises(MeshError):
        build_disk_mesh(14.0, h, ElectrodeConfig.uniform(16, 2.8, 0.005))


def test_electrode_config_rejects_bad_values():
    with pytest.raises(MeshError):
        ElectrodeConfig.uniform(1, 1.0, 0.1)
    with pytest.raises(MeshError):
        ElectrodeConfig.uniform(4, 1.0, 0.0)
    with pytest.raises(MeshError):
        ElectrodeConfig(3, 1.0, (0.1, 0.1))


def test_text_round_trip(tmp_path, coarse_mesh):
    p = tmp_path / "mesh.txt"
    write_mesh(coarse_mesh, p)
    back = read_mesh(p)
    assert np.array_equal(back.vertices, coarse_mesh.vertices)
    assert np.array_equal(back.triangles, coarse_mesh.triangles)
    assert np.array_equal(back.boundary_edges, coarse_mesh.boundary_edges)
    assert np.array_equal(back.electrode_of_edge, coarse_mesh.electrode_of_edge)
    assert back.radius == coarse_mesh.radius


def test_malformed_file_reports_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# eit-mesh 1\nradius 1.0\nvertices 2\n0 0\nnot a number\n")
    with pytest.raises(MeshError, match=":5"):
        read_mesh(p)


@settings(max_examples=15, deadline=None)
@given(
    m=st.integers(2, 12),
    frac=st.floats(0.1, 0.8),
    radius=st.floats(0.5, 5.0),
    rel_h=st.floats(0.08, 0.4),
)
def test_generated_meshes_satisfy_invariants(m, frac, radius, rel_h):
    width = frac * 2 * math.pi * radius / m
    cfg = ElectrodeConfig.uniform(m, width, 0.1)
    h = rel_h * radius
    mesh = build_disk_mesh(radius, h, cfg)
    mesh.validate(cfg)
    assert mesh.mesh_width_h <= h * MESH_SLACK
    assert boundary_is_closed_cycle(mesh)
