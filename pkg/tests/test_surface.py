import json
import math

import numpy as np
import pytest

from vesselcfd.errors import DiagnosticError, EmptyMeshError, FormatError
from vesselcfd.phantom import PhantomSpec, Shape, generate_phantom
from vesselcfd.surface import (INLET_BASE, OUTLET_BASE, TriangleMesh, diagnose, export_labeled, label_name,
                               marching_cubes, mesh_mask_dice, read_stl, taubin_smooth, voxelize_mesh, write_stl)
from vesselcfd.volume import VoxelVolume


def _tetra(shift=0.0):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float) + shift
    t = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(v, t)


def test_single_voxel_is_closed_sphere():
    mesh = marching_cubes(VoxelVolume.mask(np.ones((1, 1, 1))))
    d = diagnose(mesh)
    assert d.watertight
    assert d.euler_characteristic == 2
    assert mesh.signed_volume() > 0


def test_empty_mask_is_error():
    with pytest.raises(EmptyMeshError):
        marching_cubes(VoxelVolume.mask(np.zeros((3, 3, 3))))


def test_sphere_area_close_to_analytic():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.SPHERE, 4.0, spacing_mm=0.25))
    mesh = marching_cubes(vol)
    assert mesh.area() == pytest.approx(4 * math.pi * 16, rel=0.05)
    assert diagnose(mesh).watertight


def test_torus_genus_one():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.TORUS, 2.0, major_radius_mm=6.0, spacing_mm=0.5))
    assert diagnose(marching_cubes(vol)).euler_characteristic == 0


@pytest.mark.parametrize("seed", range(6))
def test_random_masks_are_manifold(seed):
    a = np.random.default_rng(seed).random((6, 6, 6)) > 0.5
    mesh = marching_cubes(VoxelVolume.mask(a))
    d = diagnose(mesh)
    assert d.boundary_edges == 0 and d.non_manifold_edges == 0
    assert mesh.signed_volume() > 0


def test_mesh_revoxelizes_to_source():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.BIFURCATION, 1.5, 16.0, spacing_mm=0.25))
    assert mesh_mask_dice(vol) >= 0.95


def test_voxelize_closed_unit_cube_mesh():
    a = np.zeros((6, 6, 6))
    a[1:5, 1:5, 1:5] = 1
    vol = VoxelVolume.mask(a)
    back = voxelize_mesh(marching_cubes(vol, relax_iterations=0), vol)
    np.testing.assert_array_equal(back.data, vol.data)


def test_taubin_identity_and_topology():
    a = np.zeros((6, 6, 6))
    a[1:5, 1:5, 1:5] = 1
    mesh = marching_cubes(VoxelVolume.mask(a))
    same = taubin_smooth(mesh, 0)
    np.testing.assert_array_equal(same.vertices, mesh.vertices)
    assert diagnose(taubin_smooth(mesh, 10)).euler_characteristic == 2


def test_taubin_keeps_sphere_volume():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.SPHERE, 3.0, spacing_mm=0.25))
    mesh = marching_cubes(vol)
    smooth = taubin_smooth(mesh, 10)
    assert smooth.signed_volume() == pytest.approx(mesh.signed_volume(), rel=0.02)


def test_taubin_rejects_open_mesh():
    m = _tetra()
    m = TriangleMesh(m.vertices, m.triangles[:3])
    with pytest.raises(DiagnosticError):
        taubin_smooth(m)


def test_deleted_triangle_leaves_three_boundary_edges():
    mesh = marching_cubes(VoxelVolume.mask(np.ones((2, 2, 2))))
    cut = TriangleMesh(mesh.vertices, mesh.triangles[1:])
    d = diagnose(cut)
    assert d.boundary_edges == 3
    assert not d.watertight


def test_interpenetrating_tetrahedra_self_intersect():
    a, b = _tetra(), _tetra(0.3)
    both = TriangleMesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.triangles, b.triangles + 4]))
    assert diagnose(both).self_intersections > 0
    assert diagnose(a).self_intersections == 0


def test_stl_round_trip(tmp_path):
    vol, _, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 1.0, 6.0, spacing_mm=0.5))
    mesh = marching_cubes(vol)
    write_stl(mesh, tmp_path / "m.stl")
    back = read_stl(tmp_path / "m.stl")
    assert back.n_triangles == mesh.n_triangles
    assert back.signed_volume() == pytest.approx(mesh.signed_volume(), rel=1e-5)


def test_empty_stl(tmp_path):
    (tmp_path / "e.stl").write_bytes(b"\0" * 80 + (0).to_bytes(4, "little"))
    assert read_stl(tmp_path / "e.stl").n_triangles == 0


def test_ascii_stl_rejected(tmp_path):
    (tmp_path / "a.stl").write_text("solid x\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\n"
                                    "vertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid x\n")
    with pytest.raises(FormatError):
        read_stl(tmp_path / "a.stl")


def test_truncated_stl_rejected(tmp_path):
    (tmp_path / "t.stl").write_bytes(b"\0" * 80 + (5).to_bytes(4, "little") + b"\0" * 60)
    with pytest.raises(FormatError):
        read_stl(tmp_path / "t.stl")


def test_label_names():
    assert label_name(0) == "wall"
    assert label_name(INLET_BASE) == "inlet-0"
    assert label_name(OUTLET_BASE + 2) == "outlet-2"


def test_export_labeled_ranges(tmp_path):
    m = _tetra()
    m.labels = np.array([OUTLET_BASE, 0, INLET_BASE, 0], np.int32)
    info = export_labeled(m, tmp_path / "d.stl")
    assert info["ranges"] == {"wall": [0, 2], "inlet-0": [2, 3], "outlet-0": [3, 4]}
    on_disk = json.loads((tmp_path / "d.labels.json").read_text())
    assert on_disk == info
    assert read_stl(tmp_path / "d.stl").n_triangles == 4
