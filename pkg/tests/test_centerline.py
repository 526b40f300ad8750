import math

import numpy as np
import pytest

import oracles
from vesselcfd.centerline import (CenterlineGraph, Cut, CutPlan, Role, build_flow_domain, distance_transform,
                                  plan_cuts, skeletonize)
from vesselcfd.errors import CutFailureError, DomainSplitError, PreconditionError
from vesselcfd.phantom import PhantomSpec, Shape, generate_phantom
from vesselcfd.topology import betti_numbers
from vesselcfd.volume import VoxelVolume


def _path_graph(n, step=1.0, radii=None):
    pos = np.c_[np.zeros(n), np.zeros(n), np.arange(n) * step]
    r = np.ones(n) if radii is None else radii
    return CenterlineGraph(pos, r, np.c_[np.arange(n - 1), np.arange(1, n)])


@pytest.mark.parametrize("seed", range(8))
def test_distance_transform_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(3, 10, size=3))
    a = rng.random(shape) < 0.7
    sp = tuple(rng.uniform(0.3, 1.5, size=3))
    got = distance_transform(VoxelVolume.mask(a, sp)).data
    np.testing.assert_allclose(got, oracles.brute_edt(a, sp), atol=1e-12)


def test_distance_on_tube_axis_and_surface():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 2.0, 20.0, spacing_mm=0.25))
    d = distance_transform(vol).data
    assert abs(d.max() - 2.0) <= 0.25
    a = vol.data.astype(bool)
    from scipy import ndimage as ndi
    surface = a & ~ndi.binary_erosion(a)
    assert d[surface].max() <= 0.25 + 1e-12


def test_straight_tube_skeleton_follows_axis():
    vol, axis, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 2.0, 20.0, spacing_mm=0.5))
    g = skeletonize(vol)
    assert len(g.endpoints) == 2 and g.branch_points == []
    # Axis is the z line through the phantom graph's x, y.
    off = np.linalg.norm(g.positions[:, :2] - axis.positions[0, :2], axis=1)
    assert off.mean() <= 0.5


def test_bifurcation_skeleton():
    vol, _, facts = generate_phantom(PhantomSpec(Shape.BIFURCATION, 1.5, 20.0, spacing_mm=0.25))
    g = skeletonize(vol)
    assert len(g.endpoints) == facts.open_ends == 3
    assert len(g.branch_points) == 1


def test_torus_skeleton_is_a_cycle():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.TORUS, 2.0, major_radius_mm=8.0, spacing_mm=0.5))
    g = skeletonize(vol)
    assert g.endpoints == []
    assert g.n_components() == 1 and g.cycle_rank() == 1


@pytest.mark.parametrize("shape, kw", [
    (Shape.STRAIGHT_TUBE, {}),
    (Shape.CURVED_TUBE, {}),
    (Shape.BIFURCATION, {}),
    (Shape.TUBE_WITH_ANEURYSM, {"aneurysm_radius_mm": 2.5}),
])
def test_skeleton_preserves_topology_and_open_ends(shape, kw):
    vol, _, facts = generate_phantom(PhantomSpec(shape, 1.5, 20.0, spacing_mm=0.25, **kw))
    g = skeletonize(vol, prune=False)
    b = betti_numbers(vol)
    assert (g.n_components(), g.cycle_rank()) == (b.b0, b.b1)
    assert len(skeletonize(vol).endpoints) == facts.open_ends


def test_skeletonize_needs_one_component():
    a = np.zeros((8, 8, 8))
    a[1:3, 1:3, 1:3] = a[5:7, 5:7, 5:7] = 1
    with pytest.raises(PreconditionError):
        skeletonize(VoxelVolume.mask(a))


def test_cut_at_one_fifth_of_each_branch():
    # 40 mm unbranched path: each end's branch runs to the midpoint, L = 20 mm.
    g = _path_graph(81, 0.5)
    plan = plan_cuts(g)
    zs = sorted(c.point[2] for c in plan.cuts)
    assert zs == pytest.approx([4.0, 36.0])
    assert all(c.branch_length_mm == pytest.approx(20.0) for c in plan.cuts)
    # Normals point out of the domain, towards their own endpoint.
    for c in plan.cuts:
        assert np.sign(c.normal[2]) == (-1 if c.point[2] < 20 else 1)


def test_thin_tip_retracts_proximally():
    r = np.ones(41)
    r[:7] = 0.2
    plan = plan_cuts(_path_graph(41, 1.0, r))
    near = next(c for c in plan.cuts if c.endpoint == 0)
    assert near.node == 7 and near.radius_mm >= 0.3


def test_short_branch_is_cut_failure():
    pos = np.array([[0, 0, z] for z in range(12)] + [[1, 0, 6], [2, 0, 6]], float)
    edges = [[i, i + 1] for i in range(11)] + [[6, 12], [12, 13]]
    g = CenterlineGraph(pos, np.ones(len(pos)), edges)
    with pytest.raises(CutFailureError):
        plan_cuts(g)


def test_fewer_than_two_endpoints():
    with pytest.raises(PreconditionError):
        plan_cuts(CenterlineGraph(np.zeros((1, 3)), [1.0]))


def test_inlet_is_widest_end_independent_of_order():
    r = np.ones(41)
    r[30:] = 1.5
    g = _path_graph(41, 1.0, r)
    plan = plan_cuts(g)
    assert plan.inlet.endpoint == 40
    # Reversed node numbering: same physical end wins.
    perm = np.arange(41)[::-1]
    g2 = CenterlineGraph(g.positions[perm], g.radii[perm], g.edges)
    assert plan_cuts(g2).inlet.point == pytest.approx(plan.inlet.point)


def test_tube_domain_inlet_area():
    vol, axis, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 2.0, 20.0, spacing_mm=0.25))
    g = skeletonize(vol)
    dom = build_flow_domain(vol, plan_cuts(g), g)
    assert len(dom.patches) == 2 and len(dom.outlets) == 1
    assert dom.inlet.area_mm2(vol.spacing) == pytest.approx(math.pi * 4.0, rel=0.10)
    assert len(dom.wall_faces) > 0


def test_bifurcation_domain_has_two_outlets():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.BIFURCATION, 1.5, 20.0, spacing_mm=0.25))
    g = skeletonize(vol)
    dom = build_flow_domain(vol, plan_cuts(g), g)
    assert len(dom.outlets) == 2
    assert dom.inlet.code == 100 and sorted(p.code for p in dom.outlets) == [200, 201]


def test_domain_faces_partition_fluid_boundary():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.CURVED_TUBE, 1.5, 20.0, spacing_mm=0.25))
    g = skeletonize(vol)
    dom = build_flow_domain(vol, plan_cuts(g), g)
    f = dom.fluid.data.astype(bool)
    total = sum(int((f & ~np.roll(np.pad(f, 1), -s, axis=ax)[1:-1, 1:-1, 1:-1]).sum())
                for ax in range(3) for s in (1, -1))
    sets = [set(map(tuple, p.faces)) for p in dom.patches] + [set(map(tuple, dom.wall_faces))]
    assert sum(len(s) for s in sets) == total
    assert len(set().union(*sets)) == total


def test_plane_missing_mask_is_domain_split():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 1.0, 8.0, spacing_mm=0.5))
    far = (100.0, 100.0, 100.0)
    plan = CutPlan((Cut(0, 0, far, (0, 0, -1), 1.0, Role.INLET, 1.0),
                    Cut(1, 1, (100.0, 100.0, 200.0), (0, 0, 1), 1.0, Role.OUTLET, 1.0)))
    with pytest.raises(DomainSplitError):
        build_flow_domain(vol, plan)


def test_cut_plan_needs_one_inlet():
    c = Cut(0, 0, (0, 0, 0), (0, 0, 1), 1.0, Role.OUTLET, 1.0)
    with pytest.raises(PreconditionError):
        CutPlan((c, c))
