import numpy as np
import pytest

import oracles
from vesselcfd.phantom import PhantomSpec, Shape, generate_phantom
from vesselcfd.topology import TopologyPolicy, betti_numbers, connected_components, euler_characteristic, vta_check
from vesselcfd.volume import VoxelVolume


def test_two_cubes_give_two_components():
    a = np.zeros((6, 6, 6), bool)
    a[0:2, 0:2, 0:2] = True
    a[4:6, 4:6, 4:6] = True
    labels, sizes = connected_components(VoxelVolume.mask(a))
    assert sizes == [8, 8]
    assert labels.data.max() == 2


def test_empty_mask_has_no_components():
    _, sizes = connected_components(VoxelVolume.mask(np.zeros((3, 3, 3))))
    assert sizes == []


def test_diagonal_pair_depends_on_connectivity():
    a = np.zeros((3, 3, 3), bool)
    a[0, 0, 1] = a[1, 1, 1] = True
    assert len(connected_components(a, 6)[1]) == 2
    assert len(connected_components(a, 26)[1]) == 1


def test_labels_are_canonical():
    a = np.zeros((5, 1, 1), bool)
    a[0] = a[2] = a[4] = True
    labels, _ = connected_components(a)
    assert labels.data.ravel().tolist() == [1, 0, 2, 0, 3]


def test_solid_cube():
    b = betti_numbers(np.ones((3, 3, 3)))
    assert b.as_tuple() == (1, 0, 0)
    assert b.euler == 1


def test_hollow_cube_shell():
    a = np.ones((5, 5, 5), bool)
    a[1:4, 1:4, 1:4] = False
    b = betti_numbers(a)
    assert b.as_tuple() == (1, 0, 1)
    assert b.euler == 2


def test_torus_phantom():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.TORUS, 2.0, major_radius_mm=8.0, spacing_mm=0.5))
    b = betti_numbers(vol)
    assert b.as_tuple() == (1, 1, 0)
    assert euler_characteristic(vol) == 0


def test_small_ring_matches_oracle():
    a = np.zeros((4, 4, 1), bool)
    a[0, :] = a[3, :] = a[:, 0] = a[:, 3] = True
    assert betti_numbers(a).as_tuple() == oracles.cubical_betti(a) == (1, 1, 0)


@pytest.mark.parametrize("seed", range(40))
def test_random_masks_match_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, size=3))
    a = rng.random(shape) < rng.uniform(0.2, 0.8)
    assert betti_numbers(a).as_tuple() == oracles.cubical_betti(a)


def test_vta_verdicts():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 1.0, 8.0, spacing_mm=0.5))
    assert vta_check(vol).vta == 1
    shell = np.ones((5, 5, 5), bool)
    shell[2, 2, 2] = False
    v = vta_check(shell)
    assert v.vta == 0 and v.reasons == ["b2=1"]
    ring = np.zeros((4, 4, 1), bool)
    ring[0, :] = ring[3, :] = ring[:, 0] = ring[:, 3] = True
    assert vta_check(ring).reasons == ["b1=1"]
    assert vta_check(ring, TopologyPolicy(max_loops=1)).vta == 1


def test_empty_mask_verdict():
    v = vta_check(np.zeros((3, 3, 3)))
    assert v.vta == 0 and v.reasons == ["empty"]
