import numpy as np
import pytest

from tactile_recon.errors import MetricError
from tactile_recon.geometry import PointCloud, quat_from_axis_angle, quat_to_matrix, random_quaternion
from tactile_recon.metrics import (
    PoseGT, adi_error, chamfer_distance, earth_mover_distance, hausdorff_distance, nearest_brute, nearest_kdtree,
)
from tactile_recon.rng import make_rng

from oracles import brute_cd, brute_emd, brute_hd


def test_hand_values():
    assert chamfer_distance([[0, 0, 0]], [[3, 4, 0]]) == 10.0
    assert hausdorff_distance([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]) == 1.0
    assert earth_mover_distance([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [0, 1, 0]]) == pytest.approx(np.sqrt(2) / 2)


def test_identical_clouds_are_zero():
    p = make_rng(0).normal(size=(20, 3))
    assert chamfer_distance(p, p) == 0 and hausdorff_distance(p, p) == 0 and earth_mover_distance(p, p) == 0


def test_empty_cloud_rejected():
    with pytest.raises(MetricError):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])


def test_cd_hd_match_brute_force():
    rng = make_rng(1)
    for _ in range(50):
        a = rng.normal(size=(rng.integers(1, 17), 3))
        b = rng.normal(size=(rng.integers(1, 17), 3))
        assert chamfer_distance(a, b) == pytest.approx(brute_cd(a, b), abs=1e-12)
        assert hausdorff_distance(a, b) == pytest.approx(brute_hd(a, b), abs=1e-12)


def test_emd_matches_permutation_brute_force():
    rng = make_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        assert earth_mover_distance(a, b) == pytest.approx(brute_emd(a, b), abs=1e-12)


def test_emd_size_cap():
    with pytest.raises(MetricError, match="subsample"):
        earth_mover_distance(np.zeros((600, 3)), np.ones((600, 3)))


def test_kdtree_and_brute_paths_agree_including_ties():
    rng = make_rng(3)
    ref = np.round(rng.random((500, 3)) * 4) / 4  # many duplicate points produce ties
    q = np.round(rng.random((400, 3)) * 4) / 4
    d1, i1 = nearest_brute(q, ref)
    d2, i2 = nearest_kdtree(q, ref)
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    np.testing.assert_array_equal(i1, i2)


def test_symmetry_and_rigid_invariance():
    rng = make_rng(4)
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    R = quat_to_matrix(random_quaternion(rng))
    t = rng.normal(size=3)
    for f in (chamfer_distance, hausdorff_distance, earth_mover_distance):
        assert f(a, b) == pytest.approx(f(b, a), abs=1e-12)
        assert f(a @ R.T + t, b @ R.T + t) == pytest.approx(f(a, b), abs=1e-9)


def test_emd_dominates_one_sided_chamfer():
    rng = make_rng(5)
    for _ in range(20):
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        one_sided = np.linalg.norm(a[:, None] - b[None], axis=2).min(1).mean()
        assert earth_mover_distance(a, b) >= one_sided - 1e-12


def test_adi_cases():
    I = np.array([1.0, 0, 0, 0])
    model = make_rng(6).normal(size=(50, 3))
    assert adi_error(model, PoseGT(I, np.zeros(3), I, np.zeros(3))) == 0.0
    delta = np.array([0.3, -0.4, 1.2])
    assert adi_error([[1.0, 2, 3]], PoseGT(I, np.zeros(3), I, delta)) == pytest.approx(np.linalg.norm(delta))


def test_adi_tolerates_rotation_about_symmetry_axis():
    # cylinder r = 0.05 sampled on a fine angular lattice: a spin about z moves
    # every point onto the lattice circle, at most half an arc step from a neighbour
    r, m = 0.05, 3600
    th = np.arange(m) * 2 * np.pi / m
    z = np.linspace(0, 0.2, 10)
    cyl = np.array([[r * np.cos(a), r * np.sin(a), h] for h in z for a in th])
    I = np.array([1.0, 0, 0, 0])
    spin = quat_from_axis_angle([0, 0, 1], 0.7)
    half_arc = r * np.pi / m
    adi = adi_error(cyl, PoseGT(I, np.zeros(3), spin, np.zeros(3)))
    assert adi <= half_arc + 1e-12
    assert adi < 1e-3 * 2 * r
    tilt = quat_from_axis_angle([1, 0, 0], 0.7)
    assert adi_error(cyl, PoseGT(I, np.zeros(3), tilt, np.zeros(3))) > 1e-2


def test_point_cloud_inputs_accepted():
    a = PointCloud(np.zeros((1, 3)))
    assert chamfer_distance(a, PointCloud(np.array([[3.0, 4, 0]]))) == 10.0
