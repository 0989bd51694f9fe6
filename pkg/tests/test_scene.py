import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tofgs import sh
from tofgs.io import FormatError
from tofgs.scene import (CameraModel, CanonicalScene, Gaussian, covariance_of, eval_reflectivity,
                         init_random_in_frustum, quat_to_rotmat)
from tofgs.tof import ToFConfig


def make_gaussian(log_scale=(0, 0, 0), rotation=(1, 0, 0, 0), refl=None):
    r = np.zeros(16) if refl is None else np.asarray(refl, float)
    return Gaussian(np.zeros(3), np.asarray(log_scale, float), np.asarray(rotation, float), 0.0, r,
                    np.zeros((16, 3)))


def test_identity_covariance():
    np.testing.assert_allclose(covariance_of(make_gaussian()), np.eye(3), atol=1e-15)


def test_z_rotation_swaps_axes():
    a, b, c = 0.5, 2.0, 3.0
    q = (np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
    cov = covariance_of(make_gaussian(np.log([a, b, c]), q))
    np.testing.assert_allclose(cov, np.diag([b * b, a * a, c * c]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(ls=st.lists(st.floats(-3, 2), min_size=3, max_size=3),
       q=st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_covariance_eigenvalues(ls, q):
    cov = covariance_of(make_gaussian(ls, q))
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    ev = np.sort(np.linalg.eigvalsh(cov))
    np.testing.assert_allclose(ev, np.sort(np.exp(2 * np.array(ls))), rtol=1e-9, atol=1e-12)


def test_rotmat_orthonormal():
    q = np.random.default_rng(0).normal(size=(20, 4))
    R = quat_to_rotmat(q / np.linalg.norm(q, axis=1, keepdims=True))
    np.testing.assert_allclose(R @ np.transpose(R, (0, 2, 1)), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0)


def _dirs(n=50, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_reflectivity_constant_sh():
    r = np.zeros(16)
    r[0] = 0.37 / sh.C0
    assert sh.dc_for_value(0.37) == r[0]
    np.testing.assert_allclose(eval_reflectivity(make_gaussian(refl=r), _dirs()), 0.37, atol=1e-12)


def test_reflectivity_clamps():
    r = np.zeros(16)
    r[0] = -50.0
    assert np.all(eval_reflectivity(make_gaussian(refl=r), _dirs()) == 0.0)
    r[0] = 50.0
    assert np.all(eval_reflectivity(make_gaussian(refl=r), _dirs()) == 1.0)


def test_reflectivity_degree1_asymmetry():
    r = np.zeros(16)
    r[0] = sh.dc_for_value(0.5)
    r[2] = 0.3              # Y_1^0 ~ z
    g = make_gaussian(refl=r)
    up = eval_reflectivity(g, np.array([0, 0, 1.0]))
    down = eval_reflectivity(g, np.array([0, 0, -1.0]))
    # hand evaluation: 0.5 +/- C1 * 0.3
    assert up == pytest.approx(0.5 + sh.C1 * 0.3, abs=1e-12)
    assert down == pytest.approx(0.5 - sh.C1 * 0.3, abs=1e-12)


CAM = CameraModel.from_fov(64, 48, 60.0, near=0.5, far=4.0)


def test_frustum_membership_and_reflectivity():
    s = init_random_in_frustum(CAM, 3000, 0.1, rng_seed=3)
    uv, z = CAM.project(s.gaussians.position)
    assert np.all((z >= CAM.near - 1e-9) & (z <= CAM.far + 1e-9))
    assert np.all((uv[:, 0] >= 0) & (uv[:, 0] <= CAM.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= CAM.height))
    refl = eval_reflectivity(s.gaussians, _dirs(3000))
    np.testing.assert_allclose(refl, 0.1, atol=1e-12)
    assert np.all(s.gaussians.refl_sh[:, 1:] == 0)


def test_frustum_init_deterministic():
    a = init_random_in_frustum(CAM, 100, 0.1, rng_seed=7)
    b = init_random_in_frustum(CAM, 100, 0.1, rng_seed=7)
    for k, v in a.gaussians.as_dict().items():
        assert np.array_equal(v, b.gaussians.as_dict()[k])


def test_frustum_init_rejects_bad_input():
    with pytest.raises(ValueError):
        init_random_in_frustum(CAM, 0)
    with pytest.raises(ValueError):
        init_random_in_frustum(CAM, 10, init_reflectivity=1.5)


def test_frustum_volume_ratio_chi_square():
    n = 10_000
    s = init_random_in_frustum(CAM, n, rng_seed=11)
    z = CAM.project(s.gaussians.position)[1]
    mid = 0.5 * (CAM.near + CAM.far)
    # frustum slab volume grows like z^3
    v_near = mid ** 3 - CAM.near ** 3
    v_far = CAM.far ** 3 - mid ** 3
    expected = n * np.array([v_near, v_far]) / (v_near + v_far)
    observed = np.array([(z < mid).sum(), (z >= mid).sum()])
    assert stats.chisquare(observed, expected).pvalue > 1e-3


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel.from_fov(8, 8, 60.0, near=2.0, far=1.0)


def test_background_range_enforced():
    s = init_random_in_frustum(CAM, 4)
    with pytest.raises(ValueError):
        CanonicalScene(s.gaussians, bg_quad=np.array([0, 0, 2.0, 0]))


def test_scene_checkpoint_round_trip(tmp_path):
    s = init_random_in_frustum(CAM, 50, 0.1, rng_seed=1, tof=ToFConfig.for_range(7.5, 2.0))
    s.bg_quad = np.array([0.25, -0.5, 0.0, 1.0])
    s.save(tmp_path / "s.ckpt", extra={"note": 1})
    t, extra = CanonicalScene.load(tmp_path / "s.ckpt")
    assert extra == {"note": 1}
    for k, v in s.gaussians.as_dict().items():
        np.testing.assert_array_equal(t.gaussians.as_dict()[k], v.astype(np.float32).astype(np.float64))
    assert t.tof == s.tof
    np.testing.assert_array_equal(t.bg_quad, s.bg_quad)
    (tmp_path / "bad.ckpt").write_bytes(b"garbage\n")
    with pytest.raises(FormatError):
        CanonicalScene.load(tmp_path / "bad.ckpt")
