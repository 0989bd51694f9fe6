import numpy as np
import pytest

from tofgs import dataset, synthcam
from tofgs.scene import CameraModel
from tofgs.synthcam import (AnalyticScene, Box, CaptureSpec, LinearTrack, Plane, Primitive, Sphere, amplitude_map,
                            gt_flow, naive_depth, raycast, simulate_raw_frame)
from tofgs.tof import ToFConfig, quad_to_amplitude, quad_to_depth, synthesize_quad

CAM = CameraModel.from_fov(33, 25, 60.0, near=0.1, far=10.0)
CENTER = (12, 16)


def plane(z, refl=0.5, motion=None):
    p = Primitive(Plane(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, -1.0])), refl)
    if motion is not None:
        p.motion = motion
    return p


def spec_for(cam, **kw):
    return CaptureSpec(width=cam.width, height=cam.height, **kw)


def test_raycast_plane():
    rc = raycast(AnalyticScene([plane(2.0)]), CAM, 0.0)
    assert rc.hit.all()
    assert rc.depth[CENTER] == pytest.approx(2.0, abs=1e-12)
    for corner in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
        assert rc.depth[corner] > 2.0
    # Euclidean distance: z / cos of the ray angle
    dirs = CAM.pixel_rays()
    np.testing.assert_allclose(rc.depth * dirs[..., 2], 2.0, atol=1e-12)


def test_raycast_empty_and_sphere():
    rc = raycast(AnalyticScene([]), CAM, 0.0)
    assert not rc.hit.any() and np.all(np.isinf(rc.depth))
    rc = raycast(AnalyticScene([Primitive(Sphere(np.array([0, 0, 3.0]), 1.0))]), CAM, 0.0)
    assert rc.depth[CENTER] == pytest.approx(2.0, abs=1e-12)
    assert not rc.hit[0, 0]


def test_raycast_nearest_primitive_wins():
    box = Primitive(Box(np.array([0, 0, 1.5]), np.full(3, 0.2)), 0.9)
    rc = raycast(AnalyticScene([plane(3.0), box]), CAM, 0.0)
    assert rc.primitive[CENTER] == 1
    assert rc.depth[CENTER] == pytest.approx(1.3, abs=1e-12)
    assert rc.reflectivity[CENTER] == 0.9


def test_static_round_trip():
    spec = spec_for(CAM, duration=4 / 120)
    scene = AnalyticScene([plane(3.0, 0.3), Primitive(Sphere(np.array([0.2, 0, 1.8]), 0.4), 0.7)], ambient=0.25)
    frames = np.stack([simulate_raw_frame(scene, CAM, spec, k) for k in range(4)])
    rc = raycast(scene, CAM, 0.0)
    d = naive_depth(frames, spec, 0)
    assert np.abs(d - rc.depth)[rc.hit].max() < 1e-6


def test_energy_identity():
    spec = spec_for(CAM)
    scene = synthcam.two_reflectivity(spec, CAM)
    rc = raycast(scene, CAM, 0.0)
    a = amplitude_map(rc, spec)
    back = a * rc.depth ** 2 / spec.tof.source_intensity
    np.testing.assert_allclose(back[rc.hit], rc.reflectivity[rc.hit], rtol=1e-12)


def test_halved_reflectivity_halves_amplitude():
    spec = spec_for(CAM, duration=4 / 120)
    q = [np.stack([simulate_raw_frame(AnalyticScene([plane(2.2, r)]), CAM, spec, k) for k in range(4)], -1)
         for r in (0.6, 0.3)]
    np.testing.assert_allclose(quad_to_amplitude(q[1]), 0.5 * quad_to_amplitude(q[0]), rtol=1e-12)
    np.testing.assert_allclose(quad_to_depth(q[1], spec.tof), quad_to_depth(q[0], spec.tof), atol=1e-12)


def test_frozen_scene_matches_single_time_capture():
    spec = spec_for(CAM, duration=8 / 120, tof=ToFConfig.for_range(5.0, 2.0))
    scene = synthcam.sliding_cube(spec, CAM)
    for p in scene.primitives:
        p.motion = LinearTrack(np.zeros(3))
    rc = raycast(scene, CAM, 0.0)
    expect = synthesize_quad(np.where(rc.hit, rc.depth, 0.0), amplitude_map(rc, spec), spec.tof, 0.0)
    for i in range(2):
        got = np.stack([simulate_raw_frame(scene, CAM, spec, 4 * i + m) for m in range(4)], -1)
        np.testing.assert_allclose(got, expect, atol=1e-12)


def test_motion_causes_edge_artifacts():
    spec = spec_for(CAM, duration=8 / 120)
    moving = synthcam.sliding_cube(spec, CAM)
    frames = np.stack([simulate_raw_frame(moving, CAM, spec, k) for k in range(8)])
    rc = raycast(moving, CAM, synthcam.capture_time(4, spec))
    err = np.abs(naive_depth(frames, spec, 1) - rc.depth)[rc.hit]
    assert err.max() > 0.1
    # interior of the wall far from the cube is unaffected
    assert np.median(err) < 1e-6


def test_wrap_at_range_plus_one():
    tof = ToFConfig.for_range(5.0, 4.0)
    spec = spec_for(CAM, duration=4 / 120, tof=tof)
    scene = AnalyticScene([plane(6.0)])
    frames = np.stack([simulate_raw_frame(scene, CAM, spec, k) for k in range(4)])
    d = naive_depth(frames, spec, 0)
    assert d[CENTER] == pytest.approx(1.0, abs=1e-6)
    rc = raycast(scene, CAM, 0.0)
    assert np.abs(d - (rc.depth - 5.0)).max() < 1e-6


def test_flow_static_is_zero():
    f, valid = gt_flow(AnalyticScene([plane(2.0)]), CAM, 0.0, 0.1)
    assert valid.all()
    np.testing.assert_allclose(f, 0.0, atol=1e-9)


def test_flow_lateral_translation_uniform():
    v, z, dt = 0.3, 2.0, 1 / 30
    scene = AnalyticScene([plane(z, motion=LinearTrack(np.array([v, 0.0, 0.0])))])
    f, valid = gt_flow(scene, CAM, 0.0, dt)
    assert valid.all()
    np.testing.assert_allclose(f[..., 0], CAM.fx * v * dt / z, atol=1e-10)
    np.testing.assert_allclose(f[..., 1], 0.0, atol=1e-10)


def test_flow_axial_expands_radially():
    z, dz = 3.0, 0.3
    scene = AnalyticScene([plane(z, motion=LinearTrack(np.array([0.0, 0.0, -dz])))])
    f, valid = gt_flow(scene, CAM, 0.0, 1.0)
    u, vv = CAM.pixel_centers()
    gain = z / (z - dz) - 1
    np.testing.assert_allclose(f[..., 0], (u - CAM.cx) * gain, atol=1e-9)
    np.testing.assert_allclose(f[..., 1], (vv - CAM.cy) * gain, atol=1e-9)


def test_flow_invalid_where_hit_is_lost():
    box = Primitive(Box(np.array([0, 0, 2.0]), np.full(3, 0.2)), 0.5, motion=LinearTrack(np.array([5.0, 0, 0])))
    f, valid = gt_flow(AnalyticScene([box]), CAM, 0.0, 1.0)
    assert not valid.any() and np.all(f == 0)


def test_presets_and_scene_from_dict():
    spec = spec_for(CAM)
    for name in synthcam.PRESETS:
        s = synthcam.scene_from_dict({"preset": name}, spec, CAM)
        assert raycast(s, CAM, 0.0).hit.any()
    s = synthcam.scene_from_dict({"primitives": [
        {"shape": "sphere", "center": [0, 0, 3], "radius": 1.0, "reflectivity": 0.4,
         "motion": {"type": "linear", "velocity": [0, 0, 1]}}]}, spec, CAM)
    assert raycast(s, CAM, 1.0).depth[CENTER] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        synthcam.scene_from_dict({"preset": "nope"}, spec, CAM)
    with pytest.raises(ValueError):
        Primitive(Sphere(np.zeros(3), 1.0), reflectivity=1.5)


def test_sliding_cube_speed_in_pixels():
    spec = spec_for(CAM)
    s = synthcam.sliding_cube(spec, CAM, px_per_frame=2.0)
    cube = s.primitives[1]
    dx = cube.motion.offset(1 / spec.raw_fps)[0]
    assert CAM.fx * dx / 2.0 == pytest.approx(2.0)


def test_noise_is_seeded():
    spec = spec_for(CAM, noise_std=0.01, seed=4)
    scene = AnalyticScene([plane(2.0)])
    a = simulate_raw_frame(scene, CAM, spec, 3)
    b = simulate_raw_frame(scene, CAM, spec, 3)
    np.testing.assert_array_equal(a, b)
    clean = simulate_raw_frame(scene, CAM, spec_for(CAM), 3)
    assert 0.005 < np.std(a - clean) < 0.02


def test_export_matches_in_memory(tmp_path):
    spec = spec_for(CameraModel.from_fov(12, 9, 60.0, near=0.5, far=4.0), duration=12 / 120)
    cam = synthcam.default_camera(spec)
    scene = synthcam.sliding_cube(spec, cam)
    synthcam.export_dataset(scene, cam, spec, tmp_path, with_color=True)
    disk = dataset.load(tmp_path)
    mem = dataset.simulate(scene, cam, spec, with_color=True)
    np.testing.assert_array_equal(disk.raw, mem.raw.astype(np.float32))
    for name in ("flow_fwd", "flow_bwd", "gt_depth", "color"):
        np.testing.assert_array_equal(getattr(disk, name), getattr(mem, name).astype(np.float32))
    np.testing.assert_array_equal(disk.flow_fwd_valid[:-1], mem.flow_fwd_valid[:-1])
    np.testing.assert_array_equal(disk.gt_mask, mem.gt_mask)
    assert disk.tof == mem.tof and disk.cam.to_dict() == mem.cam.to_dict()


def test_export_error_has_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    spec = spec_for(CAM, duration=4 / 120)
    with pytest.raises(OSError, match="file"):
        synthcam.export_dataset(AnalyticScene([plane(2.0)]), CAM, spec, blocker / "out")
