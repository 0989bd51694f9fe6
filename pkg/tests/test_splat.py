import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tofgs import gradcheck, splat
from tofgs.scene import CameraModel, GaussianParams, init_random_in_frustum
from tofgs.splat import Splats2D, composite, project, render
from tofgs.tof import ToFConfig, quad_to_amplitude, quad_to_depth, quad_to_phasor

TOF5 = ToFConfig.for_range(5.0)


def one_gaussian(pos, log_scale=np.log(0.05), opacity_logit=0.0, refl=0.5):
    from tofgs import sh
    r = np.zeros((1, 16))
    r[0, 0] = sh.dc_for_value(refl)
    c = np.zeros((1, 16, 3))
    return GaussianParams(np.atleast_2d(pos).astype(float), np.full((1, 3), log_scale), np.array([[1.0, 0, 0, 0]]),
                          np.array([opacity_logit]), r, c)


def hand_splats(mean2d, depth, opacity, refl, var=0.04):
    m = len(depth)
    cov = np.zeros((m, 2, 2))
    cov[:, 0, 0] = cov[:, 1, 1] = var
    return Splats2D(np.asarray(mean2d, float), cov, np.asarray(depth, float), np.asarray(opacity, float),
                    np.asarray(refl, float), np.zeros((m, 3)), np.zeros((m, 3)))


CAM = CameraModel.from_fov(33, 33, 60.0, near=0.2, far=10.0)


def test_project_on_axis():
    z, s = 3.0, 0.05
    p = project(one_gaussian([0, 0, z], np.log(s)), CAM)
    sp = p.splats
    np.testing.assert_allclose(sp.mean2d[0], [CAM.cx, CAM.cy], atol=1e-12)
    expect = (CAM.fx * s / z) ** 2 + splat.DILATION
    np.testing.assert_allclose(sp.cov2d[0], np.diag([expect, expect]), atol=1e-12)


def test_project_depth_doubling_halves_std():
    a = project(one_gaussian([0, 0, 2.0]), CAM).splats.cov2d[0, 0, 0] - splat.DILATION
    b = project(one_gaussian([0, 0, 4.0]), CAM).splats.cov2d[0, 0, 0] - splat.DILATION
    assert np.sqrt(b) == pytest.approx(0.5 * np.sqrt(a), rel=1e-12)


def test_project_culling():
    assert len(project(one_gaussian([0, 0, 0.1]), CAM).splats) == 0
    assert len(project(one_gaussian([100.0, 0, 2.0]), CAM).splats) == 0


def test_euclidean_depth():
    pos = np.array([0.4, -0.3, 2.0])
    sp = project(one_gaussian(pos), CAM).splats
    assert sp.depth[0] == pytest.approx(np.linalg.norm(pos))


def test_empty_render_is_background():
    bgq = np.array([0.1, -0.2, 0.3, 0.4])
    b, _ = composite(Splats2D.empty(), CAM, TOF5, bg_quad=bgq)
    np.testing.assert_array_equal(b.quad, np.broadcast_to(bgq, b.quad.shape))
    assert np.all(b.final_transmittance == 1.0)


def test_single_opaque_splat_quad():
    # d = d_u / 2, s r / d^2 = 1, alpha = 1 at the pixel center
    d = 2.5
    cam = CameraModel.from_fov(3, 3, 60.0, near=0.1, far=10.0)
    sp = hand_splats([[1.5, 1.5]], [d], [1.0], [d * d])
    b, _ = composite(sp, cam, ToFConfig.for_range(5.0, 1.0), max_alpha=1.0)
    np.testing.assert_allclose(b.quad[1, 1], [0, -1, 0, 1], atol=1e-12)
    assert b.final_transmittance[1, 1] == 0.0


def test_two_splat_gap():
    cam = CameraModel.from_fov(3, 3, 60.0, near=0.1, far=10.0)
    # w1 = 0.5, w2 = (1 - 0.5) * 1 = 0.5; ToF weights 0.5 and 0.25, so r2 = 32 r1 balances 1/d^2
    sp = hand_splats([[1.5, 1.5], [1.5, 1.5]], [1.0, 4.0], [0.5, 1.0], [0.025, 0.8])
    b, _ = composite(sp, cam, TOF5, max_alpha=1.0)
    assert quad_to_depth(b.quad[1, 1], TOF5) == 0.0
    assert b.mean_depth[1, 1] == pytest.approx(2.5, abs=1e-12)
    assert b.depth_distortion[1, 1] == pytest.approx(4.5, abs=1e-12)


def test_opaque_splat_occludes_everything_behind():
    cam = CameraModel.from_fov(3, 3, 60.0, near=0.1, far=10.0)
    sp = hand_splats([[1.5, 1.5]] * 3, [1.0, 2.0, 3.0], [1.0, 0.9, 0.9], [0.5, 0.5, 0.5])
    b, _ = composite(sp, cam, TOF5, max_alpha=1.0)
    assert b.mean_depth[1, 1] == 1.0
    assert b.depth_distortion[1, 1] == 0.0


def random_scene(seed, n=30, size=16):
    rng = np.random.default_rng(seed)
    cam = CameraModel.from_fov(size, size, 60.0, near=0.2, far=6.0)
    s = init_random_in_frustum(cam, n, 0.3, rng_seed=seed, init_opacity=0.6)
    g = s.gaussians
    g.log_scale = g.log_scale + rng.normal(0, 0.3, g.log_scale.shape)
    g.rotation = rng.normal(size=g.rotation.shape)
    g.refl_sh[:, 1:] = rng.normal(0, 0.1, (n, 15))
    g.opacity_logit = rng.normal(0.5, 1.5, n)
    return g, cam


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_conservation_and_factor_two(seed):
    g, cam = random_scene(seed)
    b, _ = render(g, cam, TOF5, bg_quad=np.random.default_rng(seed).uniform(-1, 1, 4))
    assert np.abs(b.weight + b.final_transmittance - 1).max() < 1e-6
    # the 2s of the phasor channel is exactly the factor 2 of the quad difference
    assert np.abs(quad_to_phasor(b.quad) - b.phasor).max() < 1e-6
    assert np.abs(quad_to_amplitude(b.quad) - 0.5 * np.hypot(*np.moveaxis(b.phasor, -1, 0))).max() < 1e-6
    assert np.all((b.final_transmittance >= 0) & (b.final_transmittance <= 1))
    for name in splat.CHANNELS:
        assert np.all(np.isfinite(b.channel(name)))


def test_single_contributor_has_zero_distortion():
    g = one_gaussian([0, 0, 2.0], np.log(0.2), 3.0)
    b, _ = render(g, CAM, TOF5)
    assert np.all(b.depth_distortion == 0.0)


def test_duplicate_depth_order_invariance():
    a = hand_splats([[1.2, 1.5], [1.8, 1.5]], [2.0, 2.0], [0.5, 0.5], [0.3, 0.3], var=1.0)
    a.color = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    swapped = hand_splats([[1.8, 1.5], [1.2, 1.5]], [2.0, 2.0], [0.5, 0.5], [0.3, 0.3], var=1.0)
    swapped.color = np.array([[0, 1.0, 0], [1.0, 0, 0]])
    cam = CameraModel.from_fov(3, 3, 60.0, near=0.1, far=10.0)
    b1, _ = composite(a, cam, TOF5)
    b2, _ = composite(swapped, cam, TOF5)
    # only pixels where the two footprints are symmetric agree channel by channel; weights always do
    np.testing.assert_allclose(b1.weight, b2.weight, atol=1e-15)
    np.testing.assert_allclose(b1.mean_depth, b2.mean_depth, atol=1e-15)


def test_project_tie_break_is_index_order():
    g = GaussianParams.concat([one_gaussian([0.1, 0, 2.0]), one_gaussian([-0.1, 0, 2.0])])
    p = project(g, CAM)
    np.testing.assert_array_equal(p.order, [0, 1])


def test_single_splat_opacity_gradient():
    # N = 1 with the background scaled by T_N = 1 - alpha: dq/dalpha = q_1 - q_bg
    cam = CameraModel.from_fov(3, 3, 60.0, near=0.1, far=10.0)
    bgq = np.array([0.2, -0.4, 0.1, 0.3])

    def quad_at(o):
        b, ctx = composite(hand_splats([[1.5, 1.5]], [1.3], [o], [0.4]), cam, TOF5, bg_quad=bgq)
        return b.quad[1, 1], ctx

    a = 0.6
    q, ctx = quad_at(a)
    q1 = ctx.tof_payload[0, :4]
    analytic = q1 - bgq
    num = (quad_at(a + 1e-6)[0] - quad_at(a - 1e-6)[0]) / 2e-6
    np.testing.assert_allclose(num, analytic, rtol=1e-6)
    for k in range(4):
        gq = np.zeros((3, 3, 4))
        gq[1, 1, k] = 1.0
        lg = splat.composite_backward(ctx, {"quad": gq})
        assert lg.opacity[0] == pytest.approx(analytic[k], rel=1e-9)


def test_three_splat_fd_all_channels():
    cs = gradcheck.random_scene(5, n=3)
    errs = gradcheck.check_rasterizer(cs)
    assert max(errs.values()) < 1e-3, errs


def test_flow_depth_stop_gradient():
    cs = gradcheck.random_scene(1, n=3)
    anchor = render(cs.params, cs.cam, cs.tof)[0].mean_depth
    _, ctx = render(cs.params, cs.cam, cs.tof, flow_offsets=cs.flow, depth_anchor=anchor)
    g1 = splat.backward(ctx, {"flow": cs.weights["flow"]})
    g2 = splat.backward(ctx, {"flow": cs.weights["flow"], "mean_depth": np.zeros((8, 8))})
    # flow alone must not route gradient through the depth anchor: adding a zero depth
    # gradient changes nothing, and the flow gradient does not depend on the anchor's parameters
    for name in GaussianParams.field_names():
        np.testing.assert_array_equal(getattr(g1, name), getattr(g2, name))
    _, ctx_shift = render(cs.params, cs.cam, cs.tof, flow_offsets=cs.flow, depth_anchor=anchor)
    g3 = splat.backward(ctx_shift, {"flow": cs.weights["flow"]})
    np.testing.assert_array_equal(g1.opacity_logit, g3.opacity_logit)


def test_backward_rejects_unrendered_channel():
    cs = gradcheck.random_scene(0, n=2)
    _, ctx = render(cs.params, cs.cam, cs.tof, channels=["quad"])
    with pytest.raises(ValueError):
        splat.backward(ctx, {"color": np.ones((8, 8, 3))})


def test_channel_subset_matches_full_render():
    g, cam = random_scene(3)
    full, _ = render(g, cam, TOF5)
    part, _ = render(g, cam, TOF5, channels=["quad"], quad_phases=[2])
    np.testing.assert_array_equal(part.quad[..., 2], full.quad[..., 2])


def test_alpha_support_radius_never_cuts_contributions():
    g, cam = random_scene(9, n=60)
    b_ref, _ = render(g, cam, TOF5, tile=64)
    b_small, _ = render(g, cam, TOF5, tile=4)
    np.testing.assert_array_equal(b_ref.quad, b_small.quad)
