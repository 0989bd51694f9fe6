"""Differentiable C-ToF Gaussian rasterizer.

``render`` projects Gaussians (EWA), sorts them by distance to the optical
center and composites every output channel in one pass; ``backward`` pulls
per-pixel channel gradients back to the Gaussian parameters, the flow
offsets and the backgrounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _raster, sh
from .scene import CameraModel, CanonicalScene, GaussianParams, quat_to_rotmat, rotmat_grad_to_quat, sigmoid
from .tof import ToFConfig

DILATION = 0.3          # px^2 added to every projected covariance
MAX_ALPHA = 0.99
DEPTH_EPS = 1e-4        # coverage below which normalized depth is undefined
TILE_SIZE = 8

# linear payload layout
LIN_COLOR = slice(0, 3)
LIN_WEIGHT = 3
LIN_DEPTH = 4
LIN_DEPTH2 = 5
LIN_FLOW = slice(6, 9)
LIN_FLOW_BWD = slice(9, 12)
N_LIN = 12
# ToF payload layout: four quads then phasor (re, im)
TOF_QUAD = slice(0, 4)
TOF_PHASOR = slice(4, 6)
N_TOF = 6

CHANNELS = ("quad", "phasor", "color", "mean_depth", "mean_depth_raw", "weight",
            "depth_distortion", "flow", "flow_backward", "final_transmittance")

# payload columns each output channel needs
_MOMENTS = [LIN_WEIGHT, LIN_DEPTH]
_LIN_NEEDS = {
    "color": list(range(3)),
    "mean_depth": _MOMENTS, "mean_depth_raw": _MOMENTS, "weight": _MOMENTS,
    "final_transmittance": _MOMENTS,
    "depth_distortion": _MOMENTS + [LIN_DEPTH2],
    "flow": _MOMENTS + list(range(6, 9)),
    "flow_backward": _MOMENTS + list(range(9, 12)),
}
_TOF_NEEDS = {"quad": [0, 1, 2, 3], "phasor": [4, 5]}


def payload_columns(channels=None, quad_phases=None):
    """Linear and ToF payload columns needed for ``channels`` (all when ``None``).

    ``quad_phases`` restricts the quad channel to a subset of phase indices.
    """
    if channels is None:
        channels = CHANNELS
    unknown = set(channels) - set(CHANNELS)
    if unknown:
        raise KeyError(f"unknown channels {sorted(unknown)}")
    lin, tof = set(), set()
    for c in channels:
        lin.update(_LIN_NEEDS.get(c, ()))
        tof.update(_TOF_NEEDS.get(c, ()))
    if quad_phases is not None and "quad" in channels:
        tof -= {0, 1, 2, 3} - set(int(m) for m in quad_phases)
    return np.array(sorted(lin), dtype=np.int64), np.array(sorted(tof), dtype=np.int64)


@dataclass
class Splats2D:
    """Screen-space splats in compositing order (front to back).

    ``index`` maps each splat back to its Gaussian; -1 for hand-built splats.
    """
    mean2d: np.ndarray           # (M, 2) px
    cov2d: np.ndarray            # (M, 2, 2) px^2, dilation included
    depth: np.ndarray            # (M,) distance to the optical center, m
    opacity: np.ndarray          # (M,)
    reflectivity: np.ndarray     # (M,)
    color: np.ndarray            # (M, 3)
    flow_offset: np.ndarray      # (M, 3) 3D motion, m
    index: np.ndarray = None     # (M,)
    radius: np.ndarray = None    # (M,) px, 3-sigma footprint
    flow_offset_bwd: np.ndarray = None  # (M, 3) motion toward the previous timestep

    def __post_init__(self):
        m = self.mean2d.shape[0]
        if self.index is None:
            self.index = np.full(m, -1, dtype=np.int64)
        if self.radius is None:
            self.radius = footprint_radius(self.cov2d) if m else np.zeros(0)
        if self.flow_offset_bwd is None:
            self.flow_offset_bwd = np.zeros((m, 3))

    def __len__(self):
        return self.mean2d.shape[0]

    @classmethod
    def empty(cls) -> "Splats2D":
        z = np.zeros
        return cls(z((0, 2)), z((0, 2, 2)), z(0), z(0), z(0), z((0, 3)), z((0, 3)))


@dataclass
class RenderedBuffers:
    quad: np.ndarray                 # (H, W, 4)
    phasor: np.ndarray               # (H, W, 2) re, im
    color: np.ndarray                # (H, W, 3)
    mean_depth: np.ndarray           # (H, W) coverage-normalized, 0 where uncovered
    mean_depth_raw: np.ndarray       # (H, W) sum d_k w_k
    weight: np.ndarray               # (H, W) sum w_k
    depth_distortion: np.ndarray     # (H, W)
    flow: np.ndarray                 # (H, W, 2) px, forward offsets
    final_transmittance: np.ndarray  # (H, W)
    flow_backward: np.ndarray = None  # (H, W, 2) px, backward offsets

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class Projection:
    """Per-Gaussian intermediates of ``project`` kept for the backward pass."""
    visible: np.ndarray
    t_cam: np.ndarray
    depth: np.ndarray
    view_dir: np.ndarray
    J: np.ndarray
    M: np.ndarray                # J @ R_cam
    cov3d: np.ndarray
    L: np.ndarray                # R_q @ diag(scale)
    R_q: np.ndarray
    q_unit: np.ndarray
    q_norm: np.ndarray
    scale: np.ndarray
    basis: np.ndarray
    refl_raw: np.ndarray
    color_raw: np.ndarray
    splats: Splats2D
    order: np.ndarray            # Gaussian indices in compositing order


@dataclass
class RenderContext:
    cam: CameraModel
    tof: ToFConfig
    n_gaussians: int
    splats: Splats2D
    conic: np.ndarray
    lin: np.ndarray
    tof_payload: np.ndarray
    bg_lin: np.ndarray
    bg_tof: np.ndarray
    offsets: np.ndarray
    ids: np.ndarray
    tiles_x: int
    tile: int
    max_alpha: float
    buffers: RenderedBuffers
    flow_point: np.ndarray       # (H, W, 3) camera-space point projected for flow
    flow_valid: np.ndarray       # (H, W) bool
    params: GaussianParams | None = None
    positions: np.ndarray | None = None
    projection: Projection | None = None
    sh_degree: int = 3
    extra: dict = field(default_factory=dict)
    lin_cols: np.ndarray | None = None
    tof_cols: np.ndarray | None = None


def footprint_radius(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - (a * c - b * b)))
    return np.ceil(3.0 * np.sqrt(lam))


def alpha_support_radius(cov2d: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Pixel distance beyond which ``opacity * G < 1/255``; -1 when that holds everywhere.

    Only used to bin splats into tiles, so it must never be smaller than the
    true support.
    """
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    with np.errstate(divide="ignore"):
        maha2 = 2.0 * np.log(255.0 * np.maximum(opacity, 1e-300)) + 1e-6
    return np.where(maha2 > 0, np.sqrt(lam * np.maximum(maha2, 0.0)) * (1 + 1e-9) + 1e-9, -1.0)


def _conic(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def bg_phasor(bg_quad: np.ndarray) -> np.ndarray:
    """Background phasor of a background quad, so that phasor = quad_to_phasor(quad) holds per pixel."""
    return np.array([bg_quad[1] - bg_quad[3], bg_quad[0] - bg_quad[2]])


def tof_payload(depth, reflectivity, tof: ToFConfig):
    """Per-splat ToF payload ``a_k * (sin, cos, -sin, -cos, 2cos, 2sin)(psi_k)``."""
    a = tof.source_intensity * reflectivity / depth ** 2
    psi = tof.phase_per_meter * depth
    s, c = np.sin(psi), np.cos(psi)
    return np.stack([a * s, a * c, -a * s, -a * c, 2 * a * c, 2 * a * s], axis=1), a, psi


def linear_payload(splats: Splats2D):
    m = len(splats)
    lin = np.zeros((m, N_LIN))
    lin[:, LIN_COLOR] = splats.color
    lin[:, LIN_WEIGHT] = 1.0
    lin[:, LIN_DEPTH] = splats.depth
    lin[:, LIN_DEPTH2] = splats.depth ** 2
    lin[:, LIN_FLOW] = splats.flow_offset
    lin[:, LIN_FLOW_BWD] = splats.flow_offset_bwd
    return lin


def project(params: GaussianParams, cam: CameraModel, *, positions=None, flow_offsets=None,
            flow_offsets_backward=None, sh_degree: int = 3) -> Projection:
    """EWA projection of all Gaussians; culled ones are excluded from ``splats``.

    A Gaussian is culled when its center lies before the near plane or its
    3-sigma footprint misses the image.
    """
    P = params.position if positions is None else positions
    n = P.shape[0]
    Rc = cam.R
    t_cam = P @ Rc.T + cam.t
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    depth = np.linalg.norm(t_cam, axis=1)
    safe_z = np.where(tz > 1e-9, tz, 1.0)

    q_norm = np.linalg.norm(params.rotation, axis=1)
    q_unit = params.rotation / q_norm[:, None]
    R_q = quat_to_rotmat(q_unit)
    scale = np.exp(params.log_scale)
    L = R_q * scale[:, None, :]
    cov3d = L @ np.transpose(L, (0, 2, 1))

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / safe_z
    J[:, 0, 2] = -cam.fx * tx / safe_z ** 2
    J[:, 1, 1] = cam.fy / safe_z
    J[:, 1, 2] = -cam.fy * ty / safe_z ** 2
    M = J @ Rc
    cov2d = M @ cov3d @ np.transpose(M, (0, 2, 1))
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    mean2d = np.stack([cam.fx * tx / safe_z + cam.cx, cam.fy * ty / safe_z + cam.cy], axis=1)
    radius = footprint_radius(cov2d)

    on_screen = ((mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < cam.width)
                 & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < cam.height))
    visible = (tz > cam.near) & on_screen

    view_dir = (P - cam.center) / np.where(depth > 0, depth, 1.0)[:, None]
    basis = sh.sh_basis(view_dir, sh_degree)
    refl_raw = np.einsum("nj,nj->n", basis, params.refl_sh)
    color_raw = np.einsum("nj,njc->nc", basis, params.color_sh)
    opacity = sigmoid(params.opacity_logit)
    flow = np.zeros((n, 3)) if flow_offsets is None else flow_offsets
    flow_b = np.zeros((n, 3)) if flow_offsets_backward is None else flow_offsets_backward

    idx = np.nonzero(visible)[0]
    # stable sort: equal distances keep index order
    order = idx[np.argsort(depth[idx], kind="stable")]
    splats = Splats2D(mean2d[order], cov2d[order], depth[order], opacity[order],
                      np.clip(refl_raw[order], 0.0, 1.0), np.clip(color_raw[order], 0.0, 1.0),
                      flow[order], order.astype(np.int64), radius[order], flow_b[order])
    return Projection(visible, t_cam, depth, view_dir, J, M, cov3d, L, R_q, q_unit, q_norm,
                      scale, basis, refl_raw, color_raw, splats, order)


def _flow_image(cam: CameraModel, x_d, offset, anchor):
    pc = (x_d + offset) @ cam.R.T + cam.t
    valid = (anchor > 0) & (pc[..., 2] > 1e-9)
    z = np.where(valid, pc[..., 2], 1.0)
    u_pix, v_pix = cam.pixel_centers()
    flow = np.stack([cam.fx * pc[..., 0] / z + cam.cx - u_pix,
                     cam.fy * pc[..., 1] / z + cam.cy - v_pix], axis=-1)
    flow[~valid] = 0.0
    return flow, pc, valid


def _flow_grad(cam: CameraModel, pc, valid, g):
    """Flow gradient -> gradient on the composited world-space offset."""
    z = np.where(valid, pc[..., 2], 1.0)
    gu = np.where(valid, g[..., 0], 0.0)
    gv = np.where(valid, g[..., 1], 0.0)
    d_pc = np.stack([gu * cam.fx / z, gv * cam.fy / z,
                     -(gu * cam.fx * pc[..., 0] + gv * cam.fy * pc[..., 1]) / z ** 2], axis=-1)
    # the back-projected depth point is a constant (stop-gradient)
    return d_pc @ cam.R


def composite(splats: Splats2D, cam: CameraModel, tof: ToFConfig, *, bg_quad=None, bg_color=None,
              max_alpha: float = MAX_ALPHA, tile: int = TILE_SIZE,
              depth_anchor=None, channels=None, quad_phases=None) -> tuple[RenderedBuffers, RenderContext]:
    """Composite sorted splats into all output buffers.

    The flow channel back-projects each pixel at its mean depth and treats
    that point as a constant.  ``depth_anchor`` (H, W) overrides the depth
    used there, which lets finite differences hold it fixed.

    ``channels`` / ``quad_phases`` limit the work to what the caller needs;
    buffers that were not requested come back as zeros.
    """
    if __debug__ and len(splats) > 1 and np.any(np.diff(splats.depth) < 0):
        raise ValueError("splats must be sorted front to back")
    H, W = cam.height, cam.width
    bg_quad = np.zeros(4) if bg_quad is None else np.asarray(bg_quad, dtype=np.float64)
    bg_color = np.zeros(3) if bg_color is None else np.asarray(bg_color, dtype=np.float64)

    m = len(splats)
    conic = _conic(splats.cov2d) if m else np.zeros((0, 3))
    lin = linear_payload(splats)
    tofp = tof_payload(splats.depth, splats.reflectivity, tof)[0] if m else np.zeros((0, N_TOF))
    bg_lin = np.zeros(N_LIN)
    bg_lin[LIN_COLOR] = bg_color
    bg_tof = np.concatenate([bg_quad, bg_phasor(bg_quad)])

    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    if m:
        r = np.minimum(splats.radius, alpha_support_radius(splats.cov2d, splats.opacity))
        u, v = splats.mean2d[:, 0], splats.mean2d[:, 1]
        rect = np.stack([np.floor((u - r) / tile), np.floor((v - r) / tile),
                         np.floor((u + r) / tile) + 1, np.floor((v + r) / tile) + 1], axis=1)
        rect[:, [0, 2]] = np.clip(rect[:, [0, 2]], 0, tiles_x)
        rect[:, [1, 3]] = np.clip(rect[:, [1, 3]], 0, tiles_y)
        offsets, ids = _raster.bin_tiles(np.arange(m, dtype=np.int64), rect.astype(np.int64),
                                         tiles_x, tiles_y)
    else:
        offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
        ids = np.zeros(0, dtype=np.int64)

    lin_cols, tof_cols = payload_columns(channels, quad_phases)
    sub_lin = np.zeros((H, W, lin_cols.size))
    sub_tof = np.zeros((H, W, tof_cols.size))
    out_T = np.ones((H, W))
    _raster.forward(H, W, tile, tiles_x, offsets, ids,
                    np.ascontiguousarray(splats.mean2d), conic, splats.opacity,
                    np.ascontiguousarray(lin[:, lin_cols]), np.ascontiguousarray(tofp[:, tof_cols]),
                    bg_lin[lin_cols], bg_tof[tof_cols], max_alpha, sub_lin, sub_tof, out_T)
    out_lin = np.zeros((H, W, N_LIN))
    out_tof = np.zeros((H, W, N_TOF))
    out_lin[..., lin_cols] = sub_lin
    out_tof[..., tof_cols] = sub_tof

    weight = out_lin[..., LIN_WEIGHT]
    m1 = out_lin[..., LIN_DEPTH]
    m2 = out_lin[..., LIN_DEPTH2]
    covered = weight > DEPTH_EPS
    mean_depth = np.where(covered, m1 / np.where(covered, weight, 1.0), 0.0)
    dd = 2.0 * weight * m2 - 2.0 * m1 * m1

    # flow: project the back-projected mean-depth point displaced by the composited offsets
    anchor = mean_depth if depth_anchor is None else np.asarray(depth_anchor)
    x_d = cam.center + anchor[..., None] * cam.pixel_rays()
    flow, pc, flow_valid = _flow_image(cam, x_d, out_lin[..., LIN_FLOW], anchor)
    flow_b, pc_b, valid_b = _flow_image(cam, x_d, out_lin[..., LIN_FLOW_BWD], anchor)

    buffers = RenderedBuffers(
        quad=out_tof[..., TOF_QUAD], phasor=out_tof[..., TOF_PHASOR], color=out_lin[..., LIN_COLOR],
        mean_depth=mean_depth, mean_depth_raw=m1, weight=weight, depth_distortion=dd,
        flow=flow, final_transmittance=out_T, flow_backward=flow_b)
    ctx = RenderContext(cam, tof, 0, splats, conic, lin, tofp, bg_lin, bg_tof, offsets, ids,
                        tiles_x, tile, max_alpha, buffers, pc, flow_valid)
    ctx.lin_cols, ctx.tof_cols = lin_cols, tof_cols
    ctx.extra["m2"] = m2
    ctx.extra["flow_point_bwd"] = pc_b
    ctx.extra["flow_valid_bwd"] = valid_b
    return buffers, ctx


def render(params: GaussianParams, cam: CameraModel, tof: ToFConfig, *, positions=None,
           flow_offsets=None, flow_offsets_backward=None, bg_quad=None, bg_color=None, sh_degree: int = 3,
           max_alpha: float = MAX_ALPHA, tile: int = TILE_SIZE,
           depth_anchor=None, channels=None, quad_phases=None) -> tuple[RenderedBuffers, RenderContext]:
    """Render Gaussians, optionally at deformed ``positions`` and with per-Gaussian 3D motion
    ``flow_offsets`` (``flow_offsets_backward``) for the forward (backward) flow channel."""
    proj = project(params, cam, positions=positions, flow_offsets=flow_offsets,
                   flow_offsets_backward=flow_offsets_backward, sh_degree=sh_degree)
    buffers, ctx = composite(proj.splats, cam, tof, bg_quad=bg_quad, bg_color=bg_color,
                             max_alpha=max_alpha, tile=tile, depth_anchor=depth_anchor,
                             channels=channels, quad_phases=quad_phases)
    ctx.params = params
    ctx.positions = params.position if positions is None else positions
    ctx.projection = proj
    ctx.sh_degree = sh_degree
    ctx.n_gaussians = len(params)
    return buffers, ctx


def render_scene(scene: CanonicalScene, cam: CameraModel, **kw):
    kw.setdefault("bg_quad", scene.bg_quad)
    kw.setdefault("bg_color", scene.bg_color)
    kw.setdefault("sh_degree", scene.sh_degree)
    return render(scene.gaussians, cam, scene.tof, **kw)


def _channel_grads(ctx: RenderContext, grads: dict):
    """Convert per-channel upstream gradients into gradients on the raw accumulators."""
    H, W = ctx.cam.height, ctx.cam.width
    b = ctx.buffers
    g_lin = np.zeros((H, W, N_LIN))
    g_tof = np.zeros((H, W, N_TOF))
    unknown = set(grads) - set(CHANNELS)
    if unknown:
        raise KeyError(f"unknown channels {sorted(unknown)}")

    def get(name, shape):
        g = grads.get(name)
        return None if g is None else np.broadcast_to(np.asarray(g, dtype=np.float64), shape)

    if (g := get("quad", (H, W, 4))) is not None:
        g_tof[..., TOF_QUAD] += g
    if (g := get("phasor", (H, W, 2))) is not None:
        g_tof[..., TOF_PHASOR] += g
    if (g := get("color", (H, W, 3))) is not None:
        g_lin[..., LIN_COLOR] += g
    if (g := get("mean_depth_raw", (H, W))) is not None:
        g_lin[..., LIN_DEPTH] += g
    if (g := get("weight", (H, W))) is not None:
        g_lin[..., LIN_WEIGHT] += g
    if (g := get("final_transmittance", (H, W))) is not None:
        # T_N = 1 - sum w_k exactly
        g_lin[..., LIN_WEIGHT] -= g
    if (g := get("mean_depth", (H, W))) is not None:
        covered = b.weight > DEPTH_EPS
        w = np.where(covered, b.weight, 1.0)
        g = np.where(covered, g, 0.0)
        g_lin[..., LIN_DEPTH] += g / w
        g_lin[..., LIN_WEIGHT] -= g * b.mean_depth_raw / w ** 2
    if (g := get("depth_distortion", (H, W))) is not None:
        # DD = 2 W M2 - 2 M1^2 over the coverage / depth moments
        g_lin[..., LIN_WEIGHT] += 2.0 * g * ctx.extra["m2"]
        g_lin[..., LIN_DEPTH2] += 2.0 * g * b.weight
        g_lin[..., LIN_DEPTH] += -4.0 * g * b.mean_depth_raw
    if (g := get("flow", (H, W, 2))) is not None:
        g_lin[..., LIN_FLOW] += _flow_grad(ctx.cam, ctx.flow_point, ctx.flow_valid, g)
    if (g := get("flow_backward", (H, W, 2))) is not None:
        g_lin[..., LIN_FLOW_BWD] += _flow_grad(ctx.cam, ctx.extra["flow_point_bwd"],
                                               ctx.extra["flow_valid_bwd"], g)
    return g_lin, g_tof


@dataclass
class SplatGrads:
    """Gradients of a scalar loss w.r.t. the rendered Gaussians and backgrounds.

    ``position`` is w.r.t. the positions actually rendered (deformed ones
    when ``render`` was given ``positions``).  ``mean2d_norm`` collects the
    screen-space gradient magnitude per Gaussian for densification.
    """
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    refl_sh: np.ndarray
    color_sh: np.ndarray
    flow_offset: np.ndarray
    bg_quad: np.ndarray
    bg_color: np.ndarray
    mean2d_norm: np.ndarray
    flow_offset_bwd: np.ndarray = None

    def param_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GaussianParams.field_names()}


@dataclass
class SplatLevelGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    reflectivity: np.ndarray
    color: np.ndarray
    flow_offset: np.ndarray
    bg_quad: np.ndarray
    bg_color: np.ndarray
    flow_offset_bwd: np.ndarray = None


def composite_backward(ctx: RenderContext, grads: dict) -> SplatLevelGrads:
    """Gradients w.r.t. the screen-space splat quantities (in compositing order)."""
    g_lin, g_tof = _channel_grads(ctx, grads)
    lc = ctx.lin_cols if ctx.lin_cols is not None else np.arange(N_LIN)
    tc = ctx.tof_cols if ctx.tof_cols is not None else np.arange(N_TOF)
    missing_lin = np.setdiff1d(np.nonzero(np.any(g_lin != 0, axis=(0, 1)))[0], lc)
    missing_tof = np.setdiff1d(np.nonzero(np.any(g_tof != 0, axis=(0, 1)))[0], tc)
    if missing_lin.size or missing_tof.size:
        raise ValueError("gradient given for a channel that was not rendered")
    s = ctx.splats
    m = len(s)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    d_lin = np.zeros((m, N_LIN))
    d_tof = np.zeros((m, N_TOF))
    H, W = ctx.cam.height, ctx.cam.width
    if m:
        sub_d_lin = np.zeros((m, lc.size))
        sub_d_tof = np.zeros((m, tc.size))
        _raster.backward(H, W, ctx.tile, ctx.tiles_x, ctx.offsets, ctx.ids,
                         np.ascontiguousarray(s.mean2d), ctx.conic, s.opacity,
                         np.ascontiguousarray(ctx.lin[:, lc]), np.ascontiguousarray(ctx.tof_payload[:, tc]),
                         ctx.bg_lin[lc], ctx.bg_tof[tc], ctx.max_alpha,
                         np.ascontiguousarray(g_lin[..., lc]), np.ascontiguousarray(g_tof[..., tc]),
                         d_mean2d, d_conic, d_opacity, sub_d_lin, sub_d_tof)
        d_lin[:, lc] = sub_d_lin
        d_tof[:, tc] = sub_d_tof

    T_N = ctx.buffers.final_transmittance
    d_bg_lin = np.einsum("hwc,hw->c", g_lin, T_N)
    d_bg_tof = np.einsum("hwc,hw->c", g_tof, T_N)
    d_bg_quad = d_bg_tof[:4].copy()
    # phasor background = (q90 - q270, q0 - q180)
    d_bg_quad += np.array([d_bg_tof[5], d_bg_tof[4], -d_bg_tof[5], -d_bg_tof[4]])

    # conic (a, b, c) = inverse covariance; full-matrix chain dCov = -C dC C
    C = np.zeros((m, 2, 2))
    C[:, 0, 0], C[:, 0, 1], C[:, 1, 0], C[:, 1, 1] = ctx.conic[:, 0], ctx.conic[:, 1], ctx.conic[:, 1], ctx.conic[:, 2]
    dC = np.zeros((m, 2, 2))
    dC[:, 0, 0] = d_conic[:, 0]
    dC[:, 0, 1] = dC[:, 1, 0] = 0.5 * d_conic[:, 1]
    dC[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -C @ dC @ C

    d_depth = d_lin[:, LIN_DEPTH] + 2.0 * s.depth * d_lin[:, LIN_DEPTH2]
    if m:
        _, a, psi = tof_payload(s.depth, s.reflectivity, ctx.tof)
        sn, cs = np.sin(psi), np.cos(psi)
        gq = d_tof
        d_a = (sn * (gq[:, 0] - gq[:, 2]) + cs * (gq[:, 1] - gq[:, 3])
               + 2 * cs * gq[:, 4] + 2 * sn * gq[:, 5])
        d_psi = a * (cs * (gq[:, 0] - gq[:, 2]) - sn * (gq[:, 1] - gq[:, 3])
                     - 2 * sn * gq[:, 4] + 2 * cs * gq[:, 5])
        d_refl = d_a * ctx.tof.source_intensity / s.depth ** 2
        d_depth = d_depth - 2.0 * a / s.depth * d_a + ctx.tof.phase_per_meter * d_psi
    else:
        d_refl = np.zeros(0)
    return SplatLevelGrads(d_mean2d, d_cov2d, d_depth, d_opacity, d_refl, d_lin[:, LIN_COLOR].copy(),
                           d_lin[:, LIN_FLOW].copy(), d_bg_quad, d_bg_lin[LIN_COLOR].copy(),
                           d_lin[:, LIN_FLOW_BWD].copy())


def backward(ctx: RenderContext, grads: dict) -> SplatGrads:
    """Pull per-pixel channel gradients back to every Gaussian parameter.

    ``grads`` maps channel names (see ``CHANNELS``) to arrays shaped like the
    corresponding buffer.
    """
    if ctx.projection is None:
        raise ValueError("backward needs a context produced by render()")
    sg = composite_backward(ctx, grads)
    pr = ctx.projection
    cam = ctx.cam
    params = ctx.params
    n = ctx.n_gaussians
    o = pr.order

    def scatter(vals, shape):
        out = np.zeros((n,) + shape)
        out[o] = vals
        return out

    d_mean2d = scatter(sg.mean2d, (2,))
    d_cov2d = scatter(sg.cov2d, (2, 2))
    d_depth = scatter(sg.depth, ())
    d_opac = scatter(sg.opacity, ())
    d_refl = scatter(sg.reflectivity, ())
    d_color = scatter(sg.color, (3,))
    d_flow = scatter(sg.flow_offset, (3,))
    d_flow_b = scatter(sg.flow_offset_bwd, (3,))

    # clamp to [0, 1] blocks gradients outside the range
    d_refl = np.where((pr.refl_raw > 0) & (pr.refl_raw < 1), d_refl, 0.0)
    d_color = np.where((pr.color_raw > 0) & (pr.color_raw < 1), d_color, 0.0)
    d_refl_sh = pr.basis * d_refl[:, None]
    d_color_sh = pr.basis[:, :, None] * d_color[:, None, :]
    if ctx.sh_degree > 0:
        Jb = sh.sh_basis_jacobian(pr.view_dir, ctx.sh_degree)
        d_dir = (np.einsum("nj,njk->nk", params.refl_sh, Jb) * d_refl[:, None]
                 + np.einsum("njc,njk,nc->nk", params.color_sh, Jb, d_color))
    else:
        d_dir = np.zeros((n, 3))

    opacity = sigmoid(params.opacity_logit)
    d_logit = d_opac * opacity * (1.0 - opacity)

    # covariance chain: cov2d = M cov3d M^T + dilation, M = J R_cam
    M, cov3d = pr.M, pr.cov3d
    d_M = 2.0 * d_cov2d @ M @ cov3d
    d_cov3d = np.transpose(M, (0, 2, 1)) @ d_cov2d @ M
    d_J = d_M @ cam.R.T
    d_L = 2.0 * d_cov3d @ pr.L
    d_Rq = d_L * pr.scale[:, None, :]
    d_scale = np.einsum("nij,nij->nj", d_L, pr.R_q)
    d_log_scale = d_scale * pr.scale
    d_q_unit = rotmat_grad_to_quat(pr.q_unit, d_Rq)
    d_rot = (d_q_unit - pr.q_unit * np.sum(pr.q_unit * d_q_unit, axis=1, keepdims=True)) / pr.q_norm[:, None]

    # camera-space center
    tx, ty, tz = pr.t_cam[:, 0], pr.t_cam[:, 1], pr.t_cam[:, 2]
    tz = np.where(tz > 1e-9, tz, 1.0)
    fx, fy = cam.fx, cam.fy
    d_t = np.zeros((n, 3))
    d_t[:, 0] = fx / tz * d_mean2d[:, 0] - fx / tz ** 2 * d_J[:, 0, 2]
    d_t[:, 1] = fy / tz * d_mean2d[:, 1] - fy / tz ** 2 * d_J[:, 1, 2]
    d_t[:, 2] = (-fx * tx / tz ** 2 * d_mean2d[:, 0] - fy * ty / tz ** 2 * d_mean2d[:, 1]
                 - fx / tz ** 2 * d_J[:, 0, 0] - fy / tz ** 2 * d_J[:, 1, 1]
                 + 2 * fx * tx / tz ** 3 * d_J[:, 0, 2] + 2 * fy * ty / tz ** 3 * d_J[:, 1, 2])
    depth = np.where(pr.depth > 0, pr.depth, 1.0)
    d_t += pr.t_cam / depth[:, None] * d_depth[:, None]
    d_pos = d_t @ cam.R
    vd = pr.view_dir
    d_pos += (d_dir - vd * np.sum(vd * d_dir, axis=1, keepdims=True)) / depth[:, None]

    # culled Gaussians carry exact zeros
    d_pos[~pr.visible] = 0.0
    d_log_scale[~pr.visible] = 0.0
    d_rot[~pr.visible] = 0.0
    d_refl_sh[~pr.visible] = 0.0
    d_color_sh[~pr.visible] = 0.0

    return SplatGrads(d_pos, d_log_scale, d_rot, d_logit, d_refl_sh, d_color_sh, d_flow,
                      sg.bg_quad, sg.bg_color, np.linalg.norm(d_mean2d, axis=1), d_flow_b)
