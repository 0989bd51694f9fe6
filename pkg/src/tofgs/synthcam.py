"""Synthetic C-ToF camera: ray-cast animated opaque Lambertian primitives.

Raw frame ``k`` is captured at ``t_k = k / raw_fps`` with reference offset
``phi = (k mod 4) pi / 2``, so motion inside a quartet corrupts the naive
depth exactly as on a real asynchronous sensor.  Emitter and camera are
co-located and only direct (single-bounce) returns are simulated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .scene import CameraModel
from .tof import PHASE_OFFSETS, ToFConfig, quad_to_depth

# ---------------------------------------------------------------- motion tracks


@dataclass
class StaticTrack:
    def offset(self, t: float) -> np.ndarray:
        return np.zeros(3)


@dataclass
class LinearTrack:
    """Constant velocity (m/s) starting from ``t0``."""
    velocity: np.ndarray
    t0: float = 0.0

    def offset(self, t: float) -> np.ndarray:
        return np.asarray(self.velocity, dtype=np.float64) * (t - self.t0)


@dataclass
class PiecewiseLinearTrack:
    times: np.ndarray
    offsets: np.ndarray   # (K, 3)

    def offset(self, t: float) -> np.ndarray:
        times = np.asarray(self.times, dtype=np.float64)
        offs = np.asarray(self.offsets, dtype=np.float64)
        return np.array([np.interp(t, times, offs[:, k]) for k in range(3)])


@dataclass
class ArcTrack:
    """Circular motion of ``radius`` about ``axis`` with angular speed ``omega`` (rad/s).

    The offset is zero at ``t = 0``.
    """
    radius: float
    omega: float
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    start_dir: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def offset(self, t: float) -> np.ndarray:
        k = np.asarray(self.axis, dtype=np.float64)
        k = k / np.linalg.norm(k)
        e1 = np.asarray(self.start_dir, dtype=np.float64)
        e1 = e1 - k * (k @ e1)
        e1 = e1 / np.linalg.norm(e1)
        e2 = np.cross(k, e1)
        a = self.omega * t
        return self.radius * ((np.cos(a) - 1.0) * e1 + np.sin(a) * e2)


def track_from_dict(d: dict | None):
    if not d:
        return StaticTrack()
    kind = d.get("type", "static")
    if kind == "static":
        return StaticTrack()
    if kind == "linear":
        return LinearTrack(np.array(d["velocity"], dtype=np.float64), float(d.get("t0", 0.0)))
    if kind == "piecewise":
        return PiecewiseLinearTrack(np.array(d["times"]), np.array(d["offsets"]))
    if kind == "arc":
        return ArcTrack(float(d["radius"]), float(d["omega"]),
                        np.array(d.get("axis", [0, 1, 0]), dtype=np.float64),
                        np.array(d.get("start_dir", [1, 0, 0]), dtype=np.float64))
    raise ValueError(f"unknown track type {kind!r}")

# ---------------------------------------------------------------- primitives


def _no_hit(shape):
    return np.full(shape, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, origin, dirs, offset):
        c = np.asarray(self.center, dtype=np.float64) + offset
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - self.radius ** 2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def normal(self, pts, offset):
        n = pts - (np.asarray(self.center) + offset)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass
class Box:
    """Axis-aligned box given by center and half extents."""
    center: np.ndarray
    half_size: np.ndarray

    def intersect(self, origin, dirs, offset):
        c = np.asarray(self.center, dtype=np.float64) + offset
        h = np.asarray(self.half_size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (c - h - origin) * inv
            t_hi = (c + h - origin) * inv
        t_lo = np.nan_to_num(t_lo, nan=-np.inf)
        t_hi = np.nan_to_num(t_hi, nan=np.inf)
        t_near = np.max(np.minimum(t_lo, t_hi), axis=-1)
        t_far = np.min(np.maximum(t_lo, t_hi), axis=-1)
        t = np.where(t_near > 1e-9, t_near, t_far)
        return np.where((t_far >= t_near) & (t > 1e-9), t, np.inf)

    def normal(self, pts, offset):
        c = np.asarray(self.center) + offset
        rel = (pts - c) / np.asarray(self.half_size)
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(pts)
        np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
        return n


@dataclass
class Plane:
    point: np.ndarray
    normal_vec: np.ndarray

    def intersect(self, origin, dirs, offset):
        n = np.asarray(self.normal_vec, dtype=np.float64)
        n = n / np.linalg.norm(n)
        p = np.asarray(self.point, dtype=np.float64) + offset
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p - origin) @ n) / denom
        return np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)

    def normal(self, pts, offset):
        n = np.asarray(self.normal_vec, dtype=np.float64)
        return np.broadcast_to(n / np.linalg.norm(n), pts.shape)


@dataclass
class Primitive:
    shape: Sphere | Box | Plane
    reflectivity: float = 0.5
    color: tuple = (0.5, 0.5, 0.5)
    motion: object = field(default_factory=StaticTrack)

    def __post_init__(self):
        if not 0.0 <= self.reflectivity <= 1.0:
            raise ValueError("reflectivity must lie in [0, 1]")


@dataclass
class AnalyticScene:
    primitives: list[Primitive]
    ambient: float = 0.0   # bias B added to every raw sample


# raw amplitudes stay well inside the unit range the SSIM constants assume
SOURCE_INTENSITY = 4.0


@dataclass
class CaptureSpec:
    raw_fps: float = 120.0
    duration: float = 0.2
    width: int = 64
    height: int = 48
    tof: ToFConfig = field(default_factory=lambda: ToFConfig(source_intensity=SOURCE_INTENSITY))
    noise_std: float = 0.0
    lambertian: bool = False   # cos(theta) foreshortening
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if self.raw_fps <= 0:
            raise ValueError("raw_fps must be positive")

    @property
    def depth_fps(self) -> float:
        return self.raw_fps / 4.0

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.raw_fps))


@dataclass
class RaycastResult:
    depth: np.ndarray         # (H, W) distance to optical center, inf on miss
    reflectivity: np.ndarray  # (H, W)
    hit: np.ndarray           # (H, W) bool
    primitive: np.ndarray     # (H, W) int, -1 on miss
    points: np.ndarray        # (H, W, 3) world hit points
    color: np.ndarray         # (H, W, 3)
    cos_theta: np.ndarray     # (H, W)


def raycast(scene: AnalyticScene, cam: CameraModel, t: float) -> RaycastResult:
    origin = cam.center
    dirs = cam.pixel_rays()
    H, W = cam.height, cam.width
    best = _no_hit((H, W))
    prim = np.full((H, W), -1)
    for k, p in enumerate(scene.primitives):
        d = p.shape.intersect(origin, dirs, p.motion.offset(t))
        closer = d < best
        best = np.where(closer, d, best)
        prim = np.where(closer, k, prim)
    hit = prim >= 0
    refl = np.zeros((H, W))
    color = np.zeros((H, W, 3))
    cos_t = np.zeros((H, W))
    pts = origin + np.where(hit, best, 0.0)[..., None] * dirs
    for k, p in enumerate(scene.primitives):
        sel = prim == k
        if not sel.any():
            continue
        refl[sel] = p.reflectivity
        color[sel] = p.color
        n = p.shape.normal(pts[sel], p.motion.offset(t))
        cos_t[sel] = np.abs(np.sum(n * dirs[sel], axis=-1))
    depth = np.where(hit, best, np.inf)
    return RaycastResult(depth, refl, hit, prim, pts, color, cos_t)


def capture_time(k: int, spec: CaptureSpec) -> float:
    return k / spec.raw_fps


def amplitude_map(rc: RaycastResult, spec: CaptureSpec) -> np.ndarray:
    d = np.where(rc.hit, rc.depth, 1.0)
    a = spec.tof.source_intensity * rc.reflectivity / d ** 2
    if spec.lambertian:
        a = a * rc.cos_theta
    return np.where(rc.hit, a, 0.0)


def simulate_raw_frame(scene: AnalyticScene, cam: CameraModel, spec: CaptureSpec, k: int) -> np.ndarray:
    """Raw sample image for frame ``k``: ``A sin(psi + phi_k) + B`` on hits, ``B`` on misses."""
    rc = raycast(scene, cam, capture_time(k, spec))
    phi = PHASE_OFFSETS[k % 4]
    psi = spec.tof.phase_per_meter * np.where(rc.hit, rc.depth, 0.0)
    img = amplitude_map(rc, spec) * np.sin(psi + phi) + scene.ambient
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.seed, k])
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return img


def naive_depth(frames: np.ndarray, spec: CaptureSpec, i: int) -> np.ndarray:
    """Per-quartet C-ToF depth from raw frames ``4i .. 4i + 3``."""
    q = np.stack([frames[4 * i + m] for m in range(4)], axis=-1)
    return quad_to_depth(q, spec.tof)


def gt_flow(scene: AnalyticScene, cam: CameraModel, t_a: float, t_b: float,
            cam_b: CameraModel | None = None):
    """Projected displacement of the surface point seen at ``t_a``.

    Returns (H, W, 2) flow in pixels and a validity mask (hit at both times).
    """
    cam_b = cam if cam_b is None else cam_b
    ra = raycast(scene, cam, t_a)
    rb = raycast(scene, cam_b, t_b)
    H, W = cam.height, cam.width
    moved = ra.points.copy()
    for k, p in enumerate(scene.primitives):
        sel = ra.primitive == k
        if sel.any():
            moved[sel] += p.motion.offset(t_b) - p.motion.offset(t_a)
    with np.errstate(invalid="ignore", divide="ignore"):
        uv_b, z_b = cam_b.project(moved.reshape(-1, 3))
    u, v = cam.pixel_centers()
    flow = np.stack([uv_b[:, 0].reshape(H, W) - u, uv_b[:, 1].reshape(H, W) - v], axis=-1)
    valid = ra.hit & rb.hit & (z_b.reshape(H, W) > 0)
    flow[~valid] = 0.0
    return flow, valid


# ---------------------------------------------------------------- scene presets


def default_camera(spec: CaptureSpec, hfov_deg: float = 60.0, near: float = 0.5, far: float = 4.0) -> CameraModel:
    return CameraModel.from_fov(spec.width, spec.height, hfov_deg, near=near, far=far)


def _wall(z=3.0, refl=0.3):
    return Primitive(Plane(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, -1.0])), refl, (0.6, 0.6, 0.6))


def sliding_cube(spec: CaptureSpec, cam: CameraModel, px_per_frame: float = 2.0,
                 depth: float = 2.0, side: float = 0.4, refl: float = 0.1, wall_refl: float = 0.1):
    """Cube sliding left to right in front of a wall at ``px_per_frame`` raw-frame disparity.

    Default reflectivities sit at the low initial value the trainer starts from;
    with the slowed reflectivity rate a 5 K-iteration fit can only move a
    Gaussian's reflectivity by about 0.2.
    """
    speed = px_per_frame * depth / cam.fx * spec.raw_fps
    travel = speed * spec.duration
    x0 = -0.5 * travel
    return AnalyticScene([
        _wall(refl=wall_refl),
        Primitive(Box(np.array([x0, 0.0, depth]), np.full(3, side / 2)), refl, (0.8, 0.2, 0.2),
                  LinearTrack(np.array([speed, 0.0, 0.0]))),
    ])


def axial_cube(spec: CaptureSpec, cam: CameraModel, speed: float = 3.0, start: float = 2.5,
               side: float = 0.4, refl: float = 0.5):
    """Cube moving toward the camera along the optical axis."""
    return AnalyticScene([
        _wall(),
        Primitive(Box(np.array([0.0, 0.0, start]), np.full(3, side / 2)), refl, (0.2, 0.8, 0.2),
                  LinearTrack(np.array([0.0, 0.0, -speed]))),
    ])


def occluded_cube(spec: CaptureSpec, cam: CameraModel, px_per_frame: float = 2.0):
    """A static near cube partially occluding a cube sliding behind it."""
    far_scene = sliding_cube(spec, cam, px_per_frame=px_per_frame, depth=2.4)
    far_scene.primitives.append(
        Primitive(Box(np.array([0.0, 0.1, 1.5]), np.array([0.12, 0.3, 0.12])), 0.6, (0.2, 0.2, 0.8)))
    return far_scene


def two_reflectivity(spec: CaptureSpec, cam: CameraModel, low: float = 0.05, high: float = 0.8):
    """Static scene with one dark and one bright cube in front of a wall."""
    return AnalyticScene([
        _wall(),
        Primitive(Box(np.array([-0.45, 0.0, 2.0]), np.full(3, 0.25)), low, (0.1, 0.1, 0.1)),
        Primitive(Box(np.array([0.45, 0.0, 2.0]), np.full(3, 0.25)), high, (0.9, 0.9, 0.9)),
    ])


def static_plane(spec: CaptureSpec, cam: CameraModel, z: float = 2.0, refl: float = 0.5):
    return AnalyticScene([_wall(z=z, refl=refl)])


PRESETS = {
    "sliding_cube": sliding_cube,
    "axial_cube": axial_cube,
    "occluded_cube": occluded_cube,
    "two_reflectivity": two_reflectivity,
    "static_plane": static_plane,
}


def scene_from_dict(d: dict, spec: CaptureSpec, cam: CameraModel) -> AnalyticScene:
    """Build a scene from a preset name (with keyword overrides) or an explicit primitive list."""
    if "preset" in d:
        name = d["preset"]
        if name not in PRESETS:
            raise ValueError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name](spec, cam, **d.get("options", {}))
    prims = []
    for p in d.get("primitives", []):
        kind = p["shape"]
        if kind == "sphere":
            shape = Sphere(np.array(p["center"], float), float(p["radius"]))
        elif kind == "box":
            shape = Box(np.array(p["center"], float), np.array(p["half_size"], float))
        elif kind == "plane":
            shape = Plane(np.array(p["point"], float), np.array(p["normal"], float))
        else:
            raise ValueError(f"unknown primitive shape {kind!r}")
        prims.append(Primitive(shape, float(p.get("reflectivity", 0.5)), tuple(p.get("color", (0.5, 0.5, 0.5))),
                               track_from_dict(p.get("motion"))))
    return AnalyticScene(prims, float(d.get("ambient", 0.0)))


# ---------------------------------------------------------------- export


PHASE_SUFFIXES = ("p0", "p90", "p180", "p270")


def raw_frame_name(k: int) -> str:
    return f"raw/quad_{k // 4:05d}_{PHASE_SUFFIXES[k % 4]}.pfm"


def export_dataset(scene: AnalyticScene, cam: CameraModel, spec: CaptureSpec, out_dir,
                   with_color: bool = False) -> dict:
    """Write raw frames, ground truth and a manifest; returns the manifest dict.

    Layout::

        manifest.yaml
        raw/quad_00000_p0.pfm ...        raw frame k = 4i + m as quad_{i}_p{0,90,180,270}
        gt/depth_00000.pfm               depth at integer timestep i (frame 4i), 0 on miss
        gt/mask_00000.pfm                hit mask (1/0)
        gt/refl_00000.pfm                surface reflectivity
        flow/fwd_00000.pfm               (u, v, valid) from timestep i to i + 1
        flow/bwd_00001.pfm               (u, v, valid) from timestep i to i - 1
        color/color_00000.pfm            optional RGB at integer timesteps
    """
    out = Path(out_dir)
    for sub in ("raw", "gt", "flow") + (("color",) if with_color else ()):
        try:
            (out / sub).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create {out / sub}: {e}") from e
    n_frames = spec.num_frames
    if n_frames % 4:
        raise ValueError("capture must contain whole quartets")
    n_q = n_frames // 4
    frames = []
    for k in range(n_frames):
        img = simulate_raw_frame(scene, cam, spec, k)
        name = raw_frame_name(k)
        io.write_pfm(out / name, img)
        frames.append({"file": name, "time": capture_time(k, spec), "phase": k % 4, "quartet": k // 4})
    gt = []
    for i in range(n_q):
        t = capture_time(4 * i, spec)
        rc = raycast(scene, cam, t)
        io.write_pfm(out / "gt" / f"depth_{i:05d}.pfm", np.where(rc.hit, rc.depth, 0.0))
        io.write_pfm(out / "gt" / f"mask_{i:05d}.pfm", rc.hit.astype(np.float32))
        io.write_pfm(out / "gt" / f"refl_{i:05d}.pfm", rc.reflectivity)
        entry = {"timestep": i, "time": t,
                 "depth": f"gt/depth_{i:05d}.pfm", "mask": f"gt/mask_{i:05d}.pfm",
                 "reflectivity": f"gt/refl_{i:05d}.pfm"}
        if i + 1 < n_q:
            f, valid = gt_flow(scene, cam, t, capture_time(4 * (i + 1), spec))
            io.write_pfm(out / "flow" / f"fwd_{i:05d}.pfm", np.dstack([f, valid.astype(np.float64)]))
            entry["flow_fwd"] = f"flow/fwd_{i:05d}.pfm"
        if i > 0:
            f, valid = gt_flow(scene, cam, t, capture_time(4 * (i - 1), spec))
            io.write_pfm(out / "flow" / f"bwd_{i:05d}.pfm", np.dstack([f, valid.astype(np.float64)]))
            entry["flow_bwd"] = f"flow/bwd_{i:05d}.pfm"
        if with_color:
            io.write_pfm(out / "color" / f"color_{i:05d}.pfm", rc.color)
            entry["color"] = f"color/color_{i:05d}.pfm"
        gt.append(entry)
    manifest = {
        "format": "tofgs-dataset 1",
        "tof": spec.tof.to_dict(),
        "raw_fps": spec.raw_fps,
        "resolution": [spec.width, spec.height],
        "camera": cam.to_dict(),
        "poses": None,
        "frames": frames,
        "timesteps": gt,
    }
    io.dump_yaml(out / "manifest.yaml", manifest)
    return manifest
