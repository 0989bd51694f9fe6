"""Canonical Gaussian scene state, camera model and frustum initialization."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from . import io, sh
from .tof import ToFConfig


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z), shape (N, 3, 3)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull back dL/dR (N, 3, 3) to dL/dq for a unit quaternion q."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


@dataclass
class CameraModel:
    """Pinhole camera; ``R``, ``t`` map world points to camera space (x right, y down, z forward).

    Pixel ``(col, row)`` has its center at image coordinates ``(col + 0.5, row + 0.5)``.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.2
    far: float = 4.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near plane must lie before far plane")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 60.0, **kw) -> "CameraModel":
        f = 0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height, **kw)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Image coordinates (N, 2) and camera-space z of world points."""
        pc = self.to_camera(np.atleast_2d(pts))
        z = pc[:, 2]
        uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        return np.meshgrid(u, v)

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, (H, W, 3)."""
        u, v = self.pixel_centers()
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.R

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "near": float(self.near), "far": float(self.far),
            "R": self.R.tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   float(d.get("near", 0.2)), float(d.get("far", 4.0)),
                   np.array(d.get("R", np.eye(3))), np.array(d.get("t", np.zeros(3))))


@dataclass
class Gaussian:
    """A single primitive, mostly for inspection and tests."""
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    reflectivity_sh: np.ndarray
    color_sh: np.ndarray


@dataclass
class GaussianParams:
    """Struct-of-arrays storage for N primitives (all unconstrained)."""
    position: np.ndarray        # (N, 3)
    log_scale: np.ndarray       # (N, 3)
    rotation: np.ndarray        # (N, 4), w first
    opacity_logit: np.ndarray   # (N,)
    refl_sh: np.ndarray         # (N, 16)
    color_sh: np.ndarray        # (N, 16, 3)

    def __len__(self):
        return self.position.shape[0]

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.field_names()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianParams":
        return cls(**{name: np.asarray(d[name], dtype=np.float64) for name in cls.field_names()})

    def copy(self) -> "GaussianParams":
        return GaussianParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def subset(self, idx) -> "GaussianParams":
        return GaussianParams(**{k: v[idx].copy() for k, v in self.as_dict().items()})

    @staticmethod
    def concat(parts: list["GaussianParams"]) -> "GaussianParams":
        return GaussianParams(**{k: np.concatenate([getattr(p, k) for p in parts])
                                 for k in GaussianParams.field_names()})

    def gaussian(self, k: int) -> Gaussian:
        return Gaussian(self.position[k].copy(), self.log_scale[k].copy(), self.rotation[k].copy(),
                        float(self.opacity_logit[k]), self.refl_sh[k].copy(), self.color_sh[k].copy())

    @classmethod
    def from_gaussians(cls, gs: list[Gaussian]) -> "GaussianParams":
        return cls(np.array([g.position for g in gs], dtype=np.float64),
                   np.array([g.log_scale for g in gs], dtype=np.float64),
                   np.array([g.rotation for g in gs], dtype=np.float64),
                   np.array([g.opacity_logit for g in gs], dtype=np.float64),
                   np.array([g.reflectivity_sh for g in gs], dtype=np.float64),
                   np.array([g.color_sh for g in gs], dtype=np.float64))

    # activations
    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def unit_rotation(self) -> np.ndarray:
        return self.rotation / np.linalg.norm(self.rotation, axis=1, keepdims=True)


@dataclass
class CanonicalScene:
    gaussians: GaussianParams
    tof: ToFConfig = field(default_factory=ToFConfig)
    bg_quad: np.ndarray = field(default_factory=lambda: np.zeros(4))
    bg_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = 3

    def __post_init__(self):
        self.bg_quad = np.asarray(self.bg_quad, dtype=np.float64)
        self.bg_color = np.asarray(self.bg_color, dtype=np.float64)
        if np.any(np.abs(self.bg_quad) > 1):
            raise ValueError("bg_quad components must lie in [-1, 1]")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in 0..3")

    def __len__(self):
        return len(self.gaussians)

    def replace(self, **kw) -> "CanonicalScene":
        return replace(self, **kw)

    def save(self, path, extra: dict | None = None) -> None:
        header = {
            "kind": "scene",
            "count": len(self),
            "sh_degree": self.sh_degree,
            "tof": self.tof.to_dict(),
            "bg_quad": self.bg_quad.tolist(),
            "bg_color": self.bg_color.tolist(),
        }
        if extra:
            header["extra"] = extra
        io.write_checkpoint(path, header, list(self.gaussians.as_dict().items()))

    @classmethod
    def load(cls, path) -> tuple["CanonicalScene", dict]:
        header, arrays = io.read_checkpoint(path)
        if header.get("kind") != "scene":
            raise io.FormatError(f"{path}: not a scene checkpoint")
        scene = cls(GaussianParams.from_dict(arrays), ToFConfig.from_dict(header["tof"]),
                    np.array(header["bg_quad"]), np.array(header["bg_color"]),
                    int(header["sh_degree"]))
        return scene, header.get("extra", {})


def covariance_of(g) -> np.ndarray:
    """3D covariance ``R S S^T R^T`` of one Gaussian (3x3) or of GaussianParams (N, 3, 3)."""
    single = isinstance(g, Gaussian)
    log_scale = np.atleast_2d(g.log_scale)
    q = np.atleast_2d(g.rotation)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    L = quat_to_rotmat(q) * np.exp(log_scale)[:, None, :]
    cov = L @ np.transpose(L, (0, 2, 1))
    return cov[0] if single else cov


def _eval_sh_clamped(coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    basis = sh.sh_basis(np.atleast_2d(view_dir), degree)
    if coeffs.ndim == 2:           # (N, 16)
        val = np.einsum("nj,nj->n", basis, coeffs)
    else:                          # (N, 16, 3)
        val = np.einsum("nj,njc->nc", basis, coeffs)
    return np.clip(val, 0.0, 1.0)


def eval_reflectivity(g, view_dir, degree: int = 3):
    """View-dependent reflectivity in [0, 1] from the SH coefficients."""
    if isinstance(g, Gaussian):
        return float(_eval_sh_clamped(np.atleast_2d(g.reflectivity_sh), view_dir, degree)[0])
    return _eval_sh_clamped(g.refl_sh, view_dir, degree)


def eval_color(g, view_dir, degree: int = 3):
    if isinstance(g, Gaussian):
        return _eval_sh_clamped(g.color_sh[None], view_dir, degree)[0]
    return _eval_sh_clamped(g.color_sh, view_dir, degree)


def sample_frustum_points(cam: CameraModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points uniform in volume inside the view frustum between near and far."""
    # depth density proportional to z^2 (inverse-CDF sampling)
    u = rng.random(n)
    z = (cam.near ** 3 + u * (cam.far ** 3 - cam.near ** 3)) ** (1.0 / 3.0)
    px = rng.random(n) * cam.width
    py = rng.random(n) * cam.height
    pc = np.stack([(px - cam.cx) / cam.fx * z, (py - cam.cy) / cam.fy * z, z], axis=1)
    return (pc - cam.t) @ cam.R


def init_scale_from_neighbors(positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Isotropic log-scale from the mean squared distance to the k nearest neighbors."""
    n = positions.shape[0]
    if n < 2:
        return np.full((n, 3), np.log(0.05))
    k = min(k, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=k + 1)
    d2 = np.mean(np.asarray(dist).reshape(n, -1)[:, 1:] ** 2, axis=1)
    d2 = np.maximum(d2, 1e-7)
    return np.repeat(np.log(np.sqrt(d2))[:, None], 3, axis=1)


def init_random_in_frustum(cam: CameraModel, n: int, init_reflectivity: float = 0.1,
                           rng_seed=0, tof: ToFConfig | None = None, sh_degree: int = 3,
                           init_opacity: float = 0.1) -> CanonicalScene:
    if n <= 0:
        raise ValueError("need at least one Gaussian")
    if not 0 < init_reflectivity < 1:
        raise ValueError("init_reflectivity must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    pos = sample_frustum_points(cam, n, rng)
    refl = np.zeros((n, 16))
    refl[:, 0] = sh.dc_for_value(init_reflectivity)
    color = np.zeros((n, 16, 3))
    color[:, 0, :] = sh.dc_for_value(0.5)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    params = GaussianParams(
        position=pos,
        log_scale=init_scale_from_neighbors(pos),
        rotation=rot,
        opacity_logit=np.full(n, logit(init_opacity)),
        refl_sh=refl,
        color_sh=color,
    )
    return CanonicalScene(params, tof or ToFConfig(), sh_degree=sh_degree)
