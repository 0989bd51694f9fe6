"""Raw C-ToF sequences in memory and on disk (manifest + PFM files)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .scene import CameraModel
from .tof import ToFConfig, quad_to_depth

MANIFEST = "manifest.yaml"


class DatasetError(ValueError):
    """Inconsistent or incomplete dataset."""


@dataclass
class QuadSample:
    """One raw frame with its place in the asynchronous capture.

    Frame ``k = 4 i + m`` is taken at ``k / raw_fps`` with phase index ``m``;
    on the integer timestep axis it sits at the fractional tick ``j = i + m / 4``.
    """
    image: np.ndarray
    i: int
    j: float
    phase: int
    time: float

    def __post_init__(self):
        if not 0 <= self.phase < 4:
            raise ValueError("phase index must be in 0..3")
        if abs(self.j - (self.i + self.phase / 4.0)) > 1e-12:
            raise ValueError("fractional tick inconsistent with quartet index and phase")


@dataclass
class QuadDataset:
    cam: CameraModel
    tof: ToFConfig
    raw: np.ndarray                    # (K, H, W), K = 4 * n_quartets
    raw_fps: float = 120.0
    flow_fwd: np.ndarray | None = None     # (n_q, H, W, 2), last entry unused
    flow_fwd_valid: np.ndarray | None = None
    flow_bwd: np.ndarray | None = None     # (n_q, H, W, 2), first entry unused
    flow_bwd_valid: np.ndarray | None = None
    gt_depth: np.ndarray | None = None     # (n_q, H, W) at integer timesteps, 0 on miss
    gt_mask: np.ndarray | None = None
    color: np.ndarray | None = None        # (n_q, H, W, 3)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 3 or self.raw.shape[0] == 0 or self.raw.shape[0] % 4:
            raise DatasetError(f"raw frames must be (4n, H, W), got {self.raw.shape}")
        if self.raw.shape[1:] != self.cam.shape:
            raise DatasetError(f"raw frames {self.raw.shape[1:]} do not match camera {self.cam.shape}")
        n_q = self.n_quartets
        for name in ("flow_fwd", "flow_bwd", "gt_depth", "gt_mask", "color"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n_q:
                raise DatasetError(f"{name} has {arr.shape[0]} entries for {n_q} quartets")
        if not self.raw_fps > 0:
            raise DatasetError("raw_fps must be positive")

    @property
    def n_quartets(self) -> int:
        return self.raw.shape[0] // 4

    @property
    def has_flow(self) -> bool:
        return self.flow_fwd is not None or self.flow_bwd is not None

    def quartet(self, i: int) -> np.ndarray:
        """(H, W, 4) raw samples of quartet ``i`` in phase order."""
        return np.moveaxis(self.raw[4 * i:4 * i + 4], 0, -1)

    def sample(self, k: int) -> QuadSample:
        i, m = divmod(k, 4)
        return QuadSample(self.raw[k], i, i + m / 4.0, m, k / self.raw_fps)

    def naive_depth(self, i: int) -> np.ndarray:
        return quad_to_depth(self.quartet(i), self.tof)

    def forward_flow(self, i: int):
        if self.flow_fwd is None or i + 1 >= self.n_quartets:
            return None, None
        return self.flow_fwd[i], self.flow_fwd_valid[i]

    def backward_flow(self, i: int):
        if self.flow_bwd is None or i == 0:
            return None, None
        return self.flow_bwd[i], self.flow_bwd_valid[i]


def simulate(scene, cam: CameraModel, spec, with_color: bool = False) -> QuadDataset:
    """Run the simulator in memory (same content as ``synthcam.export_dataset``)."""
    from . import synthcam

    n = spec.num_frames
    if n % 4:
        raise DatasetError("capture must contain whole quartets")
    n_q = n // 4
    raw = np.stack([synthcam.simulate_raw_frame(scene, cam, spec, k) for k in range(n)])
    H, W = cam.shape
    ffwd = np.zeros((n_q, H, W, 2))
    vfwd = np.zeros((n_q, H, W), bool)
    fbwd = np.zeros((n_q, H, W, 2))
    vbwd = np.zeros((n_q, H, W), bool)
    depth = np.zeros((n_q, H, W))
    mask = np.zeros((n_q, H, W), bool)
    color = np.zeros((n_q, H, W, 3))
    for i in range(n_q):
        t = synthcam.capture_time(4 * i, spec)
        rc = synthcam.raycast(scene, cam, t)
        depth[i] = np.where(rc.hit, rc.depth, 0.0)
        mask[i] = rc.hit
        color[i] = rc.color
        if i + 1 < n_q:
            ffwd[i], vfwd[i] = synthcam.gt_flow(scene, cam, t, synthcam.capture_time(4 * (i + 1), spec))
        if i > 0:
            fbwd[i], vbwd[i] = synthcam.gt_flow(scene, cam, t, synthcam.capture_time(4 * (i - 1), spec))
    return QuadDataset(cam, spec.tof, raw, spec.raw_fps, ffwd, vfwd, fbwd, vbwd, depth, mask,
                       color if with_color else None)


def _split_flow(arr):
    return arr[..., :2].astype(np.float64), arr[..., 2] > 0.5


def load(path) -> QuadDataset:
    """Read and validate a dataset directory written by ``synthcam.export_dataset``."""
    root = Path(path)
    if not (root / MANIFEST).is_file():
        raise DatasetError(f"{root}: no {MANIFEST}")
    man = io.load_yaml(root / MANIFEST)
    try:
        cam = CameraModel.from_dict(man["camera"])
        tof = ToFConfig.from_dict(man["tof"])
        frames = man["frames"]
        raw_fps = float(man.get("raw_fps", 120.0))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{root / MANIFEST}: malformed manifest ({e})") from e
    res = man.get("resolution")
    if res is not None and tuple(res) != (cam.width, cam.height):
        raise DatasetError(f"resolution {res} does not match camera {cam.width}x{cam.height}")
    if not frames or len(frames) % 4:
        raise DatasetError("dataset must contain a positive multiple of four raw frames")
    times = [float(f["time"]) for f in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DatasetError("raw frame times must be strictly increasing")
    raw = []
    for k, f in enumerate(frames):
        if int(f["phase"]) != k % 4:
            raise DatasetError(f"frame {k}: phase index {f['phase']} != {k % 4}")
        p = root / f["file"]
        if not p.is_file():
            raise DatasetError(f"missing raw frame {p}")
        raw.append(io.read_pfm(p))
    raw = np.stack(raw).astype(np.float64)
    n_q = len(frames) // 4

    def read_opt(entry_key, reader, shape):
        out, valid, seen = np.zeros((n_q,) + shape), np.zeros((n_q,) + shape[:2], bool), False
        for e in man.get("timesteps") or []:
            i = int(e["timestep"])
            if entry_key in e:
                p = root / e[entry_key]
                if not p.is_file():
                    raise DatasetError(f"missing file {p}")
                val = io.read_pfm(p)
                seen = True
                out[i], valid[i] = reader(val)
        return (out, valid) if seen else (None, None)

    H, W = cam.shape
    ffwd, vfwd = read_opt("flow_fwd", _split_flow, (H, W, 2))
    fbwd, vbwd = read_opt("flow_bwd", _split_flow, (H, W, 2))
    depth, _ = read_opt("depth", lambda a: (a, a > 0), (H, W))
    mask, _ = read_opt("mask", lambda a: (a > 0.5, a > 0.5), (H, W))
    color, _ = read_opt("color", lambda a: (a, np.ones(a.shape[:2], bool)), (H, W, 3))
    return QuadDataset(cam, tof, raw, raw_fps, ffwd, vfwd, fbwd, vbwd, depth,
                       None if mask is None else mask.astype(bool), color)
