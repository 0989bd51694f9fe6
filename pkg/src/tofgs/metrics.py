"""Depth error metrics (MSE x 100 over ground-truth hit pixels)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import QuadDataset
from .tof import quad_to_depth

COVERAGE_MIN = 0.5   # mean depth is scored only where sum(alpha T) exceeds this


def depth_mse_x100(pred, gt, mask=None) -> tuple[float, int]:
    """``100 * mean((pred - gt)^2)`` over masked pixels with finite prediction and positive truth.

    Returns the value and the pixel count; the value is NaN when no pixel qualifies.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    sel = np.isfinite(pred) & np.isfinite(gt) & (gt > 0)
    if mask is not None:
        sel &= np.asarray(mask, bool)
    count = int(sel.sum())
    if count == 0:
        return float("nan"), 0
    return float(100.0 * np.mean((pred[sel] - gt[sel]) ** 2)), count


@dataclass
class DepthAccumulator:
    """Pools squared errors over many frames before averaging."""
    sse: float = 0.0
    count: int = 0

    def add(self, pred, gt, mask=None) -> None:
        v, c = depth_mse_x100(pred, gt, mask)
        if c:
            self.sse += v / 100.0 * c
            self.count += c

    @property
    def value(self) -> float:
        return 100.0 * self.sse / self.count if self.count else float("nan")


@dataclass
class DepthReport:
    mse_d_x100: float
    mse_dtof_x100: float
    mse_naive_ctof_x100: float
    pixels_d: int
    pixels_dtof: int
    pixels_naive: int
    wall_seconds: float = 0.0
    per_timestep: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "mse_d_x100": self.mse_d_x100,
            "mse_dtof_x100": self.mse_dtof_x100,
            "mse_naive_ctof_x100": self.mse_naive_ctof_x100,
            "pixels_d": self.pixels_d,
            "pixels_dtof": self.pixels_dtof,
            "pixels_naive": self.pixels_naive,
            "wall_seconds": self.wall_seconds,
        }

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.as_dict().items()) + "\n"


def score_frames(mean_depth, weight, quads, ds: QuadDataset) -> DepthReport:
    """Score per-timestep renders against ground truth.

    ``mean_depth``, ``weight`` are (n_q, H, W) and ``quads`` (n_q, H, W, 4)
    renders at the integer timesteps; the naive baseline is the per-quartet
    depth of the raw frames.
    """
    if ds.gt_depth is None:
        raise ValueError("dataset has no ground-truth depth")
    acc_d, acc_t, acc_n = DepthAccumulator(), DepthAccumulator(), DepthAccumulator()
    rows = []
    for i in range(ds.n_quartets):
        gt = ds.gt_depth[i]
        hit = ds.gt_mask[i] if ds.gt_mask is not None else gt > 0
        d_tof = quad_to_depth(quads[i], ds.tof)
        naive = ds.naive_depth(i)
        covered = hit & (weight[i] > COVERAGE_MIN)
        acc_d.add(mean_depth[i], gt, covered)
        acc_t.add(d_tof, gt, hit)
        acc_n.add(naive, gt, hit)
        rows.append({"timestep": i,
                     "mse_d_x100": depth_mse_x100(mean_depth[i], gt, covered)[0],
                     "mse_dtof_x100": depth_mse_x100(d_tof, gt, hit)[0],
                     "mse_naive_ctof_x100": depth_mse_x100(naive, gt, hit)[0]})
    return DepthReport(acc_d.value, acc_t.value, acc_n.value, acc_d.count, acc_t.count, acc_n.count,
                       per_timestep=rows)


def mean_depth_distortion(dd_frames, mask=None) -> float:
    dd = np.asarray(dd_frames, dtype=np.float64)
    if mask is None:
        return float(np.mean(dd))
    return float(np.mean(dd[np.asarray(mask, bool)]))
