"""Time-conditioned deformation MLP and piecewise-linear motion between timesteps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io


def positional_encode(v, L: int) -> np.ndarray:
    """Per component: ``[v, sin(pi v), cos(pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]``.

    ``v`` is (N, D) or (D,); output has D * (1 + 2L) features per row.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    freqs = (2.0 ** np.arange(L)) * np.pi
    arg = v[:, :, None] * freqs                          # (N, D, L)
    sc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (N, D, L, 2)
    out = np.concatenate([v[:, :, None], sc.reshape(v.shape[0], v.shape[1], 2 * L)], axis=2)
    out = out.reshape(v.shape[0], -1)
    return out[0] if single else out


def positional_encode_grad(v: np.ndarray, L: int, d_out: np.ndarray) -> np.ndarray:
    """Backprop ``d_out`` (N, D*(1+2L)) through ``positional_encode`` to (N, D)."""
    n, D = v.shape
    freqs = (2.0 ** np.arange(L)) * np.pi
    arg = v[:, :, None] * freqs
    g = d_out.reshape(n, D, 1 + 2 * L)
    g_sc = g[:, :, 1:].reshape(n, D, L, 2)
    return g[:, :, 0] + np.sum((g_sc[..., 0] * np.cos(arg) - g_sc[..., 1] * np.sin(arg)) * freqs, axis=2)


DEFAULT_COORD_SCALE = 5.0


@dataclass(frozen=True)
class DeformConfig:
    depth: int = 4           # hidden layers
    width: int = 128
    L_x: int = 10
    L_t: int = 10
    coord_scale: float | None = None  # meters; None = unambiguous range of the data (5 m standalone)
    final_std: float = 1e-5

    @property
    def scale(self) -> float:
        return DEFAULT_COORD_SCALE if self.coord_scale is None else float(self.coord_scale)

    @property
    def input_dim(self) -> int:
        return 3 * (1 + 2 * self.L_x) + (1 + 2 * self.L_t)


class DeformNet:
    """MLP ``(position / coord_scale, t) -> position offset`` with ReLU hidden layers."""

    def __init__(self, cfg: DeformConfig = DeformConfig(), seed=0):
        if not cfg.scale > 0:
            raise ValueError("coord_scale must be positive")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dims = [cfg.input_dim] + [cfg.width] * cfg.depth
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(rng.normal(0.0, std, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.weights.append(rng.normal(0.0, cfg.final_std, (dims[-1], 3)))
        self.biases.append(np.zeros(3))

    # parameter plumbing for the optimizer
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def set_params(self, p: dict) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = p[f"W{i}"]
            self.biases[i] = p[f"b{i}"]

    def encode(self, positions: np.ndarray, t) -> np.ndarray:
        positions = np.atleast_2d(positions)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (positions.shape[0],))
        return np.concatenate([positional_encode(positions / self.cfg.scale, self.cfg.L_x),
                               positional_encode(t[:, None], self.cfg.L_t)], axis=1)

    def forward(self, positions: np.ndarray, t):
        """Offsets (N, 3) and a cache for ``backward``; ``t`` is scalar or per row."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        h = self.encode(positions, t)
        acts = [h]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, (positions, acts)

    def __call__(self, positions, t) -> np.ndarray:
        return self.forward(positions, t)[0]

    def backward(self, cache, d_out: np.ndarray):
        """Gradients ``(param_grads, d_positions)`` for upstream ``d_out`` (N, 3)."""
        positions, acts = cache
        grads = {}
        nl = len(self.weights)
        g = d_out
        for i in range(nl - 1, -1, -1):
            h_in = acts[i]
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0)
        n_x = 3 * (1 + 2 * self.cfg.L_x)
        d_pos = positional_encode_grad(positions / self.cfg.scale, self.cfg.L_x, g[:, :n_x])
        return grads, d_pos / self.cfg.scale

    def save(self, path) -> None:
        header = {"kind": "deform", "config": self.cfg.__dict__}
        io.write_checkpoint(path, header, list(self.params().items()))

    @classmethod
    def load(cls, path) -> "DeformNet":
        header, arrays = io.read_checkpoint(path)
        if header.get("kind") != "deform":
            raise io.FormatError(f"{path}: not a deformation checkpoint")
        net = cls(DeformConfig(**header["config"]))
        net.set_params(arrays)
        return net


def normalized_time(i, n_steps: int):
    """Integer (or fractional) quartet time -> network time in [0, 1]."""
    return np.asarray(i, dtype=np.float64) / max(n_steps, 1)


def predict_offsets(net: DeformNet, positions: np.ndarray, t) -> np.ndarray:
    return net(positions, t)


def interp_positions(x_i1, x_i2, j, i1, i2):
    """Positions at fractional time ``j`` between integer timesteps ``i1`` and ``i2 = i1 + 1``."""
    if not i1 <= j <= i2:
        raise ValueError(f"fractional time {j} outside [{i1}, {i2}]")
    return (i2 - j) * np.asarray(x_i1) + (j - i1) * np.asarray(x_i2)


def flow_offsets(net: DeformNet, positions: np.ndarray, i: int, n_steps: int, backward: bool = False):
    """3D motion ``MLP(x, i +/- 1) - MLP(x, i)``; ``None`` past the sequence boundary.

    Integer timesteps run over ``0..n_steps - 1``.
    """
    k = i - 1 if backward else i + 1
    if k < 0 or k >= n_steps:
        return None
    return net(positions, normalized_time(k, n_steps)) - net(positions, normalized_time(i, n_steps))
