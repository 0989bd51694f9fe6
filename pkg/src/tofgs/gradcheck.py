"""Central finite-difference checks of the analytic rasterizer and network gradients.

Each check renders a small random scene, contracts every requested output
channel with fixed random weights into a scalar and compares the analytic
gradient against ``(f(x + h) - f(x - h)) / 2h`` in double precision.
The back-projected depth anchor used by the flow channels is held fixed,
which is exactly the stop-gradient the analytic pass implements.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import splat
from .deform import DeformConfig, DeformNet, normalized_time
from .scene import CameraModel, GaussianParams
from .tof import ToFConfig

CHANNEL_SHAPES = {
    "quad": (4,), "phasor": (2,), "color": (3,), "mean_depth": (), "mean_depth_raw": (),
    "weight": (), "depth_distortion": (), "flow": (2,), "flow_backward": (2,),
    "final_transmittance": (),
}


ROUNDOFF_FACTOR = 1e4   # noise must sit 1e3 below the floor for a 1e-3 tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-3,
                   abs_floor: float = 1e-12) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_frac`` times the largest numeric magnitude in the
    group, so entries that are zero up to truncation noise do not dominate,
    and never below ``abs_floor`` (the round-off level of the difference
    quotient, see ``roundoff_floor``).
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(floor_frac * np.max(np.abs(n)), abs_floor)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@dataclass
class CheckScene:
    cam: CameraModel
    tof: ToFConfig
    params: GaussianParams
    flow: np.ndarray
    flow_bwd: np.ndarray
    bg_quad: np.ndarray
    bg_color: np.ndarray
    weights: dict = field(default_factory=dict)


def random_scene(seed: int = 0, n: int = 4, size: int = 8, sh_degree: int = 3) -> CheckScene:
    """Small smooth scene: SH values stay inside the clamp range and alphas stay
    clear of the 1/255 and ``MAX_ALPHA`` thresholds at every pixel."""
    rng = np.random.default_rng(seed)
    cam = CameraModel.from_fov(size, size, 60.0, near=0.2, far=6.0)
    pos = np.stack([rng.uniform(-0.25, 0.25, n), rng.uniform(-0.25, 0.25, n), rng.uniform(1.5, 3.0, n)], 1)
    refl = np.concatenate([rng.uniform(1.0, 2.0, (n, 1)), rng.normal(0, 0.05, (n, 15))], 1)
    color = np.concatenate([rng.uniform(1.0, 2.0, (n, 1, 3)), rng.normal(0, 0.05, (n, 15, 3))], 1)
    params = GaussianParams(pos, np.log(rng.uniform(0.8, 1.2, (n, 3))), rng.normal(size=(n, 4)),
                            rng.normal(-0.5, 0.5, n), refl, color)
    weights = {c: rng.normal(size=(size, size) + s) for c, s in CHANNEL_SHAPES.items()}
    return CheckScene(cam, ToFConfig.for_range(5.0, 2.0), params,
                      rng.normal(0, 0.05, (n, 3)), rng.normal(0, 0.05, (n, 3)),
                      rng.uniform(-1, 1, 4), rng.uniform(0, 1, 3), weights)


def alpha_range(cs: CheckScene, positions=None) -> tuple[float, float]:
    """Smallest and largest unclamped ``o * G`` over all pixels and splats."""
    proj = splat.project(cs.params, cs.cam, positions=positions)
    sp = proj.splats
    conic = splat._conic(sp.cov2d)
    u, v = cs.cam.pixel_centers()
    dx = u[..., None] - sp.mean2d[:, 0]
    dy = v[..., None] - sp.mean2d[:, 1]
    power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
    raw = sp.opacity * np.exp(power)
    return float(raw.min()), float(raw.max())


def _objective(cs: CheckScene, channels, anchor, sh_degree, params=None, positions=None,
               flow=None, flow_bwd=None, bg_quad=None, bg_color=None):
    params = cs.params if params is None else params
    b, ctx = splat.render(params, cs.cam, cs.tof, positions=positions,
                          flow_offsets=cs.flow if flow is None else flow,
                          flow_offsets_backward=cs.flow_bwd if flow_bwd is None else flow_bwd,
                          bg_quad=cs.bg_quad if bg_quad is None else bg_quad,
                          bg_color=cs.bg_color if bg_color is None else bg_color,
                          sh_degree=sh_degree, depth_anchor=anchor)
    val = sum(float(np.sum(cs.weights[c] * b.channel(c))) for c in channels)
    return val, ctx


def roundoff_floor(cs: CheckScene, channels, anchor, sh_degree, h: float, **kw) -> float:
    """``ROUNDOFF_FACTOR * eps * sum|terms| / h``: below this a central difference is noise.

    A group whose analytic gradient is exactly zero (e.g. the normalized depth
    of a lone Gaussian w.r.t. its opacity) then compares as zero, not noise / noise.
    """
    params = kw.pop("params", cs.params)
    b, _ = splat.render(params, cs.cam, cs.tof, bg_quad=cs.bg_quad, bg_color=cs.bg_color,
                        flow_offsets=cs.flow, flow_offsets_backward=cs.flow_bwd,
                        sh_degree=sh_degree, depth_anchor=anchor, **kw)
    total = 0.0
    for c in channels:
        mag = np.abs(b.channel(c))
        if c == "depth_distortion":
            # 2 W M2 - 2 M1^2 cancels; round-off follows the size of 2 W M2
            mag = mag + 2 * b.mean_depth_raw ** 2
        total += float(np.sum(np.abs(cs.weights[c]) * mag))
    return ROUNDOFF_FACTOR * np.finfo(np.float64).eps * max(total, 1.0) / h


def _numeric(arr: np.ndarray, fn, h: float) -> np.ndarray:
    out = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        a = arr.copy()
        a[idx] += h
        fp = fn(a)
        a[idx] -= 2 * h
        fm = fn(a)
        out[idx] = (fp - fm) / (2 * h)
    return out


def check_rasterizer(cs: CheckScene, channels=None, h: float = 1e-4, sh_degree: int = 3) -> dict[str, float]:
    """Relative errors per parameter group for the weighted sum of ``channels``."""
    channels = list(CHANNEL_SHAPES) if channels is None else list(channels)
    b0, _ = splat.render(cs.params, cs.cam, cs.tof, bg_quad=cs.bg_quad, sh_degree=sh_degree)
    anchor = b0.mean_depth
    _, ctx = _objective(cs, channels, anchor, sh_degree)
    g = splat.backward(ctx, {c: cs.weights[c] for c in channels})
    rel = partial(relative_error, abs_floor=roundoff_floor(cs, channels, anchor, sh_degree, h))

    errors = {}
    for name in GaussianParams.field_names():
        def fn(a, name=name):
            d = cs.params.as_dict()
            d[name] = a
            return _objective(cs, channels, anchor, sh_degree, params=GaussianParams.from_dict(d))[0]
        errors[name] = rel(getattr(g, name), _numeric(getattr(cs.params, name), fn, h))
    errors["flow_offset"] = rel(
        g.flow_offset, _numeric(cs.flow, lambda a: _objective(cs, channels, anchor, sh_degree, flow=a)[0], h))
    errors["flow_offset_bwd"] = rel(
        g.flow_offset_bwd,
        _numeric(cs.flow_bwd, lambda a: _objective(cs, channels, anchor, sh_degree, flow_bwd=a)[0], h))
    errors["bg_quad"] = rel(
        g.bg_quad, _numeric(cs.bg_quad, lambda a: _objective(cs, channels, anchor, sh_degree, bg_quad=a)[0], h))
    errors["bg_color"] = rel(
        g.bg_color, _numeric(cs.bg_color, lambda a: _objective(cs, channels, anchor, sh_degree, bg_color=a)[0], h))
    return errors


def relu_margin(net: DeformNet, positions: np.ndarray, times: np.ndarray) -> float:
    """Smallest |pre-activation| of any hidden unit over the given inputs."""
    h = net.encode(positions, times)
    margin = np.inf
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        pre = h @ W + b
        margin = min(margin, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
    return margin


def smooth_network(x: np.ndarray, i: int, n_steps: int, cfg: DeformConfig, seed: int,
                   margin: float, tries: int = 200) -> DeformNet:
    """First network (seeds ``seed, seed + 1, ...``) with no ReLU kink within ``margin``.

    Central differences straddling a kink measure a one-sided mixture, not a
    derivative; keeping every pre-activation clear of zero by much more than
    the step makes the comparison meaningful.
    """
    n = x.shape[0]
    times = np.repeat(normalized_time(np.array([i - 1, i, i + 1]), n_steps), n)
    X = np.tile(x, (3, 1))
    for k in range(tries):
        net = DeformNet(cfg, seed=seed + k)
        if relu_margin(net, X, times) > margin:
            return net
    raise RuntimeError("no kink-free network found; lower the margin")


def _deformed_objective(cs, net, channels, anchor, i, n_steps, sh_degree):
    x = cs.params.position
    n = x.shape[0]
    times = normalized_time(np.array([i - 1, i, i + 1]), n_steps)
    out, cache = net.forward(np.tile(x, (3, 1)), np.repeat(times, n))
    d_prev, d_cur, d_next = out[:n], out[n:2 * n], out[2 * n:]
    val, ctx = _objective(cs, channels, anchor, sh_degree, positions=x + d_cur,
                          flow=d_next - d_cur, flow_bwd=d_prev - d_cur)
    return val, ctx, cache


def check_network(cs: CheckScene, channels=None, h: float = 1e-4, sh_degree: int = 3, seed: int = 0,
                  width: int = 32, depth: int = 2, samples_per_tensor: int = 24,
                  i: int = 2, n_steps: int = 6) -> dict[str, float]:
    """Gradient of the rendered objective w.r.t. deformation-network weights.

    Gaussians are rendered at ``x + MLP(x, t_i)`` with forward and backward
    flow offsets from the neighbouring timesteps, so every weight receives
    gradient through positions and both flow channels.
    """
    channels = list(CHANNEL_SHAPES) if channels is None else list(channels)
    net = smooth_network(cs.params.position, i, n_steps, DeformConfig(depth=depth, width=width, final_std=0.02),
                         seed, margin=10 * h)
    b0, _ = splat.render(cs.params, cs.cam, cs.tof, bg_quad=cs.bg_quad, sh_degree=sh_degree)
    anchor = b0.mean_depth
    _, ctx, cache = _deformed_objective(cs, net, channels, anchor, i, n_steps, sh_degree)
    g = splat.backward(ctx, {c: cs.weights[c] for c in channels})
    d_out = np.concatenate([g.flow_offset_bwd, g.position - g.flow_offset - g.flow_offset_bwd, g.flow_offset])
    grads, _ = net.backward(cache, d_out)
    floor = roundoff_floor(cs, channels, anchor, sh_degree, h)

    rng = np.random.default_rng(seed)
    errors = {}
    params = net.params()
    for name, P in params.items():
        flat = rng.choice(P.size, size=min(samples_per_tensor, P.size), replace=False)
        ana, num = [], []
        for k in flat:
            idx = np.unravel_index(k, P.shape)
            orig = P[idx]
            P[idx] = orig + h
            fp = _deformed_objective(cs, net, channels, anchor, i, n_steps, sh_degree)[0]
            P[idx] = orig - h
            fm = _deformed_objective(cs, net, channels, anchor, i, n_steps, sh_degree)[0]
            P[idx] = orig
            ana.append(grads[name][idx])
            num.append((fp - fm) / (2 * h))
        errors[f"net.{name}"] = relative_error(np.array(ana), np.array(num), abs_floor=floor)
    return errors


def run(seed: int = 0, n_gaussians: int = 4, size: int = 8, h: float = 1e-4,
        per_channel: bool = True, network: bool = True) -> dict[str, float]:
    """Full suite; returns the max relative error per parameter group (over all channel sets)."""
    cs = random_scene(seed, n_gaussians, size)
    channel_sets = [list(CHANNEL_SHAPES)]
    if per_channel:
        channel_sets += [[c] for c in CHANNEL_SHAPES]
    worst: dict[str, float] = {}
    for chans in channel_sets:
        for k, v in check_rasterizer(cs, chans, h).items():
            worst[k] = max(worst.get(k, 0.0), v)
    if network:
        worst.update(check_network(cs, None, h, seed=seed))
    return worst
