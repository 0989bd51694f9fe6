"""Optimization loop: Adam, schedules, heuristics, warm-up and asynchronous quartet fitting."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import losses, splat
from .dataset import QuadDataset
from .deform import DeformConfig, DeformNet, normalized_time
from .scene import CameraModel, CanonicalScene, GaussianParams, init_random_in_frustum, quat_to_rotmat

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class LearningRates:
    position: float = 1.6e-4          # times the scene extent
    position_final: float = 1.6e-6
    position_decay_steps: int = 30000
    opacity: float = 0.05
    scale: float = 0.005
    rotation: float = 0.001
    appearance: float = 0.0016        # reflectivity lr without the occupancy bias
    color: float = 0.0025
    sh_rest_factor: float = 0.05      # higher SH bands learn 20x slower
    deform: float = 8e-4
    deform_final: float = 1.6e-6
    deform_decay_steps: int = 60000


@dataclass(frozen=True)
class Heuristics:
    occupancy_bias: bool = True           # H1: reflectivity lr / 10
    low_reflectivity_init: bool = True    # H2: low initial reflectivity
    init_reflectivity: float = 0.1        # used with H2, in [0.01, 0.1]
    high_init_reflectivity: float = 0.5   # used without H2
    depth_distortion_weight: float = 0.0

    def __post_init__(self):
        if not 0.01 <= self.init_reflectivity <= 0.1:
            raise ValueError("init_reflectivity must lie in [0.01, 0.1]")
        if self.depth_distortion_weight < 0:
            raise ValueError("depth_distortion_weight must be non-negative")


@dataclass(frozen=True)
class DensifyConfig:
    enabled: bool = False
    interval: int = 100
    start: int = 500
    stop: int = 15000
    grad_threshold: float = 0.0002    # NDC-space mean screen gradient
    opacity_floor: float = 0.005
    percent_dense: float = 0.01       # clone below this fraction of the extent, split above
    min_count: int = 64
    max_count: int = 20000


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    warmup_iterations: int = 2000
    num_gaussians: int = 2000
    seed: int = 0
    lr: LearningRates = field(default_factory=LearningRates)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    loss: losses.LossWeights = field(default_factory=losses.LossWeights)
    heuristics: Heuristics = field(default_factory=Heuristics)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    random_background: bool = True
    flow_supervision: bool = True
    sh_degree: int = 3
    init_opacity: float = 0.1
    extent: float | None = None       # meters; defaults to the camera far plane
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.warmup_iterations <= self.iterations:
            raise ValueError("need 0 <= warmup_iterations <= iterations")
        if self.num_gaussians <= 0:
            raise ValueError("num_gaussians must be positive")
        lrs = asdict(self.lr)
        if any(v < 0 for k, v in lrs.items()):
            raise ValueError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        sub = {"lr": LearningRates, "loss": losses.LossWeights, "heuristics": Heuristics,
               "densify": DensifyConfig, "deform": DeformConfig}
        for key, typ in sub.items():
            if key in d:
                vals = d[key] or {}
                bad = set(vals) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} keys {sorted(bad)}")
                d[key] = typ(**vals)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(float(b) for b in d["adam_betas"])
        return cls(**d)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr, betas=(0.9, 0.999), eps: float = 1e-15) -> dict:
    """One bias-corrected Adam update for every entry of ``grads``.

    ``lr`` is a scalar or a dict of per-parameter rates (scalars or arrays
    broadcastable to the parameter).  Returns the updated parameter dict;
    ``state`` is updated in place.
    """
    b1, b2 = betas
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        rate = lr[name] if isinstance(lr, dict) else lr
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        v = state.v[name]
        t = state.step[name] + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = p - rate * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name], state.step[name] = m, v, t
    return out


def remap_state(state: AdamState, names, src: np.ndarray) -> None:
    """Reindex per-Gaussian moments after densification; ``src = -1`` rows start fresh."""
    keep = src >= 0
    for name in names:
        for buf in (state.m, state.v):
            if name in buf:
                old = buf[name]
                new = np.zeros((src.size,) + old.shape[1:])
                new[keep] = old[src[keep]]
                buf[name] = new


def exp_decay(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    t = float(np.clip(step / max(max_steps, 1), 0.0, 1.0))
    if lr_init <= 0 or lr_final <= 0:
        return (1 - t) * lr_init + t * lr_final
    return float(np.exp((1 - t) * np.log(lr_init) + t * np.log(lr_final)))


# ---------------------------------------------------------------- heuristics


@dataclass(frozen=True)
class EffectiveRates:
    reflectivity: float
    init_reflectivity: float
    lr: LearningRates


def apply_heuristics(cfg: TrainConfig) -> EffectiveRates:
    h = cfg.heuristics
    refl_lr = cfg.lr.appearance / 10.0 if h.occupancy_bias else cfg.lr.appearance
    init_r = h.init_reflectivity if h.low_reflectivity_init else h.high_init_reflectivity
    return EffectiveRates(refl_lr, init_r, cfg.lr)


def _sh_rates(base: float, n_coeffs: int, rest_factor: float, trailing=()) -> np.ndarray:
    r = np.full((n_coeffs,) + trailing, base * rest_factor)
    r[0] = base
    return r


def gaussian_rates(cfg: TrainConfig, eff: EffectiveRates, extent: float, step: int) -> dict:
    lr = cfg.lr
    return {
        "position": exp_decay(step, lr.position * extent, lr.position_final * extent, lr.position_decay_steps),
        "log_scale": lr.scale,
        "rotation": lr.rotation,
        "opacity_logit": lr.opacity,
        "refl_sh": _sh_rates(eff.reflectivity, 16, lr.sh_rest_factor),
        "color_sh": _sh_rates(lr.color, 16, lr.sh_rest_factor, (1,)),
    }


# ---------------------------------------------------------------- densification


def densify_prune(params: GaussianParams, grad_accum: np.ndarray, grad_count: np.ndarray,
                  cfg: DensifyConfig, extent: float, rng: np.random.Generator):
    """Clone / split high-gradient Gaussians and prune transparent ones.

    Returns the new parameters and ``src``: for every output row the input
    row it came from, or -1 for newly created Gaussians.
    """
    n = len(params)
    if not cfg.enabled or n == 0:
        return params, np.arange(n)
    avg = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = avg >= cfg.grad_threshold
    big = params.scale.max(axis=1) > cfg.percent_dense * extent
    clone = hot & ~big
    split = hot & big
    room = max(cfg.max_count - n, 0)
    # respect the count ceiling: clones first, then splits (each adds one)
    if clone.sum() > room:
        clone[np.nonzero(clone)[0][room:]] = False
    room -= int(clone.sum())
    if split.sum() > room:
        split[np.nonzero(split)[0][room:]] = False

    parts = [params]
    src = [np.arange(n)]
    if clone.any():
        parts.append(params.subset(np.nonzero(clone)[0]))
        src.append(np.full(int(clone.sum()), -1))
    if split.any():
        idx = np.nonzero(split)[0]
        children = []
        for _ in range(2):
            c = params.subset(idx)
            R = quat_to_rotmat(c.unit_rotation)
            local = rng.normal(size=(idx.size, 3)) * c.scale
            c.position = c.position + np.einsum("nij,nj->ni", R, local)
            c.log_scale = c.log_scale - np.log(1.6)
            children.append(c)
        parts += children
        src += [np.full(idx.size, -1), np.full(idx.size, -1)]
    merged = GaussianParams.concat(parts)
    src = np.concatenate(src)
    # drop split parents
    keep = np.ones(len(merged), bool)
    keep[np.nonzero(split)[0]] = False
    # prune transparent Gaussians, but never below the minimum count
    opac = merged.opacity
    low = opac < cfg.opacity_floor
    if np.count_nonzero(keep & ~low) < cfg.min_count:
        cand = np.nonzero(keep)[0]
        best = cand[np.argsort(-opac[cand], kind="stable")[:cfg.min_count]]
        low = np.ones(len(merged), bool)
        low[best] = False
    keep &= ~low
    idx = np.nonzero(keep)[0]
    return merged.subset(idx), src[idx]


# ---------------------------------------------------------------- rendering at times


def deform_positions(scene: CanonicalScene, net: DeformNet, i, n_steps: int) -> np.ndarray:
    return scene.gaussians.position + net(scene.gaussians.position, normalized_time(i, n_steps))


def positions_at(scene: CanonicalScene, net: DeformNet, j: float, n_steps: int) -> np.ndarray:
    """Gaussian positions at fractional timestep ``j`` in ``[0, n_steps]`` (piecewise linear)."""
    if not 0 <= j <= n_steps:
        raise ValueError(f"time {j} outside [0, {n_steps}]")
    i1 = min(int(np.floor(j)), n_steps - 1) if n_steps > 0 else 0
    x1 = deform_positions(scene, net, i1, n_steps)
    if j == i1:
        return x1
    x2 = deform_positions(scene, net, i1 + 1, n_steps)
    return (i1 + 1 - j) * x1 + (j - i1) * x2


def render_at(scene: CanonicalScene, net: DeformNet | None, cam: CameraModel, j: float, n_steps: int, **kw):
    """Render the scene at fractional timestep ``j`` with the evaluation background (zeros)."""
    pos = None if net is None else positions_at(scene, net, j, n_steps)
    kw.setdefault("bg_quad", np.zeros(4))
    kw.setdefault("bg_color", np.zeros(3))
    kw.setdefault("sh_degree", scene.sh_degree)
    return splat.render(scene.gaussians, cam, scene.tof, positions=pos, **kw)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    scene: CanonicalScene
    net: DeformNet
    log: list
    config: TrainConfig
    n_quartets: int
    wall_seconds: float = 0.0


def _quad_grad(image_grad: np.ndarray, m: int) -> np.ndarray:
    g = np.zeros(image_grad.shape + (4,))
    g[..., m] = image_grad
    return g


def _check_dataset(ds: QuadDataset, cfg: TrainConfig) -> None:
    if ds.n_quartets < 1:
        raise ValueError("dataset has no quartets")
    if cfg.flow_supervision and cfg.loss.beta > 0 and not ds.has_flow and cfg.iterations > cfg.warmup_iterations:
        log.warning("flow supervision requested but the dataset has no flow; flow term disabled")


def fit(ds: QuadDataset, cfg: TrainConfig = TrainConfig(), *, scene: CanonicalScene | None = None,
        net: DeformNet | None = None, callback=None) -> FitResult:
    """Fit canonical Gaussians and the deformation network to a raw quartet sequence.

    Iterations ``< warmup_iterations`` fit the static canonical scene to all
    quartets at once.  Afterwards each iteration draws one quartet ``i``,
    places the Gaussians at ``x + MLP(x, i)`` and ``x + MLP(x, i + 1)``,
    interpolates to the capture tick of each raw frame and renders that frame
    with its own phase.  Forward / backward flow is rendered at timestep ``i``.
    """
    _check_dataset(ds, cfg)
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    eff = apply_heuristics(cfg)
    cam, tof = ds.cam, ds.tof
    extent = cfg.extent if cfg.extent is not None else cam.far
    n_q = ds.n_quartets
    if scene is None:
        scene = init_random_in_frustum(cam, cfg.num_gaussians, eff.init_reflectivity, rng_seed=cfg.seed,
                                       tof=tof, sh_degree=cfg.sh_degree, init_opacity=cfg.init_opacity)
    if net is None:
        dcfg = cfg.deform
        if dcfg.coord_scale is None:
            dcfg = replace(dcfg, coord_scale=tof.unambiguous_range)
        net = DeformNet(dcfg, seed=cfg.seed + 1)
    gstate, nstate = AdamState(), AdamState()
    betas, eps = cfg.adam_betas, cfg.adam_eps
    w = cfg.loss
    dd_w = cfg.heuristics.depth_distortion_weight
    use_flow = cfg.flow_supervision and w.beta > 0 and ds.has_flow
    use_color = ds.color is not None
    grad_accum = np.zeros(len(scene))
    grad_count = np.zeros(len(scene))
    quartets = np.stack([ds.quartet(i) for i in range(n_q)], axis=2)  # (H, W, n_q, 4)
    targets_all = quartets.reshape(cam.height, cam.width, 4 * n_q)
    history = []

    for it in range(cfg.iterations):
        warm = it < cfg.warmup_iterations
        bg = losses.sample_random_background(rng, cfg.random_background)
        params = scene.gaussians
        n = len(params)
        terms = {"quad": 0.0, "color": 0.0, "flow": 0.0, "dd": 0.0}
        g_params = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        mean2d_norm = np.zeros(n)
        net_grads = None

        if warm:
            chans = ["quad"] + (["color"] if use_color else []) + (["depth_distortion"] if dd_w > 0 else [])
            buf, ctx = splat.render(params, cam, tof, bg_quad=bg, sh_degree=scene.sh_degree, channels=chans)
            rendered = np.tile(buf.quad, (1, 1, n_q))
            lq, gq = losses.image_loss(rendered, targets_all, w.ssim_mix)
            terms["quad"] = lq
            grads = {"quad": w.alpha * gq.reshape(cam.height, cam.width, n_q, 4).sum(axis=2)}
            if use_color:
                lc, gc = losses.image_loss(np.tile(buf.color, (1, 1, n_q)),
                                           np.concatenate(list(ds.color), axis=-1), w.ssim_mix)
                terms["color"] = lc
                grads["color"] = gc.reshape(cam.height, cam.width, n_q, 3).sum(axis=2)
            if dd_w > 0:
                terms["dd"] = float(np.mean(buf.depth_distortion))
                grads["depth_distortion"] = np.full(buf.depth_distortion.shape, dd_w / buf.depth_distortion.size)
            g = splat.backward(ctx, grads)
            for k in g_params:
                g_params[k] += getattr(g, k)
            mean2d_norm += g.mean2d_norm
        else:
            i = int(rng.integers(n_q))
            x = params.position
            has_prev = i > 0
            steps = ([i - 1] if has_prev else []) + [i, i + 1]
            times = np.repeat(normalized_time(np.array(steps), n_q), n)
            offs, cache = net.forward(np.tile(x, (len(steps), 1)), times)
            offs = offs.reshape(len(steps), n, 3)
            d_prev = offs[0] if has_prev else None
            d_cur, d_next = offs[-2], offs[-1]
            x_cur, x_next = x + d_cur, x + d_next
            g_off = np.zeros((len(steps), n, 3))
            f_tgt, f_valid = ds.forward_flow(i) if use_flow else (None, None)
            b_tgt, b_valid = ds.backward_flow(i) if use_flow else (None, None)
            for m in range(4):
                a = m / 4.0
                pos = (1 - a) * x_cur + a * x_next
                chans = ["quad"]
                kw = {}
                if m == 0:
                    if f_tgt is not None:
                        chans.append("flow")
                        kw["flow_offsets"] = d_next - d_cur
                    if b_tgt is not None:
                        chans.append("flow_backward")
                        kw["flow_offsets_backward"] = d_prev - d_cur
                    if use_color:
                        chans.append("color")
                    if dd_w > 0:
                        chans.append("depth_distortion")
                buf, ctx = splat.render(params, cam, tof, positions=pos, bg_quad=bg, sh_degree=scene.sh_degree,
                                        channels=chans, quad_phases=[m], **kw)
                lq, gq = losses.image_loss(buf.quad[..., m], ds.raw[4 * i + m], w.ssim_mix)
                terms["quad"] += lq / 4
                grads = {"quad": _quad_grad(w.alpha * gq / 4, m)}
                if m == 0:
                    if f_tgt is not None or b_tgt is not None:
                        fwd = (buf.flow, f_tgt, f_valid) if f_tgt is not None else (None, None, None)
                        bwd = (buf.flow_backward, b_tgt, b_valid) if b_tgt is not None else None
                        lf, gf, gb = losses.flow_loss(*fwd, backward=bwd)
                        terms["flow"] = lf
                        if gf is not None:
                            grads["flow"] = w.beta * gf
                        if gb is not None:
                            grads["flow_backward"] = w.beta * gb
                    if use_color:
                        lc, gc = losses.image_loss(buf.color, ds.color[i], w.ssim_mix)
                        terms["color"] = lc
                        grads["color"] = gc
                    if dd_w > 0:
                        terms["dd"] = float(np.mean(buf.depth_distortion))
                        grads["depth_distortion"] = np.full(buf.depth_distortion.shape,
                                                            dd_w / buf.depth_distortion.size)
                g = splat.backward(ctx, grads)
                for k in g_params:
                    if k != "position":
                        g_params[k] += getattr(g, k)
                mean2d_norm += g.mean2d_norm
                # rendered position = (1 - a) x_i + a x_{i+1}, both x + MLP(x, .)
                g_off[-2] += (1 - a) * g.position
                g_off[-1] += a * g.position
                g_params["position"] += g.position
                if m == 0:
                    g_off[-1] += g.flow_offset
                    g_off[-2] -= g.flow_offset
                    if has_prev:
                        g_off[0] += g.flow_offset_bwd
                        g_off[-2] -= g.flow_offset_bwd
            net_grads, d_x = net.backward(cache, g_off.reshape(-1, 3))
            g_params["position"] += d_x.reshape(len(steps), n, 3).sum(axis=0)

        # Adam on Gaussians (and network after warm-up)
        rates = gaussian_rates(cfg, eff, extent, it)
        new = adam_step(params.as_dict(), g_params, gstate, rates, betas, eps)
        scene.gaussians = GaussianParams.from_dict(new)
        if net_grads is not None:
            step = it - cfg.warmup_iterations
            lr_net = exp_decay(step, cfg.lr.deform, cfg.lr.deform_final, cfg.lr.deform_decay_steps)
            net.set_params(adam_step(net.params(), net_grads, nstate, lr_net, betas, eps))

        loss_total = losses.total_loss(terms["quad"], terms["color"] if use_color else None,
                                       terms["flow"], w) + dd_w * terms["dd"]
        # densification statistics in NDC units
        visible = mean2d_norm > 0
        grad_accum[visible] += mean2d_norm[visible] * 0.5 * max(cam.width, cam.height)
        grad_count[visible] += 1
        d = cfg.densify
        if d.enabled and d.start <= it < d.stop and (it + 1) % d.interval == 0:
            new_params, src = densify_prune(scene.gaussians, grad_accum, grad_count, d, extent, rng)
            remap_state(gstate, GaussianParams.field_names(), src)
            scene.gaussians = new_params
            grad_accum = np.zeros(len(new_params))
            grad_count = np.zeros(len(new_params))

        entry = {"iteration": it + 1, "stage": "warmup" if warm else "main", "loss": loss_total,
                 "quad": terms["quad"], "flow": terms["flow"], "color": terms["color"], "dd": terms["dd"],
                 "gaussians": len(scene), "wall": time.perf_counter() - t_start}
        history.append(entry)
        if cfg.log_every and ((it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations):
            log.info(format_log_line(entry))
        if callback is not None:
            callback(entry, scene, net)

    return FitResult(scene, net, history, cfg, n_q, time.perf_counter() - t_start)


def format_log_line(entry: dict) -> str:
    return (f"iter={entry['iteration']} stage={entry['stage']} loss={entry['loss']:.6e} "
            f"quad={entry['quad']:.6e} flow={entry['flow']:.6e} color={entry['color']:.6e} "
            f"dd={entry['dd']:.6e} gaussians={entry['gaussians']} wall={entry['wall']:.2f}")


def render_sequence(scene: CanonicalScene, net: DeformNet | None, cam: CameraModel, n_steps: int) -> dict:
    """Evaluation renders at every integer timestep, stacked per channel."""
    keys = ("quad", "mean_depth", "weight", "depth_distortion", "color")
    out = {k: [] for k in keys}
    for i in range(n_steps):
        buf, _ = render_at(scene, net, cam, float(i), n_steps,
                           channels=["quad", "mean_depth", "depth_distortion", "color"])
        for k in keys:
            out[k].append(buf.channel(k))
    return {k: np.stack(v) for k, v in out.items()}
