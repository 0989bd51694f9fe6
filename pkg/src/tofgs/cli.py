"""Command-line entry point: simulate, fit, eval, gradcheck, render.

Exit codes: 0 success, 1 invalid input (config, dataset, checkpoint),
2 a numerical check failed.
"""
from __future__ import annotations

import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import dataset, gradcheck, io, metrics, synthcam, trainer
from .deform import DeformNet
from .scene import CameraModel, CanonicalScene
from .tof import ToFConfig, quad_to_depth

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOL = 1e-3

# simulate config defaults; every key may be omitted
SIMULATE_DEFAULTS = {
    "capture": {"raw_fps": 120.0, "duration": 0.2, "width": 64, "height": 48,
                "noise_std": 0.0, "lambertian": False, "seed": 0},
    "tof": {"modulation_frequency": ToFConfig().modulation_frequency,
            "source_intensity": synthcam.SOURCE_INTENSITY},
    "camera": {"hfov_deg": 60.0, "near": 0.5, "far": 4.0},
    "scene": {"preset": "sliding_cube", "options": {}},
    "with_color": False,
}

SCENE_CKPT, DEFORM_CKPT, TRAIN_LOG, SUMMARY = "scene.ckpt", "deform.ckpt", "train.log", "fit_summary.yaml"
RENDER_DIR = "renders"


class CheckFailed(Exception):
    """A numerical check did not meet its tolerance."""


def _merge(defaults: dict, user: dict, where: str = "") -> dict:
    out = {}
    unknown = set(user) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(where + k for k in unknown)}")
    for k, v in defaults.items():
        if k in user and isinstance(v, dict) and k != "scene":
            out[k] = _merge(v, user[k] or {}, f"{where}{k}.")
        else:
            out[k] = user.get(k, v)
    return out


def simulation_from_config(cfg: dict):
    """Capture spec, camera and analytic scene from a (partial) simulate config."""
    c = _merge(SIMULATE_DEFAULTS, cfg or {})
    cap = c["capture"]
    spec = synthcam.CaptureSpec(raw_fps=float(cap["raw_fps"]), duration=float(cap["duration"]),
                                width=int(cap["width"]), height=int(cap["height"]),
                                tof=ToFConfig.from_dict(c["tof"]), noise_std=float(cap["noise_std"]),
                                lambertian=bool(cap["lambertian"]), seed=int(cap["seed"]))
    cam = synthcam.default_camera(spec, float(c["camera"]["hfov_deg"]), float(c["camera"]["near"]),
                                  float(c["camera"]["far"]))
    scene = synthcam.scene_from_dict(c["scene"], spec, cam)
    return spec, cam, scene, bool(c["with_color"])


def _load_config(path) -> dict:
    if path is None:
        return {}
    d = io.load_yaml(path)
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return d


# ---------------------------------------------------------------- render output


def write_channel(out_dir: Path, stem: str, name: str, img: np.ndarray) -> list[str]:
    """Write one rendered channel; quads as four grayscale files, flow as (u, v, valid)."""
    written = []
    if name == "quad":
        for m, suf in enumerate(synthcam.PHASE_SUFFIXES):
            p = out_dir / f"{stem}_{suf}.pfm"
            io.write_pfm(p, img[..., m])
            written.append(p.name)
    elif name in ("flow", "flow_backward"):
        p = out_dir / f"{stem}.pfm"
        io.write_pfm(p, np.dstack([img, np.ones(img.shape[:2])]))
        written.append(p.name)
    else:
        p = out_dir / f"{stem}.pfm"
        io.write_pfm(p, img)
        written.append(p.name)
    return written


def read_quad(out_dir: Path, stem: str) -> np.ndarray:
    return np.stack([io.read_pfm(out_dir / f"{stem}_{suf}.pfm") for suf in synthcam.PHASE_SUFFIXES], axis=-1)


def write_fit_renders(out_dir: Path, scene: CanonicalScene, net: DeformNet, cam: CameraModel, n_q: int) -> None:
    rdir = out_dir / RENDER_DIR
    rdir.mkdir(parents=True, exist_ok=True)
    st = trainer.render_sequence(scene, net, cam, n_q)
    for i in range(n_q):
        write_channel(rdir, f"quad_{i:05d}", "quad", st["quad"][i])
        io.write_pfm(rdir / f"d_{i:05d}.pfm", st["mean_depth"][i])
        io.write_pfm(rdir / f"weight_{i:05d}.pfm", st["weight"][i])
        io.write_pfm(rdir / f"dd_{i:05d}.pfm", st["depth_distortion"][i])
        io.write_pfm(rdir / f"dtof_{i:05d}.pfm", np.nan_to_num(quad_to_depth(st["quad"][i], scene.tof), nan=0.0))


def evaluate(out_dir, dataset_dir) -> metrics.DepthReport:
    """Score the renders written by ``fit`` against the dataset ground truth."""
    out_dir = Path(out_dir)
    ds = dataset.load(dataset_dir)
    rdir = out_dir / RENDER_DIR
    if not rdir.is_dir():
        raise dataset.DatasetError(f"{rdir}: no renders (run fit first)")
    mean_depth, weight, quads = [], [], []
    for i in range(ds.n_quartets):
        try:
            mean_depth.append(io.read_pfm(rdir / f"d_{i:05d}.pfm"))
            weight.append(io.read_pfm(rdir / f"weight_{i:05d}.pfm"))
            quads.append(read_quad(rdir, f"quad_{i:05d}"))
        except FileNotFoundError as e:
            raise dataset.DatasetError(f"missing render for timestep {i}: {e}") from e
    rep = metrics.score_frames(np.stack(mean_depth), np.stack(weight), np.stack(quads), ds)
    summary = out_dir / SUMMARY
    if summary.is_file():
        rep.wall_seconds = float((io.load_yaml(summary) or {}).get("wall_seconds", 0.0))
    return rep


def load_model(path):
    """Scene (and deformation net, if present) from a fit directory or a scene checkpoint."""
    p = Path(path)
    scene_path = p / SCENE_CKPT if p.is_dir() else p
    scene, extra = CanonicalScene.load(scene_path)
    net_path = scene_path.parent / DEFORM_CKPT
    net = DeformNet.load(net_path) if net_path.is_file() else None
    cam = CameraModel.from_dict(extra["camera"]) if "camera" in extra else None
    return scene, net, cam, int(extra.get("n_quartets", 1))


# ---------------------------------------------------------------- commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Time-of-flight Gaussian splatting: simulate, fit, evaluate, check, render."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
def simulate(config, out_dir):
    """Render a synthetic raw C-ToF dataset from CONFIG (YAML) into OUT_DIR."""
    spec, cam, scene, with_color = simulation_from_config(_load_config(config))
    synthcam.export_dataset(scene, cam, spec, out_dir, with_color=with_color)
    ds = dataset.load(out_dir)
    acc = metrics.DepthAccumulator()
    for i in range(ds.n_quartets):
        acc.add(ds.naive_depth(i), ds.gt_depth[i], ds.gt_mask[i])
    click.echo(f"frames: {ds.raw.shape[0]}")
    click.echo(f"quartets: {ds.n_quartets}")
    click.echo(f"resolution: {cam.width}x{cam.height}")
    click.echo(f"mse_naive_ctof_x100: {acc.value}")


@main.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
def fit(dataset_dir, config, out_dir):
    """Fit Gaussians + deformation network to DATASET_DIR; write checkpoints, log and renders."""
    ds = dataset.load(dataset_dir)
    cfg = trainer.TrainConfig.from_dict(_load_config(config))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / TRAIN_LOG, "w") as logf:
        def cb(entry, scene, net):
            logf.write(trainer.format_log_line(entry) + "\n")
        res = trainer.fit(ds, cfg, callback=cb)
    res.scene.save(out / SCENE_CKPT, extra={"camera": ds.cam.to_dict(), "n_quartets": res.n_quartets,
                                            "seed": cfg.seed})
    res.net.save(out / DEFORM_CKPT)
    io.dump_yaml(out / "train_config.yaml", cfg.to_dict())
    write_fit_renders(out, res.scene, res.net, ds.cam, res.n_quartets)
    io.dump_yaml(out / SUMMARY, {"iterations": cfg.iterations, "gaussians": len(res.scene),
                                 "final_loss": float(res.log[-1]["loss"]) if res.log else None,
                                 "wall_seconds": res.wall_seconds})
    click.echo(f"fit: {cfg.iterations} iterations, {len(res.scene)} gaussians, {res.wall_seconds:.1f} s")


@main.command("eval")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--report", type=click.Path(dir_okay=False), help="Also write the report to this file.")
def eval_cmd(out_dir, dataset_dir, report):
    """Depth MSE x 100 of the fitted renders in OUT_DIR against DATASET_DIR."""
    rep = evaluate(out_dir, dataset_dir)
    text = rep.to_text()
    click.echo(text, nl=False)
    if report:
        Path(report).write_text(text)


@main.command("gradcheck")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--gaussians", "n_gaussians", default=4, show_default=True, type=click.IntRange(1, 5))
@click.option("--size", default=8, show_default=True, type=click.IntRange(2, 32))
@click.option("--h", "step", default=1e-4, show_default=True, type=float)
@click.option("--no-network", is_flag=True, help="Skip the deformation-network check.")
def gradcheck_cmd(seed, n_gaussians, size, step, no_network):
    """Finite-difference check of every analytic gradient; exit 2 above tolerance."""
    t0 = time.perf_counter()
    worst = gradcheck.run(seed, n_gaussians, size, step, network=not no_network)
    for k, v in worst.items():
        click.echo(f"{k}: {v:.3e}")
    top = max(worst.values())
    click.echo(f"max_relative_error: {top:.3e} (tolerance {GRADCHECK_TOL:g}, {time.perf_counter() - t0:.1f} s)")
    if not top < GRADCHECK_TOL:
        raise CheckFailed(f"max relative error {top:.3e} >= {GRADCHECK_TOL:g}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("-t", "--time", "t", default=0.0, show_default=True, type=float,
              help="Timestep in [0, n_quartets]; fractional values interpolate.")
@click.option("-c", "--channels", default="quad,mean_depth", show_default=True,
              help="Comma-separated channel names.")
@click.argument("out_dir", type=click.Path(file_okay=False))
def render(checkpoint, t, channels, out_dir):
    """Render CHANNELS of a fitted model at time T into OUT_DIR."""
    scene, net, cam, n_q = load_model(checkpoint)
    if cam is None:
        raise ValueError(f"{checkpoint}: checkpoint has no camera")
    names = [c.strip() for c in channels.split(",") if c.strip()]
    derived = "d_tof" in names
    names = [c for c in names if c != "d_tof"]
    if derived and "quad" not in names:
        names.append("quad")
    from .splat import CHANNELS
    bad = [c for c in names if c not in CHANNELS]
    if bad:
        raise ValueError(f"unknown channels {bad}; choose from {list(CHANNELS) + ['d_tof']}")
    kw = {}
    if net is not None and ({"flow", "flow_backward"} & set(names)):
        i = min(int(np.floor(t)), n_q - 1)
        x = trainer.deform_positions(scene, net, i, n_q)
        if "flow" in names:
            kw["flow_offsets"] = trainer.deform_positions(scene, net, i + 1, n_q) - x
        if "flow_backward" in names and i > 0:
            kw["flow_offsets_backward"] = trainer.deform_positions(scene, net, i - 1, n_q) - x
    buf, _ = trainer.render_at(scene, net, cam, t, n_q, channels=names, **kw)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"t{t:08.3f}"
    files = []
    for c in names:
        files += write_channel(out, f"{c}_{stem}", c, buf.channel(c))
    if derived:
        files += write_channel(out, f"d_tof_{stem}", "d_tof",
                               np.nan_to_num(quad_to_depth(buf.quad, scene.tof), nan=0.0))
    for f in files:
        click.echo(f)


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto the documented exit codes."""
    try:
        main.main(args=argv, standalone_mode=False)
    except CheckFailed as e:
        click.echo(f"check failed: {e}", err=True)
        return EXIT_NUMERIC
    except click.exceptions.Abort:
        return EXIT_INVALID
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except (ValueError, KeyError, FileNotFoundError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_INVALID
    return EXIT_OK


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
