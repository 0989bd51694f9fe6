"""File formats: PFM images, float32 checkpoints, YAML documents."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import yaml

CKPT_MAGIC = "TOFGS-CKPT 1"


class FormatError(ValueError):
    pass


def write_pfm(path, img: np.ndarray) -> None:
    """Write a 1-channel (H, W) or 3-channel (H, W, 3) little-endian PFM.

    Rows are stored bottom-to-top.
    """
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        tag = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = "PF"
    else:
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    data = np.ascontiguousarray(np.flipud(img), dtype="<f4")
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns float32 (H, W) or (H, W, 3), top row first."""
    path = Path(path)
    with open(path, "rb") as f:
        tag = f.readline().strip()
        dims = f.readline()
        scale_line = f.readline()
        raw = f.read()
    if tag == b"Pf":
        channels = 1
    elif tag == b"PF":
        channels = 3
    else:
        raise FormatError(f"{path}: not a PFM file")
    m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
    if not m:
        raise FormatError(f"{path}: malformed PFM dimensions")
    w, h = int(m.group(1)), int(m.group(2))
    scale = float(scale_line)
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * channels * 4
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated PFM ({len(raw)} of {expected} bytes)")
    data = np.frombuffer(raw[:expected], dtype=dtype).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy()


def write_checkpoint(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    """Text header line plus a flat little-endian float32 array.

    ``arrays`` are written in the given order; their names and shapes go
    into the header so the reader can split the payload again.
    """
    header = dict(header)
    header["fields"] = [[name, list(np.shape(a))] for name, a in arrays]
    flat = [np.asarray(a, dtype="<f4").ravel() for _, a in arrays]
    payload = np.concatenate(flat) if flat else np.zeros(0, dtype="<f4")
    header["num_floats"] = int(payload.size)
    text = CKPT_MAGIC + "\n" + json.dumps(header, sort_keys=True) + "\n"
    path = Path(path)
    with open(path, "wb") as f:
        f.write(text.encode("utf-8"))
        f.write(payload.tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").strip()
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        header = json.loads(f.readline().decode("utf-8"))
        raw = f.read()
    payload = np.frombuffer(raw, dtype="<f4")
    if payload.size != header["num_floats"]:
        raise FormatError(f"{path}: expected {header['num_floats']} floats, found {payload.size}")
    out = {}
    pos = 0
    for name, shape in header["fields"]:
        n = int(np.prod(shape)) if shape else 1
        out[name] = payload[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
    return header, out


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    return data or {}


def dump_yaml(path, data: dict) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)
