"""Continuous-wave time-of-flight signal math.

Raw samples follow ``Q_phi = A sin(psi + phi) + B`` for the four reference
offsets ``phi in {0, pi/2, pi, 3pi/2}``.  Everything here works on scalars or
on arrays whose trailing axis holds the four samples, so whole images go
through the same code path as single pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# Depth value reported where the phase is undefined (zero amplitude).
INVALID_DEPTH = np.nan

PHASE_OFFSETS = np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi])


@dataclass(frozen=True)
class ToFConfig:
    modulation_frequency: float = SPEED_OF_LIGHT / 10.0  # d_u = 5 m
    source_intensity: float = 1.0
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not self.modulation_frequency > 0:
            raise ValueError("modulation_frequency must be positive")
        if self.source_intensity < 0:
            raise ValueError("source_intensity must be non-negative")

    @property
    def unambiguous_range(self) -> float:
        return unambiguous_range(self)

    @property
    def phase_per_meter(self) -> float:
        """d(psi)/d(depth) for the round trip, 4 pi f / c."""
        return 4.0 * np.pi * self.modulation_frequency / self.speed_of_light

    def to_dict(self) -> dict:
        return {
            "modulation_frequency": self.modulation_frequency,
            "source_intensity": self.source_intensity,
            "speed_of_light": self.speed_of_light,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToFConfig":
        return cls(
            modulation_frequency=float(d.get("modulation_frequency", cls.modulation_frequency)),
            source_intensity=float(d.get("source_intensity", cls.source_intensity)),
            speed_of_light=float(d.get("speed_of_light", SPEED_OF_LIGHT)),
        )

    @classmethod
    def for_range(cls, d_u: float, source_intensity: float = 1.0) -> "ToFConfig":
        """Config whose unambiguous range is ``d_u`` meters."""
        return cls(SPEED_OF_LIGHT / (2.0 * d_u), source_intensity)


class QuadPixel(NamedTuple):
    q0: float
    q90: float
    q180: float
    q270: float


class Phasor(NamedTuple):
    re: float
    im: float

    @property
    def magnitude(self) -> float:
        return float(np.hypot(self.re, self.im))

    @property
    def phase(self) -> float:
        return float(np.arctan2(self.im, self.re))


def unambiguous_range(cfg: ToFConfig) -> float:
    return cfg.speed_of_light / (2.0 * cfg.modulation_frequency)


def phase_of_depth(d, cfg: ToFConfig):
    return cfg.phase_per_meter * np.asarray(d, dtype=np.float64)


def phasor_of_depth(d, cfg: ToFConfig):
    """Unit phasor ``exp(i psi)`` for depth ``d``; returns (re, im)."""
    psi = phase_of_depth(d, cfg)
    if np.ndim(psi) == 0:
        return Phasor(float(np.cos(psi)), float(np.sin(psi)))
    return np.stack([np.cos(psi), np.sin(psi)], axis=-1)


def quad_basis(d, cfg: ToFConfig) -> np.ndarray:
    """The four zero-mean raw samples ``(sin, cos, -sin, -cos)(psi)`` of a unit return."""
    psi = phase_of_depth(d, cfg)
    s, c = np.sin(psi), np.cos(psi)
    return np.stack([s, c, -s, -c], axis=-1)


def _as_quad(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"expected four raw samples on the last axis, got shape {q.shape}")
    return q


def quad_to_phasor(q):
    """Phasor of a quartet, real part ``Q90 - Q270`` and imaginary part ``Q0 - Q180``.

    With this ordering the phasor angle equals the phase recovered by
    ``quad_to_depth`` and ``quad_to_phasor(quad_basis(d))`` has magnitude 2.
    """
    q = _as_quad(q)
    re = q[..., 1] - q[..., 3]
    im = q[..., 0] - q[..., 2]
    if q.ndim == 1:
        return Phasor(float(re), float(im))
    return np.stack([re, im], axis=-1)


def quad_to_amplitude(q):
    q = _as_quad(q)
    a = 0.5 * np.hypot(q[..., 0] - q[..., 2], q[..., 1] - q[..., 3])
    return float(a) if q.ndim == 1 else a


PSI_WRAP_TOL = 1e-12


def phasor_to_depth(re, im, cfg: ToFConfig):
    """Depth in ``[0, d_u)`` from phasor components; NaN where both vanish."""
    re = np.asarray(re, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    psi = np.mod(np.arctan2(im, re), 2.0 * np.pi)
    # a phase a hair below 2 pi is round-off of a phase of 0 (e.g. im = -1e-17)
    psi = np.where(psi > 2.0 * np.pi - PSI_WRAP_TOL, 0.0, psi)
    d = psi / cfg.phase_per_meter
    d_u = unambiguous_range(cfg)
    # mod can round up to exactly 2 pi
    d = np.where(d >= d_u, d - d_u, d)
    return np.where((re == 0.0) & (im == 0.0), INVALID_DEPTH, d)


def quad_to_depth(q, cfg: ToFConfig):
    """Naive C-ToF depth of a quartet (full-quadrant arctangent)."""
    q = _as_quad(q)
    d = phasor_to_depth(q[..., 1] - q[..., 3], q[..., 0] - q[..., 2], cfg)
    return float(d) if q.ndim == 1 else d


def synthesize_quad(d, amplitude, cfg: ToFConfig, bias=0.0) -> np.ndarray:
    """``amplitude * quad_basis(d) + bias``; broadcasting over all arguments."""
    amp = np.asarray(amplitude, dtype=np.float64)[..., None]
    return amp * quad_basis(d, cfg) + np.asarray(bias, dtype=np.float64)[..., None]
