"""Image, flow and total objectives with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0       # quad term (5 for real captures, 1 for synthetic)
    beta: float = 0.0008     # flow term
    ssim_mix: float = 0.2    # lambda in (1 - lambda) MSE + lambda (1 - SSIM)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.ssim_mix) < 0 or self.ssim_mix > 1:
            raise ValueError("loss weights must be non-negative and ssim_mix <= 1")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero padding; the symmetric window makes this operator self-adjoint
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(x: np.ndarray, y: np.ndarray, *, return_grad: bool = False):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).

    With ``return_grad`` also returns d(SSIM)/dx.
    """
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    win = gaussian_window()
    total = 0.0
    grad = np.zeros_like(x)
    n = x.size
    for c in range(x.shape[2]):
        a, b = x[..., c], y[..., c]
        mu_x, mu_y = _blur(a, win), _blur(b, win)
        sxx = _blur(a * a, win) - mu_x ** 2
        syy = _blur(b * b, win) - mu_y ** 2
        sxy = _blur(a * b, win) - mu_x * mu_y
        A1 = 2 * mu_x * mu_y + SSIM_C1
        A2 = 2 * sxy + SSIM_C2
        B1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
        B2 = sxx + syy + SSIM_C2
        smap = A1 * A2 / (B1 * B2)
        total += smap.sum()
        if return_grad:
            # per-pixel partials w.r.t. the blurred statistics
            d_mu_x = (2 * mu_y * A2) / (B1 * B2) - smap * 2 * mu_x / B1
            d_sxx = -smap / B2
            d_sxy = 2 * A1 / (B1 * B2)
            # mu_x = blur(a); sxx = blur(a^2) - mu_x^2; sxy = blur(ab) - mu_x mu_y
            g_mu = d_mu_x - 2 * mu_x * d_sxx - mu_y * d_sxy
            grad[..., c] = (_blur(g_mu, win) + 2 * a * _blur(d_sxx, win) + b * _blur(d_sxy, win)) / n
    value = total / n
    return (value, grad) if return_grad else value


def image_loss(rendered, target, ssim_mix: float = 0.2):
    """``(1 - lambda) MSE + lambda (1 - SSIM)``; returns (value, d value / d rendered)."""
    r, t = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    diff = r - t
    mse = np.mean(diff ** 2)
    grad = (1 - ssim_mix) * 2 * diff / diff.size
    value = (1 - ssim_mix) * mse
    if ssim_mix > 0:
        s, gs = ssim(r, t, return_grad=True)
        value += ssim_mix * (1 - s)
        grad = grad - ssim_mix * gs.reshape(r.shape)
    return float(value), grad


def _flow_term(rendered, target, mask):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    mask = np.ones(rendered.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(rendered)
    diff = np.where(mask[..., None], rendered - target, 0.0)
    return float(np.sum(diff ** 2) / count), 2 * diff / count


def flow_loss(rendered_flow, target_flow, validity_mask=None, *, backward=None):
    """Mean over valid pixels of the squared flow error (summed over u, v).

    ``backward`` is an optional ``(rendered, target, mask)`` triple for the
    backward direction; when both exist the two terms are averaged.  Either
    direction may be ``None`` (sequence boundary).  Returns
    ``(value, grad_forward, grad_backward)``.
    """
    terms = []
    g_fwd = g_bwd = None
    if rendered_flow is not None and target_flow is not None:
        v, g_fwd = _flow_term(rendered_flow, target_flow, validity_mask)
        terms.append(v)
    if backward is not None:
        v, g_bwd = _flow_term(*backward)
        terms.append(v)
    if not terms:
        return 0.0, g_fwd, g_bwd
    k = len(terms)
    if k == 2:
        g_fwd, g_bwd = g_fwd / 2, g_bwd / 2
    return float(sum(terms) / k), g_fwd, g_bwd


def total_loss(quad_term: float, color_term: float | None, flow_term: float | None,
               w: LossWeights) -> float:
    return w.alpha * quad_term + (color_term or 0.0) + w.beta * (flow_term or 0.0)


def sample_random_background(rng: np.random.Generator, enabled: bool = True) -> np.ndarray:
    """Fresh training background quad, uniform in [-1, 1]^4 (zeros when disabled)."""
    if not enabled:
        return np.zeros(4)
    return rng.uniform(-1.0, 1.0, 4)
