"""RMSE and windowed SSIM between reconstructed and reference fields."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .field_data import Field

__all__ = ["SsimConfig", "rmse", "ssim", "ssim_frames", "rmse_frames", "gaussian_window"]


@dataclass
class SsimConfig:
    """Gaussian-window SSIM settings.  ``data_range=None`` uses the joint range of both inputs."""

    window: int = 7
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None

    def __post_init__(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window must be a positive odd integer")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.data_range is not None and self.data_range <= 0:
            raise ValueError("data_range must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def _values(x) -> np.ndarray:
    v = x.values if isinstance(x, Field) else np.asarray(x)
    return v.astype(np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(a, b) -> float:
    """Root mean squared difference over every cell."""
    a, b = _values(a), _values(b)
    _same_shape(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_frames(a, b) -> np.ndarray:
    a, b = _values(a), _values(b)
    _same_shape(a, b)
    return np.sqrt(((a - b) ** 2).reshape(a.shape[0], -1).mean(1))


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_frames(a, b, cfg: SsimConfig | None = None) -> np.ndarray:
    """Per-frame SSIM for ``[T, H, W]`` (or ``[H, W]``) inputs."""
    cfg = cfg or SsimConfig()
    a, b = _values(a), _values(b)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    H, W = a.shape[-2:]
    if cfg.window > min(H, W):
        raise ValueError(f"SSIM window {cfg.window} does not fit a {H}x{W} frame")
    rng = cfg.data_range
    if rng is None:
        rng = max(a.max(), b.max()) - min(a.min(), b.min())
        rng = rng if rng > 0 else 1.0
    c1 = (cfg.k1 * rng) ** 2
    c2 = (cfg.k2 * rng) ** 2
    win = gaussian_window(cfg.window, cfg.sigma)
    pad = (cfg.window - 1) // 2

    def filt(x):
        y = ndimage.correlate(x, win, mode="reflect")
        return y[pad:H - pad, pad:W - pad]

    out = np.empty(a.shape[0])
    for t in range(a.shape[0]):
        x, y = a[t], b[t]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        out[t] = float(np.mean(num / den))
    return out


def ssim(a, b, cfg: SsimConfig | None = None) -> float:
    """Frame-averaged SSIM."""
    return float(np.mean(ssim_frames(a, b, cfg)))
