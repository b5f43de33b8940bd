"""Fourier-domain operators on ``[..., H, W]`` frames.

Every operator works on the half-spectrum layout returned by ``rfft2``: rows
carry ``ky`` in ``{0, .., H/2, -H/2+1, .., -1}`` and columns ``kx`` in
``{0, .., W/2}``.  The forward transform is unnormalized; every loss below is
a ratio of spectral sums so the scaling convention cancels.

Losses, counts and energy shares are taken over real Fourier *modes*, not
stored cells.  In the ``kx = 0`` (and even-``W`` Nyquist) columns a mode and
its conjugate are both stored, elsewhere only one of the two is.  Each mode is
represented by one stored cell (the ``ky >= 0`` member when both are stored)
and carries its Parseval multiplicity, so one real plane wave is exactly one
mode on 1-D and 2-D grids alike.

Losses accept torch tensors (and stay differentiable) or numpy arrays (and
return floats).  Leading batch dimensions are averaged.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .field_data import SensorSet

__all__ = [
    "FreqGrid",
    "SpectrumMask",
    "make_mask",
    "lowpass_project",
    "sparsity_loss",
    "topk_loss",
    "select_k",
    "dominant_frequencies",
    "build_exclusion",
    "spectrum_energy",
    "mode_energy",
    "mode_values",
    "ball_energy_fraction",
    "top_mode_fraction",
    "dominant_radius",
    "scatter_to_grid",
    "INF",
]

INF = math.inf


@dataclass(frozen=True)
class FreqGrid:
    """Integer wavenumber coordinates of the ``(H, W//2 + 1)`` half-spectrum."""

    H: int
    W: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W // 2 + 1)

    @property
    def ky(self) -> np.ndarray:
        i = np.arange(self.H)
        k = np.where(i <= self.H // 2, i, i - self.H)
        return np.broadcast_to(k[:, None], self.shape)

    @property
    def kx(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.W // 2 + 1)[None, :], self.shape)

    @property
    def radius(self) -> np.ndarray:
        return np.sqrt(self.ky.astype(float) ** 2 + self.kx.astype(float) ** 2)

    @property
    def nyquist_radius(self) -> float:
        return float(self.radius.max())

    def self_paired_columns(self) -> np.ndarray:
        """Columns whose ``(ky, kx)`` and ``(-ky, kx)`` cells are complex conjugates."""
        cols = np.zeros(self.shape[1], dtype=bool)
        cols[0] = True
        if self.W % 2 == 0:
            cols[-1] = True
        return cols

    def conj_rows(self) -> np.ndarray:
        """Row index holding ``-ky`` for each row."""
        return (-np.arange(self.H)) % self.H

    def modes(self) -> tuple[np.ndarray, np.ndarray]:
        """Representative flat cell and Parseval multiplicity of every real mode.

        Modes are listed in row-major order of their representative cell.  The
        multiplicity is 1 for cells that are their own conjugate (DC, Nyquist)
        and 2 otherwise.
        """
        return _mode_table(self.H, self.W)


@functools.lru_cache(maxsize=64)
def _mode_table(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    grid = FreqGrid(H, W)
    W2 = grid.shape[1]
    paired = grid.self_paired_columns()
    conj = grid.conj_rows()
    reps, mult = [], []
    for r in range(H):
        for c in range(W2):
            if paired[c]:
                if conj[r] < r:
                    continue          # represented by its ky >= 0 partner
                reps.append(r * W2 + c)
                mult.append(1 if conj[r] == r else 2)
            else:
                reps.append(r * W2 + c)
                mult.append(2)
    reps_a, mult_a = np.asarray(reps), np.asarray(mult, dtype=np.float64)
    reps_a.flags.writeable = False
    mult_a.flags.writeable = False
    return reps_a, mult_a


def mode_values(cells: np.ndarray, grid: FreqGrid) -> np.ndarray:
    """Gather a per-cell ``[..., H, W//2+1]`` array at the mode representatives."""
    reps, _ = grid.modes()
    return np.asarray(cells).reshape(*np.shape(cells)[:-2], -1)[..., reps]


@dataclass(frozen=True)
class SpectrumMask:
    """In-band and exclusion regions over a half-spectrum grid."""

    in_band: np.ndarray
    exclusion: np.ndarray

    @property
    def out_of_band(self) -> np.ndarray:
        return ~self.in_band

    @property
    def shape(self) -> tuple[int, int]:
        return self.in_band.shape


def make_mask(grid: FreqGrid, k_max: float | None = None,
              exclusion: np.ndarray | None = None) -> SpectrumMask:
    """Band ``|k| <= k_max`` (whole grid when ``k_max`` is None) plus an exclusion set."""
    if k_max is None or math.isinf(k_max):
        in_band = np.ones(grid.shape, dtype=bool)
    else:
        in_band = grid.radius <= k_max + 1e-9
    if exclusion is None:
        exclusion = np.zeros(grid.shape, dtype=bool)
    if exclusion.shape != grid.shape:
        raise ValueError(f"exclusion shape {exclusion.shape} does not match grid {grid.shape}")
    return SpectrumMask(in_band, exclusion.astype(bool))


def _to_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _out(v: torch.Tensor, numpy_in: bool):
    return float(v.detach()) if numpy_in else v


def lowpass_project(frame, k_c: float):
    """Keep Fourier modes with ``|k| <= k_c``; the result is real and the same type as the input."""
    if k_c < 0:
        raise ValueError("k_c must be non-negative")
    x, numpy_in = _to_tensor(frame)
    H, W = x.shape[-2:]
    grid = FreqGrid(H, W)
    keep = torch.as_tensor(grid.radius <= k_c + 1e-9)
    spec = torch.fft.rfft2(x)
    y = torch.fft.irfft2(spec * keep.to(spec.real.dtype), s=(H, W))
    return y.numpy() if numpy_in else y


def _mode_magnitudes(x: torch.Tensor) -> tuple[torch.Tensor, FreqGrid]:
    """``[..., M]`` mode amplitudes ``sqrt(multiplicity) * |X|`` of real frames."""
    H, W = x.shape[-2:]
    grid = FreqGrid(H, W)
    reps, mult = grid.modes()
    spec = torch.fft.rfft2(x).flatten(-2)[..., torch.from_numpy(np.array(reps))]
    return spec.abs() * torch.as_tensor(np.sqrt(mult), dtype=x.dtype), grid


def sparsity_loss(hf_frame, mask: SpectrumMask, beta1: float = 100.0, beta2: float = 100.0,
                  eps: float = 1e-8):
    """In-band L1/L2 ratio of mode amplitudes plus weighted out-of-band and exclusion energy fractions."""
    x, numpy_in = _to_tensor(hf_frame)
    mag, grid = _mode_magnitudes(x)
    if tuple(mask.shape) != grid.shape:
        raise ValueError(f"mask shape {mask.shape} does not match half-spectrum {grid.shape}")
    power = mag ** 2
    band = torch.as_tensor(mode_values(mask.in_band, grid)).to(mag.dtype)
    excl = torch.as_tensor(mode_values(mask.exclusion, grid)).to(mag.dtype)
    total = power.sum(-1)
    l1 = (mag * band).sum(-1)
    l2 = torch.sqrt((power * band).sum(-1) + eps)
    out_band = (power * (1 - band)).sum(-1) / (total + eps)
    excluded = (power * excl).sum(-1) / (total + eps)
    loss = l1 / l2 + beta1 * out_band + beta2 * excluded
    return _out(loss.mean(), numpy_in)


def topk_loss(hf_frame, k, eps: float = 1e-8, dc_counts: bool = True):
    """Energy share outside the ``k`` strongest modes (0 for an all-zero frame).

    With ``dc_counts=False`` the ``k`` kept modes are chosen among non-DC
    modes only, so energy in a constant offset is always penalized.
    """
    x, numpy_in = _to_tensor(hf_frame)
    if k is None or (isinstance(k, float) and math.isinf(k)):
        return _out(x.sum() * 0.0, numpy_in)
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    flat = _mode_magnitudes(x)[0] ** 2
    total = flat.sum(-1)
    candidates = flat if dc_counts else flat[..., 1:]
    k = min(k, candidates.shape[-1])
    top = torch.topk(candidates, k, dim=-1).values.sum(-1) if k > 0 else total * 0.0
    loss = (total - top) / (total + eps)
    return _out(loss.mean(), numpy_in)


def scatter_to_grid(series: np.ndarray, sensors: SensorSet) -> np.ndarray:
    """Place ``[T, p]`` sensor values on a zero ``[T, H, W]`` grid."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim == 1:
        s = s[None]
    out = np.zeros((s.shape[0], sensors.H * sensors.W))
    out[:, np.asarray(sensors.indices)] = s
    return out.reshape(s.shape[0], sensors.H, sensors.W)


def _mean_magnitude(frames: np.ndarray) -> np.ndarray:
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    return np.abs(np.fft.rfft2(f)).mean(axis=0)


def select_k(residual_series: np.ndarray, sensors: SensorSet, delta_k: float = 2.0, rho: float = 0.8,
             mode="auto", significance: float = 0.1):
    """Adaptive mode count ``max(k_cluster, k_energy)`` from sparse sensor residuals.

    Residuals are zero-filled onto the grid, magnitude spectra are averaged
    over time and the DC cell is dropped.  ``k_cluster`` counts cells whose
    radius lies within ``delta_k`` of the peak radius among cells holding at
    least ``significance`` of the peak magnitude.  ``k_energy`` is the
    smallest count of strongest cells reaching a ``rho`` share of the energy.
    ``mode`` may be ``"auto"``, ``"inf"``/``math.inf`` or a fixed integer.
    """
    if mode == "inf" or (isinstance(mode, float) and math.isinf(mode)):
        return INF
    if mode != "auto":
        k = int(mode)
        if k < 1:
            raise ValueError("fixed k must be >= 1")
        return k
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    if delta_k < 0:
        raise ValueError("delta_k must be non-negative")
    mag = _mean_magnitude(scatter_to_grid(residual_series, sensors))
    return _select_k_from_magnitude(mag, FreqGrid(sensors.H, sensors.W), delta_k, rho, significance)


def _select_k_from_magnitude(mag: np.ndarray, grid: FreqGrid, delta_k: float, rho: float,
                             significance: float = 0.1) -> int:
    """``max(k_cluster, k_energy)`` over modes of a per-cell magnitude spectrum."""
    reps, mult = grid.modes()
    amp = mode_values(mag, grid) * np.sqrt(mult)
    amp[0] = 0.0                     # DC is never a mode to peel
    power = amp ** 2
    total = power.sum()
    if total <= 0:
        warnings.warn("residual spectrum is all zero; using k = 1", RuntimeWarning, stacklevel=3)
        return 1
    order = _ranked_modes(amp, grid)
    peak = order[0]
    radius = grid.radius.ravel()[reps]
    significant = amp >= significance * amp[peak]
    k_cluster = int(np.sum(significant & (np.abs(radius - radius[peak]) <= delta_k)))
    cum = np.cumsum(power[order])
    k_energy = int(np.searchsorted(cum, rho * total * (1 - 1e-12)) + 1)
    return max(k_cluster, k_energy)


def _ranked_modes(amp: np.ndarray, grid: FreqGrid) -> np.ndarray:
    """Mode indices by descending amplitude; ties by lexicographic ``(ky, kx)``."""
    reps, _ = grid.modes()
    ky = grid.ky.ravel()[reps]
    kx = grid.kx.ravel()[reps]
    return np.lexsort((kx, ky, -amp))


def _mode_label(grid: FreqGrid, mode: int) -> tuple[int, int]:
    cell = grid.modes()[0][mode]
    return int(grid.ky.ravel()[cell]), int(grid.kx.ravel()[cell])


def dominant_frequencies(hf, k: int, aggregate: str = "mean-field",
                         min_rel: float = 0.0) -> list[tuple[int, int]]:
    """Top-``k`` distinct wavenumbers ``(ky, kx)`` of an HF output, DC excluded.

    ``hf`` is one ``[H, W]`` frame or a ``[T, H, W]`` stack.  Stacks are
    reduced by averaging the frames (``"mean-field"``) or by averaging their
    magnitude spectra (``"mean-magnitude"``).  Each real mode is reported
    once, by its representative cell.  Modes weaker than ``min_rel`` times the
    peak amplitude are never reported.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    f = np.asarray(hf, dtype=np.float64)
    if f.ndim == 3:
        if aggregate == "mean-field":
            f = f.mean(axis=0)
        elif aggregate != "mean-magnitude":
            raise ValueError(f"unknown aggregate {aggregate!r}")
    H, W = f.shape[-2:]
    grid = FreqGrid(H, W)
    amp = mode_values(_mean_magnitude(f), grid) * np.sqrt(grid.modes()[1])
    amp[0] = 0.0
    floor = min_rel * amp.max()
    out: list[tuple[int, int]] = []
    for m in _ranked_modes(amp, grid)[:k]:
        if amp[m] <= 0 or amp[m] < floor:
            break
        out.append(_mode_label(grid, int(m)))
    return out


def build_exclusion(discovered: Iterable[Sequence[int]], r_exc: float, grid: FreqGrid) -> np.ndarray:
    """Union of balls ``|k - k_j| < r_exc`` around each discovered cell and its ``(-ky, kx)`` mirror.

    ``r_exc = 0`` still marks the discovered cells themselves.
    """
    if r_exc < 0:
        raise ValueError("r_exc must be non-negative")
    ky = grid.ky.astype(float)
    kx = grid.kx.astype(float)
    mask = np.zeros(grid.shape, dtype=bool)
    for y0, x0 in discovered:
        for cy in (y0, -y0):
            d = np.sqrt((ky - cy) ** 2 + (kx - x0) ** 2)
            mask |= (d < r_exc) | (d == 0)
    # the Nyquist row carries a single label, so mirror through row indices too
    mask |= mask[grid.conj_rows()]
    return mask


def spectrum_energy(frames) -> np.ndarray:
    """Summed half-spectrum power over a ``[T, H, W]`` stack (or one frame)."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    return (np.abs(np.fft.rfft2(f)) ** 2).sum(axis=0)


def mode_energy(frames) -> tuple[np.ndarray, FreqGrid]:
    """Per-mode energy of a stack, summed over frames, with the grid that labels it."""
    f = np.asarray(frames)
    grid = FreqGrid(*f.shape[-2:])
    return mode_values(spectrum_energy(f), grid) * grid.modes()[1], grid


def ball_energy_fraction(frames, centers: Iterable[Sequence[int]], r: float) -> float:
    """Share of spectral energy inside the (mirrored) balls of radius ``r`` around ``centers``."""
    energy, grid = mode_energy(frames)
    region = mode_values(build_exclusion(list(centers), r, grid), grid)
    total = energy.sum()
    return float(energy[region].sum() / total) if total > 0 else 0.0


def top_mode_fraction(frames) -> float:
    """Energy share of the single strongest non-DC mode."""
    energy, _ = mode_energy(frames)
    total = energy.sum()
    if total <= 0:
        return 0.0
    return float(energy[1:].max() / total) if energy.size > 1 else 0.0


def dominant_radius(frames) -> float:
    """Radius of the strongest non-DC mode of the summed power spectrum."""
    energy, grid = mode_energy(frames)
    energy = energy.copy()
    energy[0] = 0.0
    cell = grid.modes()[0][int(np.argmax(energy))]
    return float(grid.radius.ravel()[cell])
