"""Analytic traveling-wave fields for validation.

One-dimensional waves live on ``N x 1`` grids (space along rows).  Modes may
also carry a column wavenumber, which turns the same generator into a 2-D
plane-wave field on an ``N x width`` grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .field_data import Field

__all__ = ["Mode", "WaveSpec", "generate_wave", "simulation_variant", "extract_slice",
           "three_mode_wave", "two_season_proxy"]


@dataclass(frozen=True)
class Mode:
    """One traveling mode ``amplitude * sin(k * y + k_col * x - omega * t)``."""

    amplitude: float
    k: int
    omega: float
    k_col: int = 0

    def to_json(self) -> dict:
        return {"amplitude": self.amplitude, "k": self.k, "omega": self.omega, "k_col": self.k_col}

    @classmethod
    def from_json(cls, obj) -> "Mode":
        if isinstance(obj, (list, tuple)):
            return cls(*obj)
        return cls(float(obj["amplitude"]), int(obj["k"]), float(obj["omega"]), int(obj.get("k_col", 0)))


@dataclass(frozen=True)
class WaveSpec:
    """Sum of traveling modes sampled on ``[0, 2*pi)`` with ``n`` points.

    The right endpoint is excluded so integer wavenumbers land exactly on
    DFT bins.  ``t_end`` is exclusive as well: ``round((t_end - t_start) / dt)``
    steps are generated.
    """

    modes: tuple[Mode, ...]
    n: int = 128
    t_start: float = 0.0
    t_end: float = 10.0
    dt: float = 0.05
    width: int = 1

    def __post_init__(self) -> None:
        modes = tuple(m if isinstance(m, Mode) else Mode.from_json(m) for m in self.modes)
        object.__setattr__(self, "modes", modes)
        if not modes:
            raise ValueError("a wave spec needs at least one mode")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n < 1 or self.width < 1:
            raise ValueError("grid sizes must be positive")
        if self.steps < 1:
            raise ValueError("time range holds no steps")
        for m in modes:
            if not abs(m.k) < self.n / 2:
                raise ValueError(f"wavenumber {m.k} not resolvable on {self.n} points (needs |k| < {self.n / 2})")
            if self.width == 1 and m.k_col != 0:
                raise ValueError("column wavenumbers need width > 1")
            if self.width > 1 and not abs(m.k_col) < self.width / 2:
                raise ValueError(f"column wavenumber {m.k_col} not resolvable on width {self.width}")

    @property
    def steps(self) -> int:
        return int(round((self.t_end - self.t_start) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.steps)

    @property
    def x(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n) / self.n

    def to_json(self) -> dict:
        return {"modes": [m.to_json() for m in self.modes], "n": self.n, "t_start": self.t_start,
                "t_end": self.t_end, "dt": self.dt, "width": self.width}

    @classmethod
    def from_json(cls, obj: dict) -> "WaveSpec":
        return cls(tuple(Mode.from_json(m) for m in obj["modes"]), int(obj.get("n", 128)),
                   float(obj.get("t_start", 0.0)), float(obj.get("t_end", 10.0)),
                   float(obj.get("dt", 0.05)), int(obj.get("width", 1)))


def three_mode_wave() -> WaveSpec:
    """The reference system: sin(2x - t) + 0.4 sin(5x - 3t) + 0.25 sin(11x - 7t)."""
    return WaveSpec((Mode(1.0, 2, 1.0), Mode(0.4, 5, 3.0), Mode(0.25, 11, 7.0)))


def two_season_proxy(n: int = 64, steps: int = 100, dt: float = 0.05) -> tuple[WaveSpec, WaveSpec]:
    """2-D simulation / ground-truth pair that differ in a single mode.

    Both share two broad plane waves; the ground truth adds a finer mode the
    simulation misses.  Used as the desk-scale stand-in for a two-season site.
    """
    base = (Mode(1.0, 1, 1.0, 1), Mode(0.6, 2, 2.0, -1))
    extra = Mode(0.35, 5, 3.0, 4)
    t_end = steps * dt
    sim = WaveSpec(base, n=n, t_end=t_end, dt=dt, width=n)
    gt = WaveSpec(base + (extra,), n=n, t_end=t_end, dt=dt, width=n)
    return sim, gt


def generate_wave(spec: WaveSpec) -> Field:
    """Evaluate the spec on its grid; returns a ``[T, n, width]`` field."""
    t = spec.times[:, None, None]
    y = spec.x[None, :, None]
    x = (2 * np.pi * np.arange(spec.width) / spec.width)[None, None, :]
    u = np.zeros((spec.steps, spec.n, spec.width))
    for m in spec.modes:
        u += m.amplitude * np.sin(m.k * y + m.k_col * x - m.omega * t)
    extent = (2 * np.pi, 2 * np.pi) if spec.width > 1 else (2 * np.pi, 1.0)
    return Field(u, dt=spec.dt, extent=extent)


def simulation_variant(spec: WaveSpec, keep: int) -> Field:
    """Field of the truncated spec holding only the first ``keep`` modes."""
    if not 1 <= keep <= len(spec.modes):
        raise ValueError(f"keep must be in [1, {len(spec.modes)}], got {keep}")
    return generate_wave(replace(spec, modes=spec.modes[:keep]))


def extract_slice(field: Field, col: int) -> Field:
    """Column ``col`` of a 2-D field as a ``[T, H, 1]`` transect."""
    if not 0 <= col < field.W:
        raise IndexError(f"column {col} outside [0, {field.W})")
    return Field(field.values[:, :, col:col + 1], dt=field.dt, extent=(field.extent[1], 1.0))
