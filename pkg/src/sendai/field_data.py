"""Spatiotemporal fields, sensor sets, delay embeddings and field-bundle I/O.

A field is stored as a ``[T, H, W]`` float array.  One-dimensional fields are
``W == 1`` grids so that every FFT and coordinate operation has a single code
path.  Sensors are flat row-major indices into the ``H x W`` grid.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Field",
    "SensorSet",
    "DelayEmbedding",
    "Normalizer",
    "BundleError",
    "sample",
    "place_sensors_random",
    "delay_embed",
    "save_bundle",
    "load_bundle",
    "save_sensors",
    "load_sensors",
    "ndvi",
    "atomic_write_bytes",
    "atomic_write_text",
]


class BundleError(ValueError):
    """Raised when a field bundle on disk is malformed."""


@dataclass(frozen=True)
class Field:
    """Scalar field sampled on a regular ``[T, H, W]`` grid.

    Parameters
    ----------
    values : ndarray
        Array of shape ``(T, H, W)``.  Copied and made read-only.
    dt : float
        Time step in model units.
    extent : tuple of float
        Physical ``(x_len, y_len)`` of the domain.
    """

    values: np.ndarray
    dt: float = 1.0
    extent: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        v = np.array(self.values, copy=True)
        if v.ndim != 3:
            raise ValueError(f"field values must be 3-D [T, H, W], got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"field dimensions must be >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def H(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.shape[2]

    @property
    def n(self) -> int:
        return self.H * self.W

    def flat(self) -> np.ndarray:
        """Return the ``[T, H*W]`` row-major view."""
        return self.values.reshape(self.T, -1)

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(values, dt=self.dt, extent=self.extent)


@dataclass(frozen=True)
class SensorSet:
    """Ordered flat sensor indices into an ``H x W`` grid."""

    indices: tuple[int, ...]
    H: int
    W: int
    buffer: int = 0
    seed: int | None = None

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        n = self.H * self.W
        if len(idx) == 0:
            raise ValueError("a sensor set needs at least one sensor")
        if len(set(idx)) != len(idx):
            raise ValueError("sensor indices must be distinct")
        for i in idx:
            if not 0 <= i < n:
                raise IndexError(f"sensor index {i} outside [0, {n})")
        if 4 * len(idx) > n:
            raise ValueError(f"{len(idx)} sensors is not sparse for a {self.H}x{self.W} grid (max {n // 4})")
        rows, cols = self.rows, self.cols
        for i, r, c in zip(idx, rows, cols):
            if not _inside_buffer(r, self.H, self.buffer) or not _inside_buffer(c, self.W, self.buffer):
                raise ValueError(f"sensor index {i} (row {r}, col {c}) lies within the {self.buffer}-pixel boundary buffer")

    @property
    def p(self) -> int:
        return len(self.indices)

    @property
    def rows(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64) // self.W

    @property
    def cols(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64) % self.W

    def to_json(self) -> dict:
        return {"indices": list(self.indices), "H": self.H, "W": self.W,
                "buffer": self.buffer, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "SensorSet":
        return cls(tuple(obj["indices"]), int(obj["H"]), int(obj["W"]),
                   int(obj.get("buffer", 0)), obj.get("seed"))


def _inside_buffer(i: int, size: int, buffer: int) -> bool:
    # a singleton axis (1-D field stored as W == 1) has no boundary to avoid
    if size == 1:
        return True
    return buffer <= i < size - buffer


@dataclass(frozen=True)
class DelayEmbedding:
    """Sliding sensor-history windows; ``windows[i]`` ends at timestep ``i + lags - 1``."""

    windows: np.ndarray
    lags: int

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def end_times(self) -> np.ndarray:
        return np.arange(len(self)) + self.lags - 1


@dataclass
class Normalizer:
    """Scalar affine normalizer fitted on one field and reused for others.

    ``mode`` is one of ``"min-max"`` (maps the fit range to [0, 1]),
    ``"z-score"`` or ``"none"``.
    """

    mode: str = "min-max"
    offset: float = 0.0
    scale: float = 1.0
    fitted: bool = field(default=False, repr=False)

    _MODES = ("min-max", "z-score", "none")

    def __post_init__(self) -> None:
        if self.mode not in self._MODES:
            raise ValueError(f"normalizer mode must be one of {self._MODES}, got {self.mode!r}")

    def fit(self, values: np.ndarray) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64)
        if self.mode == "min-max":
            lo, hi = float(v.min()), float(v.max())
            self.offset, self.scale = lo, (hi - lo) if hi > lo else 1.0
        elif self.mode == "z-score":
            mu, sd = float(v.mean()), float(v.std())
            self.offset, self.scale = mu, sd if sd > 0 else 1.0
        else:
            self.offset, self.scale = 0.0, 1.0
        self.fitted = True
        return self

    def normalize(self, x):
        return (x - self.offset) / self.scale

    def denormalize(self, x):
        return x * self.scale + self.offset

    def to_json(self) -> dict:
        return {"mode": self.mode, "offset": self.offset, "scale": self.scale}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(obj["mode"], float(obj["offset"]), float(obj["scale"]), True)


def sample(field: Field | np.ndarray, sensors: SensorSet, noise_std: float = 0.0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply the sampling operator: return the ``[T, p]`` sensor series.

    ``noise_std > 0`` adds i.i.d. Gaussian noise (off by default).
    """
    values = field.values if isinstance(field, Field) else np.asarray(field)
    if values.ndim == 2:
        values = values[None]
    T, H, W = values.shape
    if (H, W) != (sensors.H, sensors.W):
        raise ValueError(f"sensor grid {sensors.H}x{sensors.W} does not match field grid {H}x{W}")
    flat = values.reshape(T, H * W)
    idx = np.asarray(sensors.indices)
    bad = idx[(idx < 0) | (idx >= H * W)]
    if bad.size:
        raise IndexError(f"sensor index {int(bad[0])} outside [0, {H * W})")
    out = flat[:, idx].astype(np.float64, copy=True)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        out += rng.normal(0.0, noise_std, size=out.shape)
    return out


def place_sensors_random(H: int, W: int, p: int, buffer: int = 2, seed: int = 0) -> SensorSet:
    """Draw ``p`` distinct sensor cells uniformly from the grid interior."""
    rows = np.arange(H) if H == 1 else np.arange(buffer, H - buffer)
    cols = np.arange(W) if W == 1 else np.arange(buffer, W - buffer)
    interior = (rows[:, None] * W + cols[None, :]).ravel()
    if p < 1:
        raise ValueError("p must be >= 1")
    feasible = min(interior.size, (H * W) // 4)
    if p > feasible:
        raise ValueError(f"cannot place {p} sensors on a {H}x{W} grid with buffer {buffer}: "
                         f"at most {feasible} are feasible")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(interior, size=p, replace=False)
    return SensorSet(tuple(int(i) for i in chosen), H, W, buffer, seed)


def delay_embed(series: np.ndarray, L: int) -> DelayEmbedding:
    """Stack length-``L`` sensor histories, one window per valid timestep."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"series must be [T, p], got shape {s.shape}")
    T = s.shape[0]
    if L < 1:
        raise ValueError("L must be >= 1")
    if T < L:
        raise ValueError(f"series has {T} timesteps, fewer than L={L} lags")
    view = np.lib.stride_tricks.sliding_window_view(s, L, axis=0)  # [T-L+1, p, L]
    windows = np.ascontiguousarray(view.transpose(0, 2, 1))
    return DelayEmbedding(windows, L)


# ---------------------------------------------------------------------------
# bundle I/O
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _payload_path(manifest: Path) -> Path:
    return manifest.with_suffix(".f32")


def save_bundle(field: Field, path: str | os.PathLike) -> Path:
    """Write ``path`` (JSON manifest) and a sibling ``.f32`` little-endian payload."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    payload = np.ascontiguousarray(field.values, dtype="<f4")
    manifest = {
        "shape": list(field.shape),
        "dtype": "f32",
        "order": "row-major",
        "dt": field.dt,
        "extent": list(field.extent),
        "payload": _payload_path(path).name,
    }
    atomic_write_bytes(_payload_path(path), payload.tobytes())
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


def load_bundle(path: str | os.PathLike) -> Field:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise BundleError(f"{path}: manifest must be a JSON object")
    for key in ("shape", "dtype"):
        if key not in manifest:
            raise BundleError(f"{path}: manifest missing {key!r}")
    shape = manifest["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s >= 1 for s in shape)):
        raise BundleError(f"{path}: shape must be three positive integers, got {shape!r}")
    if manifest["dtype"] != "f32":
        raise BundleError(f"{path}: unsupported dtype {manifest['dtype']!r}")
    if manifest.get("order", "row-major") != "row-major":
        raise BundleError(f"{path}: unsupported order {manifest['order']!r}")
    payload = path.parent / manifest.get("payload", _payload_path(path).name)
    raw = payload.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise BundleError(f"{payload}: payload has {len(raw)} bytes, manifest shape {shape} needs {expected}")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise BundleError(f"{payload}: payload contains non-finite values")
    extent = manifest.get("extent", [1.0, 1.0])
    return Field(values, dt=float(manifest.get("dt", 1.0)), extent=tuple(extent))


def save_sensors(sensors: SensorSet, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(sensors.to_json(), indent=2) + "\n")


def load_sensors(path: str | os.PathLike) -> SensorSet:
    return SensorSet.from_json(json.loads(Path(path).read_text()))


def ndvi(nir, red):
    """Normalized difference vegetation index ``(nir - red) / (nir + red)``.

    Works elementwise on arrays; raises on a zero denominator.
    """
    nir = np.asarray(nir, dtype=np.float64)
    red = np.asarray(red, dtype=np.float64)
    den = nir + red
    if np.any(den == 0):
        raise ZeroDivisionError("nir + red is zero")
    out = (nir - red) / den
    return float(out) if out.ndim == 0 else out
