"""Classical sparse-sensor reconstruction baselines.

Temporal smoothers (Savitzky-Golay, HANTS) run per sensor and are followed by
inverse-distance weighting per frame; Kriging interpolates each frame with a
Gaussian-process posterior mean.  All methods see exactly the same sensor
series as the learned model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import linalg, optimize
from scipy.signal import savgol_filter

from .field_data import Field, SensorSet

__all__ = [
    "sg_smooth",
    "idw_interpolate",
    "hants_fit",
    "GPConfig",
    "gp_log_likelihood",
    "fit_gp_hyperparams",
    "krige_frame",
    "BaselineConfig",
    "baseline_reconstruct",
    "METHODS",
]

METHODS = ("sg+idw", "hants+idw", "kriging")


# ---------------------------------------------------------------------------
# temporal smoothers
# ---------------------------------------------------------------------------

def sg_smooth(series, window: int = 7, order: int = 2) -> np.ndarray:
    """Savitzky-Golay smoothing; edges use the polynomial fitted to the boundary window."""
    s = np.asarray(series, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if order >= window:
        raise ValueError(f"order {order} must be below window {window}")
    if s.shape[0] < window:
        raise ValueError(f"series of length {s.shape[0]} is shorter than window {window}")
    return savgol_filter(s, window, order, axis=0, mode="interp")


def _harmonic_design(T: int, n_harmonics: int) -> np.ndarray:
    t = np.arange(T)
    cols = [np.ones(T)]
    for h in range(1, n_harmonics + 1):
        cols += [np.cos(2 * np.pi * h * t / T), np.sin(2 * np.pi * h * t / T)]
    return np.stack(cols, 1)


def hants_fit(series, n_harmonics: int = 3, reject_threshold: float = 2.0, max_iters: int = 10):
    """Harmonic least-squares fit with iterative rejection of low outliers.

    Returns ``(fitted, coeffs)`` where ``coeffs`` is
    ``[a0, a1, b1, ..., aN, bN]`` for cosine ``a`` and sine ``b`` terms.
    Points lying more than ``reject_threshold`` residual standard deviations
    below the current fit are dropped and the fit repeated.
    """
    y = np.asarray(series, dtype=np.float64)
    T = y.shape[0]
    n_coef = 2 * n_harmonics + 1
    if T <= n_coef:
        raise ValueError(f"need more than {n_coef} points for {n_harmonics} harmonics, got {T}")
    A = _harmonic_design(T, n_harmonics)
    keep = np.ones(T, dtype=bool)
    coeffs = np.linalg.lstsq(A, y, rcond=None)[0]
    for _ in range(max_iters):
        fit = A @ coeffs
        resid = y - fit
        sd = resid[keep].std()
        # an exact fit leaves only round-off; rejecting on it would discard good points
        if sd <= 1e-10 * max(1.0, float(np.abs(y).max())):
            break
        drop = keep & (-resid > reject_threshold * sd)
        if not drop.any():
            break
        keep &= ~drop
        if keep.sum() < n_coef:
            raise ValueError(f"only {keep.sum()} points left after rejection; need {n_coef}")
        coeffs = np.linalg.lstsq(A[keep], y[keep], rcond=None)[0]
    return A @ coeffs, coeffs


# ---------------------------------------------------------------------------
# spatial interpolators
# ---------------------------------------------------------------------------

def _cell_coords(H: int, W: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], 1).astype(np.float64)


def _sensor_coords(sensors: SensorSet) -> np.ndarray:
    return np.stack([sensors.rows, sensors.cols], 1).astype(np.float64)


def idw_interpolate(sensor_values, sensors: SensorSet, power: float = 2.0) -> np.ndarray:
    """Shepard interpolation onto the full grid; sensor cells reproduce their readings.

    ``sensor_values`` is ``[p]`` or ``[T, p]``; the result is ``[H, W]`` or ``[T, H, W]``.
    """
    v = np.asarray(sensor_values, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    cells = _cell_coords(sensors.H, sensors.W)
    d = np.linalg.norm(cells[:, None, :] - _sensor_coords(sensors)[None], axis=-1)  # [n, p]
    hit = d == 0
    with np.errstate(divide="ignore"):
        w = np.where(hit, 0.0, d ** -power)
    rows_hit = hit.any(1)
    w[rows_hit] = hit[rows_hit].astype(float)
    w /= w.sum(1, keepdims=True)
    out = (v @ w.T).reshape(-1, sensors.H, sensors.W)
    return out[0] if single else out


@dataclass
class GPConfig:
    """Squared-exponential kernel settings (lengthscale in pixels)."""

    lengthscale: float = 8.0
    variance: float = 1.0
    jitter: float = 1e-8
    mode: str = "fit-per-timestep"
    log_ls_bounds: tuple[float, float] = (math.log(0.5), math.log(64.0))
    log_var_bounds: tuple[float, float] = (-6.0, 2.0)
    n_starts: int = 4

    def __post_init__(self) -> None:
        if min(self.lengthscale, self.variance, self.jitter) <= 0:
            raise ValueError("lengthscale, variance and jitter must be positive")
        if self.mode not in ("fit-per-timestep", "pretrained-on-simulation", "fixed"):
            raise ValueError(f"unknown GP mode {self.mode!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["log_ls_bounds"] = list(self.log_ls_bounds)
        d["log_var_bounds"] = list(self.log_var_bounds)
        return d


def _rbf(a: np.ndarray, b: np.ndarray, lengthscale: float, variance: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None]) ** 2).sum(-1)
    return variance * np.exp(-0.5 * d2 / lengthscale ** 2)


def _cholesky(K: np.ndarray, jitter: float, scale: float, max_tries: int = 8) -> np.ndarray:
    eye = np.eye(K.shape[0])
    j = jitter
    for _ in range(max_tries):
        try:
            return linalg.cholesky(K + j * scale * eye, lower=True)
        except linalg.LinAlgError:
            j *= 10
    raise linalg.LinAlgError(f"kernel matrix not positive definite even with jitter {j / 10:g}")


def gp_log_likelihood(values: np.ndarray, coords: np.ndarray, lengthscale: float, variance: float,
                      jitter: float = 1e-8) -> float:
    """Log marginal likelihood of constant-mean (sample mean) GP data."""
    y = np.asarray(values, dtype=np.float64)
    y = y - y.mean()
    K = _rbf(coords, coords, lengthscale, variance)
    Lc = _cholesky(K, jitter, variance)
    alpha = linalg.cho_solve((Lc, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(Lc)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


def _fit_gp(frames: list[tuple[np.ndarray, np.ndarray]], cfg: GPConfig) -> tuple[float, float]:
    def nll(theta):
        ls, var = math.exp(theta[0]), math.exp(theta[1])
        try:
            return -sum(gp_log_likelihood(v, c, ls, var, cfg.jitter) for v, c in frames)
        except linalg.LinAlgError:
            return 1e12
    bounds = [cfg.log_ls_bounds, cfg.log_var_bounds]
    starts = np.stack([np.linspace(*cfg.log_ls_bounds, cfg.n_starts + 2)[1:-1],
                       np.full(cfg.n_starts, np.clip(math.log(max(np.var(frames[0][0]), 1e-6)),
                                                     *cfg.log_var_bounds))], 1)
    best = None
    for x0 in starts:
        res = optimize.minimize(nll, x0, method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    return math.exp(best.x[0]), math.exp(best.x[1])


def fit_gp_hyperparams(sensor_values, sensors: SensorSet, cfg: GPConfig | None = None) -> GPConfig:
    """Maximum-likelihood lengthscale and variance for one frame of sensor readings."""
    cfg = cfg or GPConfig()
    ls, var = _fit_gp([(np.asarray(sensor_values, dtype=np.float64), _sensor_coords(sensors))], cfg)
    return GPConfig(ls, var, cfg.jitter, cfg.mode, cfg.log_ls_bounds, cfg.log_var_bounds, cfg.n_starts)


def fit_gp_on_simulation(sim: Field, cfg: GPConfig | None = None, n_frames: int = 8, n_points: int = 256,
                         seed: int = 0) -> GPConfig:
    """Fit kernel hyperparameters once on full simulation frames.

    Each of ``n_frames`` evenly spaced frames contributes a random subset of
    ``n_points`` cells; their log likelihoods are summed.
    """
    cfg = cfg or GPConfig()
    rng = np.random.default_rng(seed)
    coords = _cell_coords(sim.H, sim.W)
    frames = []
    for t in np.linspace(0, sim.T - 1, min(n_frames, sim.T)).round().astype(int):
        idx = rng.choice(sim.n, size=min(n_points, sim.n), replace=False)
        frames.append((sim.flat()[t, idx].astype(np.float64), coords[idx]))
    ls, var = _fit_gp(frames, cfg)
    return GPConfig(ls, var, cfg.jitter, "pretrained-on-simulation", cfg.log_ls_bounds,
                    cfg.log_var_bounds, cfg.n_starts)


def krige_frame(sensor_values, sensors: SensorSet, cfg: GPConfig | None = None) -> np.ndarray:
    """GP posterior mean on the full grid with a constant prior mean equal to the sensor mean.

    In ``fit-per-timestep`` mode the kernel is refitted to this frame first;
    otherwise the configured hyperparameters are used as given.
    """
    cfg = cfg or GPConfig()
    y = np.asarray(sensor_values, dtype=np.float64)
    if cfg.mode == "fit-per-timestep":
        cfg = fit_gp_hyperparams(y, sensors, cfg)
    xs = _sensor_coords(sensors)
    m = y.mean()
    K = _rbf(xs, xs, cfg.lengthscale, cfg.variance)
    Lc = _cholesky(K, cfg.jitter, cfg.variance)
    alpha = linalg.cho_solve((Lc, True), y - m)
    Ks = _rbf(_cell_coords(sensors.H, sensors.W), xs, cfg.lengthscale, cfg.variance)
    return (m + Ks @ alpha).reshape(sensors.H, sensors.W)


# ---------------------------------------------------------------------------
# end-to-end
# ---------------------------------------------------------------------------

@dataclass
class BaselineConfig:
    sg_window: int = 7
    sg_order: int = 2
    idw_power: float = 2.0
    hants_harmonics: int = 3
    hants_threshold: float = 2.0
    hants_iters: int = 10
    gp: GPConfig = field(default_factory=GPConfig)

    def to_json(self) -> dict:
        d = asdict(self)
        d["gp"] = self.gp.to_json()
        return d


def baseline_reconstruct(method: str, gt_sensors, sensors: SensorSet, cfg: BaselineConfig | None = None,
                         sim: Field | None = None, dt: float = 1.0) -> Field:
    """Reconstruct every frame of the ``[T, p]`` series with one classical method."""
    cfg = cfg or BaselineConfig()
    s = np.asarray(gt_sensors, dtype=np.float64)
    if method == "sg+idw":
        smooth = sg_smooth(s, cfg.sg_window, cfg.sg_order)
        out = idw_interpolate(smooth, sensors, cfg.idw_power)
    elif method == "hants+idw":
        smooth = np.stack([hants_fit(s[:, j], cfg.hants_harmonics, cfg.hants_threshold, cfg.hants_iters)[0]
                           for j in range(s.shape[1])], 1)
        out = idw_interpolate(smooth, sensors, cfg.idw_power)
    elif method == "kriging":
        gp = cfg.gp
        if gp.mode == "pretrained-on-simulation":
            if sim is None:
                raise ValueError("pretrained kriging needs the simulation field")
            gp = fit_gp_on_simulation(sim, gp)
        out = np.stack([krige_frame(s[t], sensors, gp) for t in range(s.shape[0])])
    else:
        raise ValueError(f"unknown baseline {method!r}; choose from {METHODS}")
    return Field(out, dt=dt)
