"""Hierarchical high-frequency peeling.

Each peel layer encodes the current sensor residual into a latent code and
queries a coordinate decoder (Fourier-encoded pixel coordinates plus the
code) at every grid cell.  Layers are trained one after another on the
residual the previous layers leave behind, with spectral sparsity, top-k and
smoothness penalties, and an exclusion set that keeps later layers away from
wavenumbers earlier layers already explain.
"""
from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .field_data import SensorSet, sample
from .spectral import (FreqGrid, SpectrumMask, build_exclusion, dominant_frequencies, make_mask,
                       select_k, sparsity_loss, topk_loss, ball_energy_fraction, top_mode_fraction,
                       dominant_radius)
from .training import OptConfig, TrainingDivergence, check_finite, glorot_init, make_optimizer, seed_everything

__all__ = [
    "pe_bands",
    "positional_encode",
    "grid_coords",
    "PeelLayerConfig",
    "PeelLayer",
    "PeelStack",
    "hf_forward",
    "smoothness_loss",
    "huber",
    "layer_loss",
    "LossWeights",
    "sparsity_weight",
    "default_tau",
    "peel_train",
    "peel_apply",
    "infer",
]


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def pe_bands(n_bands: int = 16, sigma_max: float = 8.0) -> np.ndarray:
    """Log-spaced encoding frequencies from 1 to ``sigma_max``."""
    if n_bands < 1:
        raise ValueError("need at least one band")
    if n_bands == 1:
        return np.ones(1)
    j = np.arange(n_bands)
    return 2.0 ** (j * np.log2(sigma_max) / (n_bands - 1))


def positional_encode(x, y, bands) -> np.ndarray | torch.Tensor:
    """``[x, y, sin(2 pi s x), cos(2 pi s x), sin(2 pi s y), cos(2 pi s y), ...]`` per band ``s``.

    ``x`` and ``y`` may be scalars or equal-shape arrays/tensors; the feature
    axis is appended last.
    """
    lib = torch if isinstance(x, torch.Tensor) else np
    if lib is np:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        s = np.asarray(bands, dtype=np.float64)
    else:
        s = torch.as_tensor(np.asarray(bands), dtype=x.dtype)
    ax = 2 * math.pi * x[..., None] * s
    ay = 2 * math.pi * y[..., None] * s
    per_band = lib.stack([lib.sin(ax), lib.cos(ax), lib.sin(ay), lib.cos(ay)], -1)
    per_band = per_band.reshape(*per_band.shape[:-2], -1)
    return lib.concatenate([x[..., None], y[..., None], per_band], -1) if lib is np else \
        torch.cat([x[..., None], y[..., None], per_band], -1)


def grid_coords(H: int, W: int) -> np.ndarray:
    """Row-major ``[H*W, 2]`` query coordinates ``(i/H, j/W)``."""
    i, j = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    return np.stack([i.ravel(), j.ravel()], -1)


# ---------------------------------------------------------------------------
# peel layer
# ---------------------------------------------------------------------------

@dataclass
class PeelLayerConfig:
    d_hf: int = 64
    encoder_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (256, 256, 128)
    pe_bands: int = 16
    sigma_max: float = 8.0
    gamma_init: float = 0.1

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PeelLayerConfig":
        obj = dict(obj)
        for key in ("encoder_hidden", "decoder_hidden"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _mlp(widths: Sequence[int]) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for a, b in zip(widths[:-2], widths[1:-1]):
        layers += [nn.Linear(a, b), nn.LayerNorm(b), nn.ReLU()]
    layers.append(nn.Linear(widths[-2], widths[-1]))
    return layers


class PeelLayer(nn.Module):
    """Sensor-residual encoder plus coordinate decoder for one peel layer."""

    def __init__(self, p: int, H: int, W: int, cfg: PeelLayerConfig | None = None):
        super().__init__()
        cfg = cfg or PeelLayerConfig()
        self.cfg = cfg
        self.p, self.H, self.W = p, H, W
        self.encoder = nn.Sequential(*_mlp([p, *cfg.encoder_hidden, cfg.d_hf]))
        self.pe_dim = 2 + 4 * cfg.pe_bands
        widths = [self.pe_dim + cfg.d_hf, *cfg.decoder_hidden, 1]
        self.decoder = nn.Sequential(*_mlp(widths))
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init)))
        glorot_init(self)
        xy = torch.as_tensor(grid_coords(H, W), dtype=torch.float32)
        pe = positional_encode(xy[:, 0], xy[:, 1], pe_bands(cfg.pe_bands, cfg.sigma_max))
        self.register_buffer("pe", pe, persistent=False)

    def encode(self, residual: torch.Tensor) -> torch.Tensor:
        return self.encoder(residual)

    def forward(self, residual: torch.Tensor) -> torch.Tensor:
        """``[B, p]`` residuals to ``[B, H, W]`` HF frames."""
        if residual.ndim == 1:
            residual = residual[None]
        if residual.shape[-1] != self.p:
            raise ValueError(f"residual length {residual.shape[-1]} != sensor count {self.p}")
        z = self.encoder(residual)                           # [B, d_hf]
        first = self.decoder[0]
        w_pe, w_z = first.weight[:, : self.pe_dim], first.weight[:, self.pe_dim:]
        # the first decoder layer acts on [PE; z]; split it so PE is projected once per grid
        h = (self.pe.to(w_pe.dtype) @ w_pe.T)[None] + (z @ w_z.T + first.bias)[:, None, :]
        h = self.decoder[1:](h)                              # [B, n, 1]
        return self.gamma * h.reshape(-1, self.H, self.W)

    def query(self, residual: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """Evaluate at arbitrary ``[m, 2]`` coordinates in [0, 1]^2 (continuous queries)."""
        z = self.encoder(residual.reshape(1, -1)).expand(coords.shape[0], -1)
        pe = positional_encode(coords[:, 0], coords[:, 1], pe_bands(self.cfg.pe_bands, self.cfg.sigma_max))
        return self.gamma * self.decoder(torch.cat([pe.to(z.dtype), z], -1)).squeeze(-1)


def hf_forward(residual, layer: PeelLayer) -> np.ndarray:
    """HF frame(s) for one ``[p]`` residual or a ``[B, p]`` batch, no gradients."""
    r = np.asarray(residual)
    with torch.no_grad():
        out = layer(torch.as_tensor(r, dtype=layer.gamma.dtype)).numpy()
    return out[0] if r.ndim == 1 else out


# ---------------------------------------------------------------------------
# regularisers and loss
# ---------------------------------------------------------------------------

def huber(x: torch.Tensor, delta: float) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < delta, 0.5 * x ** 2, delta * (ax - 0.5 * delta))


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def smoothness_loss(frame, kind: str = "laplacian", delta: float = 0.1):
    """Spatial roughness of ``[..., H, W]`` frames, averaged over leading dims.

    ``laplacian`` is the mean squared 5-point Laplacian over interior cells,
    ``tv`` the squared forward differences summed and divided by ``H*W``, and
    ``bilateral`` the summed Huber penalty of forward differences.  A
    singleton axis (a 1-D field) contributes no terms.
    """
    u, numpy_in = _to_tensor(frame)
    H, W = u.shape[-2:]
    if kind == "laplacian":
        if (H not in (1,) and H < 3) or (W not in (1,) and W < 3) or max(H, W) < 3:
            raise ValueError(f"laplacian smoothness needs axes of size 1 or >= 3, got {H}x{W}")
        lap = 0
        if H >= 3:
            core = u[..., 1:-1, :] if W == 1 else u[..., 1:-1, 1:-1]
            up = u[..., 2:, :] if W == 1 else u[..., 2:, 1:-1]
            dn = u[..., :-2, :] if W == 1 else u[..., :-2, 1:-1]
            lap = lap + up + dn - 2 * core
        if W >= 3:
            core = u[..., :, 1:-1] if H == 1 else u[..., 1:-1, 1:-1]
            rt = u[..., :, 2:] if H == 1 else u[..., 1:-1, 2:]
            lt = u[..., :, :-2] if H == 1 else u[..., 1:-1, :-2]
            lap = lap + rt + lt - 2 * core
        val = (lap ** 2).mean((-2, -1))
    elif kind in ("tv", "grad", "bilateral"):
        if max(H, W) < 2:
            raise ValueError(f"{kind} smoothness needs at least 2 cells along an axis, got {H}x{W}")
        dx = u[..., :, 1:] - u[..., :, :-1]
        dy = u[..., 1:, :] - u[..., :-1, :]
        if kind == "bilateral":
            val = huber(dx, delta).sum((-2, -1)) + huber(dy, delta).sum((-2, -1))
        else:
            val = ((dx ** 2).sum((-2, -1)) + (dy ** 2).sum((-2, -1))) / (H * W)
    else:
        raise ValueError(f"unknown smoothness kind {kind!r}")
    val = val.mean()
    return float(val.detach()) if numpy_in else val


@dataclass
class LossWeights:
    lam_sp: float = 0.05
    lam_topk: float = 10.0
    lam_sm: float = 0.1
    lam_mag: float = 1e-3
    beta1: float = 100.0
    beta2: float = 100.0
    eps: float = 1e-8
    topk_dc: bool = True             # False: a constant offset never counts as one of the k modes


def layer_loss(hf_out, residual, sensors: SensorSet, mask: SpectrumMask, k, weights: LossWeights,
               tau: float, smoothness: str = "laplacian", delta: float = 0.1):
    """Full per-layer objective; returns ``(total, components)``.

    ``hf_out`` is ``[H, W]`` or ``[B, H, W]`` and ``residual`` the matching
    ``[p]`` or ``[B, p]`` sensor residual.  The sensor term sums over sensors;
    every term is averaged over the batch.  ``k = inf`` drops the top-k term.
    """
    u, numpy_in = _to_tensor(hf_out)
    r = torch.as_tensor(np.asarray(residual) if not isinstance(residual, torch.Tensor) else residual,
                        dtype=u.dtype)
    if u.ndim == 2:
        u = u[None]
    if r.ndim == 1:
        r = r[None]
    idx = torch.as_tensor(np.asarray(sensors.indices))
    pred = u.reshape(u.shape[0], -1)[:, idx]
    sensor = ((pred - r) ** 2).sum(-1).mean()
    sparse = sparsity_loss(u, mask, weights.beta1, weights.beta2, weights.eps)
    finite_k = not (k is None or (isinstance(k, float) and math.isinf(k)))
    topk = topk_loss(u, k, weights.eps, dc_counts=weights.topk_dc) if finite_k else u.sum() * 0.0
    lam_topk = weights.lam_topk if finite_k else 0.0
    smooth = smoothness_loss(u, smoothness, delta)
    mag = (torch.clamp(u.abs().sum((-2, -1)) - tau, min=0.0) ** 2).mean()
    total = (sensor + weights.lam_sp * sparse + lam_topk * topk + weights.lam_sm * smooth
             + weights.lam_mag * mag)
    parts = {"sensor": sensor, "sparse": sparse, "topk": topk, "smooth": smooth, "mag": mag}
    if numpy_in:
        return float(total.detach()), {k_: float(v.detach()) for k_, v in parts.items()}
    return total, parts


def sparsity_weight(epoch: int, target: float, warmup: int) -> float:
    """Zero for ``warmup`` epochs, then a linear ramp reaching ``target`` after another ``warmup``."""
    if warmup <= 0:
        return target
    if epoch < warmup:
        return 0.0
    return target * min(1.0, (epoch - warmup) / warmup)


def default_tau(residual: np.ndarray, n_cells: int, factor: float = 2.0) -> float:
    """Magnitude threshold: ``factor`` times the mean absolute residual scaled to the full grid."""
    return float(factor * np.mean(np.abs(residual)) * n_cells)


# ---------------------------------------------------------------------------
# stack training
# ---------------------------------------------------------------------------

@dataclass
class PeelStack:
    """Trained peel layers in application order plus their bookkeeping."""

    layers: list[PeelLayer] = field(default_factory=list)
    sensors: SensorSet | None = None
    reports: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


def peel_apply(stack: PeelStack, base: np.ndarray, gt_sensors: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run every layer on its own residual; returns the final field and per-layer HF fields.

    ``base`` is ``[T, H, W]`` and ``gt_sensors`` ``[T, p]``.  The final field
    is built as ``base + hf_1 + ... + hf_N`` in that order.
    """
    u = np.asarray(base, dtype=np.float64)
    parts = []
    for layer in stack.layers:
        r = gt_sensors - sample(u, stack.sensors)
        hf = hf_forward(r, layer).astype(np.float64)
        parts.append(hf)
        u = u + hf
    return u, parts


@dataclass
class PeelConfig:
    n_layers: int = 2
    k_mode: list = field(default_factory=lambda: ["auto"])
    k_max: list = field(default_factory=lambda: [None])
    smoothness: str = "laplacian"
    huber_delta: float = 0.1
    tau_factor: float = 2.0
    tau: float | None = None
    delta_k: float = 2.0
    rho: float = 0.8
    r_exc: float = 2.0
    warmup: int = 100
    finetune_epochs: int = 500
    finetune_factor: float = 0.1
    dominant_aggregate: str = "mean-magnitude"
    dominant_count: int | None = None
    dominant_rel: float = 0.1
    warmup_topk: bool = False        # ramp lam_topk on the same schedule as lam_sp
    layer: PeelLayerConfig = field(default_factory=PeelLayerConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def per_layer(self, values: list, i: int):
        return values[min(i, len(values) - 1)] if values else None


def _train_layer(layer: PeelLayer, residual: np.ndarray, sensors: SensorSet, mask: SpectrumMask, k,
                 weights: LossWeights, tau: float, smoothness: str, delta: float, epochs: int,
                 lam_sp_fn, opt_cfg: OptConfig, gen: torch.Generator, tag: str, log_every: int,
                 topk_fn=None):
    R = torch.as_tensor(residual, dtype=torch.float32)
    n = R.shape[0]
    opt = make_optimizer(layer.parameters(), opt_cfg)
    history = []
    for epoch in range(epochs):
        lam_sp = lam_sp_fn(epoch)
        w = copy.copy(weights)
        w.lam_sp = lam_sp
        if topk_fn is not None:
            w.lam_topk = topk_fn(epoch)
        perm = torch.randperm(n, generator=gen)
        total, steps = 0.0, 0
        parts_sum: dict[str, float] = {}
        for i in range(0, n, opt_cfg.batch_size):
            rb = R[perm[i:i + opt_cfg.batch_size]]
            opt.zero_grad()
            loss, parts = layer_loss(layer(rb), rb, sensors, mask, k, w, tau, smoothness, delta)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            for key, v in parts.items():
                parts_sum[key] = parts_sum.get(key, 0.0) + float(v.detach())
            steps += 1
        check_finite(total, f"{tag}, epoch {epoch}")
        rec = {"epoch": epoch, "loss": total / steps, "lam_sp": lam_sp, "lam_topk": w.lam_topk}
        rec.update({key: v / steps for key, v in parts_sum.items()})
        history.append(rec)
        if log_every and epoch % log_every == 0:
            print(f"{tag} epoch {epoch:5d}  " + "  ".join(f"{key} {v:.3e}" for key, v in rec.items()
                                                         if key != "epoch"))
    return history


def peel_train(base_recon: np.ndarray, gt_sensors: np.ndarray, sensors: SensorSet,
               cfg: PeelConfig | None = None, opt_cfg: OptConfig | None = None,
               log_every: int = 0) -> PeelStack:
    """Train ``cfg.n_layers`` peel layers one after another.

    ``base_recon`` is the ``[T, H, W]`` LF reconstruction at the ground-truth
    timesteps and ``gt_sensors`` the ``[T, p]`` observed values at the same
    timesteps.  Each layer sees only the residual left by the frozen layers
    before it.  Reports record ``k``, the discovered wavenumbers, the
    exclusion size and the loss histories.
    """
    cfg = cfg or PeelConfig()
    opt_cfg = opt_cfg or OptConfig(epochs=2000)
    base = np.asarray(base_recon, dtype=np.float64)
    s = np.asarray(gt_sensors, dtype=np.float64)
    if base.ndim != 3 or s.ndim != 2 or base.shape[0] != s.shape[0]:
        raise ValueError("base_recon must be [T, H, W] and gt_sensors [T, p] over the same timesteps")
    T, H, W = base.shape
    grid = FreqGrid(H, W)
    stack = PeelStack(sensors=sensors)
    u = base.copy()
    exclusion = np.zeros(grid.shape, dtype=bool)
    discovered_all: list[tuple[int, int]] = []
    for ell in range(cfg.n_layers):
        tag = f"stage 3 layer {ell + 1}"
        gen = seed_everything(opt_cfg.seed + 7919 * (ell + 1))
        residual = s - sample(u, sensors)
        k = select_k(residual, sensors, cfg.delta_k, cfg.rho, mode=cfg.per_layer(cfg.k_mode, ell))
        k_max = cfg.per_layer(cfg.k_max, ell)
        mask = make_mask(grid, None if k_max is None else float(k_max), exclusion)
        tau = cfg.tau if cfg.tau is not None else default_tau(residual, H * W, cfg.tau_factor)
        layer = PeelLayer(sensors.p, H, W, cfg.layer)
        lam = cfg.weights.lam_sp
        lam_topk = cfg.weights.lam_topk
        topk_fn = (lambda e: sparsity_weight(e, lam_topk, cfg.warmup)) if cfg.warmup_topk else None
        hist = _train_layer(layer, residual, sensors, mask, k, cfg.weights, tau, cfg.smoothness,
                            cfg.huber_delta, opt_cfg.epochs,
                            lambda e: sparsity_weight(e, lam, cfg.warmup), opt_cfg, gen, tag, log_every,
                            topk_fn)
        layer.eval()
        hf = hf_forward(residual, layer).astype(np.float64)
        n_dom = cfg.dominant_count or (1 if math.isinf(k) else int(k))
        found = dominant_frequencies(hf, n_dom, cfg.dominant_aggregate, cfg.dominant_rel)
        ft = _train_layer(layer, residual, sensors, mask, k, cfg.weights, tau, cfg.smoothness,
                          cfg.huber_delta, cfg.finetune_epochs,
                          lambda e: cfg.finetune_factor * lam, opt_cfg, gen, tag + " fine-tune", log_every)
        layer.eval()
        for prm in layer.parameters():
            prm.requires_grad_(False)
        hf = hf_forward(residual, layer).astype(np.float64)
        u = u + hf
        report = {
            "layer": ell + 1,
            "k": None if math.isinf(k) else int(k),
            "k_max": k_max,
            "tau": tau,
            "exclusion_cells": int(exclusion.sum()),
            "exclusion_inherited": [list(f) for f in discovered_all],
            "discovered": [list(f) for f in found],
            "dominant_radius": dominant_radius(hf),
            "top_mode_fraction": top_mode_fraction(hf),
            "gamma": float(layer.gamma),
            "history": hist,
            "finetune_history": ft,
        }
        stack.layers.append(layer)
        stack.reports.append(report)
        discovered_all.extend(found)
        exclusion = exclusion | build_exclusion(found, cfg.r_exc, grid)
    return stack


def infer(window, gt_now, shred, transform, stack: PeelStack | None) -> np.ndarray:
    """Reconstruct one frame from an ``[L, p]`` history and the current ``[p]`` readings."""
    from .lf_pathway import encode, decode_lf
    from .alignment import align

    if shred is None or transform is None:
        raise ValueError("inference needs trained stage-1 and stage-2 components")
    u0 = decode_lf(align(encode(window, shred), transform), shred)[None].astype(np.float64)
    if stack is None or len(stack) == 0:
        return u0[0]
    u, _ = peel_apply(stack, u0, np.asarray(gt_now, dtype=np.float64)[None])
    return u[0]
