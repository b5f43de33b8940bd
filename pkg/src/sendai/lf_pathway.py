"""Low-frequency pathway: LSTM sensor-history encoder and low-pass MLP decoder.

The encoder reads an ``[L, p]`` sensor history and returns the layer-normalised
final hidden state of the top LSTM layer.  The decoder maps that code to the
full ``H x W`` frame and projects it onto wavenumbers ``|k| <= k_c``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .field_data import Field, SensorSet, sample, delay_embed
from .spectral import FreqGrid
from .training import OptConfig, check_finite, glorot_init, make_optimizer, seed_everything

__all__ = ["ShredConfig", "ShredModel", "encode", "decode_lf", "train_stage1", "windows_and_targets"]


@dataclass
class ShredConfig:
    d_z: int = 32
    num_layers: int = 2
    dropout: float = 0.1
    lags: int = 5
    decoder_hidden: tuple[int, ...] = (256, 256)
    k_c: float = math.inf

    def to_json(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        d["k_c"] = None if math.isinf(self.k_c) else self.k_c
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ShredConfig":
        obj = dict(obj)
        obj["decoder_hidden"] = tuple(obj.get("decoder_hidden", (256, 256)))
        k_c = obj.get("k_c")
        obj["k_c"] = math.inf if k_c is None else float(k_c)
        return cls(**obj)


class ShredModel(nn.Module):
    """Shallow recurrent decoder with a spectral low-pass on its output."""

    def __init__(self, p: int, H: int, W: int, cfg: ShredConfig | None = None):
        super().__init__()
        cfg = cfg or ShredConfig()
        self.cfg = cfg
        self.p, self.H, self.W = p, H, W
        self.lstm = nn.LSTM(p, cfg.d_z, num_layers=cfg.num_layers, batch_first=True,
                            dropout=cfg.dropout if cfg.num_layers > 1 else 0.0)
        self.norm = nn.LayerNorm(cfg.d_z)
        layers: list[nn.Module] = []
        width = cfg.d_z
        for h in cfg.decoder_hidden:
            layers += [nn.Linear(width, h), nn.LayerNorm(h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, H * W))
        self.decoder = nn.Sequential(*layers)
        keep = FreqGrid(H, W).radius <= cfg.k_c + 1e-9
        self.register_buffer("lowpass_keep", torch.as_tensor(keep, dtype=torch.float32), persistent=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        glorot_init(self)

    @property
    def d_z(self) -> int:
        return self.cfg.d_z

    @property
    def lags(self) -> int:
        return self.cfg.lags

    def encode(self, windows: torch.Tensor) -> torch.Tensor:
        if windows.ndim == 2:
            windows = windows[None]
        if windows.shape[-2:] != (self.lags, self.p):
            raise ValueError(f"window shape {tuple(windows.shape[-2:])} does not match "
                             f"(lags={self.lags}, p={self.p})")
        out, _ = self.lstm(windows)
        return self.norm(out[:, -1])

    def lowpass(self, frames: torch.Tensor) -> torch.Tensor:
        if math.isinf(self.cfg.k_c):
            return frames
        spec = torch.fft.rfft2(frames)
        return torch.fft.irfft2(spec * self.lowpass_keep.to(frames.dtype), s=(self.H, self.W))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.d_z:
            raise ValueError(f"code dimension {z.shape[-1]} != d_z {self.d_z}")
        frames = self.decoder(z).reshape(-1, self.H, self.W)
        return self.lowpass(frames)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(windows))


def _as_float_tensor(x, model: nn.Module) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def encode(window, model: ShredModel) -> np.ndarray:
    """Latent code(s) for one ``[L, p]`` window or a ``[B, L, p]`` batch, in eval mode."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.encode(_as_float_tensor(window, model))
    model.train(was_training)
    return z.squeeze(0).numpy() if np.asarray(window).ndim == 2 else z.numpy()


def decode_lf(code, model: ShredModel) -> np.ndarray:
    """Low-passed frame(s) for one code or a batch of codes."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        u = model.decode(_as_float_tensor(code, model))
    model.train(was_training)
    return u.squeeze(0).numpy() if np.asarray(code).ndim == 1 else u.numpy()


def windows_and_targets(field: Field, sensors: SensorSet, lags: int) -> tuple[np.ndarray, np.ndarray]:
    """Delay-embedded sensor windows and the full frames at each window's end time."""
    emb = delay_embed(sample(field, sensors), lags)
    return emb.windows, field.values[emb.end_times]


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train_stage1(sim_field: Field, sensors: SensorSet, model: ShredModel,
                 opt_cfg: OptConfig | None = None, log_every: int = 0):
    """Fit encoder and decoder to full simulation frames by mean squared error.

    The final ``val_fraction`` of windows (in time order) is held out for early
    stopping; the best validation state is restored.  Returns the model and a
    list of ``{"epoch", "train", "val"}`` records.
    """
    cfg = opt_cfg or OptConfig()
    history: list[dict] = []
    if cfg.epochs <= 0:
        return model, history
    gen = seed_everything(cfg.seed)
    X, Y = windows_and_targets(sim_field, sensors, model.lags)
    X = _as_float_tensor(X, model)
    Y = _as_float_tensor(Y, model)
    n = X.shape[0]
    n_val = int(round(cfg.val_fraction * n)) if n >= 5 else 0
    n_tr = n - n_val
    Xtr, Ytr, Xva, Yva = X[:n_tr], Y[:n_tr], X[n_tr:], Y[n_tr:]
    opt = make_optimizer(model.parameters(), cfg)
    best_val, best_state, stale = math.inf, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for idx in _batches(n_tr, cfg.batch_size, gen):
            opt.zero_grad()
            loss = torch.mean((model(Xtr[idx]) - Ytr[idx]) ** 2)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / n_tr
        check_finite(train_loss, f"stage 1, epoch {epoch}")
        model.eval()
        with torch.no_grad():
            val_loss = float(torch.mean((model(Xva) - Yva) ** 2)) if n_val else train_loss
        history.append({"epoch": epoch, "train": train_loss, "val": val_loss})
        if log_every and epoch % log_every == 0:
            print(f"stage1 epoch {epoch:5d}  train {train_loss:.3e}  val {val_loss:.3e}")
        if val_loss < best_val:
            best_val, best_state, stale = val_loss, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history
