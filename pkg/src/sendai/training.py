"""Shared optimisation plumbing: optimiser settings, seeding, divergence checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

__all__ = ["OptConfig", "TrainingDivergence", "seed_everything", "check_finite", "make_optimizer",
           "split_seed", "glorot_init"]


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes NaN or infinite."""


@dataclass
class OptConfig:
    """Optimiser settings shared by all three stages.

    ``epochs = 0`` returns the model untouched.  ``patience`` counts epochs
    without validation improvement before stopping; ``0`` disables early stop.
    """

    epochs: int = 1000
    lr: float = 1e-4
    batch_size: int = 16
    weight_decay: float = 1e-2
    val_fraction: float = 0.2
    patience: int = 50
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def split_seed(seed: int, n: int) -> list[int]:
    """Fan one master seed out to ``n`` independent 32-bit seeds."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss in {where}")


def glorot_init(module: nn.Module) -> None:
    """Glorot-uniform weights and zero biases for linear and recurrent layers."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LSTM):
            for name, prm in m.named_parameters():
                if name.startswith("weight"):
                    nn.init.xavier_uniform_(prm)
                else:
                    nn.init.zeros_(prm)


def make_optimizer(params, cfg: OptConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
