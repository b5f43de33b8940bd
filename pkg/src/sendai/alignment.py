"""Adversarial latent alignment between simulation and ground-truth codes.

The transform nudges a code by a bounded residual, ``z + gamma * tanh(MLP(z))``.
A small discriminator tries to tell ground-truth codes from transformed
simulation codes; both are trained with plain binary cross-entropy.
"""
from __future__ import annotations

import copy
import math

import numpy as np
import torch
from torch import nn

from .training import OptConfig, check_finite, glorot_init, make_optimizer, seed_everything

__all__ = ["LatentTransform", "Discriminator", "align", "train_stage2", "gan_losses"]


class LatentTransform(nn.Module):
    """Residual generator with a learnable output scale (initialised to 0.1)."""

    def __init__(self, d_z: int = 32, hidden: int = 64, gamma_init: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_z, hidden), nn.ReLU(), nn.Linear(hidden, d_z), nn.Tanh())
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))
        glorot_init(self)

    def correction(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return z + self.gamma * self.net(z)


class Discriminator(nn.Module):
    def __init__(self, d_z: int = 32, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_z, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1), nn.Sigmoid(),
        )
        glorot_init(self)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


def align(code, transform: LatentTransform) -> np.ndarray:
    """Apply the trained transform to one code or a batch (no gradients)."""
    with torch.no_grad():
        z = torch.as_tensor(np.asarray(code), dtype=transform.gamma.dtype)
        out = transform(z)
    return out.numpy()


_EPS = 1e-7


def gan_losses(d_gt: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator cross-entropy objectives from discriminator scores.

    ``d_gt`` are scores on ground-truth codes, ``d_fake`` on transformed
    simulation codes.  Scores are clamped away from 0 and 1 only to keep the
    logarithms finite.
    """
    d_gt = d_gt.clamp(_EPS, 1 - _EPS)
    d_fake = d_fake.clamp(_EPS, 1 - _EPS)
    loss_d = -torch.log(d_gt).mean() - torch.log(1 - d_fake).mean()
    loss_g = -torch.log(d_fake).mean()
    return loss_d, loss_g


def train_stage2(sim_latents, gt_latents, transform: LatentTransform, disc: Discriminator,
                 opt_cfg: OptConfig | None = None, log_every: int = 0):
    """Alternate one discriminator and one generator step per minibatch.

    Latents come from the frozen Stage-1 encoder, so nothing upstream moves.
    Early stopping watches the generator loss on a held-out tail of the
    simulation codes.  Returns ``(transform, disc, history)``.
    """
    cfg = opt_cfg or OptConfig(epochs=500)
    zs = torch.as_tensor(np.asarray(sim_latents), dtype=torch.float32)
    zg = torch.as_tensor(np.asarray(gt_latents), dtype=torch.float32)
    if zs.ndim != 2 or zg.ndim != 2 or len(zs) == 0 or len(zg) == 0:
        raise ValueError("stage 2 needs non-empty [N, d_z] latent sets")
    history: list[dict] = []
    if cfg.epochs <= 0:
        return transform, disc, history
    gen = seed_everything(cfg.seed)
    n_val = int(round(cfg.val_fraction * len(zs))) if len(zs) >= 5 else 0
    zs_tr, zs_va = zs[: len(zs) - n_val], zs[len(zs) - n_val:]
    opt_g = make_optimizer(transform.parameters(), cfg)
    opt_d = make_optimizer(disc.parameters(), cfg)
    best, best_state, stale = math.inf, None, 0
    n = len(zs_tr)
    for epoch in range(cfg.epochs):
        transform.train()
        disc.train()
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(2)
        steps = 0
        for i in range(0, n, cfg.batch_size):
            zb = zs_tr[perm[i:i + cfg.batch_size]]
            gi = torch.randint(0, len(zg), (len(zb),), generator=gen)
            zgb = zg[gi]
            # discriminator step
            opt_d.zero_grad()
            with torch.no_grad():
                fake = transform(zb)
            loss_d, _ = gan_losses(disc(zgb), disc(fake))
            loss_d.backward()
            opt_d.step()
            # generator step
            opt_g.zero_grad()
            _, loss_g = gan_losses(disc(zgb).detach(), disc(transform(zb)))
            loss_g.backward()
            opt_g.step()
            sums += (float(loss_d.detach()), float(loss_g.detach()))
            steps += 1
        ld, lg = sums / max(steps, 1)
        check_finite(ld + lg, f"stage 2, epoch {epoch}")
        transform.eval()
        disc.eval()
        with torch.no_grad():
            zv = zs_va if n_val else zs_tr
            _, val_g = gan_losses(disc(zg), disc(transform(zv)))
            val_g = float(val_g)
        history.append({"epoch": epoch, "loss_d": float(ld), "loss_g": float(lg), "val_g": val_g,
                        "gamma": float(transform.gamma.detach())})
        if log_every and epoch % log_every == 0:
            print(f"stage2 epoch {epoch:5d}  L_D {ld:.4f}  L_G {lg:.4f}  gamma {float(transform.gamma):.4f}")
        if val_g < best:
            best, stale = val_g, 0
            best_state = (copy.deepcopy(transform.state_dict()), copy.deepcopy(disc.state_dict()))
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    if best_state is not None:
        transform.load_state_dict(best_state[0])
        disc.load_state_dict(best_state[1])
    transform.eval()
    disc.eval()
    return transform, disc, history
