"""Run configuration: nested JSON with defaults, presets and dotted-key overrides."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any

from .synthetic import three_mode_wave, two_season_proxy

__all__ = ["DEFAULTS", "PRESETS", "make_config", "apply_override", "load_config", "ConfigError",
           "validate"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "mode": "full",                      # full | jr | baselines
    "output_dir": None,
    "data": {
        "source": "wave",                # wave | bundle
        "wave": three_mode_wave().to_json(),
        "sim_wave": None,                # explicit simulation spec; else the first sim_keep modes
        "sim_keep": 1,
        "sim_path": None,
        "gt_path": None,
    },
    "sensors": {"p": 64, "buffer": 2, "seed": None, "path": None, "noise_std": 0.0},
    "normalize": "min-max",
    "shred": {"d_z": 32, "num_layers": 2, "dropout": 0.1, "lags": 5,
              "decoder_hidden": [256, 256], "k_c": None},
    "stage1": {"epochs": 1000, "lr": 1e-4, "batch_size": 16, "weight_decay": 1e-2,
               "val_fraction": 0.2, "patience": 50},
    "gan": {"hidden": 64, "gamma_init": 0.1},
    "stage2": {"epochs": 500, "lr": 1e-4, "batch_size": 16, "weight_decay": 1e-2,
               "val_fraction": 0.2, "patience": 50},
    "peel": {
        "n_layers": 2,
        "k_mode": ["auto"],
        "k_max": [None],
        "smoothness": "laplacian",
        "huber_delta": 0.1,
        "tau_factor": 2.0,
        "tau": None,
        "delta_k": 2.0,
        "rho": 0.8,
        "r_exc": 2.0,
        "warmup": 100,
        "finetune_epochs": 500,
        "finetune_factor": 0.1,
        "dominant_aggregate": "mean-magnitude",
        "dominant_count": None,
        "dominant_rel": 0.1,
        "warmup_topk": False,
        "layer": {"d_hf": 64, "encoder_hidden": [128, 128], "decoder_hidden": [256, 256, 128],
                  "pe_bands": 16, "sigma_max": 8.0, "gamma_init": 0.1},
        "weights": {"lam_sp": 0.05, "lam_topk": 10.0, "lam_sm": 0.1, "lam_mag": 1e-3,
                    "beta1": 100.0, "beta2": 100.0, "eps": 1e-8, "topk_dc": True},
    },
    "stage3": {"epochs": 2000, "lr": 1e-4, "batch_size": 16, "weight_decay": 1e-2,
               "val_fraction": 0.0, "patience": 0},
    "baselines": {
        "methods": ["sg+idw", "hants+idw", "kriging"],
        "sg_window": 7, "sg_order": 2, "idw_power": 2.0,
        "hants_harmonics": 3, "hants_threshold": 2.0, "hants_iters": 10,
        "gp": {"lengthscale": 8.0, "variance": 1.0, "jitter": 1e-8, "mode": "fit-per-timestep",
               "n_starts": 4},
    },
    "metrics": {"ssim": {"window": 7, "sigma": 1.5, "k1": 0.01, "k2": 0.03}},
}


def _proxy_waves() -> tuple[dict, dict]:
    sim, gt = two_season_proxy(n=32, steps=100)
    return sim.to_json(), gt.to_json()


# Presets trade the long default budgets for ones that finish in minutes on one core.
PRESETS: dict[str, dict] = {
    "traveling-wave": {
        "sensors": {"p": 3},
        "shred": {"lags": 20, "k_c": 3},
        "stage1": {"lr": 1e-3, "patience": 100},
        "stage2": {"lr": 1e-3},
        "stage3": {"epochs": 300, "lr": 1e-3},
        "peel": {"finetune_epochs": 100},
        "baselines": {"methods": []},
    },
    "two-season-proxy": {
        "data": {"wave": _proxy_waves()[1], "sim_wave": _proxy_waves()[0]},
        "sensors": {"p": 64},
        "shred": {"lags": 5, "k_c": 3},
        "stage1": {"lr": 1e-3, "patience": 100},
        "stage2": {"lr": 1e-3},
        "stage3": {"epochs": 300, "lr": 1e-3},
        "peel": {"n_layers": 1, "finetune_epochs": 100},
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(val, dict) and key not in ("wave", "sim_wave"):
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("inf", "infinity"):
            return "inf"
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` assignment; values parse as JSON when they can."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(text)
    return cfg


def validate(cfg: dict) -> dict:
    if cfg["mode"] not in ("full", "jr", "baselines"):
        raise ConfigError(f"mode must be full, jr or baselines, got {cfg['mode']!r}")
    if cfg["mode"] == "jr":
        cfg["peel"]["n_layers"] = 0
    if cfg["data"]["source"] not in ("wave", "bundle"):
        raise ConfigError("data.source must be 'wave' or 'bundle'")
    if cfg["data"]["source"] == "bundle" and not (cfg["data"]["sim_path"] and cfg["data"]["gt_path"]):
        raise ConfigError("bundle data needs data.sim_path and data.gt_path")
    if cfg["peel"]["n_layers"] < 0:
        raise ConfigError("peel.n_layers must be >= 0")
    for key in ("k_mode", "k_max"):
        if not isinstance(cfg["peel"][key], list):
            cfg["peel"][key] = [cfg["peel"][key]]
    if cfg["peel"]["smoothness"] not in ("laplacian", "tv", "grad", "bilateral"):
        raise ConfigError(f"unknown smoothness {cfg['peel']['smoothness']!r}")
    return cfg


def make_config(preset: str | None = None, overrides: dict | None = None,
                assignments: list[str] | tuple[str, ...] = ()) -> dict:
    """Defaults, then a named preset, then a (partial) config dict, then ``key=value`` strings."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    if overrides:
        cfg = _merge(cfg, overrides)
    for a in assignments:
        apply_override(cfg, a)
    return validate(cfg)


def load_config(path: str | Path | None, preset: str | None = None,
                assignments: list[str] | tuple[str, ...] = ()) -> dict:
    over = json.loads(Path(path).read_text()) if path else None
    if over and "preset" in over:
        preset = preset or over.pop("preset")
    return make_config(preset, over, assignments)
