"""End-to-end orchestration: data, sensors, the three training stages, inference, reports.

``run`` returns a :class:`RunResult` holding the reconstructed fields in
physical units, the trained components and a summary dictionary.  When the
config names an ``output_dir`` every artifact is also written there.  The
summary never contains wall-clock numbers so identical seeds give
byte-identical summaries; timings go to a separate file.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import baselines as bl
from .alignment import Discriminator, LatentTransform, align, train_stage2
from .checkpoint import save_module, load_state
from .config import make_config
from .field_data import (Field, Normalizer, SensorSet, atomic_write_text, delay_embed, load_bundle,
                         load_sensors, place_sensors_random, sample, save_bundle, save_sensors)
from .hf_pathway import LossWeights, PeelConfig, PeelLayer, PeelLayerConfig, PeelStack, peel_apply, peel_train
from .lf_pathway import ShredConfig, ShredModel, decode_lf, encode, train_stage1
from .metrics import SsimConfig, rmse, rmse_frames, ssim, ssim_frames
from .spectral import ball_energy_fraction, top_mode_fraction
from .synthetic import WaveSpec, generate_wave, simulation_variant
from .training import OptConfig, split_seed

__all__ = ["RunResult", "run", "load_inputs", "sweep_sensors", "compare_modes", "apply_threads",
           "summary_json", "reconstruct_from_checkpoints"]


def apply_threads() -> None:
    """Cap torch's intra-op threads from ``SENDAI_THREADS`` when set."""
    val = os.environ.get("SENDAI_THREADS")
    if val:
        torch.set_num_threads(max(1, int(val)))


# ---------------------------------------------------------------------------
# config to component objects
# ---------------------------------------------------------------------------

def _opt(d: dict, seed: int) -> OptConfig:
    return OptConfig(epochs=int(d["epochs"]), lr=float(d["lr"]), batch_size=int(d["batch_size"]),
                     weight_decay=float(d["weight_decay"]), val_fraction=float(d["val_fraction"]),
                     patience=int(d["patience"]), seed=seed)


def _shred_cfg(d: dict) -> ShredConfig:
    return ShredConfig.from_json(d)


def _peel_cfg(d: dict) -> PeelConfig:
    d = dict(d)
    layer = PeelLayerConfig.from_json(d.pop("layer"))
    weights = LossWeights(**d.pop("weights"))
    return PeelConfig(layer=layer, weights=weights, **d)


def _baseline_cfg(d: dict) -> bl.BaselineConfig:
    d = dict(d)
    d.pop("methods")
    gp = dict(d.pop("gp"))
    return bl.BaselineConfig(gp=bl.GPConfig(**gp), **d)


def _ssim_cfg(cfg: dict, data_range: float) -> SsimConfig:
    return SsimConfig(data_range=data_range, **cfg["metrics"]["ssim"])


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def load_inputs(cfg: dict) -> tuple[Field, Field]:
    """Simulation and ground-truth fields named by the config."""
    data = cfg["data"]
    if data["source"] == "wave":
        spec = WaveSpec.from_json(data["wave"])
        gt = generate_wave(spec)
        if data["sim_wave"]:
            sim = generate_wave(WaveSpec.from_json(data["sim_wave"]))
        else:
            sim = simulation_variant(spec, int(data["sim_keep"]))
    else:
        sim, gt = load_bundle(data["sim_path"]), load_bundle(data["gt_path"])
    if (sim.H, sim.W) != (gt.H, gt.W):
        raise ValueError(f"simulation grid {sim.H}x{sim.W} differs from ground truth {gt.H}x{gt.W}")
    return sim, gt


def _sensors(cfg: dict, H: int, W: int, seed: int) -> SensorSet:
    sc = cfg["sensors"]
    if sc["path"]:
        s = load_sensors(sc["path"])
        if (s.H, s.W) != (H, W):
            raise ValueError("sensor file grid does not match the data grid")
        return s
    return place_sensors_random(H, W, int(sc["p"]), int(sc["buffer"]),
                                seed if sc["seed"] is None else int(sc["seed"]))


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    summary: dict
    fields: dict[str, np.ndarray] = field(default_factory=dict)
    hf_layers: list[np.ndarray] = field(default_factory=list)
    histories: dict[str, list[dict]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    shred: ShredModel | None = None
    transform: LatentTransform | None = None
    stack: PeelStack | None = None
    normalizer: Normalizer | None = None
    sensors: SensorSet | None = None
    stage_state: dict[str, Any] = field(default_factory=dict)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.original = exc


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, StageError):
                raise StageError(name, ev) from ev
            return False
    return _Ctx()


def _train_lf(cfg: dict, simn: Field, gt_series: np.ndarray, sensors: SensorSet, seeds: list[int],
              result: RunResult):
    """Stages 1 and 2; returns the aligned LF reconstruction on the evaluation frames (normalised)."""
    shred_cfg = _shred_cfg(cfg["shred"])
    with _stage("stage 1"):
        t0 = time.perf_counter()
        torch.manual_seed(seeds[1])
        model = ShredModel(sensors.p, simn.H, simn.W, shred_cfg)
        model, h1 = train_stage1(simn, sensors, model, _opt(cfg["stage1"], seeds[2]))
        result.timings["stage1"] = time.perf_counter() - t0
    with _stage("stage 2"):
        t0 = time.perf_counter()
        L = shred_cfg.lags
        zs = encode(delay_embed(sample(simn, sensors), L).windows, model)
        zg = encode(delay_embed(gt_series, L).windows, model)
        torch.manual_seed(seeds[1] + 1)
        g = LatentTransform(shred_cfg.d_z, int(cfg["gan"]["hidden"]), float(cfg["gan"]["gamma_init"]))
        d = Discriminator(shred_cfg.d_z, int(cfg["gan"]["hidden"]))
        g, d, h2 = train_stage2(zs, zg, g, d, _opt(cfg["stage2"], seeds[3]))
        with torch.no_grad():
            zgt = torch.as_tensor(zg)
            result.stage_state["disc_gt"] = float(d(zgt).mean())
            result.stage_state["disc_sim_aligned"] = float(d(g(torch.as_tensor(zs))).mean())
        u0 = decode_lf(align(zg, g), model).astype(np.float64)
        result.timings["stage2"] = time.perf_counter() - t0
    result.shred, result.transform = model, g
    result.histories["stage1"], result.histories["stage2"] = h1, h2
    return u0


def run(cfg: dict | None = None, write: bool = True) -> RunResult:
    """Execute the configured pipeline; see the module docstring.

    On a stage failure whatever was produced so far is written to the output
    directory together with ``error.json`` before the ``StageError`` propagates.
    """
    cfg = make_config(overrides=None) if cfg is None else cfg
    apply_threads()
    result = RunResult(summary={})
    try:
        _run(cfg, result, write)
    except StageError as exc:
        if write and cfg.get("output_dir"):
            write_partial(result, Path(cfg["output_dir"]), exc)
        raise
    return result


def _run(cfg: dict, result: RunResult, write: bool) -> None:
    seeds = split_seed(int(cfg["seed"]), 6)
    with _stage("data"):
        sim, gt = load_inputs(cfg)
        sensors = _sensors(cfg, gt.H, gt.W, seeds[0])
        norm = Normalizer(cfg["normalize"]).fit(sim.values)
        simn = sim.with_values(norm.normalize(sim.values.astype(np.float64)))
        gtn = gt.with_values(norm.normalize(gt.values.astype(np.float64)))
        noise = float(cfg["sensors"]["noise_std"])
        gt_series = sample(gtn, sensors, noise, np.random.default_rng(seeds[5])) if noise > 0 else sample(gtn, sensors)
    result.sensors, result.normalizer = sensors, norm
    L = int(cfg["shred"]["lags"])
    if gt.T < L:
        raise StageError("data", ValueError(f"ground truth has {gt.T} frames, fewer than {L} lags"))
    frames = np.arange(L - 1, gt.T)
    truth = gt.values[frames].astype(np.float64)
    data_range = float(truth.max() - truth.min()) or 1.0
    ssim_cfg = _ssim_cfg(cfg, data_range)
    ssim_ok = min(gt.H, gt.W) >= ssim_cfg.window

    def score(name: str, u: np.ndarray, metrics: dict) -> None:
        metrics[name] = {"rmse": float(rmse(u, truth)),
                         "ssim": float(ssim(u, truth, ssim_cfg)) if ssim_ok else None}

    metrics: dict[str, dict] = {}
    layer_reports: list[dict] = []
    mode = cfg["mode"]
    if mode in ("full", "jr"):
        u0 = _train_lf(cfg, simn, gt_series, sensors, seeds, result)
        result.fields["jr"] = norm.denormalize(u0)
        score("jr", result.fields["jr"], metrics)
        n_layers = int(cfg["peel"]["n_layers"]) if mode == "full" else 0
        if n_layers > 0:
            with _stage("stage 3"):
                t0 = time.perf_counter()
                peel_cfg = _peel_cfg(cfg["peel"])
                s_eval = gt_series[frames]
                stack = peel_train(u0, s_eval, sensors, peel_cfg, _opt(cfg["stage3"], seeds[4]))
                final, parts = peel_apply(stack, u0, s_eval)
                result.timings["stage3"] = time.perf_counter() - t0
            result.stack = stack
            result.fields["full"] = norm.denormalize(final)
            result.hf_layers = [hf * norm.scale for hf in parts]
            score("full", result.fields["full"], metrics)
            r_exc = peel_cfg.r_exc
            for rep, hf in zip(stack.reports, result.hf_layers):
                result.histories[f"stage3_layer{rep['layer']}"] = rep["history"] + [
                    dict(h, epoch=h["epoch"] + len(rep["history"]), phase="finetune")
                    for h in rep["finetune_history"]]
                brief = {k: v for k, v in rep.items() if k not in ("history", "finetune_history")}
                lead = rep["discovered"][:1]
                brief["energy_near_lead"] = float(ball_energy_fraction(hf, lead, r_exc)) if lead else None
                inherited = rep["exclusion_inherited"]
                brief["energy_in_inherited_exclusion"] = (
                    float(ball_energy_fraction(hf, inherited, r_exc)) if inherited else 0.0)
                brief["top_mode_fraction"] = float(top_mode_fraction(hf))
                layer_reports.append(brief)
    if cfg["baselines"]["methods"]:
        with _stage("baselines"):
            t0 = time.perf_counter()
            bcfg = _baseline_cfg(cfg["baselines"])
            for method in cfg["baselines"]["methods"]:
                rec = bl.baseline_reconstruct(method, gt_series, sensors, bcfg, sim=simn)
                u = norm.denormalize(rec.values.astype(np.float64)[frames])
                result.fields[method] = u
                score(method, u, metrics)
            result.timings["baselines"] = time.perf_counter() - t0

    summary = {
        "config": cfg,
        "grid": [gt.T, gt.H, gt.W],
        "eval_frames": [int(frames[0]), int(frames[-1])],
        "sensors": list(sensors.indices),
        "normalizer": norm.to_json(),
        "metrics": metrics,
        "layers": layer_reports,
    }
    if "jr" in metrics and "full" in metrics:
        summary["rmse_improvement_vs_lf_only"] = float(1 - metrics["full"]["rmse"] / metrics["jr"]["rmse"])
    if result.histories.get("stage1"):
        h = result.histories["stage1"]
        summary["stage1"] = {"epochs_run": len(h), "best_val": float(min(r["val"] for r in h))}
    if result.histories.get("stage2"):
        h = result.histories["stage2"]
        summary["stage2"] = {"epochs_run": len(h), "gamma": float(h[-1]["gamma"]),
                             "disc_gt": float(result.stage_state["disc_gt"]),
                             "disc_sim_aligned": float(result.stage_state["disc_sim_aligned"])}
    result.summary = summary
    result.fields["truth"] = truth
    if write and cfg.get("output_dir"):
        write_artifacts(result, Path(cfg["output_dir"]), gt.dt)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_artifacts(result: RunResult, out: Path, dt: float = 1.0) -> None:
    out.mkdir(parents=True, exist_ok=True)
    truth = result.fields["truth"]
    for name, u in result.fields.items():
        save_bundle(Field(u, dt=dt), out / f"{name.replace('+', '_')}.json")
    for i, hf in enumerate(result.hf_layers, 1):
        save_bundle(Field(hf, dt=dt), out / f"hf_layer{i}.json")
    if result.sensors is not None:
        save_sensors(result.sensors, out / "sensors.json")
    # per-frame metrics
    rows = []
    ssim_cfg = SsimConfig(data_range=float(truth.max() - truth.min()) or 1.0,
                          **result.summary["config"]["metrics"]["ssim"])
    ssim_ok = min(truth.shape[1:]) >= ssim_cfg.window
    per_method = {}
    for name, u in result.fields.items():
        if name == "truth":
            continue
        per_method[name] = (rmse_frames(u, truth), ssim_frames(u, truth, ssim_cfg) if ssim_ok else None)
    for t in range(truth.shape[0]):
        row = {"frame": result.summary["eval_frames"][0] + t}
        for name, (r, s) in per_method.items():
            row[f"{name}_rmse"] = repr(float(r[t]))
            if s is not None:
                row[f"{name}_ssim"] = repr(float(s[t]))
        rows.append(row)
    atomic_write_text(out / "metrics_per_frame.csv", _csv_text(rows))
    agg = [{"method": k, "rmse": v["rmse"], "ssim": v["ssim"]} for k, v in result.summary["metrics"].items()]
    atomic_write_text(out / "metrics.csv", _csv_text(agg))
    for name, hist in result.histories.items():
        atomic_write_text(out / f"history_{name}.csv", _csv_text(hist))
    if result.summary["layers"]:
        atomic_write_text(out / "layers.json", json.dumps(result.summary["layers"], indent=2, sort_keys=True) + "\n")
    # checkpoints
    cfg = result.summary["config"]
    if result.shred is not None:
        save_module(result.shred, out / "shred", "shred", result.shred.cfg.to_json(),
                    {"p": result.shred.p, "H": result.shred.H, "W": result.shred.W,
                     "normalizer": result.normalizer.to_json()})
    if result.transform is not None:
        save_module(result.transform, out / "transform", "latent-transform",
                    {"d_z": result.shred.d_z, **cfg["gan"]})
    if result.stack is not None:
        for layer, rep in zip(result.stack.layers, result.stack.reports):
            meta = {k: v for k, v in rep.items() if k not in ("history", "finetune_history")}
            save_module(layer, out / f"peel_layer{rep['layer']}", "peel-layer", layer.cfg.to_json(),
                        {"p": layer.p, "H": layer.H, "W": layer.W, **meta})
    atomic_write_text(out / "timings.json", json.dumps(result.timings, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "summary.json", summary_json(result.summary))


def write_partial(result: RunResult, out: Path, exc: StageError) -> None:
    """Keep what a failed run produced: fields, sensors, loss histories and the error."""
    out.mkdir(parents=True, exist_ok=True)
    for name, u in result.fields.items():
        save_bundle(Field(u), out / f"{name.replace('+', '_')}.json")
    if result.sensors is not None:
        save_sensors(result.sensors, out / "sensors.json")
    for name, hist in result.histories.items():
        atomic_write_text(out / f"history_{name}.csv", _csv_text(hist))
    atomic_write_text(out / "timings.json", json.dumps(result.timings, indent=2, sort_keys=True) + "\n")
    err = {"stage": exc.stage, "error": f"{type(exc.original).__name__}: {exc.original}"}
    atomic_write_text(out / "error.json", json.dumps(err, indent=2, sort_keys=True) + "\n")


def reconstruct_from_checkpoints(run_dir: str | os.PathLike, gt: Field,
                                 sensors: SensorSet | None = None) -> np.ndarray:
    """Rebuild the trained components from ``run_dir`` and reconstruct ``gt``'s evaluation frames.

    Only the ground-truth values at sensor cells are read.
    """
    run_dir = Path(run_dir)
    sensors = sensors or load_sensors(run_dir / "sensors.json")
    man, state = load_state(run_dir / "shred")
    shred = ShredModel(man["extra"]["p"], man["extra"]["H"], man["extra"]["W"], ShredConfig.from_json(man["config"]))
    shred.load_state_dict(state)
    shred.eval()
    norm = Normalizer.from_json(man["extra"]["normalizer"])
    gman, gstate = load_state(run_dir / "transform")
    g = LatentTransform(gman["config"]["d_z"], gman["config"]["hidden"], gman["config"]["gamma_init"])
    g.load_state_dict(gstate)
    layers = []
    i = 1
    while (run_dir / f"peel_layer{i}.json").exists():
        lman, lstate = load_state(run_dir / f"peel_layer{i}")
        layer = PeelLayer(lman["extra"]["p"], lman["extra"]["H"], lman["extra"]["W"],
                          PeelLayerConfig.from_json(lman["config"]))
        layer.load_state_dict(lstate)
        layer.eval()
        layers.append(layer)
        i += 1
    series = sample(gt.with_values(norm.normalize(gt.values.astype(np.float64))), sensors)
    L = shred.lags
    u0 = decode_lf(align(encode(delay_embed(series, L).windows, shred), g), shred).astype(np.float64)
    u, _ = peel_apply(PeelStack(layers, sensors), u0, series[L - 1:])
    return norm.denormalize(u)


# ---------------------------------------------------------------------------
# experiments built on run
# ---------------------------------------------------------------------------

def sweep_sensors(cfg: dict, counts: list[int], trials: int = 5) -> list[dict]:
    """Mean and standard deviation of RMSE/SSIM per sensor count; trial ``i`` uses seed ``seed + i``."""
    rows = []
    for count in counts:
        vals = {"rmse": [], "ssim": []}
        method = "full" if cfg["mode"] == "full" and cfg["peel"]["n_layers"] > 0 else \
            ("jr" if cfg["mode"] != "baselines" else cfg["baselines"]["methods"][0])
        for trial in range(trials):
            c = json.loads(json.dumps(cfg))
            c["sensors"]["p"] = int(count)
            c["seed"] = int(cfg["seed"]) + trial
            c["output_dir"] = None
            m = run(c, write=False).summary["metrics"][method]
            vals["rmse"].append(m["rmse"])
            if m["ssim"] is not None:
                vals["ssim"].append(m["ssim"])
        row = {"count": count, "method": method, "trials": trials,
               "rmse_mean": float(np.mean(vals["rmse"])), "rmse_std": float(np.std(vals["rmse"]))}
        if vals["ssim"]:
            row.update(ssim_mean=float(np.mean(vals["ssim"])), ssim_std=float(np.std(vals["ssim"])))
        rows.append(row)
    return rows


def joint_overrides(cfg: dict) -> dict:
    """Single-layer, exclusion-free, bandlimited-only variant of a config."""
    c = json.loads(json.dumps(cfg))
    c["peel"]["n_layers"] = 1
    c["peel"]["k_mode"] = ["inf"]
    c["mode"] = "full"
    return c


def compare_modes(cfg: dict, hierarchical: RunResult | None = None) -> dict:
    """Joint-discovery versus hierarchical peeling on shared stage-1/2 artifacts.

    ``hierarchical`` may pass an already finished full run of ``cfg`` to skip
    retraining that arm.
    """
    hier_cfg = json.loads(json.dumps(cfg))
    hier_cfg["mode"] = "full"
    hier_cfg["output_dir"] = None
    hier = hierarchical if hierarchical is not None else run(hier_cfg, write=False)
    joint_cfg = joint_overrides(hier_cfg)
    joint = run(joint_cfg, write=False)
    out = {}
    for name, res in (("joint", joint), ("hierarchical", hier)):
        out[name] = {
            "rmse_improvement_vs_lf_only": res.summary.get("rmse_improvement_vs_lf_only"),
            "rmse": res.summary["metrics"]["full"]["rmse"],
            "layers": [{"layer": r["layer"], "k": r["k"], "discovered": r["discovered"],
                        "top_mode_fraction": r["top_mode_fraction"]} for r in res.summary["layers"]],
        }
    out["shared_prefix_identical"] = bool(np.array_equal(hier.fields["jr"], joint.fields["jr"]))
    return out
