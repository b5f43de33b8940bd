"""Command-line front door.

Every subcommand that trains accepts ``--preset``, ``--config`` and repeated
``--set dotted.key=value`` overrides.  Failures exit with status 1 and a
``sendai [stage]: message`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, load_config
from .field_data import Field, BundleError, atomic_write_text, load_bundle, load_sensors, save_bundle
from .metrics import SsimConfig, rmse, rmse_frames, ssim, ssim_frames
from .pipeline import (StageError, apply_threads, compare_modes, reconstruct_from_checkpoints, run,
                       summary_json, sweep_sensors)
from .synthetic import WaveSpec, generate_wave, three_mode_wave, two_season_proxy


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting point")
    p.add_argument("--config", help="JSON config file (partial configs are merged onto the defaults)")
    p.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted config key, e.g. peel.n_layers=3")
    p.add_argument("--seed", type=int, help="master seed (shorthand for --set seed=N)")
    p.add_argument("--out", help="output directory (shorthand for --set output_dir=...)")


def _config(args) -> dict:
    extra = list(args.assignments)
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        extra.append(f"output_dir={json.dumps(args.out)}")
    return load_config(args.config, args.preset, extra)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    out = Path(args.out)
    if args.kind == "traveling-wave":
        specs = {"gt": three_mode_wave()}
        if args.spec:
            specs = {"gt": WaveSpec.from_json(json.loads(Path(args.spec).read_text()))}
        specs["sim"] = WaveSpec(specs["gt"].modes[:args.sim_keep], specs["gt"].n, specs["gt"].t_start,
                                specs["gt"].t_end, specs["gt"].dt, specs["gt"].width)
    else:
        sim, gt = two_season_proxy(n=args.n, steps=args.steps)
        specs = {"sim": sim, "gt": gt}
    out.mkdir(parents=True, exist_ok=True)
    for name, spec in specs.items():
        save_bundle(generate_wave(spec), out / f"{name}.json")
        atomic_write_text(out / f"{name}_spec.json", json.dumps(spec.to_json(), indent=2) + "\n")
    print(f"wrote {', '.join(sorted(specs))} bundles to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.jr:
        cfg["mode"], cfg["peel"]["n_layers"] = "jr", 0
    result = run(cfg)
    _print_json({k: v for k, v in result.summary.items() if k in ("metrics", "rmse_improvement_vs_lf_only")})


def cmd_reconstruct(args) -> None:
    gt = load_bundle(args.gt)
    sensors = load_sensors(args.sensors) if args.sensors else None
    u = reconstruct_from_checkpoints(args.run_dir, gt, sensors)
    save_bundle(Field(u, dt=gt.dt), args.out)
    print(f"wrote reconstruction of {u.shape[0]} frames to {args.out}")


def cmd_baseline(args) -> None:
    cfg = _config(args)
    cfg["mode"] = "baselines"
    if args.methods:
        cfg["baselines"]["methods"] = args.methods
    result = run(cfg)
    _print_json(result.summary["metrics"])


def cmd_evaluate(args) -> None:
    a, b = load_bundle(args.recon).values, load_bundle(args.truth).values
    if a.shape[0] != b.shape[0] and args.align_tail:
        b = b[-a.shape[0]:]
    rng = float(b.max() - b.min()) or 1.0
    cfg = SsimConfig(window=args.window, data_range=rng)
    ok = min(a.shape[1:]) >= cfg.window
    out = {"rmse": rmse(a, b), "ssim": ssim(a, b, cfg) if ok else None}
    if args.csv:
        r = rmse_frames(a, b)
        s = ssim_frames(a, b, cfg) if ok else None
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "rmse"] + (["ssim"] if ok else []))
        for t in range(len(r)):
            w.writerow([t, repr(float(r[t]))] + ([repr(float(s[t]))] if ok else []))
        atomic_write_text(args.csv, buf.getvalue())
    _print_json(out)


def cmd_sweep(args) -> None:
    cfg = _config(args)
    rows = sweep_sensors(cfg, args.counts, args.trials)
    keys = list(rows[0])
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.csv:
        atomic_write_text(args.csv, buf.getvalue())
    sys.stdout.write(buf.getvalue())


def cmd_compare(args) -> None:
    cfg = _config(args)
    out = compare_modes(cfg)
    if args.json:
        atomic_write_text(args.json, json.dumps(out, indent=2, sort_keys=True) + "\n")
    _print_json(out)


def cmd_run(args) -> None:
    cfg = _config(args)
    result = run(cfg)
    sys.stdout.write(summary_json({k: v for k, v in result.summary.items() if k != "config"}))


def cmd_plot(args) -> None:
    """Emit gnuplot-ready whitespace-separated columns."""
    f = load_bundle(args.bundle)
    v = f.values
    lines = []
    if args.what == "frame":
        t = args.frame if args.frame >= 0 else f.T + args.frame
        for i in range(f.H):
            for j in range(f.W):
                lines.append(f"{i} {j} {float(v[t, i, j])!r}")
            if f.W > 1:
                lines.append("")
    elif args.what == "spacetime":
        col = args.col
        for t in range(f.T):
            for i in range(f.H):
                lines.append(f"{t * f.dt!r} {i} {float(v[t, i, col])!r}")
            lines.append("")
    else:  # spectrum: time-averaged power over the half-spectrum grid
        from .spectral import FreqGrid, spectrum_energy
        power = spectrum_energy(v)
        grid = FreqGrid(f.H, f.W)
        for r in range(power.shape[0]):
            for c in range(power.shape[1]):
                lines.append(f"{int(grid.ky[r, c])} {int(grid.kx[r, c])} {float(power[r, c])!r}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sendai", description="Sparse-sensor field reconstruction.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic wave bundles")
    p.add_argument("kind", choices=["traveling-wave", "two-season-proxy"])
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON WaveSpec replacing the default traveling wave")
    p.add_argument("--sim-keep", type=int, default=1, help="modes kept in the simulation variant")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train all stages and write run artifacts")
    _config_args(p)
    p.add_argument("--jr", action="store_true", help="stages 1 and 2 only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="like train, printing the full summary")
    _config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reconstruct", help="apply saved checkpoints to a field's sensor readings")
    p.add_argument("run_dir")
    p.add_argument("--gt", required=True, help="bundle supplying the sensor readings")
    p.add_argument("--sensors", help="sensor JSON (default: the run's own)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("baseline", help="classical reconstructions only")
    _config_args(p)
    p.add_argument("--methods", nargs="+", choices=["sg+idw", "hants+idw", "kriging"])
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="RMSE and SSIM between two bundles")
    p.add_argument("recon")
    p.add_argument("truth")
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--align-tail", action="store_true",
                   help="compare against the last frames of truth when lengths differ")
    p.add_argument("--csv", help="write per-frame metrics here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sensor-count sensitivity")
    _config_args(p)
    p.add_argument("--counts", type=int, nargs="+", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-modes", help="joint discovery versus hierarchical peeling")
    _config_args(p)
    p.add_argument("--json")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="gnuplot data files from a bundle")
    p.add_argument("bundle")
    p.add_argument("--what", choices=["frame", "spacetime", "spectrum"], default="frame")
    p.add_argument("--frame", type=int, default=-1)
    p.add_argument("--col", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    apply_threads()
    try:
        args.func(args)
    except StageError as exc:
        print(f"sendai [{exc.stage}]: {type(exc.original).__name__}: {exc.original}", file=sys.stderr)
        return 1
    except (ConfigError, BundleError, ValueError, OSError, KeyError) as exc:
        stage = {"synth": "synth", "evaluate": "evaluate", "plot": "plot",
                 "reconstruct": "reconstruct"}.get(args.command, "config")
        print(f"sendai [{stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
