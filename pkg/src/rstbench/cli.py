"""Command-line entry points: calibrate, train, compare, pitfall, plot-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .clock import CalibrationProfile, calibrate
from .harness import (PRESET_VARIANTS, RunConfig, make_run_config, pitfall_demo,
                      read_run_dir, run_experiment, write_compare_report,
                      write_run_dir, emit_plot_data, run_dir_name)
from .model import DESK_CONFIG, ModelConfig


def _bundled_profile_path() -> Path:
    from importlib import resources
    return Path(resources.files("rstbench").joinpath("assets/reference_profile.json"))


def _load_profile(path: str | None) -> CalibrationProfile:
    return CalibrationProfile.load(path if path else _bundled_profile_path())


def _load_run_config(path: str, args) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    if "preset" in doc:
        name = doc.pop("preset")
        budget = doc.pop("budget_rst")
        seed = doc.pop("seed", 0)
        if name in PRESET_VARIANTS:
            method, overrides = PRESET_VARIANTS[name]
            doc = {**overrides, **doc}
        else:
            method = name
        cfg = make_run_config(method, budget, seed=seed, **_structured(doc))
    else:
        cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "seed": args.seed})
    if getattr(args, "free_selection", False):
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "free_selection": True})
    if getattr(args, "free_hessian", False):
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "free_hessian": True})
    return cfg


def _structured(doc: dict) -> dict:
    from .optim import OptHyper
    from .schedules import ScheduleSpec
    out = dict(doc)
    if isinstance(out.get("model"), dict):
        out["model"] = ModelConfig(**out["model"])
    if isinstance(out.get("schedule"), dict):
        out["schedule"] = ScheduleSpec(**out["schedule"])
    if isinstance(out.get("opt"), dict):
        out["opt"] = OptHyper(**out["opt"])
    for key in ("stack_fractions", "rho_fractions"):
        if key in out and out[key] is not None:
            out[key] = tuple(out[key])
    return out


def cmd_calibrate(args) -> int:
    cfg = DESK_CONFIG if not args.config else ModelConfig(
        **json.loads(Path(args.config).read_text()))
    profile = calibrate(cfg, layer_counts=args.layer_counts, n_iters=args.iters,
                        warmup_iters=args.warmup)
    profile.save(args.out)
    print(f"calibration profile written to {args.out}")
    for (kind, l), t in sorted(profile.measurements.items()):
        print(f"  {kind:<14} L={l:<3} {t * 1e3:8.2f} ms/iter")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args)
    profile = _load_profile(args.profile)
    result = run_experiment(cfg, profile)
    out = write_run_dir(result, args.out_dir, force=args.force)
    print(f"run written to {out}")
    print(json.dumps(result.summary, indent=2))
    return 0 if result.summary["status"] == "ok" else 1


def cmd_compare(args) -> int:
    summaries = [read_run_dir(d)[2] for d in args.run_dirs]
    txt, csv_path = write_compare_report(summaries, args.out, metric=args.metric)
    print(Path(txt).read_text())
    print(f"report written to {txt} and {csv_path}")
    return 0


def cmd_pitfall(args) -> int:
    cfg = _load_run_config(args.config, args)
    profile = _load_profile(args.profile)
    report = pitfall_demo(cfg, profile)
    root = Path(args.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for label in ("decayed", "stretched"):
        result = report[label]
        emit_plot_data(result.records, root / f"pitfall_{label}_{cfg.seed}.csv")
        rows.append((label, result.summary["final_train_loss"],
                     result.summary["final_val_loss"], result.summary["steps"]))
    print(f"schedule lr at budget end: decayed={report['schedule_lr_at_budget_decayed']:g} "
          f"stretched={report['schedule_lr_at_budget_stretched']:g}")
    for label, tr, vl, steps in rows:
        print(f"{label:<10} final_train_loss={tr:.4f} final_val_loss={vl:.4f} steps={steps}")
    return 0


def cmd_plot_data(args) -> int:
    cfg, records, _ = read_run_dir(args.run_dir)
    out = Path(args.out) if args.out else Path(args.run_dir) / f"{run_dir_name(cfg)}.csv"
    emit_plot_data(records, out)
    print(f"plot data written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rstbench",
                                description="budgeted training-method benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="measure per-iteration costs on this machine")
    c.add_argument("--config", help="JSON model config (defaults to the desk model)")
    c.add_argument("--iters", type=int, default=100)
    c.add_argument("--warmup", type=int, default=5)
    c.add_argument("--layer-counts", type=int, nargs="+", default=[2, 4, 8])
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_calibrate)

    t = sub.add_parser("train", help="run one budgeted training configuration")
    t.add_argument("--config", required=True, help="JSON run config or preset file")
    t.add_argument("--profile", help="calibration profile (default: bundled reference)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--free-selection", action="store_true")
    t.add_argument("--free-hessian", action="store_true")
    t.add_argument("--out-dir", default="runs")
    t.add_argument("--force", action="store_true", help="overwrite an existing run dir")
    t.set_defaults(fn=cmd_train)

    cm = sub.add_parser("compare", help="aggregate completed run directories")
    cm.add_argument("run_dirs", nargs="+")
    cm.add_argument("--out", required=True, help="report path prefix (.txt/.csv added)")
    cm.add_argument("--metric", default="final_val_loss")
    cm.set_defaults(fn=cmd_compare)

    pf = sub.add_parser("pitfall", help="decayed-vs-stretched schedule comparison")
    pf.add_argument("--config", required=True)
    pf.add_argument("--profile")
    pf.add_argument("--seed", type=int, default=None)
    pf.add_argument("--out-dir", default="pitfall")
    pf.set_defaults(fn=cmd_pitfall)

    pd = sub.add_parser("plot-data", help="emit per-record CSV for a run directory")
    pd.add_argument("run_dir")
    pd.add_argument("--out")
    pd.set_defaults(fn=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
