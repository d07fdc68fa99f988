"""Command line entry point: ``cnnmtt {generate,train,eval,sweep,bound}``.

``CNNMTT_OUTPUT_DIR`` sets the default output directory and
``CNNMTT_WORKERS`` the default worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .dataset import PartialDatasetError, default_workers, generate_dataset
from .evaluation import OspaConfig
from .harness import (
    ExperimentPlan,
    TrainSettings,
    default_bound_windows,
    evaluate_width,
    load_json,
    load_scenario,
    render_panels,
    run_bound,
    run_manifest,
    run_sweep,
    run_training,
    write_frame_csv,
    write_summary_csv,
)
from .model import load_checkpoint
from .raster import PulseConfig
from .scenario import ScenarioConfig
from .trainer import WindowSpec

log = logging.getLogger("cnnmtt")


def _out(path):
    if path is not None:
        return Path(path)
    return Path(os.environ.get("CNNMTT_OUTPUT_DIR", "."))


def cmd_generate(args) -> int:
    config = load_scenario(args.config)
    if args.seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "seed": args.seed})
    try:
        manifest = generate_dataset(
            _out(args.output),
            config,
            args.sims,
            args.steps,
            history_length=args.history,
            pulse=PulseConfig(args.sigma) if args.sigma else PulseConfig(),
            workers=args.workers if args.workers is not None else default_workers(),
            resume=args.resume,
            log=log.info,
        )
    except (PartialDatasetError, FileExistsError) as exc:
        log.error("%s", exc)
        return 2
    frames = sum(c["frames"] for c in manifest["chunks"])
    log.info("wrote %d frames in %d chunks", frames, len(manifest["chunks"]))
    return 0


def cmd_train(args) -> int:
    settings = TrainSettings.from_dict(load_json(args.train_config))
    try:
        run_training(args.dataset, settings, _out(args.output))
    except ValueError as exc:
        log.error("%s", exc)
        return 2
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = load_scenario(args.scenario).replace(window_width_w=args.width)
    if args.seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out = _out(args.output)
    out.mkdir(parents=True, exist_ok=True)
    panels = [] if args.png else None
    panel_steps = tuple(int(s) for s in args.panel_steps.split(","))
    try:
        summary = evaluate_width(model, config, args.sims, args.steps, OspaConfig(args.cutoff, args.order), panels, panel_steps)
    except ValueError as exc:
        log.error("%s", exc)
        return 2
    write_frame_csv(out / f"frames_w{args.width:g}.csv", summary)
    write_summary_csv(out / f"summary_w{args.width:g}.csv", [summary])
    meta = {}
    if panels:
        meta = render_panels(out / f"panels_w{args.width:g}.png", panels, args.width)
    manifest = run_manifest(
        command="eval",
        checkpoint=str(Path(args.checkpoint).resolve()),
        scenario=config.to_dict(),
        sims=args.sims,
        steps=args.steps,
        panels=meta,
    )
    (out / f"eval_manifest_w{args.width:g}.json").write_text(json.dumps(manifest, indent=1))
    print(f"w={args.width:g} km  mean OSPA {summary.mean_ospa:.1f} m  95% CI +-{summary.ci95:.1f} m")
    return 0


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.checkpoint)
    plan = ExperimentPlan.from_dict(load_json(args.plan))
    rows = run_sweep(model, plan, _out(args.output))
    for r in rows:
        print(f"w={r['w_km']:g} km  OSPA {r['mean_ospa_m']:.1f} +- {r['ci95_m']:.1f} m  bound holds: {r['holds']}")
    return 0


def cmd_bound(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = load_scenario(args.scenario).replace(window_width_w=args.width)
    if args.seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "seed": args.seed})
    if args.input_width is not None:
        window = WindowSpec(args.input_width, args.output_width if args.output_width is not None else args.input_width)
    else:
        window = default_bound_windows(model, args.train_width)[args.kind]
    report = run_bound(model, config, window, args.sims, args.steps)
    out = _out(args.output)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / f"bound_w{args.width:g}.json")
    print(
        f"loss_large {report.loss_large:.4g} <= rhs {report.rhs:.4g} (+{report.margin:.2g}): {report.holds}  "
        f"[C={report.C:.4g}, H={report.H:.4g}]"
    )
    return 0 if report.holds else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cnnmtt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate and rasterize a training dataset")
    g.add_argument("config", help="scenario config (JSON)")
    g.add_argument("output", nargs="?", help="dataset directory")
    g.add_argument("--sims", type=int, default=300)
    g.add_argument("--steps", type=int, default=100)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--history", type=int, default=4, help="observation frames per input")
    g.add_argument("--sigma", type=float, help="target pulse std in meters")
    g.add_argument("--resume", action="store_true", help="continue a partial dataset")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("dataset")
    t.add_argument("train_config", help="training config (JSON)")
    t.add_argument("output", nargs="?", help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="OSPA evaluation at one window width")
    e.add_argument("checkpoint")
    e.add_argument("scenario", help="scenario config (JSON); its width is overridden")
    e.add_argument("--width", type=float, default=1.0, help="rendering window width in km")
    e.add_argument("--sims", type=int, default=100)
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--seed", type=int)
    e.add_argument("--cutoff", type=float, default=500.0)
    e.add_argument("--order", type=float, default=2.0)
    e.add_argument("--png", action="store_true", help="render input/output panels")
    e.add_argument("--panel-steps", default="10,30,50,70")
    e.add_argument("--output", "-o")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluation and bound checks across window widths")
    s.add_argument("checkpoint")
    s.add_argument("plan", help="experiment plan (JSON)")
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bound", help="empirical transfer-bound check at one width")
    b.add_argument("checkpoint")
    b.add_argument("scenario")
    b.add_argument("--width", type=float, default=3.0)
    b.add_argument("--train-width", type=float, default=1.0)
    b.add_argument("--kind", choices=("padding_free", "narrow"), default="padding_free")
    b.add_argument("--input-width", type=float, help="input window A in meters")
    b.add_argument("--output-width", type=float, help="output window B in meters")
    b.add_argument("--sims", type=int, default=10)
    b.add_argument("--steps", type=int, default=100)
    b.add_argument("--seed", type=int)
    b.add_argument("--output", "-o")
    b.set_defaults(func=cmd_bound)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
