"""Command-line entry point: ``progd <subcommand> [flags]``.

Failures exit nonzero with one line on stderr of the form
``progd: error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import LAYOUTS, GenConfig, constant_velocity_baseline, generate, write_splits
from .decoder import JointPrediction
from .metrics import EvalCase, evaluate_predictions
from .model import load_model, prepare
from .plot import render_svg
from .scenario import Horizon, load_jsonl
from .trainer import (ABLATION_AXES, TrainConfig, ablate, atomic_write, evaluate_model, load_config,
                      train, write_evaluation, write_predictions, write_training_outputs)


class CliError(Exception):
    """A user-facing failure with a short kind label."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _split(data: str, name: str, required: bool = True):
    """Scenarios of ``name`` under a split directory, or the file itself."""
    p = Path(data)
    path = p / f"{name}.jsonl" if p.is_dir() else p
    if not path.is_file():
        if required:
            raise CliError("missing-input", f"no such file: {path}")
        return []
    return load_jsonl(path)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _checkpoint(path):
    if not Path(path).is_file():
        raise CliError("missing-input", f"checkpoint not found: {path}")
    return load_model(path)[0]


def _find(scenarios, scenario_id):
    for s in scenarios:
        if s.scenario_id == scenario_id:
            return s
    raise CliError("missing-input", f"scenario {scenario_id!r} not found")


def cmd_gen(args) -> None:
    layouts = tuple(args.layouts.split(",")) if args.layouts else LAYOUTS
    cfg = GenConfig(seed=args.seed, n_scenarios=args.count, agents_min=args.agents_min,
                    agents_max=args.agents_max, layouts=layouts, noise_sigma=args.noise,
                    horizon=Horizon(args.t_obs, args.t_fut, args.hz))
    paths = write_splits(generate(cfg), args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))


def cmd_train(args) -> None:
    cfg = _config(args)
    result = train(cfg, _split(args.data, "train"), _split(args.data, "val", required=False))
    write_training_outputs(result, cfg, args.out)
    print(json.dumps({"checkpoint": str(Path(args.out) / "model.ckpt.json"), "steps": result.steps,
                      "best_epoch": result.best_epoch}))


def cmd_eval(args) -> None:
    scenarios = _split(args.data, "test")
    if args.baseline == "cv":
        preds = [constant_velocity_baseline(s, args.modes) for s in scenarios]
        report = evaluate_predictions([EvalCase.from_scenario(s) for s in scenarios], preds)
    else:
        if not args.checkpoint:
            raise CliError("usage", "eval needs --checkpoint or --baseline cv")
        report, preds = evaluate_model(_checkpoint(args.checkpoint), scenarios)
    write_evaluation(report, scenarios, preds, args.out)
    print(json.dumps(report.aggregate(), sort_keys=True))


def cmd_predict(args) -> None:
    model = _checkpoint(args.checkpoint)
    scenarios = _split(args.data, "test")
    preds = []
    for s in scenarios:
        model.check_horizon(s)
        preds.append(model.predict(prepare(s, model.cfg)))
    write_predictions(scenarios, preds, args.out, global_frame=args.global_frame)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    rows = ablate(cfg, args.axis, values, _split(args.data, "train"), _split(args.data, "val", False),
                  _split(args.data, "test"), args.out)
    print(json.dumps(rows, sort_keys=True))


def _load_prediction(path, scn):
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec["scenario_id"] != scn.scenario_id:
            continue
        ids = list(scn.interesting_ids)
        traj = np.array([rec["trajectories"][str(a)] for a in ids])  # (n, K, T, 2)
        return JointPrediction(tuple(ids), np.transpose(traj, (0, 2, 1, 3)), np.asarray(rec["probs"]))
    raise CliError("missing-input", f"no predictions for {scn.scenario_id!r} in {path}")


def cmd_plot(args) -> None:
    scn = _find(_split(args.data, "test"), args.scenario_id)
    pred = None
    if args.predictions:
        pred = _load_prediction(args.predictions, scn)
    elif args.checkpoint:
        model = _checkpoint(args.checkpoint)
        model.check_horizon(scn)
        pred = model.predict(prepare(scn, model.cfg))
    atomic_write(args.out, render_svg(scn, pred))


def cmd_graph_dump(args) -> None:
    model = _checkpoint(args.checkpoint)
    scn = _find(_split(args.data, "test"), args.scenario_id)
    model.check_horizon(scn)
    prep = prepare(scn, model.cfg)
    with ad.no_grad():
        out = model(prep, trace=True)
    stages = []
    for tr in out.trace:
        for k, (built, upd) in enumerate(zip(tr.snapshots, tr.updated)):
            entry = {"modality": k, "stage": tr.stage,
                     "agent2agent": int(len(built.e0)), "lane2agent": int(len(built.e1)),
                     "lane2agent_updated": int(len(upd.e1))}
            if args.dump_snapshots:
                entry["constructed"] = built.to_json()
                entry["updated"] = upd.to_json()
            stages.append(entry)
    static = prep.static
    payload = {
        "scenario_id": scn.scenario_id,
        "static": {"agents": int(len(static.agent_xy)), "lanes": int(len(static.lane_xy)),
                   "aa": static.aa.tolist(), "al": static.al.tolist(), "ll": static.ll.tolist()},
        "snapshots": stages,
    }
    atomic_write(args.out, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic train/val/test splits")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--out", required=True)
    g.add_argument("--layouts", default="", help=f"comma list from {','.join(LAYOUTS)}")
    g.add_argument("--agents-min", type=int, default=2)
    g.add_argument("--agents-max", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.0, help="observation noise sigma (m)")
    g.add_argument("--t-obs", type=float, default=1.0)
    g.add_argument("--t-fut", type=float, default=3.0)
    g.add_argument("--hz", type=float, default=10.0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="run", help="output directory (default: ./run)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics.json and predictions over a split")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=["cv"])
    e.add_argument("--modes", type=int, default=6, help="modalities for --baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predictions JSONL for (possibly unlabeled) scenarios")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--global", dest="global_frame", action="store_true",
                    help="emit coordinates in the source frame")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and evaluate variants along one axis")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--values", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render one scenario to SVG")
    pl.add_argument("--data", required=True)
    pl.add_argument("--scenario-id", required=True)
    pl.add_argument("--predictions")
    pl.add_argument("--checkpoint")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    gd = sub.add_parser("graph-dump", help="dynamic-graph snapshots of one decode as JSON")
    gd.add_argument("--checkpoint", required=True)
    gd.add_argument("--data", required=True)
    gd.add_argument("--scenario-id", required=True)
    gd.add_argument("--dump-snapshots", action="store_true", help="include full snapshot contents")
    gd.add_argument("--out", required=True)
    gd.set_defaults(func=cmd_graph_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as e:
        kind, msg = e.kind, str(e)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        kind, msg = "io", str(e)
    except (ValueError, KeyError, RuntimeError) as e:
        kind, msg = type(e).__name__, str(e).strip("'\"")
    else:
        return 0
    print(f"progd: error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
