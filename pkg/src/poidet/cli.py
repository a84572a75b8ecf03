"""Command line interface.

Subcommands: ``synth-gen``, ``train``, ``infer``, ``eval``, ``ablate``,
``bench``, ``stats``, ``gradcheck``. Every command prints one JSON object to
stdout on success and exits 0; failures print one JSON object with an
``error`` key to stderr and exit nonzero (2 for usage errors, 1 otherwise).
Progress lines of long-running commands go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .kernels.gradcheck import format_results, run_all
from .metrics import load_detections, load_ground_truths, map_report, save_detections
from .pipeline.ablate import load_grid, run_ablation, table_csv
from .pipeline.bench import bench_detector
from .pipeline.config import load_config
from .pipeline.data import scan_scenes
from .pipeline.infer import run_inference
from .pipeline.train import train_detector
from .rng import derive_seed
from .synth import edge_density_stats, generate_scene, load_scene_spec, save_scene

STATS_HEADER = "e1,e2,e3,e4,others"


class CommandError(Exception):
    """Usage-level failure; printed as the error JSON with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(message)


def _progress(line: str) -> None:
    print(line, file=sys.stderr)
    sys.stderr.flush()


def _cmd_synth_gen(args) -> dict:
    spec = load_scene_spec(args.spec)
    if args.count < 1:
        raise CommandError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(spec, derive_seed(args.seed, "scene:%d" % i))
        save_scene(scene, out / ("scene_%05d.bin" % i))
    return {"scenes": args.count, "out": str(out)}


def _cmd_train(args) -> dict:
    cfg = load_config(args.config)
    result = train_detector(cfg, args.data, args.out, log=_progress)
    last = result.epochs[-1] if result.epochs else None
    return {
        "checkpoint": str(result.checkpoint_path),
        "log": str(result.log_path),
        "epochs": len(result.epochs),
        "final_loss": last["loss"]["total"] if last else None,
        "final_val_map": last["val_map"] if last else None,
    }


def _cmd_infer(args) -> dict:
    records = scan_scenes(args.data)
    detections, stems = run_inference(args.ckpt, records,
                                      baseline=args.baseline)
    save_detections(detections, args.out, scenes=stems)
    return {"out": str(args.out), "scenes": len(stems),
            "detections": len(detections), "baseline": bool(args.baseline)}


def _cmd_eval(args) -> dict:
    detections = load_detections(args.dets)
    gts, _ = load_ground_truths(args.gts)
    report = map_report(detections, gts, recall_only=args.recall_only)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json_dict(), indent=1) + "\n")
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(report.to_csv_text())
    return {"map": report.map, "out": str(out), "csv": str(csv_path)}


def _cmd_ablate(args) -> dict:
    cfg = load_config(args.config)
    grid = load_grid(args.grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    work_dir = out.parent / (out.stem + "_runs")
    rows = run_ablation(cfg, grid, work_dir, log=_progress)
    out.write_text(table_csv(rows))
    return {"rows": len(rows), "out": str(out), "runs": str(work_dir)}


def _cmd_bench(args) -> dict:
    return bench_detector(args.ckpt, scan_scenes(args.data), args.repeats)


def _cmd_stats(args) -> dict:
    rows = []
    for rec in scan_scenes(args.data):
        stats = edge_density_stats(rec.load())
        if len(stats):
            rows.append(stats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if rows:
        table = np.vstack(rows)
        mean = table.mean(axis=0)
        out.write_text(STATS_HEADER + "\n"
                       + ",".join("%.6f" % v for v in mean) + "\n")
        count = len(table)
    else:
        out.write_text(STATS_HEADER + "\n")
        count = 0
    return {"objects": count, "out": str(out)}


def _cmd_gradcheck(args) -> dict:
    results = run_all(seed=args.seed, n_configs=args.configs)
    print(format_results(results), file=sys.stderr)
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise RuntimeError("gradient checks failed: %s" % ", ".join(failed))
    return {
        "checks": len(results),
        "failed": 0,
        "max_rel_err": max(r.max_rel_err for r in results),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poidet",
                     description="Two-stage BEV point-cloud detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate labeled synthetic scenes")
    p.add_argument("--spec", required=True, help="scene spec TOML file")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, required=True, help="base seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", required=True, help="pipeline config TOML")
    p.add_argument("--data", required=True, help="training scene directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run detection over a scene directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="detections JSONL path")
    p.add_argument("--baseline", action="store_true",
                   help="emit stage-one proposals directly")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--dets", required=True, help="detections JSONL file")
    p.add_argument("--gts", required=True, help="scene directory with sidecars")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--recall-only", action="store_true",
                   help="clip only the recall axis in the AP normalization")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and score a switch grid")
    p.add_argument("--config", required=True, help="pipeline config TOML")
    p.add_argument("--grid", required=True, help="switch grid JSON file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("bench", help="per-stage timing breakdown")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--repeats", type=int, required=True, help="passes per scene")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("stats", help="edge-band density statistics")
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=100,
                   help="random configurations per check")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def _fail(message: str, code: int) -> int:
    print(json.dumps({"error": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        payload = args.func(args)
    except CommandError as exc:
        return _fail(str(exc), 2)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # deliberate catch-all: the CLI error contract
        return _fail("%s: %s" % (type(exc).__name__, exc), 1)
    print(json.dumps(payload, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
