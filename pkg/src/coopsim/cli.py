"""``coopsim`` command line: gen, run, bench-scaling, score."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio
from .config import ConfigError, load_config
from .experiment import (
    bench_scaling,
    generate_dataset,
    manifest_summary,
    run_experiment,
    scaling_csv,
)
from .metrics import Detection, DetectionResult, score
from .world import Sample

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("coopsim")


def _dataset_path(args, config) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    if config.dataset:
        return Path(config.dataset)
    return Path(args.out or config.output_dir) / "dataset"


def cmd_gen(args) -> int:
    config = load_config(args.config, seed=args.seed, workers=args.workers)
    root = Path(args.out) if args.out else Path(config.dataset or Path(config.output_dir) / "dataset")
    summary = manifest_summary(generate_dataset(config, root))
    print(f"dataset {root}: {summary['scenes']} scenes, {summary['frames']} frames, "
          f"{summary['samples']} samples, {summary['boxes']} boxes")
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config, seed=args.seed, workers=args.workers)
    dataset = _dataset_path(args, config)
    out = Path(args.out or config.output_dir)
    results = run_experiment(config, dataset, out)
    print((out / "results.md").read_text(), end="")
    for o in results["oracle"]:
        print(f"oracle agreement @ {o['range']:g} m: {o['checks'] - o['violations']}/{o['checks']}")
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    counts = [int(c) for c in args.counts.split(",")]
    rows, r2 = bench_scaling(counts, seed=args.seed or 0, workers=args.workers or 1,
                             duration=args.duration)
    text = scaling_csv(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scaling.csv").write_text(text)
    print(text, end="")
    print(f"linear fit R^2 = {r2:.4f}")
    return EXIT_OK


def _load_detections(path) -> tuple[list[DetectionResult], set]:
    raw = json.loads(Path(path).read_text())
    results, scenes = [], set()
    for rec in raw["results"]:
        dets = tuple(Detection(dataio.box_from_dict(d["box"]), float(d["score"])) for d in rec["detections"])
        results.append(DetectionResult(rec["frame_index"], f"{rec['scene_id']}:{rec['ego_id']}", dets))
        scenes.add(rec["scene_id"])
    return results, scenes


def cmd_score(args) -> int:
    results, scenes = _load_detections(args.detections)
    truth = []
    for sid in sorted(scenes):
        imported = dataio.import_scene(args.dataset, sid)
        for (fi, ego), s in sorted(imported.samples.items()):
            truth.append(Sample(fi, f"{sid}:{ego}", s.annotations, s.valid))
    report = score(results, truth)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "metrics.csv").write_text(report.to_csv())
    print(report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--workers", type=int, help="worker count")

    g = sub.add_parser("gen", help="generate, filter and export scenes")
    common(g)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="replay the dataset under each scheduling policy")
    common(r)
    r.add_argument("--dataset", help="dataset root (default: <out>/dataset)")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench-scaling", help="per-tick cost against agent count")
    common(b, config_required=False)
    b.add_argument("--counts", default="2,4,8,16,32", help="comma-separated ascending agent counts")
    b.add_argument("--duration", type=float, default=5.0, help="simulated seconds per count")
    b.set_defaults(func=cmd_bench_scaling)

    s = sub.add_parser("score", help="score a detections file against a dataset")
    common(s, config_required=False)
    s.add_argument("--detections", required=True)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
