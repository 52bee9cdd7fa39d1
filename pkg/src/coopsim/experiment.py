"""Experiment runners behind the command line: generate, replay policies, benchmark scaling."""
from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .comms import (
    FRAME_BUDGET_BYTES,
    BandwidthBudget,
    MessageLog,
    payload_size,
    run_handshake,
    share,
)
from .config import ExperimentConfig
from .engine import ScenarioConfig, filter_scenes, full_coverage_reward, run_parallel
from .metrics import DetectionResult, MetricsReport, score, simulate_detections
from .scheduling import (
    HistoricalBest,
    PolicyState,
    SchedulingPolicy,
    best_single_by_enumeration,
    policy_label,
    schedule,
    update_state,
)
from .sensing import fused_coverage, gain_table, visibility_table
from .world import AgentKind, Sample, Scene, build_sample

log = logging.getLogger(__name__)

ORACLE_MAX_CANDIDATES = 4


class BudgetViolation(RuntimeError):
    pass


def _stable(text: str) -> int:
    return zlib.crc32(text.encode())


def decision_seed(run_seed: int, scene_id: str, frame: int, ego_id: str, stream: int = 0) -> int:
    ss = np.random.SeedSequence([run_seed & 0xFFFFFFFF, _stable(scene_id), frame, _stable(ego_id), stream])
    return int(ss.generate_state(1)[0])


# ------------------------------------------------------------------- gen


def generate_dataset(config: ExperimentConfig, root) -> dict:
    """Generate, filter and export every configured scene; returns the manifest."""
    root = Path(root)
    manifest = dataio.init_dataset(root, config.seed)
    scenes = [run_parallel(sc, config.workers)[0] for sc in config.scenarios]
    reward = None
    if config.min_reward is not None:
        reward = full_coverage_reward(config.model_for(config.ranges[0]))
    kept = filter_scenes(scenes, config.min_length, config.min_counts, reward,
                         config.min_reward if config.min_reward is not None else 0.0)
    model = config.model_for(config.ranges[0])
    for sc in kept:
        dataio.export_scene(sc, model, root)
    manifest = dataio.read_manifest(root)
    log.info("kept %d of %d scenes", len(kept), len(scenes))
    return manifest


def manifest_summary(manifest: dict) -> dict:
    scenes = manifest["scenes"]
    return {
        "scenes": len(scenes),
        "frames": sum(s["n_frames"] for s in scenes),
        "samples": sum(s["n_samples"] for s in scenes),
        "boxes": sum(s["n_boxes"] for s in scenes),
    }


# ------------------------------------------------------------------- run


@dataclass
class CellAccumulator:
    """Everything one (policy, range, seed) cell collects over the scenes."""

    detections: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    covered: int = 0
    total: int = 0
    bytes_spent: int = 0
    ego_frames: int = 0
    max_ego_frame_bytes: int = 0
    refused_shares: int = 0
    decisions: list = field(default_factory=list)

    def merge(self, other: "CellAccumulator") -> None:
        self.detections += other.detections
        self.truth += other.truth
        self.covered += other.covered
        self.total += other.total
        self.bytes_spent += other.bytes_spent
        self.ego_frames += other.ego_frames
        self.max_ego_frame_bytes = max(self.max_ego_frame_bytes, other.max_ego_frame_bytes)
        self.refused_shares += other.refused_shares
        self.decisions += other.decisions


def _cell_key(policy: SchedulingPolicy, rng: float, seed: int) -> tuple[str, float, int]:
    return (policy_label(policy), float(rng), int(seed))


def replay_scene(
    scene: Scene,
    policies: Sequence[SchedulingPolicy],
    ranges: Sequence[float],
    seeds: Sequence[int],
    config: ExperimentConfig,
    message_logs: Optional[dict] = None,
) -> dict:
    """Replay one scene frame by frame under every policy, range and seed."""
    out: dict = {}
    payloads = [
        {a.id: payload_size(a, fr) for a in fr.sensored_agents} for fr in scene.frames
    ]
    for rng in ranges:
        model = config.model_for(rng)
        tables = [visibility_table(fr, model) for fr in scene.frames]
        gains = [gain_table(fr, model, t) for fr, t in zip(scene.frames, tables)]
        truths = [
            {a.id: build_sample(fr, a.id, rng) for a in fr.sensored_agents} for fr in scene.frames
        ]
        out[("oracle", float(rng))] = oracle_agreement(scene, model, tables, gains)
        for policy in policies:
            for seed in seeds:
                key = _cell_key(policy, rng, seed)
                acc = CellAccumulator()
                mlog = MessageLog() if message_logs is not None else None
                states: dict[str, PolicyState] = {}
                for fi, fr in enumerate(scene.frames):
                    ids = [a.id for a in fr.sensored_agents]
                    for ego in ids:
                        cands = [c for c in ids if c != ego]
                        state = states.setdefault(ego, PolicyState())
                        budget = BandwidthBudget(fr.index)
                        bench = None
                        if policy.uses_handshake and fi > 0 and cands:
                            prev = gains[fi - 1]
                            replies = run_handshake(
                                ego, cands, fr,
                                lambda c, _e=ego, _p=prev: _p.get(_e, {}).get(c, 0),
                                mlog, budget)
                            bench = dict(replies)
                        dec = schedule(policy, ego, cands, fr, state,
                                       decision_seed(seed, scene.id, fr.index, ego), bench)
                        delivered = []
                        for c in dec.chosen:
                            ok = share(fr.agent(c), ego, fr, tables[fi][c], budget, mlog,
                                       nbytes=payloads[fi][c])
                            if ok:
                                delivered.append(c)
                            else:
                                acc.refused_shares += 1
                        if budget.spent_bytes > FRAME_BUDGET_BYTES:
                            raise BudgetViolation(
                                f"scene {scene.id} frame {fr.index} ego {ego}: {budget.spent_bytes} B")
                        cover = fused_coverage(ego, delivered, fr, model, tables[fi])
                        realized = {c: (gains[fi][ego][c] if c in delivered else 0) for c in dec.chosen}
                        states[ego] = update_state(state, dec, realized)

                        truth = truths[fi][ego]
                        tag = f"{scene.id}:{ego}"
                        det = simulate_detections(cover, fr, ego, config.noise,
                                                  decision_seed(seed, scene.id, fr.index, ego, 1), rng,
                                                  sample=truth)
                        acc.detections.append(DetectionResult(fr.index, tag, det.detections))
                        acc.truth.append(Sample(fr.index, tag, truth.annotations, truth.valid))
                        acc.covered += len(cover)
                        acc.total += len(truth.annotations)
                        acc.bytes_spent += budget.spent_bytes
                        acc.ego_frames += 1
                        acc.max_ego_frame_bytes = max(acc.max_ego_frame_bytes, budget.spent_bytes)
                        acc.decisions.append({
                            "scene": scene.id, "frame": fr.index, "ego": ego,
                            "chosen": list(dec.chosen), "delivered": delivered,
                            "benchmarks": {k: dec.benchmarks[k] for k in sorted(dec.benchmarks)},
                            "bytes": budget.spent_bytes, "covered": len(cover),
                            "truth": len(truth.annotations),
                        })
                out[key] = acc
                if message_logs is not None:
                    message_logs[key] = mlog
    return out


def oracle_agreement(scene: Scene, model, tables, gains) -> tuple[int, int]:
    """(checks, violations): handshake-best pick vs. exhaustive enumeration, small candidate sets only."""
    checks = violations = 0
    for fi, fr in enumerate(scene.frames):
        ids = [a.id for a in fr.sensored_agents]
        for ego in ids:
            cands = [c for c in ids if c != ego]
            if not cands or len(cands) > ORACLE_MAX_CANDIDATES:
                continue
            checks += 1
            _, best = best_single_by_enumeration(ego, cands, fr, model, tables[fi])
            pick = schedule(HistoricalBest(), ego, cands, fr, PolicyState(), 0, gains[fi][ego]).chosen[0]
            if len(fused_coverage(ego, [pick], fr, model, tables[fi])) != best:
                violations += 1
    return checks, violations


def _replay_from_disk(args):
    root, scene_id, config = args
    scene = dataio.import_scene(root, scene_id).scene
    return replay_scene(scene, config.policies, config.ranges, config.seeds, config)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.4f}"


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def run_experiment(config: ExperimentConfig, dataset, out_dir) -> dict:
    """Replay every dataset scene under every configured policy; writes result files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_ids = dataio.list_scenes(dataset)
    jobs = [(str(dataset), sid, config) for sid in scene_ids]
    logs: Optional[dict] = {} if config.message_log else None
    if config.workers > 1 and len(jobs) > 1 and logs is None:
        with ProcessPoolExecutor(config.workers) as pool:
            per_scene = list(pool.map(_replay_from_disk, jobs))
    else:
        per_scene = []
        for root, sid, cfg in jobs:
            scene_logs = {} if logs is not None else None
            scene = dataio.import_scene(root, sid).scene
            per_scene.append(replay_scene(scene, cfg.policies, cfg.ranges, cfg.seeds, cfg, scene_logs))
            if logs is not None:
                for key, mlog in scene_logs.items():
                    logs.setdefault(key, []).append((sid, mlog))

    cells: dict = {}
    for policy in config.policies:
        for rng in config.ranges:
            for seed in config.seeds:
                key = _cell_key(policy, rng, seed)
                acc = CellAccumulator()
                for part in per_scene:
                    acc.merge(part[key])
                cells[key] = acc

    dec_dir = out_dir / "decisions"
    dec_dir.mkdir(exist_ok=True)
    rows = []
    for (label, rng, seed), acc in cells.items():
        if acc.max_ego_frame_bytes > FRAME_BUDGET_BYTES:
            raise BudgetViolation(f"{label} range {rng}: {acc.max_ego_frame_bytes} B in one frame")
        report = score(acc.detections, acc.truth) if acc.truth else MetricsReport.empty_report()
        dec_name = f"{_slug(label)}_r{rng:g}_s{seed}.jsonl"
        with open(dec_dir / dec_name, "w") as fh:
            for d in acc.decisions:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        if logs is not None:
            with open(dec_dir / f"messages_{_slug(label)}_r{rng:g}_s{seed}.jsonl", "w") as fh:
                for sid, mlog in logs.get((label, rng, seed), []):
                    for rec in mlog.records:
                        fh.write(rec.to_json() + "\n")
        rows.append({
            "policy": label,
            "range": rng,
            "seed": seed,
            "metrics": report.to_dict(),
            "coverage_recall": acc.covered / acc.total if acc.total else None,
            "bytes_total": acc.bytes_spent,
            "bytes_per_ego_frame": acc.bytes_spent / acc.ego_frames if acc.ego_frames else 0.0,
            "max_ego_frame_bytes": acc.max_ego_frame_bytes,
            "refused_shares": acc.refused_shares,
            "decision_log": f"decisions/{dec_name}",
        })
    results = {
        "scenes": scene_ids,
        "oracle": [{"range": rng, "checks": sum(p[("oracle", float(rng))][0] for p in per_scene),
                    "violations": sum(p[("oracle", float(rng))][1] for p in per_scene)}
                   for rng in config.ranges],
        "ranges": list(config.ranges),
        "seeds": list(config.seeds),
        "budget_bytes": FRAME_BUDGET_BYTES,
        "rows": rows,
    }
    (out_dir / "results.json").write_text(json.dumps(results, sort_keys=True, indent=1) + "\n")
    (out_dir / "results.csv").write_text(results_csv(rows))
    (out_dir / "results.md").write_text(results_markdown(rows, config.ranges))
    return results


CSV_COLUMNS = ("policy", "seed", "range", "mAP", "NDS", "mATE", "mASE", "mAOE", "mAVE",
               "coverage_recall", "bytes_per_ego_frame", "max_ego_frame_bytes", "refused_shares")


def _summary_rows(rows: list[dict]) -> list[dict]:
    """Per-seed rows followed by a mean and a std row for every (policy, range) with several seeds."""
    out = []
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["policy"], r["range"]), []).append(r)
    for (policy, rng), grp in groups.items():
        for r in grp:
            out.append({"policy": policy, "seed": str(r["seed"]), "range": rng, **_flat(r)})
        if len(grp) > 1:
            flats = [_flat(r) for r in grp]
            for name, fn in (("mean", np.mean), ("std", np.std)):
                agg = {}
                for col in flats[0]:
                    vals = [f[col] for f in flats if f[col] is not None]
                    agg[col] = float(fn(vals)) if vals else None
                out.append({"policy": policy, "seed": name, "range": rng, **agg})
    return out


def _flat(r: dict) -> dict:
    m = r["metrics"]
    return {
        "mAP": m["mAP"], "NDS": m["NDS"], "mATE": m["mATE"], "mASE": m["mASE"],
        "mAOE": m["mAOE"], "mAVE": m["mAVE"], "coverage_recall": r["coverage_recall"],
        "bytes_per_ego_frame": r["bytes_per_ego_frame"],
        "max_ego_frame_bytes": float(r["max_ego_frame_bytes"]),
        "refused_shares": float(r["refused_shares"]),
    }


def results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in _summary_rows(rows):
        w.writerow([r["policy"], r["seed"], f"{r['range']:g}"] + [_fmt(r[c]) for c in CSV_COLUMNS[3:]])
    return buf.getvalue()


def results_markdown(rows: list[dict], ranges: Sequence[float]) -> str:
    """Policy x range matrix of mAP / NDS / coverage recall, seeds averaged."""
    rng_txt = "/".join(f"{r:g}m" for r in ranges)
    head = ["policy", f"mAP ({rng_txt})", f"NDS ({rng_txt})", f"coverage recall ({rng_txt})",
            f"bytes/ego-frame ({rng_txt})"]
    table: dict = {}
    for r in rows:
        table.setdefault(r["policy"], {}).setdefault(r["range"], []).append(_flat(r))

    def cell(policy, col, scale=1.0, digits=1):
        parts = []
        for rng in ranges:
            vals = [f[col] for f in table[policy].get(rng, []) if f[col] is not None]
            parts.append(f"{np.mean(vals) * scale:.{digits}f}" if vals else "-")
        return "/".join(parts)

    lines = [head]
    for policy in table:
        lines.append([policy, cell(policy, "mAP", 100), cell(policy, "NDS", 100),
                      cell(policy, "coverage_recall", 100), cell(policy, "bytes_per_ego_frame", 1, 0)])
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    fmt = lambda row: "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(lines[0]), sep] + [fmt(r) for r in lines[1:]]) + "\n"


# ------------------------------------------------------------- scaling


BENCH_SIDE_PER_AGENT = 20.0
BENCH_OBJECTS_PER_AGENT = 1.25


def bench_scaling(
    agent_counts: Sequence[int],
    seed: int = 0,
    workers: int = 1,
    duration: float = 5.0,
    objects_per_agent: float = BENCH_OBJECTS_PER_AGENT,
) -> tuple[list[dict], float]:
    """Median per-tick wall time for each agent count and the R^2 of a straight-line fit.

    The spawn square and the object count grow with the agent count so that the
    number of entities per metre of road stays fixed; otherwise the visibility
    oracle's cost per agent would grow with crowding rather than with the engine.
    """
    counts = list(agent_counts)
    if counts != sorted(counts):
        raise ValueError("agent counts must be ascending")
    rows = []
    for n in counts:
        side = BENCH_SIDE_PER_AGENT * n
        cfg = ScenarioConfig(spawn_rect=(side, side), counts={AgentKind.UNCONTROLLED_CAV: n},
                             n_objects=round(objects_per_agent * n), duration=duration, seed=seed)
        _, report = run_parallel(cfg, workers)
        ticks = [r[2] for r in report.rows]
        rows.append({"agents": n, "median_tick_ms": float(np.median(ticks)),
                     "mean_tick_ms": float(np.mean(ticks)), "mean_agent_ms": report.mean_agent_ms})
    return rows, linear_r2([r["agents"] for r in rows], [r["median_tick_ms"] for r in rows])


def linear_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return 1.0
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


def scaling_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agents", "median_tick_ms", "mean_tick_ms", "mean_agent_ms"])
    for r in rows:
        w.writerow([r["agents"], f"{r['median_tick_ms']:.4f}", f"{r['mean_tick_ms']:.4f}",
                    f"{r['mean_agent_ms']:.4f}"])
    return buf.getvalue()
