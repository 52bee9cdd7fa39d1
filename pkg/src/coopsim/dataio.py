"""On-disk dataset: scenes, frames, per-ego samples and cooperation graphs as JSON files.

Layout::

    root/manifest.json
    root/<scene_id>/frames/<idx>.json
    root/<scene_id>/samples/<idx>_<ego>.json
    root/<scene_id>/graphs/<idx>.json
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from filelock import FileLock

from . import __version__
from .engine import ScenarioConfig
from .sensing import CoopGraph, VisibilityModel, coop_graph, visibility_table
from .world import Agent, Frame, ObjectBox, Pose, Sample, Scene, SensorConfig, build_sample

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


class DatasetError(RuntimeError):
    pass


class SchemaVersionError(DatasetError):
    pass


class CorruptRecordError(DatasetError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _pose(p: Pose) -> list[float]:
    return [p.x, p.y, p.z, p.yaw]


def box_to_dict(b: ObjectBox) -> dict:
    return {"id": b.id, "class": b.cls.value, "center": _pose(b.center),
            "size": list(b.size), "velocity": list(b.velocity)}


def box_from_dict(d: Mapping) -> ObjectBox:
    return ObjectBox(d["id"], d["class"], Pose(*d["center"]), tuple(d["size"]), tuple(d["velocity"]))


def _sensor_to_dict(s: Optional[SensorConfig]):
    if s is None:
        return None
    return {"range": s.range, "channels": s.channels, "points_per_second": s.points_per_second,
            "fov_vertical": list(s.fov_vertical), "rate": s.rate}


def _sensor_from_dict(d) -> Optional[SensorConfig]:
    if d is None:
        return None
    return SensorConfig(d["range"], d["channels"], d["points_per_second"], tuple(d["fov_vertical"]), d["rate"])


def agent_to_dict(a: Agent) -> dict:
    return {"id": a.id, "kind": a.kind.value, "pose": _pose(a.pose), "velocity": list(a.velocity),
            "size": list(a.size), "sensor": _sensor_to_dict(a.sensor)}


def agent_from_dict(d: Mapping) -> Agent:
    return Agent(d["id"], d["kind"], Pose(*d["pose"]), tuple(d["velocity"]),
                 _sensor_from_dict(d["sensor"]), tuple(d["size"]))


def frame_to_dict(frame: Frame, scene_id: str) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene_id,
        "index": frame.index,
        "sim_time": frame.sim_time,
        "agents": [agent_to_dict(a) for a in frame.agents],
        "objects": [box_to_dict(o) for o in frame.objects],
    }


def frame_from_dict(d: Mapping) -> Frame:
    return Frame(d["index"], d["sim_time"], tuple(agent_from_dict(a) for a in d["agents"]),
                 tuple(box_from_dict(o) for o in d["objects"]))


def sample_to_dict(sample: Sample, scene_id: str, range: float, visible) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene_id,
        "frame_index": sample.frame_index,
        "ego_id": sample.ego_id,
        "range": range,
        "annotations": [box_to_dict(b) for b in sample.annotations],
        "valid": list(sample.valid),
        "visible": sorted(visible),
    }


def sample_from_dict(d: Mapping) -> Sample:
    return Sample(d["frame_index"], d["ego_id"], tuple(box_from_dict(b) for b in d["annotations"]),
                  tuple(d["valid"]))


@dataclass
class ImportedScene:
    scene: Scene
    samples: dict[tuple[int, str], Sample] = field(default_factory=dict)
    visibility: dict[int, dict[str, frozenset]] = field(default_factory=dict)
    graphs: dict[int, CoopGraph] = field(default_factory=dict)


def _scene_entry(scene: Scene, model: VisibilityModel, n_samples: int, n_boxes: int) -> dict:
    return {
        "id": scene.id,
        "n_frames": len(scene.frames),
        "n_samples": n_samples,
        "n_boxes": n_boxes,
        "agents": [a.id for a in scene.frames[0].agents] if scene.frames else [],
        "config": scene.config.to_dict() if scene.config is not None else None,
        "visibility": {"range": model.range, "samples_per_box": model.samples_per_box,
                       "require_fraction": model.require_fraction},
    }


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptRecordError(f"manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"manifest schema_version {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return manifest


def init_dataset(root, seed: Optional[int] = None) -> dict:
    """Create (or reset) an empty dataset root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "generator": f"coopsim {__version__}",
                "seed": seed, "scenes": []}
    (root / MANIFEST).write_text(_dumps(manifest))
    return manifest


def export_scene(scene: Scene, model: VisibilityModel, root) -> dict:
    """Write one scene into ``root`` and register it in the manifest; returns its manifest entry."""
    root = Path(root)
    if not (root / MANIFEST).exists():
        init_dataset(root)
    tmp = Path(tempfile.mkdtemp(prefix=f".{scene.id}-", dir=root))
    try:
        for sub in ("frames", "samples", "graphs"):
            (tmp / sub).mkdir()
        n_samples = n_boxes = 0
        for fr in scene.frames:
            (tmp / "frames" / f"{fr.index:04d}.json").write_text(_dumps(frame_to_dict(fr, scene.id)))
            table = visibility_table(fr, model)
            for ego in fr.sensored_agents:
                sample = build_sample(fr, ego.id, model.range)
                rec = sample_to_dict(sample, scene.id, model.range, table[ego.id])
                (tmp / "samples" / f"{fr.index:04d}_{ego.id}.json").write_text(_dumps(rec))
                n_samples += 1
                n_boxes += len(sample.annotations)
            graph = {
                "schema_version": SCHEMA_VERSION,
                "frame_index": fr.index,
                "graph": coop_graph(fr).to_dict() if fr.agents else None,
                "visibility": {k: sorted(v) for k, v in table.items()},
            }
            (tmp / "graphs" / f"{fr.index:04d}.json").write_text(_dumps(graph))
        entry = _scene_entry(scene, model, n_samples, n_boxes)
        with FileLock(str(root / ".manifest.lock")):
            manifest = read_manifest(root)
            dest = root / scene.id
            if dest.exists():
                shutil.rmtree(dest)
            os.replace(tmp, dest)
            scenes = [s for s in manifest["scenes"] if s["id"] != scene.id] + [entry]
            manifest["scenes"] = sorted(scenes, key=lambda s: s["id"])
            (root / MANIFEST).write_text(_dumps(manifest))
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return entry


def _load(path: Path, what: str) -> dict:
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise CorruptRecordError(f"{what}: missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise CorruptRecordError(f"{what}: truncated or invalid JSON in {path} ({exc})") from exc
    if not isinstance(d, dict):
        raise CorruptRecordError(f"{what}: expected an object in {path}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{what}: schema_version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return d


def import_scene(root, scene_id: str) -> ImportedScene:
    root = Path(root)
    manifest = read_manifest(root)
    entry = next((s for s in manifest["scenes"] if s["id"] == scene_id), None)
    if entry is None:
        raise DatasetError(f"scene {scene_id!r} is not listed in the manifest")
    sdir = root / scene_id
    if not sdir.is_dir():
        raise DatasetError(f"scene {scene_id!r} is listed in the manifest but {sdir} is missing")
    config = ScenarioConfig.from_dict(entry["config"]) if entry.get("config") else None
    frames, samples, vis, graphs = [], {}, {}, {}
    for idx in range(entry["n_frames"]):
        what = f"frame record {idx} of scene {scene_id}"
        d = _load(sdir / "frames" / f"{idx:04d}.json", what)
        try:
            frame = frame_from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptRecordError(f"{what}: {exc!r}") from exc
        frames.append(frame)
        for ego in frame.sensored_agents:
            what = f"sample record for frame {idx}, ego {ego.id} of scene {scene_id}"
            d = _load(sdir / "samples" / f"{idx:04d}_{ego.id}.json", what)
            try:
                samples[(idx, ego.id)] = sample_from_dict(d)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptRecordError(f"{what}: {exc!r}") from exc
        what = f"graph record {idx} of scene {scene_id}"
        d = _load(sdir / "graphs" / f"{idx:04d}.json", what)
        try:
            vis[idx] = {k: frozenset(v) for k, v in d["visibility"].items()}
            if d["graph"] is not None:
                graphs[idx] = CoopGraph.from_dict(d["graph"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptRecordError(f"{what}: {exc!r}") from exc
    return ImportedScene(Scene(scene_id, config, tuple(frames)), samples, vis, graphs)


def list_scenes(root) -> list[str]:
    return [s["id"] for s in read_manifest(root)["scenes"]]
