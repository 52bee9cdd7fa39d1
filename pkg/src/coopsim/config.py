"""Experiment configuration: one JSON file, validated before anything runs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import jsonschema

from .engine import ScenarioConfig
from .metrics import NoiseModel
from .scheduling import SchedulingPolicy, make_policy
from .sensing import VisibilityModel
from .templates import SceneKind
from .world import AgentKind, Pose


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_COUNT = {"type": "integer", "minimum": 0}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["policies"],
    "properties": {
        "seed": {"type": "integer"},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "dataset": {"type": "string"},
        "message_log": {"type": "boolean"},
        "scenarios": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["scene_kind"],
                "properties": {
                    "scene_kind": {"enum": [k.value for k in SceneKind]},
                    "repeat": _COUNT,
                    "center": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 4},
                    "spawn_rect": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                   "minItems": 2, "maxItems": 2},
                    "agents": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {k.value: _COUNT for k in AgentKind},
                    },
                    "objects": _COUNT,
                    "duration": _NONNEG,
                },
            },
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "min_length": _COUNT,
                "min_counts": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k.value: _COUNT for k in AgentKind},
                },
                "min_reward": _NONNEG,
            },
        },
        "visibility": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples_per_box": {"type": "integer", "minimum": 4},
                "require_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma_xy": _NONNEG, "sigma_yaw": _NONNEG, "size_jitter": _NONNEG,
                "sigma_v": _NONNEG, "dropout": {"type": "number", "minimum": 0, "maximum": 1},
                "fp_rate": _NONNEG,
            },
        },
        "policies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {"name": {"type": "string"}},
            },
        },
        "ranges": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
    },
}


@dataclass
class ExperimentConfig:
    scenarios: list[ScenarioConfig] = field(default_factory=list)
    visibility: VisibilityModel = field(default_factory=VisibilityModel)
    noise: NoiseModel = field(default_factory=NoiseModel)
    policies: list[SchedulingPolicy] = field(default_factory=list)
    ranges: tuple[float, ...] = (50.0, 100.0)
    seeds: tuple[int, ...] = (0,)
    seed: int = 0
    workers: int = 1
    output_dir: str = "out"
    dataset: Optional[str] = None
    message_log: bool = False
    min_length: int = 0
    min_counts: dict[AgentKind, int] = field(default_factory=dict)
    min_reward: Optional[float] = None

    def model_for(self, rng: float) -> VisibilityModel:
        return VisibilityModel(rng, self.visibility.samples_per_box, self.visibility.require_fraction)


def _where(err: jsonschema.ValidationError) -> str:
    path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return "$" + path


def parse_config(raw: Mapping, *, seed: Optional[int] = None, workers: Optional[int] = None) -> ExperimentConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_where(e)}: {e.message}" for e in errors))
    base_seed = raw.get("seed", 0) if seed is None else seed
    scenarios = []
    for i, item in enumerate(raw.get("scenarios", [])):
        center = list(item.get("center", [0.0, 0.0])) + [0.0] * (4 - len(item.get("center", [0.0, 0.0])))
        for r in range(item.get("repeat", 1)):
            scene_seed = base_seed * 100_003 + i * 1_009 + r
            try:
                scenarios.append(ScenarioConfig(
                    scene_kind=item["scene_kind"],
                    center=Pose(*center[:4]),
                    spawn_rect=tuple(item.get("spawn_rect", (80.0, 80.0))),
                    counts=item.get("agents", {}),
                    n_objects=item.get("objects", 20),
                    duration=item.get("duration", 20.0),
                    seed=scene_seed,
                    name=f"s{i:02d}-{item['scene_kind']}-{r:03d}",
                ))
            except ValueError as exc:
                raise ConfigError(f"$.scenarios[{i}]: {exc}") from exc
    policies = []
    for i, p in enumerate(raw["policies"]):
        params = {k: v for k, v in p.items() if k != "name"}
        try:
            policies.append(make_policy(p["name"], **params))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"$.policies[{i}]: {exc}") from exc
    vis = raw.get("visibility", {})
    flt = raw.get("filter", {})
    return ExperimentConfig(
        scenarios=scenarios,
        visibility=VisibilityModel(samples_per_box=vis.get("samples_per_box", 8),
                                   require_fraction=vis.get("require_fraction", 1.0 / 8.0)),
        noise=NoiseModel(**raw.get("noise", {})),
        policies=policies,
        ranges=tuple(float(r) for r in raw.get("ranges", (50.0, 100.0))),
        seeds=tuple(raw.get("seeds", (0,))),
        seed=base_seed,
        workers=raw.get("workers", 1) if workers is None else workers,
        output_dir=raw.get("output_dir", "out"),
        dataset=raw.get("dataset"),
        message_log=raw.get("message_log", False),
        min_length=flt.get("min_length", 0),
        min_counts={AgentKind(k): v for k, v in flt.get("min_counts", {}).items()},
        min_reward=flt.get("min_reward"),
    )


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_config(raw, **overrides)
