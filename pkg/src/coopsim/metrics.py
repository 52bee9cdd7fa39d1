"""Detection scoring in the nuScenes style, plus a noise model that fakes detector output.

Matching is greedy by descending score on planar centre distance, per class and per
distance threshold. AP is the mean of the precision curve sampled at 101 recall
points, keeping recall above 0.1 and precision above 0.1, renormalised to [0, 1].
True-positive errors are averaged over matches at the 2 m threshold and capped at 1
inside NDS. There are no attributes, so mAAE is fixed at 1 and its NDS term is 0.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ._validation import check_fraction, check_positive
from .world import DEFAULT_VALID_RANGE, Frame, ObjectBox, ObjectClass, Pose, Sample, build_sample

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
RECALL_POINTS = 101
PRESET_AAE = 1.0
TP_METRICS = ("ate", "ase", "aoe", "ave")
CLASSES = tuple(ObjectClass)


@dataclass(frozen=True)
class NoiseModel:
    sigma_xy: float = 0.0
    sigma_yaw: float = 0.0
    size_jitter: float = 0.0
    sigma_v: float = 0.0
    dropout: float = 0.0
    fp_rate: float = 0.0

    def __post_init__(self):
        for name in ("sigma_xy", "sigma_yaw", "size_jitter", "sigma_v", "fp_rate"):
            check_positive(name, getattr(self, name), strict=False)
        check_fraction("dropout", self.dropout)

    @property
    def is_zero(self) -> bool:
        return not any((self.sigma_xy, self.sigma_yaw, self.size_jitter, self.sigma_v,
                        self.dropout, self.fp_rate))


@dataclass(frozen=True)
class Detection:
    box: ObjectBox
    score: float


@dataclass(frozen=True)
class DetectionResult:
    frame_index: int
    ego_id: str
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        for d in self.detections:
            if not (math.isfinite(d.score) and 0.0 <= d.score <= 1.0):
                raise ValueError(f"detection score {d.score!r} outside [0, 1]")


_FP_SIZES = {
    ObjectClass.VEHICLE: (4.6, 2.0, 1.6),
    ObjectClass.PEDESTRIAN: (0.6, 0.6, 1.8),
    ObjectClass.CYCLIST: (1.8, 0.7, 1.7),
}


def simulate_detections(
    visible: Iterable[str],
    frame: Frame,
    ego_id: str,
    noise: NoiseModel,
    seed=None,
    max_range: float = DEFAULT_VALID_RANGE,
    sample: Optional[Sample] = None,
) -> DetectionResult:
    """Turn the set of objects the ego can see into noisy scored detections in its frame.

    ``sample`` may carry a precomputed ``build_sample(frame, ego_id, max_range)``.
    """
    rng = np.random.default_rng(seed)
    seen = set(visible)
    if sample is None:
        sample = build_sample(frame, ego_id, max_range)
    truth = [b for b in sample.annotations if b.id in seen]
    truth.sort(key=lambda b: b.id)
    n = len(truth)
    keep = rng.random(n) >= noise.dropout
    dxy = rng.normal(0.0, noise.sigma_xy, (n, 2))
    dyaw = rng.normal(0.0, noise.sigma_yaw, n)
    scale = np.clip(1.0 + rng.normal(0.0, noise.size_jitter, (n, 3)), 0.05, None)
    dv = rng.normal(0.0, noise.sigma_v, (n, 2))
    conf = np.exp(-np.hypot(dxy[:, 0], dxy[:, 1]))
    dets = []
    for i in np.flatnonzero(keep).tolist():
        b, c = truth[i], truth[i].center
        (dx, dy), (vx, vy), k = dxy[i].tolist(), dv[i].tolist(), scale[i].tolist()
        size = (b.size[0] * k[0], b.size[1] * k[1], b.size[2] * k[2])
        box = ObjectBox(b.id, b.cls, Pose(c.x + dx, c.y + dy, c.z, c.yaw + float(dyaw[i])),
                        size, (b.velocity[0] + vx, b.velocity[1] + vy))
        dets.append(Detection(box, float(conf[i])))
    n_fp = int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0
    for k in range(n_fp):
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        r = max_range * math.sqrt(rng.random())
        th = rng.uniform(-math.pi, math.pi)
        box = ObjectBox(f"fp_{k:03d}", cls, Pose(r * math.cos(th), r * math.sin(th), 0.0,
                                                 rng.uniform(-math.pi, math.pi)), _FP_SIZES[cls])
        dets.append(Detection(box, float(rng.uniform(0.0, 0.5))))
    return DetectionResult(frame.index, ego_id, tuple(dets))


# ------------------------------------------------------------------ scoring


def center_distance(a: ObjectBox, b: ObjectBox) -> float:
    return math.hypot(a.center.x - b.center.x, a.center.y - b.center.y)


def yaw_error(a: ObjectBox, b: ObjectBox) -> float:
    d = abs(a.center.yaw - b.center.yaw) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def scale_error(a: ObjectBox, b: ObjectBox) -> float:
    """1 - IoU of the two boxes after aligning centres and orientation."""
    inter = math.prod(min(p, q) for p, q in zip(a.size, b.size))
    union = math.prod(a.size) + math.prod(b.size) - inter
    return float(1.0 - inter / union)


def velocity_error(a: ObjectBox, b: ObjectBox) -> float:
    return math.hypot(a.velocity[0] - b.velocity[0], a.velocity[1] - b.velocity[1])


def _det_key(item):
    key, det = item
    c = det.box.center
    return (-det.score, key, c.x, c.y, c.yaw, det.box.size, det.box.velocity, det.box.id)


def _prepare(dets, truth, cls: ObjectClass, gate: float):
    """Per-class ground truth (id order) and score-ordered candidates.

    Each candidate carries the (distance, gt index) pairs closer than ``gate``,
    nearest first with ties in gt order.
    """
    gts = {}
    for key, boxes in truth.items():
        gts[key] = sorted((b for b in boxes if b.cls is cls), key=lambda b: b.id)
    cand = sorted(((k, d) for k, ds in dets.items() for d in ds if d.box.cls is cls), key=_det_key)
    by_key: dict = {}
    for i, (key, _) in enumerate(cand):
        by_key.setdefault(key, []).append(i)
    rows: list = [()] * len(cand)
    for key, idx in by_key.items():
        g = gts.get(key)
        if not g:
            continue
        gxy = np.array([(b.center.x, b.center.y) for b in g], dtype=float)
        dxy = np.array([(cand[i][1].box.center.x, cand[i][1].box.center.y) for i in idx], dtype=float)
        dist = np.hypot(dxy[:, None, 0] - gxy[None, :, 0], dxy[:, None, 1] - gxy[None, :, 1])
        order = np.argsort(dist, axis=1, kind="stable")
        near = np.take_along_axis(dist, order, axis=1)
        for i, d_row, j_row in zip(idx, near.tolist(), order.tolist()):
            rows[i] = [(d, j) for d, j in zip(d_row, j_row) if d < gate]
    return gts, cand, rows


def _greedy(prepared, threshold: float):
    gts, cand, rows = prepared
    taken = {k: [False] * len(v) for k, v in gts.items()}
    flags, pairs = [], []
    for (key, det), row in zip(cand, rows):
        best, best_d = -1, math.inf
        used = taken.get(key)
        for d, j in row:
            if not used[j]:
                best, best_d = j, d
                break
        if best >= 0 and best_d < threshold:
            used[best] = True
            flags.append(True)
            pairs.append((det.box, gts[key][best]))
        else:
            flags.append(False)
    return flags, pairs, sum(len(v) for v in gts.values())


def _match(dets, truth, cls: ObjectClass, threshold: float):
    """Greedy matching; returns (tp flags in score order, matched pairs, n_gt)."""
    return _greedy(_prepare(dets, truth, cls, threshold), threshold)


def average_precision(flags: Sequence[bool], npos: int) -> float:
    if npos == 0 or not flags:
        return 0.0
    tp = np.cumsum(flags).astype(float)
    fp = np.cumsum(np.logical_not(flags)).astype(float)
    prec = tp / (tp + fp)
    rec = tp / npos
    rec_interp = np.linspace(0.0, 1.0, RECALL_POINTS)
    prec = np.interp(rec_interp, rec, prec, right=0.0)
    prec = prec[int(round(100 * MIN_RECALL)) + 1:]
    prec = prec - MIN_PRECISION
    prec[prec < 0] = 0.0
    return min(1.0, float(np.mean(prec)) / (1.0 - MIN_PRECISION))


@dataclass
class MetricsReport:
    ap: dict[str, dict[float, float]] = field(default_factory=dict)
    tp_errors: dict[str, dict[str, float]] = field(default_factory=dict)
    mAP: Optional[float] = None
    mATE: Optional[float] = None
    mASE: Optional[float] = None
    mAOE: Optional[float] = None
    mAVE: Optional[float] = None
    mAAE: float = PRESET_AAE
    NDS: Optional[float] = None
    empty: bool = False

    CSV_COLUMNS = ("AP_vehicle", "AP_pedestrian", "AP_cyclist", "mAP", "mATE", "mASE",
                   "mAOE", "mAVE", "mAAE", "NDS")

    @classmethod
    def empty_report(cls) -> "MetricsReport":
        return cls(empty=True)

    def class_ap(self, cls: str) -> Optional[float]:
        per = self.ap.get(cls)
        return float(np.mean(list(per.values()))) if per else None

    def to_dict(self) -> dict:
        return {
            "empty": self.empty,
            "ap": {c: {str(t): v for t, v in per.items()} for c, per in self.ap.items()},
            "tp_errors": self.tp_errors,
            "mAP": self.mAP, "mATE": self.mATE, "mASE": self.mASE, "mAOE": self.mAOE,
            "mAVE": self.mAVE, "mAAE": self.mAAE, "NDS": self.NDS,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def csv_row(self) -> list[str]:
        vals = [self.class_ap(c.value) for c in CLASSES] + [
            self.mAP, self.mATE, self.mASE, self.mAOE, self.mAVE, self.mAAE, self.NDS]
        return ["" if v is None else f"{v:.4f}" for v in vals]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _as_boxes(truth) -> dict[tuple[int, str], list[ObjectBox]]:
    if isinstance(truth, Mapping):
        items = truth.values()
    else:
        items = truth
    out = {}
    for s in items:
        out[(s.frame_index, s.ego_id)] = [b for b, ok in zip(s.annotations, s.valid) if ok]
    return out


def score(
    detections: Iterable[DetectionResult],
    ground_truth: Iterable[Sample],
    thresholds: Sequence[float] = DIST_THRESHOLDS,
) -> MetricsReport:
    truth = _as_boxes(ground_truth)
    dets: dict[tuple[int, str], list[Detection]] = {}
    for r in detections:
        key = (r.frame_index, r.ego_id)
        if key not in truth:
            raise ValueError(f"detections for frame {key[0]}, ego {key[1]!r} have no ground truth")
        dets.setdefault(key, []).extend(r.detections)
    n_gt = sum(len(v) for v in truth.values())
    n_det = sum(len(v) for v in dets.values())
    if n_gt == 0 and n_det == 0:
        return MetricsReport.empty_report()
    thresholds = tuple(sorted(float(t) for t in thresholds))
    report = MetricsReport()
    aps, errs = [], {m: [] for m in TP_METRICS}
    for cls in CLASSES:
        has_gt = any(b.cls is cls for v in truth.values() for b in v)
        has_det = any(d.box.cls is cls for v in dets.values() for d in v)
        if not (has_gt or has_det):
            continue
        prepared = _prepare(dets, truth, cls, max(thresholds[-1], TP_THRESHOLD))
        per = {}
        for t in thresholds:
            flags, _, npos = _greedy(prepared, t)
            per[t] = average_precision(flags, npos)
        report.ap[cls.value] = per
        aps.append(float(np.mean(list(per.values()))))
        _, pairs, _ = _greedy(prepared, TP_THRESHOLD)
        if pairs:
            e = {
                "ate": float(np.mean([center_distance(d, g) for d, g in pairs])),
                "ase": float(np.mean([scale_error(d, g) for d, g in pairs])),
                "aoe": float(np.mean([yaw_error(d, g) for d, g in pairs])),
                "ave": float(np.mean([velocity_error(d, g) for d, g in pairs])),
            }
        else:
            e = {m: 1.0 for m in TP_METRICS}
        report.tp_errors[cls.value] = e
        for m in TP_METRICS:
            errs[m].append(e[m])
    report.mAP = float(np.mean(aps))
    report.mATE, report.mASE, report.mAOE, report.mAVE = (float(np.mean(errs[m])) for m in TP_METRICS)
    report.NDS = nds(report.mAP, [report.mATE, report.mASE, report.mAOE, report.mAVE, report.mAAE])
    return report


def nds(mAP: float, tp_errors: Sequence[float]) -> float:
    return (5.0 * mAP + sum(1.0 - min(1.0, e) for e in tp_errors)) / 10.0
