"""tIoU, interpolated average precision, mAP tables and the multi-trial split protocol."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .datamodel import ActionInstance, SplitSpec
from .inference import Detection

log = logging.getLogger(__name__)

ANET_REPORT = (0.5, 0.75, 0.95)
ANET_AVG = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
THUMOS = (0.3, 0.4, 0.5, 0.6, 0.7)


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class EvalConfig:
    tiou_thresholds: tuple[float, ...] = ANET_REPORT
    avg_thresholds: tuple[float, ...] = ANET_AVG
    classes: tuple | None = None   # evaluated subset of class indices; None = all with ground truth
    mode: str = "open"             # "open" (unseen only) or "closed"

    def __post_init__(self):
        for grid in (self.tiou_thresholds, self.avg_thresholds):
            if not grid or any(not 0 < t <= 1 for t in grid):
                raise ValueError("tIoU thresholds must lie in (0, 1]")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("tIoU thresholds must be strictly increasing")

    @classmethod
    def activitynet(cls, **kw) -> "EvalConfig":
        return cls(tiou_thresholds=ANET_REPORT, avg_thresholds=ANET_AVG, **kw)

    @classmethod
    def thumos(cls, **kw) -> "EvalConfig":
        return cls(tiou_thresholds=THUMOS, avg_thresholds=THUMOS, **kw)


@dataclass
class EvalReport:
    mAP: dict[float, float]
    avg_mAP: float
    per_class_ap: dict = field(default_factory=dict)   # class -> {tiou: ap}
    mode: str = "open"
    std: dict[str, float] | None = None                # filled for aggregates
    trials: list["EvalReport"] | None = None
    failed_trials: list[int] = field(default_factory=list)

    def columns(self) -> dict[str, float]:
        cols = {f"{t:g}": v for t, v in self.mAP.items()}
        cols["Avg"] = self.avg_mAP
        return cols

    def to_json(self) -> dict:
        obj = {
            "mode": self.mode,
            "mAP": {f"{t:g}": v for t, v in self.mAP.items()},
            "avg_mAP": self.avg_mAP,
            "per_class_ap": {str(c): {f"{t:g}": v for t, v in aps.items()} for c, aps in self.per_class_ap.items()},
        }
        if self.std is not None:
            obj["std"] = self.std
        if self.trials is not None:
            obj["trials"] = [r.to_json() for r in self.trials]
            obj["failed_trials"] = list(self.failed_trials)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        trials = [cls.from_json(t) for t in obj["trials"]] if obj.get("trials") is not None else None
        return cls(mAP={float(t): v for t, v in obj["mAP"].items()}, avg_mAP=obj["avg_mAP"],
                   per_class_ap={c: {float(t): v for t, v in aps.items()} for c, aps in obj.get("per_class_ap", {}).items()},
                   mode=obj.get("mode", "open"), std=obj.get("std"), trials=trials,
                   failed_trials=obj.get("failed_trials", []))

    def save(self, json_path: str | Path, csv_path: str | Path | None = None, row: str | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        if csv_path is not None:
            write_table([(row or self.mode, self)], csv_path)


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    la, lb = a[1] - a[0], b[1] - b[0]
    if la <= 0 or lb <= 0:
        return 0.0
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / (la + lb - inter)


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolation: area under the monotone precision envelope."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(dets: Sequence[tuple[str, Detection]], gts: Sequence[tuple[str, ActionInstance]],
                      threshold: float) -> float:
    """AP of one class.  ``dets`` and ``gts`` are ``(video_id, item)`` pairs.

    Detections are matched greedily in score order.  Each one takes the unmatched
    ground truth of the same video with the best tIoU, earlier start winning ties.
    """
    if not gts:
        return float("nan")
    if not dets:
        return 0.0
    by_video: dict[str, list[int]] = {}
    for j, (vid, _) in enumerate(gts):
        by_video.setdefault(vid, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].score)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        vid, d = dets[i]
        best, best_j = -1.0, -1
        for j in by_video.get(vid, []):
            if used[j]:
                continue
            g = gts[j][1]
            ov = tiou((d.start, d.end), (g.start, g.end))
            if ov > best or (ov == best and g.start < gts[best_j][1].start):
                best, best_j = ov, j
        if best_j >= 0 and best >= threshold:
            used[best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(dets) + 1)
    recall = ctp / len(gts)
    return interpolated_ap(precision, recall)


def map_report(all_dets: Mapping[str, Sequence[Detection]], all_gts: Mapping[str, Sequence[ActionInstance]],
               cfg: EvalConfig, class_index: Callable[[Hashable], int] | None = None) -> EvalReport:
    """Per-threshold mAP and average mAP.

    Ground-truth labels map to detection labels through ``class_index`` (identity by default).
    Classes without ground truth are left out.
    """
    class_index = class_index or (lambda c: c)
    gts_by_class: dict[int, list] = {}
    for vid, insts in all_gts.items():
        for g in insts:
            gts_by_class.setdefault(class_index(g.label), []).append((vid, g))
    dets_by_class: dict[int, list] = {}
    for vid, items in all_dets.items():
        for d in items:
            dets_by_class.setdefault(d.label, []).append((vid, d))
    classes = cfg.classes if cfg.classes is not None else sorted(gts_by_class)
    classes = [c for c in classes if gts_by_class.get(c)]
    grid = sorted(set(cfg.tiou_thresholds) | set(cfg.avg_thresholds))
    per_class = {c: {t: average_precision(dets_by_class.get(c, []), gts_by_class[c], t) for t in grid}
                 for c in classes}

    def mean_ap(t):
        return float(np.mean([per_class[c][t] for c in classes])) if classes else 0.0

    return EvalReport(mAP={t: mean_ap(t) for t in cfg.tiou_thresholds},
                      avg_mAP=float(np.mean([mean_ap(t) for t in cfg.avg_thresholds])),
                      per_class_ap=per_class, mode=cfg.mode)


def aggregate(reports: Sequence[EvalReport], failed: Sequence[int] = ()) -> EvalReport:
    """Trial mean with population standard deviation for every column."""
    if not reports:
        raise ValueError("no successful trials to aggregate")
    thresholds = list(reports[0].mAP)
    mean = {t: float(np.mean([r.mAP[t] for r in reports])) for t in thresholds}
    std = {f"{t:g}": float(np.std([r.mAP[t] for r in reports])) for t in thresholds}
    std["Avg"] = float(np.std([r.avg_mAP for r in reports]))
    return EvalReport(mAP=mean, avg_mAP=float(np.mean([r.avg_mAP for r in reports])), mode=reports[0].mode,
                      std=std, trials=list(reports), failed_trials=list(failed))


def run_protocol(corpus, splits: Sequence[SplitSpec], train_fn: Callable, cfg: EvalConfig,
                 out_dir: str | Path | None = None) -> EvalReport:
    """Run ``train_fn(corpus, split, cfg) -> EvalReport`` per split and aggregate.

    Trials raising :class:`NumericalFailure` are excluded and listed in ``failed_trials``.
    """
    if not splits:
        raise ValueError("need at least one split")
    reports, failed = [], []
    for split in splits:
        try:
            report = train_fn(corpus, split, cfg)
        except NumericalFailure as exc:
            log.warning("trial %d failed: %s", split.trial, exc)
            failed.append(split.trial)
            continue
        reports.append(report)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            report.save(Path(out_dir) / f"trial_{split.trial:02d}.json")
    agg = aggregate(reports, failed)
    if out_dir is not None:
        agg.save(Path(out_dir) / "aggregate.json")
    return agg


def write_table(rows: Sequence[tuple[str, EvalReport]], path: str | Path) -> None:
    """One row per split setting: tIoU columns plus Avg, with ``_std`` columns for aggregates."""
    header = ["setting"] + list(rows[0][1].columns())
    with_std = any(r.std is not None for _, r in rows)
    if with_std:
        header += [f"{c}_std" for c in rows[0][1].columns()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for name, rep in rows:
            cols = rep.columns()
            line = [name] + [f"{v:.4f}" for v in cols.values()]
            if with_std:
                line += [f"{(rep.std or {}).get(c, 0.0):.4f}" for c in cols]
            w.writerow(line)
