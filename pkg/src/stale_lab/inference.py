"""Turn classification/mask outputs into scored segments, then Soft-NMS them."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Detection:
    start: float
    end: float
    label: int
    score: float
    snippet: int = -1

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0):
            raise ValueError(f"invalid segment [{self.start}, {self.end}]")


@dataclass(frozen=True)
class InferenceConfig:
    theta_c: float = 0.5
    thresholds: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 10))
    top_n_snippets: int = 100
    nms_mode: str = "gaussian"
    sigma: float = 0.5
    linear_iou: float = 0.3
    score_floor: float = 1e-4
    max_detections: int = 100

    def __post_init__(self):
        if not self.thresholds or not all(0 < th < 1 for th in self.thresholds):
            raise ValueError("mask thresholds must be a nonempty subset of (0, 1)")
        if not 0 < self.theta_c < 1:
            raise ValueError("theta_c must lie in (0, 1)")
        if self.nms_mode not in ("gaussian", "linear"):
            raise ValueError(f"unknown nms mode {self.nms_mode!r}")


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive index pairs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def _anchor_run(runs: list[tuple[int, int]], t: int) -> tuple[int, int]:
    for a, b in runs:
        if a <= t <= b:
            return a, b
    return min(runs, key=lambda r: (min(abs(r[0] - t), abs(r[1] - t)), r[0]))


def generate_candidates(P: np.ndarray, M: np.ndarray, cfg: InferenceConfig) -> list[Detection]:
    """Candidates from confident snippets; one per (snippet, mask threshold) with a nonempty run.

    ``P`` is (K+1, T) with background last, ``M`` is (T, T).
    """
    P = np.asarray(P, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    T = P.shape[1]
    fg = P[:-1]
    cls = fg.argmax(axis=0)
    conf = fg.max(axis=0)
    picked = np.flatnonzero(conf > cfg.theta_c)
    picked = picked[np.argsort(-conf[picked], kind="stable")][: cfg.top_n_snippets]
    dets = []
    for t in picked:
        col = M[:, t]
        for th in cfg.thresholds:
            runs = _runs(col >= th)
            if not runs:
                continue
            a, b = _anchor_run(runs, int(t))
            score = conf[t] * col[a:b + 1].max()
            dets.append(Detection(a / T, (b + 1) / T, int(cls[t]), float(score), int(t)))
    return dets


def tiou_many(seg: tuple[float, float], starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(seg[1], ends) - np.maximum(seg[0], starts), 0.0, None)
    union = (seg[1] - seg[0]) + (ends - starts) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def soft_nms(dets: Sequence[Detection], cfg: InferenceConfig) -> list[Detection]:
    """Classwise Soft-NMS: decay, never delete, overlapping same-class scores."""
    kept = []
    for label in sorted({d.label for d in dets}):
        group = [d for d in dets if d.label == label]
        starts = np.array([d.start for d in group])
        ends = np.array([d.end for d in group])
        scores = np.array([d.score for d in group])
        alive = np.ones(len(group), dtype=bool)
        while alive.any():
            idx = np.flatnonzero(alive)
            i = idx[np.argmax(scores[idx])]
            alive[i] = False
            if scores[i] < cfg.score_floor:
                break
            kept.append(replace(group[i], score=float(scores[i])))
            rest = np.flatnonzero(alive)
            if rest.size == 0:
                break
            ov = tiou_many((group[i].start, group[i].end), starts[rest], ends[rest])
            if cfg.nms_mode == "gaussian":
                scores[rest] = scores[rest] * np.exp(-(ov * ov) / cfg.sigma)
            else:
                scores[rest] = np.where(ov > cfg.linear_iou, scores[rest] * (1 - ov), scores[rest])
    kept.sort(key=lambda d: -d.score)
    return kept[: cfg.max_detections]


def detect(P: np.ndarray, M: np.ndarray, cfg: InferenceConfig) -> list[Detection]:
    return soft_nms(generate_candidates(P, M, cfg), cfg)


def dump_detections(dets: dict[str, list[Detection]], path: str | Path, class_names: Sequence | None = None) -> None:
    results = {}
    for vid, items in dets.items():
        results[vid] = [{"segment": [d.start, d.end],
                         "label": class_names[d.label] if class_names is not None else d.label,
                         "score": d.score} for d in items]
    with open(path, "w") as fh:
        json.dump({"results": results}, fh, indent=1, sort_keys=True)


def load_detections(path: str | Path, class_names: Sequence | None = None) -> dict[str, list[Detection]]:
    with open(path) as fh:
        obj = json.load(fh)
    results = obj.get("results", obj)
    out = {}
    for vid, items in results.items():
        out[vid] = [Detection(it["segment"][0], it["segment"][1],
                              class_names.index(it["label"]) if class_names is not None else int(it["label"]),
                              float(it["score"])) for it in items]
    return out
