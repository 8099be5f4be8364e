"""Domain types, annotation/feature ingestion, class splits and dense label assignment."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class ActionInstance:
    start: float
    end: float
    label: Hashable

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0):
            raise DataError(f"invalid instance interval [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class AnnotatedVideo:
    id: str
    features: np.ndarray  # (C_in, T_raw)
    instances: list[ActionInstance] = field(default_factory=list)
    streams: dict[str, tuple[int, int]] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise DataError(f"{self.id}: features must be (C_in, T_raw) with T_raw >= 1")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.id}: non-finite features")

    @property
    def labels(self) -> set:
        return {inst.label for inst in self.instances}


@dataclass(frozen=True)
class LabelSpace:
    classes: tuple

    def __init__(self, classes: Sequence[Hashable]):
        classes = tuple(classes)
        if len(classes) < 1:
            raise DataError("label space needs at least one class")
        if len(set(classes)) != len(classes):
            raise DataError("label space classes must be unique")
        object.__setattr__(self, "classes", classes)

    @property
    def K(self) -> int:
        return len(self.classes)

    @property
    def background_index(self) -> int:
        return len(self.classes)

    def index(self, label: Hashable) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise DataError(f"label {label!r} not in label space") from None


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple
    unseen: tuple
    trial_seed: int
    trial: int = 0
    closed: bool = False

    def __post_init__(self):
        if self.closed:
            if set(self.seen) != set(self.unseen):
                raise DataError("closed-set split must use the same classes on both sides")
        elif set(self.seen) & set(self.unseen):
            raise DataError("seen and unseen classes overlap")

    @classmethod
    def closed_set(cls, classes: Sequence[Hashable], trial_seed: int = 0) -> "SplitSpec":
        return cls(seen=tuple(classes), unseen=tuple(classes), trial_seed=trial_seed, closed=True)

    def to_json(self) -> dict:
        obj = {"trial": self.trial, "seed": int(self.trial_seed),
               "seen": list(self.seen), "unseen": list(self.unseen)}
        if self.closed:
            obj["closed"] = True
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        return cls(seen=tuple(obj["seen"]), unseen=tuple(obj["unseen"]), trial_seed=int(obj["seed"]),
                   trial=int(obj.get("trial", 0)), closed=bool(obj.get("closed", False)))


@dataclass
class DenseLabels:
    y: np.ndarray   # (K+1, T) one-hot
    G: np.ndarray   # (T, T) column t = instance mask of the snippet's instance
    fg: np.ndarray  # (T,)


def snippet_centers(T: int) -> np.ndarray:
    return (np.arange(T) + 0.5) / T


def assign_labels(video: AnnotatedVideo, T: int, space: LabelSpace) -> DenseLabels:
    """Dense per-snippet targets by center-point containment.

    Where instances overlap, a snippet goes to the shorter instance (earlier start
    breaks ties).
    """
    if T < 1:
        raise DataError("T must be >= 1")
    K = space.K
    centers = snippet_centers(T)
    supports = []
    for inst in video.instances:
        k = space.index(inst.label)
        supports.append((inst, k, (centers >= inst.start) & (centers < inst.end)))

    y = np.zeros((K + 1, T))
    y[K] = 1.0
    G = np.zeros((T, T))
    fg = np.zeros(T)
    owner = [None] * T
    for inst, k, sup in supports:
        fg[sup] = 1.0
        for t in np.flatnonzero(sup):
            cur = owner[t]
            if cur is None or (inst.length, inst.start) < (cur[0].length, cur[0].start):
                owner[t] = (inst, k, sup)
    for t, own in enumerate(owner):
        if own is None:
            continue
        _, k, sup = own
        y[K, t] = 0.0
        y[k, t] = 1.0
        G[:, t] = sup
    return DenseLabels(y=y, G=G, fg=fg)


def make_splits(space: LabelSpace, seen_fraction: float, n_trials: int, seed: int) -> list[SplitSpec]:
    """Seeded uniform seen/unseen partitions, one per trial.

    Each trial's partition depends only on its recorded ``trial_seed``, so a split
    can be regenerated from the JSON alone via :func:`split_from_seed`.
    """
    if not 0.0 < seen_fraction < 1.0:
        raise DataError("seen_fraction must lie in (0, 1)")
    if n_trials < 1:
        raise DataError("n_trials must be >= 1")
    n_seen = int(round(seen_fraction * space.K))
    if n_seen in (0, space.K):
        raise DataError(f"degenerate split: {n_seen} seen of {space.K} classes")
    splits = []
    for trial in range(n_trials):
        trial_seed = int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])
        splits.append(split_from_seed(space, n_seen, trial_seed, trial))
    return splits


def split_from_seed(space: LabelSpace, n_seen: int, trial_seed: int, trial: int = 0) -> SplitSpec:
    perm = np.random.default_rng(trial_seed).permutation(space.K)
    seen_idx = set(perm[:n_seen].tolist())
    seen = tuple(c for i, c in enumerate(space.classes) if i in seen_idx)
    unseen = tuple(c for i, c in enumerate(space.classes) if i not in seen_idx)
    return SplitSpec(seen=seen, unseen=unseen, trial_seed=trial_seed, trial=trial)


def rescale_features(features: np.ndarray, T: int) -> np.ndarray:
    """Channelwise linear interpolation onto ``T`` endpoint-aligned grid points."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] < 1 or T < 1:
        raise DataError("features must be (C_in, T_raw) with T_raw >= 1 and T >= 1")
    if not np.all(np.isfinite(features)):
        raise DataError("non-finite features")
    T_raw = features.shape[1]
    if T_raw == T:
        return features.copy()
    if T_raw == 1:
        return np.repeat(features, T, axis=1)
    src = np.linspace(0.0, 1.0, T_raw)
    dst = np.linspace(0.0, 1.0, T)
    return np.stack([np.interp(dst, src, row) for row in features])


# ---------------------------------------------------------------- file formats

def load_annotations(path: str | Path) -> dict[str, list[ActionInstance]]:
    """Read ActivityNet-style JSON; segment times in seconds are normalized by ``duration``."""
    with open(path) as fh:
        obj = json.load(fh)
    db = obj.get("database", obj)
    out = {}
    for vid, entry in db.items():
        duration = float(entry["duration"])
        if not duration > 0:
            raise DataError(f"{vid}: non-positive duration")
        insts = []
        for ann in entry.get("annotations", []):
            s, e = ann["segment"]
            insts.append(ActionInstance(max(0.0, s / duration), min(1.0, e / duration), ann["label"]))
        out[vid] = insts
    return out


def dump_annotations(videos: Sequence[AnnotatedVideo], path: str | Path, duration: float = 100.0) -> None:
    db = {}
    for v in videos:
        db[v.id] = {
            "duration": duration,
            "annotations": [{"segment": [inst.start * duration, inst.end * duration], "label": inst.label}
                            for inst in v.instances],
        }
    with open(path, "w") as fh:
        json.dump({"database": db}, fh, indent=1, sort_keys=True)


def save_features(features: np.ndarray, path: str | Path, streams: dict[str, tuple[int, int]] | None = None) -> None:
    """Write a little-endian float32 blob at ``path`` plus a ``.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(features, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32", "byteorder": "little",
               "streams": {k: list(v) for k, v in (streams or {}).items()}}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_features(path: str | Path) -> tuple[np.ndarray, dict[str, tuple[int, int]]]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    shape = tuple(meta["shape"])
    if meta.get("dtype", "float32") != "float32" or meta.get("byteorder", "little") != "little":
        raise DataError(f"{path}: unsupported feature encoding")
    raw = path.read_bytes()
    if len(raw) != 4 * math.prod(shape):
        raise DataError(f"{path}: blob size does not match shape {shape}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite features")
    return arr, {k: tuple(v) for k, v in meta.get("streams", {}).items()}


def save_splits(splits: Sequence[SplitSpec], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_json() for s in splits], fh, indent=1)


def load_splits(path: str | Path) -> list[SplitSpec]:
    with open(path) as fh:
        obj = json.load(fh)
    if isinstance(obj, dict):
        obj = [obj]
    return [SplitSpec.from_json(o) for o in obj]
