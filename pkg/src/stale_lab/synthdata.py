"""Synthetic corpus whose video features and class-name tokens share a latent code.

Class ``k`` draws a latent ``z_k``; snippets inside its instances emit ``A @ z_k``
plus noise, and its name token is ``B @ z_k``.  A linear alignment fitted on some
classes therefore carries over (partially) to the rest, which is what makes
zero-shot transfer measurable without pretrained encoders.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .datamodel import (ActionInstance, AnnotatedVideo, DataError, dump_annotations, load_annotations,
                        load_features, save_features)


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 20
    latent_dim: int = 32
    feature_dim: int = 64
    token_dim: int = 64
    videos_per_class: int = 10
    T_raw: int = 100
    instances_per_video: tuple[int, int] = (1, 2)
    instance_length: tuple[float, float] = (0.1, 0.35)
    feature_noise_sigma: float = 0.5
    background_drift_sigma: float = 0.3
    ramp: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "latent_dim", "feature_dim", "token_dim", "videos_per_class", "T_raw"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        lo, hi = self.instance_length
        if not (0 < lo <= hi <= 1):
            raise DataError("instance_length bounds must satisfy 0 < lo <= hi <= 1")
        n_lo, n_hi = self.instances_per_video
        if not (1 <= n_lo <= n_hi):
            raise DataError("instances_per_video must satisfy 1 <= lo <= hi")
        if self.feature_noise_sigma < 0 or self.background_drift_sigma < 0:
            raise DataError("noise sigmas must be >= 0")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown SynthConfig fields: {sorted(unknown)}")
        obj = dict(obj)
        for key in ("instances_per_video", "instance_length"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SynthCorpus:
    videos: list[AnnotatedVideo]
    class_names: list
    class_token_embeddings: np.ndarray  # (K, C')
    generator_latents: np.ndarray       # (K, latent_dim), diagnostics only
    config: SynthConfig | None = None

    def video_class(self, video: AnnotatedVideo) -> Hashable:
        labels = video.labels
        if len(labels) != 1:
            raise DataError(f"{video.id}: expected a single-class video")
        return next(iter(labels))

    def videos_of(self, classes: Sequence[Hashable]) -> list[AnnotatedVideo]:
        wanted = set(classes)
        return [v for v in self.videos if v.labels and v.labels <= wanted]


def _place_instances(rng: np.random.Generator, n: int, cfg: SynthConfig, max_tries: int = 200) -> list[tuple[int, int]]:
    """Non-overlapping snippet runs ``[a, b)`` separated by at least one background snippet."""
    T = cfg.T_raw
    lo = max(1, int(round(cfg.instance_length[0] * T)))
    hi = max(lo, int(round(cfg.instance_length[1] * T)))
    for _ in range(max_tries):
        runs = []
        for _ in range(n):
            length = int(rng.integers(lo, hi + 1))
            if length > T:
                break
            a = int(rng.integers(0, T - length + 1))
            runs.append((a, a + length))
        if len(runs) < n:
            continue
        runs.sort()
        if all(runs[i][1] < runs[i + 1][0] for i in range(n - 1)):
            return runs
    raise DataError(f"could not place {n} instances in T_raw={T} after {max_tries} tries")


def gen_corpus(cfg: SynthConfig) -> SynthCorpus:
    K = cfg.n_classes
    rng = np.random.default_rng([cfg.seed, 0])
    Z = rng.standard_normal((K, cfg.latent_dim))
    A = rng.standard_normal((cfg.feature_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    B = rng.standard_normal((cfg.token_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    background = rng.standard_normal(cfg.feature_dim)
    protos = Z @ A.T
    tokens = Z @ B.T
    names = [f"class_{k:02d}" for k in range(K)]
    half = cfg.feature_dim // 2
    streams = {"rgb": (0, half), "flow": (half, cfg.feature_dim)} if half else None

    videos = []
    for k in range(K):
        for j in range(cfg.videos_per_class):
            index = k * cfg.videos_per_class + j
            vrng = np.random.default_rng([cfg.seed, 1, index])
            n = int(vrng.integers(cfg.instances_per_video[0], cfg.instances_per_video[1] + 1))
            runs = _place_instances(vrng, n, cfg)
            bg = background + cfg.background_drift_sigma * vrng.standard_normal(cfg.feature_dim)
            X = np.repeat(bg[:, None], cfg.T_raw, axis=1)
            for a, b in runs:
                if cfg.ramp:
                    w = np.linspace(0.5, 1.0, b - a)
                    X[:, a:b] = protos[k][:, None] * w + bg[:, None] * (1 - w)
                else:
                    X[:, a:b] = protos[k][:, None]
            # each stream gets its own independent noise draw
            if cfg.feature_noise_sigma > 0:
                noise = np.empty_like(X)
                for lo_row, hi_row in (streams or {"all": (0, cfg.feature_dim)}).values():
                    noise[lo_row:hi_row] = vrng.standard_normal((hi_row - lo_row, cfg.T_raw))
                X = X + cfg.feature_noise_sigma * noise
            insts = [ActionInstance(a / cfg.T_raw, b / cfg.T_raw, names[k]) for a, b in runs]
            videos.append(AnnotatedVideo(id=f"v{index:05d}", features=X, instances=insts, streams=streams))
    return SynthCorpus(videos=videos, class_names=names, class_token_embeddings=tokens,
                       generator_latents=Z, config=cfg)


def class_embedding_table(corpus: SynthCorpus, subset: Sequence[Hashable]) -> np.ndarray:
    rows = []
    for c in subset:
        try:
            rows.append(corpus.class_names.index(c))
        except ValueError:
            raise DataError(f"unknown class {c!r}") from None
    return corpus.class_token_embeddings[rows].reshape(len(rows), corpus.class_token_embeddings.shape[1])


# ---------------------------------------------------------------- persistence

def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> Path:
    """Write feature blobs, annotation JSON, class tokens and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in corpus.videos:
        rel = f"features/{v.id}.bin"
        save_features(v.features, out / rel, v.streams)
        entries.append({"id": v.id, "features": rel, "labels": sorted(v.labels)})
    dump_annotations(corpus.videos, out / "annotations.json")
    save_features(corpus.class_token_embeddings, out / "class_tokens.bin")
    manifest = {
        "classes": list(corpus.class_names),
        "videos": entries,
        "annotations": "annotations.json",
        "class_tokens": "class_tokens.bin",
        "config": corpus.config.to_json() if corpus.config else None,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_corpus(manifest_path: str | Path) -> SynthCorpus:
    """Load a corpus from a manifest; works for any features stored in the blob format."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    anns = load_annotations(root / manifest["annotations"])
    tokens, _ = load_features(root / manifest["class_tokens"])
    videos = []
    for entry in manifest["videos"]:
        feats, streams = load_features(root / entry["features"])
        videos.append(AnnotatedVideo(id=entry["id"], features=feats, instances=anns.get(entry["id"], []),
                                     streams=streams or None))
    cfg = SynthConfig.from_json(manifest["config"]) if manifest.get("config") else None
    return SynthCorpus(videos=videos, class_names=list(manifest["classes"]), class_token_embeddings=tokens,
                       generator_latents=np.zeros((len(manifest["classes"]), 0)), config=cfg)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
