"""Optimization loop, checkpoints and split-level evaluation."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import default_dtype, dtype_scope
from .checkpoint import load_tensors, save_tensors
from .config import TrainConfig
from .datamodel import AnnotatedVideo, DataError, LabelSpace, SplitSpec, assign_labels, rescale_features
from .evaluation import EvalConfig, EvalReport, NumericalFailure, map_report
from .inference import Detection, InferenceConfig, detect
from .losses import ConsistencyHead, total_loss
from .model import STALE
from .synthdata import SynthCorpus, class_embedding_table

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L_c", "L_m", "L_comp", "L_const", "total")


@dataclass
class Checkpoint:
    model: STALE
    head: ConsistencyHead
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        names = {id(p): n for n, p in self._named_params()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                state = self.optimizer.state.get(p)
                if not state:
                    continue
                for key, value in state.items():
                    out[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
        return out

    def _named_params(self):
        yield from (("model." + n, p) for n, p in self.model.named_parameters())
        yield from (("head." + n, p) for n, p in self.head.named_parameters())

    def save(self, path: str | Path) -> Path:
        meta = {"config": self.config.to_json(), "config_hash": self.config_hash, "step": self.step}
        return save_tensors(self.named_tensors(), path, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors, meta = load_tensors(path)
        cfg = TrainConfig.from_json(meta["config"])
        if meta.get("config_hash") != cfg.digest():
            raise DataError(f"{path}: config hash mismatch")
        dtype = tensors["model.logit_scale"].dtype
        ckpt = build(cfg, dtype=dtype)
        ckpt.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        ckpt.head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
        for name, p in ckpt._named_params():
            state = {k.rsplit(".", 1)[1]: v for k, v in tensors.items()
                     if k.startswith(f"optim.{name}.") and k.count(".") == name.count(".") + 2}
            if state:
                ckpt.optimizer.state[p] = state
        ckpt.step = int(meta.get("step", 0))
        return ckpt


def build(cfg: TrainConfig, dtype: torch.dtype | None = None) -> Checkpoint:
    """Freshly initialized model, consistency head and optimizer, seeded by ``cfg.seed``."""
    dtype = dtype or default_dtype()
    torch.manual_seed(cfg.seed)
    m = cfg.model
    with dtype_scope(dtype):
        model = STALE(m)
        head = ConsistencyHead(m.in_dim, m.consist_dim, m.topk, m.theta_c, m.theta_m)
    params = [p for p in list(model.parameters()) + list(head.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    return Checkpoint(model=model, head=head, optimizer=opt, config=cfg)


VARIANTS = ("full", "shuffled-text", "no-mask")


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """The full model or one of its two zero-shot controls.

    ``shuffled-text`` trains and evaluates with class tokens permuted by a fixed derangement.
    ``no-mask`` feeds every snippet to the classifier; the completeness loss, which only
    supervises the removed gate, is switched off as well.
    """
    if variant == "full":
        return cfg
    if variant == "shuffled-text":
        return dataclasses.replace(cfg, shuffle_text=True)
    if variant == "no-mask":
        return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, use_masking=False), loss_comp=False)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def text_permutation(n_classes: int, seed: int) -> np.ndarray:
    """Fixed-point-free permutation used by the shuffled-text control."""
    rng = np.random.default_rng([seed, 7])
    if n_classes < 2:
        return np.arange(n_classes)
    while True:
        perm = rng.permutation(n_classes)
        if not np.any(perm == np.arange(n_classes)):
            return perm


def class_tokens(corpus: SynthCorpus, classes: Sequence, cfg: TrainConfig, dtype=None) -> torch.Tensor:
    names = list(classes)
    if cfg.shuffle_text:
        perm = text_permutation(len(corpus.class_names), cfg.seed)
        names = [corpus.class_names[perm[corpus.class_names.index(c)]] for c in names]
    table = class_embedding_table(corpus, names)
    return torch.as_tensor(table, dtype=dtype or default_dtype())


def prepare(videos: Sequence[AnnotatedVideo], space: LabelSpace, T: int, dtype=None) -> dict[str, torch.Tensor]:
    dtype = dtype or default_dtype()
    E, y, G, fg = [], [], [], []
    for v in videos:
        E.append(rescale_features(v.features, T))
        lab = assign_labels(v, T, space)
        y.append(lab.y)
        G.append(lab.G)
        fg.append(lab.fg)
    return {k: torch.as_tensor(np.stack(a), dtype=dtype) for k, a in (("E", E), ("y", y), ("G", G), ("fg", fg))}


def train(corpus: SynthCorpus, split: SplitSpec, cfg: TrainConfig, ckpt: Checkpoint | None = None) -> Checkpoint:
    """Train on the seen-class videos of ``split``; input features are never updated."""
    ckpt = ckpt or build(cfg)
    dtype = ckpt.model.logit_scale.dtype
    space = LabelSpace(split.seen)
    videos = corpus.videos_of(split.seen)
    if not videos:
        raise DataError("no training videos for the seen classes")
    data = prepare(videos, space, cfg.model.T, dtype)
    tokens = class_tokens(corpus, split.seen, cfg, dtype)
    enabled = {"class": cfg.loss_class, "mask": cfg.loss_mask, "comp": cfg.loss_comp, "const": cfg.loss_const}
    params = [p for group in ckpt.optimizer.param_groups for p in group["params"]]
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(videos)
    ckpt.model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and ckpt.step >= cfg.max_steps:
                return ckpt
            idx = torch.as_tensor(order[lo:lo + cfg.batch_size])
            batch = {k: v[idx] for k, v in data.items()}
            out = ckpt.model(batch["E"], tokens)
            losses = total_loss(out, batch, batch["E"], ckpt.head, enabled)
            total = losses.total
            if not torch.isfinite(total):
                raise NumericalFailure(f"non-finite loss at step {ckpt.step}: {losses.as_floats()}")
            ckpt.optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            ckpt.optimizer.step()
            ckpt.history.append({"step": ckpt.step, **losses.as_floats()})
            ckpt.step += 1
        log.info("epoch %d: %s", epoch, ckpt.history[-1] if ckpt.history else {})
    return ckpt


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOSS_COLUMNS})


def eval_vocabulary(corpus: SynthCorpus, split: SplitSpec, mode: str, vocabulary: str = "eval") -> list:
    if mode == "closed":
        return list(corpus.class_names) if vocabulary == "all" else sorted(set(split.seen) | set(split.unseen),
                                                                           key=corpus.class_names.index)
    if vocabulary == "all":
        return list(corpus.class_names)
    return list(split.unseen)


def predict(ckpt: Checkpoint, corpus: SynthCorpus, videos: Sequence[AnnotatedVideo], vocab: Sequence,
            inf_cfg: InferenceConfig, batch_size: int = 32) -> dict[str, list[Detection]]:
    """Detections per video with labels as indices into ``corpus.class_names``."""
    dtype = ckpt.model.logit_scale.dtype
    T = ckpt.config.model.T
    tokens = class_tokens(corpus, vocab, ckpt.config, dtype)
    to_global = [corpus.class_names.index(c) for c in vocab]
    ckpt.model.eval()
    out = {}
    with torch.no_grad():
        for lo in range(0, len(videos), batch_size):
            chunk = videos[lo:lo + batch_size]
            E = torch.as_tensor(np.stack([rescale_features(v.features, T) for v in chunk]), dtype=dtype)
            res = ckpt.model(E, tokens)
            for b, v in enumerate(chunk):
                dets = detect(res.P[b].numpy(), res.M[b].numpy(), inf_cfg)
                out[v.id] = [Detection(d.start, d.end, to_global[d.label], d.score, d.snippet) for d in dets]
    ckpt.model.train()
    return out


def evaluate_checkpoint(ckpt: Checkpoint, corpus: SynthCorpus, split: SplitSpec, eval_cfg: EvalConfig,
                        inf_cfg: InferenceConfig | None = None, vocabulary: str = "eval",
                        videos: Sequence[AnnotatedVideo] | None = None) -> EvalReport:
    inf_cfg = inf_cfg or InferenceConfig()
    vocab = eval_vocabulary(corpus, split, eval_cfg.mode, vocabulary)
    unknown = [c for c in vocab if c not in corpus.class_names]
    if unknown:
        raise DataError(f"vocabulary classes not in corpus: {unknown}")
    eval_classes = split.unseen if eval_cfg.mode == "open" else tuple(set(split.seen) | set(split.unseen))
    if videos is None:
        videos = corpus.videos_of(eval_classes)
    dets = predict(ckpt, corpus, videos, vocab, inf_cfg)
    gts = {v.id: [g for g in v.instances if g.label in eval_classes] for v in videos}
    classes = tuple(sorted(corpus.class_names.index(c) for c in eval_classes))
    cfg = EvalConfig(eval_cfg.tiou_thresholds, eval_cfg.avg_thresholds, classes, eval_cfg.mode)
    return map_report(dets, gts, cfg, class_index=corpus.class_names.index)
