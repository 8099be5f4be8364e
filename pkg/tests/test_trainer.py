import dataclasses
import json

import numpy as np
import pytest
import torch

from stale_lab.config import ModelConfig, TrainConfig
from stale_lab.datamodel import DataError, LabelSpace, SplitSpec, make_splits
from stale_lab.evaluation import EvalConfig
from stale_lab.trainer import (LOSS_COLUMNS, Checkpoint, build, class_tokens, evaluate_checkpoint, predict, text_permutation,
                               train, write_history)
from stale_lab.inference import InferenceConfig
from stale_lab.synthdata import SynthConfig, gen_corpus

D = torch.float64
SMALL_DATA = SynthConfig(n_classes=4, latent_dim=4, feature_dim=6, token_dim=8, videos_per_class=2, T_raw=16,
                         instance_length=(0.2, 0.4), seed=1)
SMALL_MODEL = ModelConfig(in_dim=6, dim=8, text_dim=8, T=8, enc_layers=1, heads=2, n_ctx=2, text_layers=1, text_heads=2,
                          n_queries=4, dec_layers=1, mask_dim=3, mask_hidden=3, consist_dim=5, topk=3)


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SMALL_DATA)


@pytest.fixture(scope="module")
def split(corpus):
    return make_splits(LabelSpace(corpus.class_names), 0.5, 1, 0)[0]


def small_cfg(**kw):
    model_kw = kw.pop("model", {})
    return TrainConfig(model=dataclasses.replace(SMALL_MODEL, **model_kw), lr=1e-2, epochs=2, batch_size=2, **kw)


def trained(corpus, split, **kw):
    return train(corpus, split, small_cfg(**kw), build(small_cfg(**kw), dtype=D))


def state(ckpt):
    return {k: v.clone() for k, v in ckpt.named_tensors().items()}


def assert_same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_zero_epochs_is_identity(corpus, split):
    cfg = dataclasses.replace(small_cfg(), epochs=0)
    init = state(build(cfg, dtype=D))
    out = train(corpus, split, cfg, build(cfg, dtype=D))
    assert out.step == 0 and out.history == []
    assert_same(state(out), init)


def test_deterministic(corpus, split):
    a, b = trained(corpus, split), trained(corpus, split)
    assert_same(state(a), state(b))
    assert a.history == b.history
    assert a.step == 4   # 2 seen classes x 2 videos, batch 2, 2 epochs


def test_max_steps(corpus, split):
    cfg = dataclasses.replace(small_cfg(), max_steps=3)
    assert train(corpus, split, cfg, build(cfg, dtype=D)).step == 3


def test_frozen_groups_and_inputs_untouched(corpus, split):
    cfg = small_cfg(model={"text_trainable": False})
    ckpt = build(cfg, dtype=D)
    text_before = {k: v.clone() for k, v in ckpt.model.text.layers.state_dict().items()}
    feats_before = [v.features.copy() for v in corpus.videos]
    optimized = {id(p) for g in ckpt.optimizer.param_groups for p in g["params"]}
    assert id(ckpt.model.text.ctx) in optimized   # prompts stay trainable
    assert not any(id(p) in optimized for p in ckpt.model.text.layers.parameters())
    train(corpus, split, cfg, ckpt)
    for k, v in ckpt.model.text.layers.state_dict().items():
        assert torch.equal(v, text_before[k]), k
    for v, f in zip(corpus.videos, feats_before):
        assert np.array_equal(v.features, f)


def test_checkpoint_roundtrip(tmp_path, corpus, split):
    ckpt = trained(corpus, split)
    ckpt.save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck")
    assert back.step == ckpt.step and back.config == ckpt.config
    assert_same(state(back), state(ckpt))
    E = torch.randn(2, 6, 8, dtype=D)
    tok = class_tokens(corpus, corpus.class_names, ckpt.config, D)
    ckpt.model.eval()
    back.model.eval()
    with torch.no_grad():
        a, b = ckpt.model(E, tok), back.model(E, tok)
    assert torch.equal(a.P, b.P) and torch.equal(a.M, b.M)


def test_checkpoint_hash_mismatch(tmp_path, corpus, split):
    ckpt = trained(corpus, split)
    ckpt.save(tmp_path / "ck")
    manifest = next(p for p in tmp_path.iterdir() if p.suffix == ".json")
    meta = json.loads(manifest.read_text())
    meta["meta"]["config"]["lr"] = 0.5
    manifest.write_text(json.dumps(meta))
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "ck")


def test_open_mode_emits_only_unseen(corpus, split):
    ckpt = trained(corpus, split)
    cfg = InferenceConfig(theta_c=1e-3)
    dets = predict(ckpt, corpus, corpus.videos, list(split.unseen), cfg)
    allowed = {corpus.class_names.index(c) for c in split.unseen}
    labels = {d.label for ds in dets.values() for d in ds}
    assert labels and labels <= allowed
    rep = evaluate_checkpoint(ckpt, corpus, split, EvalConfig())
    assert set(rep.per_class_ap) <= allowed and list(rep.mAP) == [0.5, 0.75, 0.95]


def test_text_permutation_has_no_fixed_points():
    for n in (2, 3, 20):
        perm = text_permutation(n, 0)
        assert sorted(perm) == list(range(n)) and not np.any(perm == np.arange(n))
    assert np.array_equal(text_permutation(20, 4), text_permutation(20, 4))


def test_shuffled_tokens(corpus):
    cfg = dataclasses.replace(small_cfg(), shuffle_text=True)
    plain = class_tokens(corpus, corpus.class_names, small_cfg(), D)
    shuf = class_tokens(corpus, corpus.class_names, cfg, D)
    perm = text_permutation(len(corpus.class_names), cfg.seed)
    assert torch.equal(shuf, plain[perm])


def test_no_training_videos(corpus):
    split = SplitSpec(("missing",), tuple(corpus.class_names), trial_seed=0)
    with pytest.raises(DataError):
        train(corpus, split, small_cfg(), build(small_cfg(), dtype=D))


def test_history_csv(tmp_path, corpus, split):
    ckpt = trained(corpus, split)
    write_history(ckpt.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOSS_COLUMNS) and len(lines) == 1 + ckpt.step


def test_converges_without_consistency_loss():
    corpus = gen_corpus(SynthConfig(n_classes=1, videos_per_class=1, instances_per_video=(1, 1),
                                    instance_length=(0.5, 0.5), feature_dim=6, token_dim=8, latent_dim=4, T_raw=32,
                                    seed=3))
    split = SplitSpec.closed_set(corpus.class_names)
    model = dataclasses.replace(SMALL_MODEL, T=16, straight_through=False)
    cfg = TrainConfig(model=model, lr=1e-2, epochs=200, batch_size=1, loss_const=False)
    ckpt = train(corpus, split, cfg, build(cfg, dtype=D))
    assert all(h["L_const"] == 0.0 for h in ckpt.history)
    first, last = ckpt.history[0]["total"], ckpt.history[-1]["total"]
    assert last < 0.25 * first
