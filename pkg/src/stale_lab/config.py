"""Hyperparameter containers shared by the model, losses and trainer."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 64            # 2d, concatenated two-stream feature width
    dim: int = 64               # C, snippet embedding width
    text_dim: int = 64          # C', token embedding width
    T: int = 100
    enc_layers: int = 2
    heads: int = 4
    pos_encoding: bool = False

    n_ctx: int = 50             # prompt context length
    text_layers: int = 2
    text_heads: int = 4
    text_max_len: int = 77
    text_mode: str = "transformer"   # or "additive" for precomputed class tables
    text_trainable: bool = True
    ctx_init_std: float = 0.02
    bg_init_std: float = 1.0

    n_queries: int = 20
    dec_layers: int = 2
    theta_bin: float = 0.5
    straight_through: bool = True
    use_masking: bool = True    # False drops the foreground gate entirely

    alpha_init: float = 1e-3
    tau_init: float = 0.07

    mask_dim: int = 8           # channels fed to the per-location mask head
    mask_hidden: int = 8
    kernel_width: int = 3
    rel_coords: bool = True

    consist_dim: int = 64       # C_s
    topk: int = 10
    theta_c: float = 0.5
    theta_m: float = 0.5

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd")
        if self.text_mode not in ("transformer", "additive"):
            raise ValueError(f"unknown text_mode {self.text_mode!r}")
        if self.dim % self.heads or self.text_dim % self.text_heads:
            raise ValueError("embedding widths must be divisible by head counts")
        for name in ("theta_bin", "theta_c", "theta_m"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    epochs: int = 15
    batch_size: int = 16
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: int | None = None
    loss_class: bool = True
    loss_mask: bool = True
    loss_comp: bool = True
    loss_const: bool = True
    shuffle_text: bool = False   # control: permute class-token rows before training/eval

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        model = ModelConfig(**obj.pop("model", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(model=model, **obj)

    def digest(self) -> str:
        return config_hash(self.to_json())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
