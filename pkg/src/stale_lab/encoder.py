"""Snippet embedding (global self-attention over time) and prompt-augmented text embedding."""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig


def _encoder_stack(dim: int, heads: int, layers: int, norm_first: bool) -> nn.Module:
    if layers == 0:
        return nn.Identity()
    layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                       batch_first=True, norm_first=norm_first)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


def sinusoid_table(T: int, dim: int) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(T, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table


class TemporalEncoder(nn.Module):
    """``F_vis = T(proj(E))``; no positional encoding unless ``pos_encoding`` is set."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.in_dim, cfg.dim)
        self.layers = _encoder_stack(cfg.dim, cfg.heads, cfg.enc_layers, norm_first=False)

    def forward(self, E: torch.Tensor) -> torch.Tensor:
        """(B, 2d, T) -> (B, C, T)."""
        if E.shape[-2] != self.cfg.in_dim:
            raise ValueError(f"expected {self.cfg.in_dim} input channels, got {E.shape[-2]}")
        x = self.proj(E.transpose(1, 2))
        if self.cfg.pos_encoding:
            x = x + sinusoid_table(x.shape[1], x.shape[2]).to(x)
        return self.layers(x).transpose(1, 2)


class TextEncoder(nn.Module):
    """Encodes ``[G_p; t_k]`` per class and reads the final position; row K is the background."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ctx = nn.Parameter(torch.randn(cfg.n_ctx, cfg.text_dim) * cfg.ctx_init_std)
        self.background = nn.Parameter(torch.randn(cfg.text_dim) * cfg.bg_init_std)
        self.layers = _encoder_stack(cfg.text_dim, cfg.text_heads, cfg.text_layers, norm_first=True)
        self.set_trainable(cfg.text_trainable)

    def set_trainable(self, flag: bool) -> None:
        for p in self.layers.parameters():
            p.requires_grad_(flag)

    def forward(self, class_tokens: torch.Tensor) -> torch.Tensor:
        """(K, C') class tokens -> (K+1, C') ``F_lan``."""
        if class_tokens.ndim != 2 or class_tokens.shape[1] != self.cfg.text_dim:
            raise ValueError(f"class tokens must be (K, {self.cfg.text_dim})")
        if self.cfg.n_ctx + 1 > self.cfg.text_max_len:
            raise ValueError(f"context length {self.cfg.n_ctx} + 1 exceeds {self.cfg.text_max_len}")
        tokens = torch.cat([class_tokens, self.background[None]], dim=0)
        if self.cfg.text_mode == "additive":
            if self.cfg.n_ctx == 0:
                return tokens
            return tokens + self.ctx.mean(dim=0)
        seq = torch.cat([self.ctx.expand(tokens.shape[0], -1, -1), tokens[:, None]], dim=1)
        return self.layers(seq)[:, -1]
