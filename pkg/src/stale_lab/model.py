"""Representation masking, cross-modal adaption, and the parallel classification/mask heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .encoder import TemporalEncoder, TextEncoder


@dataclass
class ModelOutput:
    P: torch.Tensor       # (B, K+1, T)
    M: torch.Tensor       # (B, T, T); M[:, :, t] is the mask predicted by snippet t
    L_hat: torch.Tensor   # (B, T)
    L_bin: torch.Tensor   # (B, T)
    F_fg: torch.Tensor    # (B, C, T)
    L_q: torch.Tensor     # (B, N_z, T)
    F_vis: torch.Tensor   # (B, C, T)
    F_lan: torch.Tensor   # (K+1, C')


class MaskDecoder(nn.Module):
    """Class-agnostic foreground mask from ``N_z`` learned queries."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, cfg.dim))
        layer = nn.TransformerDecoderLayer(cfg.dim, cfg.heads, dim_feedforward=2 * cfg.dim, dropout=0.0,
                                           batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.dec_layers) if cfg.dec_layers else None
        self.mask_proj = nn.Linear(cfg.dim, cfg.dim)
        self.weigh = nn.Linear(cfg.n_queries, 1)  # W_q, b_q

    def forward(self, F_vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, T) -> L_q (B, N_z, T), L_hat (B, T)."""
        q = self.queries.expand(F_vis.shape[0], -1, -1)
        if self.decoder is not None:
            q = self.decoder(q, F_vis.transpose(1, 2))
        B_q = self.mask_proj(q)
        L_q = torch.sigmoid(torch.einsum("bqc,bct->bqt", B_q, F_vis))
        L_hat = torch.sigmoid(self.weigh(L_q.transpose(1, 2))).squeeze(-1)
        return L_q, L_hat


class _BinarizeST(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, threshold):
        return (x >= threshold).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def binarize(L_hat: torch.Tensor, theta_bin: float, straight_through: bool = True) -> torch.Tensor:
    """Hard threshold; the straight-through variant passes gradients as if it were the identity."""
    if straight_through:
        return _BinarizeST.apply(L_hat, theta_bin)
    return (L_hat >= theta_bin).to(L_hat.dtype)


def gate_foreground(F_vis: torch.Tensor, L_hat: torch.Tensor, theta_bin: float,
                    straight_through: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    if not 0.0 < theta_bin < 1.0:
        raise ValueError("theta_bin must lie in (0, 1)")
    L_bin = binarize(L_hat, theta_bin, straight_through)
    return L_bin, F_vis * L_bin.unsqueeze(-2)


class CrossModalAdapter(nn.Module):
    """One transformer layer with text rows as queries over foreground snippets, plus scaled residual."""

    def __init__(self, cfg: ModelConfig, proj: nn.Module):
        super().__init__()
        self.proj = proj
        self.layer = nn.TransformerDecoderLayer(cfg.text_dim, cfg.text_heads, dim_feedforward=2 * cfg.text_dim,
                                                dropout=0.0, batch_first=True, norm_first=True)
        self.alpha = nn.Parameter(torch.full((cfg.text_dim,), cfg.alpha_init))

    def forward(self, F_lan: torch.Tensor, F_fg: torch.Tensor) -> torch.Tensor:
        """F_lan (K+1, C'), F_fg (B, C, T) -> (B, K+1, C')."""
        if F_lan.shape[-1] != self.alpha.shape[0]:
            raise ValueError("text width mismatch")
        text = F_lan.expand(F_fg.shape[0], -1, -1)
        E_c = self.layer(text, self.proj(F_fg.transpose(1, 2)))
        return text + self.alpha * E_c


def classify(F_lan_hat: torch.Tensor, F_fg: torch.Tensor, logit_scale: torch.Tensor | float,
             proj: nn.Module | None = None, gate: torch.Tensor | None = None) -> torch.Tensor:
    """Temperature softmax over cosine similarities; columns of the result sum to one.

    Zero-norm vectors normalize to zero (cosine 0).  When ``gate`` is given, ``F_fg`` is
    the ungated embedding and the binary gate is applied to the cosines instead of the
    features: identical values, but gradients stay bounded at gated-out columns.
    """
    unbatched = F_fg.ndim == 2
    if unbatched:
        F_lan_hat, F_fg = F_lan_hat[None], F_fg[None]
        gate = None if gate is None else gate[None]
    v = F_fg.transpose(1, 2)
    if proj is not None:
        v = proj(v)
    if F_lan_hat.shape[-1] != v.shape[-1]:
        raise ValueError("classifier width mismatch")
    S = torch.einsum("bkc,btc->bkt", F.normalize(F_lan_hat, dim=-1), F.normalize(v, dim=-1))
    if gate is not None:
        S = S * gate.unsqueeze(1)
    P = torch.softmax(S * logit_scale, dim=1)
    return P[0] if unbatched else P


class DynamicMaskHead(nn.Module):
    """Per-location dynamic convolution producing a length-T mask for every snippet.

    A controller turns ``F_vis[:, t]`` into the weights of a three-layer 1-D conv head.
    That head then runs over a reduced copy of the whole sequence, with an extra
    ``(r - t) / T`` channel when ``rel_coords`` is on.  Its output is column ``t`` of M.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.reduce = nn.Conv1d(cfg.dim, cfg.mask_dim, 1)
        cin = cfg.mask_dim + (1 if cfg.rel_coords else 0)
        h, kw = cfg.mask_hidden, cfg.kernel_width
        self.shapes = [(h, cin, kw), (h, h, kw), (1, h, kw)]
        self.sizes = []
        for out_ch, in_ch, k in self.shapes:
            self.sizes += [out_ch * in_ch * k, out_ch]
        self.controller = nn.Linear(cfg.dim, sum(self.sizes))
        with torch.no_grad():
            self.controller.weight.mul_(1.0 / math.sqrt(kw))

    def final_slice(self) -> slice:
        start = sum(self.sizes[:4])
        return slice(start, start + sum(self.sizes[4:]))

    def forward(self, F_vis: torch.Tensor) -> torch.Tensor:
        """(B, C, T) -> M (B, T, T) in (0, 1)."""
        B, _, T = F_vis.shape
        params = self.controller(F_vis.transpose(1, 2))      # (B, T_loc, P)
        chunks = torch.split(params, self.sizes, dim=-1)
        X = self.reduce(F_vis)                                 # (B, c, T)
        x = X[:, None].expand(B, T, -1, T)                     # (B, T_loc, c, T)
        if self.cfg.rel_coords:
            r = torch.arange(T, dtype=F_vis.dtype, device=F_vis.device)
            rel = (r[None, :] - r[:, None]) / T                # [t, r]
            x = torch.cat([x, rel[None, :, None, :].expand(B, T, 1, T)], dim=2)
        groups = B * T
        x = x.reshape(1, -1, T)
        pad = self.cfg.kernel_width // 2
        for i, (out_ch, in_ch, k) in enumerate(self.shapes):
            w = chunks[2 * i].reshape(groups * out_ch, in_ch, k)
            b = chunks[2 * i + 1].reshape(groups * out_ch)
            x = F.conv1d(x, w, b, padding=pad, groups=groups)
            if i < len(self.shapes) - 1:
                x = F.relu(x)
        logits = x.reshape(B, T, T)                            # [b, t, r]
        return torch.sigmoid(logits.transpose(1, 2))           # [b, r, t]


class STALE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TemporalEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)
        proj = nn.Identity() if cfg.dim == cfg.text_dim else nn.Linear(cfg.dim, cfg.text_dim, bias=False)
        self.cross = CrossModalAdapter(cfg, proj)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / cfg.tau_init)))
        self.localizer = DynamicMaskHead(cfg)

    def scale(self) -> torch.Tensor:
        return self.logit_scale.exp().clamp(max=100.0)

    def classification_branch(self, F_vis, F_lan, L_bin):
        F_fg = F_vis * L_bin.unsqueeze(-2)
        F_lan_hat = self.cross(F_lan, F_fg)
        return classify(F_lan_hat, F_vis, self.scale(), proj=self.cross.proj, gate=L_bin), F_fg

    def forward(self, E: torch.Tensor, class_tokens: torch.Tensor) -> ModelOutput:
        """E (B, 2d, T) or (2d, T); class tokens (K, C')."""
        if E.ndim == 2:
            E = E[None]
        F_vis = self.encoder(E)
        L_q, L_hat = self.mask_decoder(F_vis)
        if self.cfg.use_masking:
            L_bin = binarize(L_hat, self.cfg.theta_bin, self.cfg.straight_through)
        else:
            L_bin = torch.ones_like(L_hat)
        F_lan = self.text(class_tokens)
        P, F_fg = self.classification_branch(F_vis, F_lan, L_bin)
        M = self.localizer(F_vis)
        return ModelOutput(P=P, M=M, L_hat=L_hat, L_bin=L_bin, F_fg=F_fg, L_q=L_q, F_vis=F_vis, F_lan=F_lan)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "temporal_encoder": list(self.encoder.parameters()),
            "prompt": [self.text.ctx, self.text.background],
            "text_encoder": list(self.text.layers.parameters()),
            "mask_decoder": list(self.mask_decoder.parameters()),
            "cross_modal": list(self.cross.parameters()) + [self.logit_scale],
            "localizer": list(self.localizer.parameters()),
        }
