"""Training objectives: classification CE, weighted BCE + dice mask loss, completeness BCE,
and the inter-branch consistency loss.

Every loss takes per-video (unbatched) or batched tensors; batched inputs are averaged
over videos.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-8
DICE_WEIGHT = 0.4

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    L_c: torch.Tensor
    L_m: torch.Tensor
    L_comp: torch.Tensor
    L_const: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.L_c + self.L_m + self.L_comp + self.L_const

    def as_floats(self) -> dict[str, float]:
        vals = {"L_c": self.L_c, "L_m": self.L_m, "L_comp": self.L_comp, "L_const": self.L_const,
                "total": self.total}
        return {k: float(v.detach()) for k, v in vals.items()}


def _batched(*tensors, core_ndim):
    if tensors[0].ndim == core_ndim:
        return [t[None] for t in tensors]
    return list(tensors)


def loss_class(P: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if P.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(P.shape)} vs {tuple(y.shape)}")
    P, y = _batched(P, y, core_ndim=2)
    return -(y * torch.log(P + EPS)).sum(dim=1).mean()


def loss_mask(M: torch.Tensor, G: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted BCE plus dice over action-snippet columns.

    Column ``t`` with ground truth ``g = G[:, t]`` contributes
    ``-(b_fg*sum(g*log m) + b_bg*sum((1-g)*log(1-m)))/T + 0.4*(1 - m.g / sum(m^2 + g^2))``
    where ``b_fg = T/#fg`` and ``b_bg = T/#bg``.  A missing side has weight zero.
    Background columns (``y[K, t] == 1`` or all-zero ``g``) are skipped.
    """
    if M.shape != G.shape:
        raise ValueError(f"shape mismatch {tuple(M.shape)} vs {tuple(G.shape)}")
    M, G = _batched(M, G, core_ndim=2)
    T = M.shape[-2]
    n_fg = G.sum(dim=-2)                                           # (B, T_cols)
    n_bg = T - n_fg
    supervised = n_fg > 0
    if y is not None:
        y = y[None] if y.ndim == 2 else y
        supervised = supervised & (y[:, -1] < 0.5)
    if not supervised.any():
        return M.sum() * 0.0
    b_fg = torch.where(n_fg > 0, T / n_fg.clamp(min=1), torch.zeros_like(n_fg))
    b_bg = torch.where(n_bg > 0, T / n_bg.clamp(min=1), torch.zeros_like(n_bg))
    pos = (G * torch.log(M + EPS)).sum(dim=-2)
    neg = ((1 - G) * torch.log(1 - M + EPS)).sum(dim=-2)
    bce = -(b_fg * pos + b_bg * neg) / T
    dice = DICE_WEIGHT * (1 - (M * G).sum(dim=-2) / (M.pow(2) + G.pow(2)).sum(dim=-2))
    per_col = bce + dice
    return per_col[supervised].mean()


def loss_completeness(L_hat: torch.Tensor, g_hat: torch.Tensor) -> torch.Tensor:
    if L_hat.shape != g_hat.shape:
        raise ValueError("shape mismatch")
    return -(g_hat * torch.log(L_hat + EPS) + (1 - g_hat) * torch.log(1 - L_hat + EPS)).mean()


class ConsistencyHead(nn.Module):
    """Projects raw features ``E`` into a shared space for each branch (``E_p``, ``E_m``)."""

    def __init__(self, in_dim: int, dim: int = 64, topk: int = 10, theta_c: float = 0.5, theta_m: float = 0.5):
        super().__init__()
        if topk < 1:
            raise ValueError("topk must be >= 1")
        self.conv_p = nn.Conv1d(in_dim, dim, 3, padding=1)
        self.conv_m = nn.Conv1d(in_dim, dim, 3, padding=1)
        self.topk = topk
        self.theta_c = theta_c
        self.theta_m = theta_m

    def forward(self, P: torch.Tensor, M: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
        return loss_consistency(P, M, E, self)


def _top_indices(scores: torch.Tensor, k: int) -> torch.Tensor:
    alive = torch.nonzero(scores > 0).flatten()
    if alive.numel() == 0:
        return alive
    order = torch.sort(scores[alive], descending=True, stable=True).indices
    return alive[order[:k]]


def branch_scores(P: torch.Tensor, M: torch.Tensor, theta_c: float, theta_m: float):
    """Per-snippet foreground confidence of each branch after thresholding.  (T,), (T,)."""
    fgP = P[:-1]
    s_c = (fgP * (fgP >= theta_c)).max(dim=0).values
    s_m = (M * (M >= theta_m)).mean(dim=0)
    return s_c, s_m


def loss_consistency(P: torch.Tensor, M: torch.Tensor, E: torch.Tensor, head: ConsistencyHead) -> torch.Tensor:
    """``1 - cos`` between mean projected features of each branch's top-k confident snippets.

    Snippet selection is discrete, so gradients reach only the projections.
    A video where either branch has no surviving snippet contributes zero.
    """
    P, M, E = _batched(P, M, E, core_ndim=2)
    E_p, E_m = head.conv_p(E), head.conv_m(E)
    losses = []
    for b in range(P.shape[0]):
        with torch.no_grad():
            s_c, s_m = branch_scores(P[b], M[b], head.theta_c, head.theta_m)
            idx_c = _top_indices(s_c, head.topk)
            idx_m = _top_indices(s_m, head.topk)
        if idx_c.numel() == 0 or idx_m.numel() == 0:
            log.debug("consistency: no surviving snippets in video %d", b)
            losses.append(E_p[b].sum() * 0.0)
            continue
        f_clf = E_p[b][:, idx_c].mean(dim=1)
        f_mask = E_m[b][:, idx_m].mean(dim=1)
        losses.append(1 - F.cosine_similarity(f_clf, f_mask, dim=0, eps=EPS))
    return torch.stack(losses).mean()


def total_loss(out, labels, E: torch.Tensor, head: ConsistencyHead,
               enabled: dict[str, bool] | None = None) -> LossBreakdown:
    """Unweighted sum of the four objectives.

    ``out`` is a ModelOutput and ``labels`` a dict of batched tensors ``y``, ``G`` and ``fg``.
    Disabled terms contribute an exact zero.
    """
    enabled = enabled or {}
    zero = out.P.sum() * 0.0

    def on(name):
        return enabled.get(name, True)

    return LossBreakdown(
        L_c=loss_class(out.P, labels["y"]) if on("class") else zero,
        L_m=loss_mask(out.M, labels["G"], labels["y"]) if on("mask") else zero,
        L_comp=loss_completeness(out.L_hat, labels["fg"]) if on("comp") else zero,
        L_const=loss_consistency(out.P, out.M, E, head) if on("const") else zero,
    )
