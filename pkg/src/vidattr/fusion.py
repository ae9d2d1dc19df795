"""Vision-text fusion transformer, sigmoid prediction head, and attention rollout.

The fused token sequence is [visual token; one token per attribute sentence].
Predictions come from the fused visual token (row 0) through k dense layers,
batch normalization over logits, and a sigmoid. A per-attribute alternative
(each fused text token -> its own scalar logit through a shared dense map)
ships behind ``predict_from_text``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import TransformerLayer


class CalibrationError(RuntimeError):
    """Eval-mode prediction requested before batch-norm statistics exist."""


@dataclass(frozen=True)
class FusionConfig:
    layers: int = 1
    width: int = 240
    heads: int = 6
    head_layers: int = 1
    predict_from_text: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1 or self.head_layers < 1:
            raise ValueError("fusion layers and head_layers must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"fusion width {self.width} must divide by heads {self.heads}")


class FusionTransformer(nn.Module):
    """Projects both modalities to the fusion width, concatenates, and runs the
    multi-modal transformer stack."""

    def __init__(self, cfg: FusionConfig, visual_width: int, text_width: int):
        super().__init__()
        self.cfg = cfg
        self.vis_proj = nn.Linear(visual_width, cfg.width)
        self.text_proj = nn.Linear(text_width, cfg.width)
        self.blocks = nn.ModuleList(TransformerLayer(cfg.width, cfg.heads) for _ in range(cfg.layers))

    def forward(self, visual: torch.Tensor, text: torch.Tensor, need_attn: bool = False):
        """visual (B, visual_width), text (M, text_width) -> fused (B, 1+M, width).

        Row 0 is the visual token; rows 1..M align to schema order.
        """
        b = visual.shape[0]
        vis = self.vis_proj(visual).unsqueeze(1)
        txt = self.text_proj(text).unsqueeze(0).expand(b, -1, -1)
        x = torch.cat([vis, txt], dim=1)
        attns = []
        for blk in self.blocks:
            x, att = blk(x, need_attn=need_attn)
            if need_attn:
                attns.append(att)
        return x, (attns if need_attn else None)


class PredictionHead(nn.Module):
    """k dense layers to M logits, then batch norm and sigmoid."""

    def __init__(self, cfg: FusionConfig, num_attributes: int):
        super().__init__()
        self.cfg = cfg
        out_dim = 1 if cfg.predict_from_text else num_attributes
        dims = [cfg.width] * cfg.head_layers + [out_dim]
        layers: list[nn.Module] = []
        for i in range(cfg.head_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < cfg.head_layers - 1:
                layers.append(nn.GELU())
        self.dense = nn.Sequential(*layers)
        self.bn = nn.BatchNorm1d(num_attributes, eps=cfg.bn_eps, momentum=cfg.bn_momentum)

    def forward(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """fused (B, 1+M, width) -> (probabilities, raw logits), each (B, M)."""
        if self.cfg.predict_from_text:
            logits = self.dense(fused[:, 1:]).squeeze(-1)
        else:
            logits = self.dense(fused[:, 0])
        if not self.training and int(self.bn.num_batches_tracked) == 0:
            raise CalibrationError(
                "batch-norm running statistics are empty; run at least one training step "
                "(or a calibration pass in train mode) before eval-mode prediction"
            )
        normed = self.bn(logits)
        return torch.sigmoid(normed), logits


@dataclass
class Prediction:
    probabilities: torch.Tensor
    logits: torch.Tensor


# ---------------------------------------------------------------------------
# Attention rollout
# ---------------------------------------------------------------------------


def rollout_from_attentions(attns: list[torch.Tensor]) -> torch.Tensor:
    """Chain per-layer attention into token-to-token attribution.

    Each layer's maps are averaged over heads, an identity is added for the
    residual path, rows are renormalized, and layers are chained in forward
    order: R = A_hat_L @ ... @ A_hat_1. Input: list of (B, heads, N, N).
    """
    rollout = None
    for att in attns:
        a = att.mean(dim=1)
        a = a + torch.eye(a.shape[-1], dtype=a.dtype, device=a.device)
        a = a / a.sum(dim=-1, keepdim=True)
        rollout = a if rollout is None else a @ rollout
    if rollout is None:
        raise ValueError("no attention maps to roll out")
    return rollout


def _normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    # A spread at float-noise level is a flat map; stretching it to [0, 1]
    # would display pure rounding error as structure.
    if hi - lo <= 1e-6 * max(abs(hi), abs(lo), 1.0):
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def attention_rollout(model, video: torch.Tensor, attribute_index: int) -> np.ndarray:
    """Per-frame patch-grid saliency for the frozen vision tower.

    video: (T, 3, H, W). Returns (T, H/patch, W/patch) maps min-max normalized
    to [0, 1] per frame. The rollout traverses the vision tower only; the
    attribute index is validated against the schema and recorded by callers
    (the tower's attention does not condition on it).
    """
    m = model.num_attributes
    if not (0 <= attribute_index < m):
        raise IndexError(f"attribute index {attribute_index} out of range [0, {m})")
    vision = model.backbone.vision
    hooks = getattr(model, "peft", None)
    with torch.no_grad():
        _, attns = vision(video, need_attn=True, hooks=hooks)
    if hooks is not None and getattr(hooks, "n_prompt", 0):
        # Slice prompt rows/cols away, then renormalize so rows stay convex.
        np_ = hooks.n_prompt
        attns = [a[:, :, np_:, np_:] for a in attns]
        attns = [a / a.sum(dim=-1, keepdim=True) for a in attns]
    rollout = rollout_from_attentions(attns)
    gh, gw = vision.cfg.grid
    saliency = rollout[:, 0, 1:].reshape(-1, gh, gw).cpu().numpy()
    return np.stack([_normalize_map(s) for s in saliency])
