"""Trainable spatial and temporal side networks laddered off frozen tap features.

Both branches consume the backbone's token arrays (no re-patchification): an
adapter (layer norm + per-token linear, i.e. a 1x1 convolution over the channel
axis) maps backbone width to side width, and its output is added to the
propagating side state before the next side transformer layer.

* Spatial branch: each frame runs the full side stack independently; tap k of
  the fusion-point map injects before side layer ``fusion_points[k]``. The
  side state starts at zero, so zeroing all adapter projections makes the
  output independent of image content.
* Temporal branch: each tap layer runs a recursion over frames — frame t's
  adapted feature is added to the running state, then side layer t transforms
  it. Frames therefore consume side layers 1..T of the stack (layers beyond T
  hold parameters but receive no gradient that step). The stack is shared
  across tap layers by default; ``share_temporal_stack=False`` gives each tap
  its own stack.

Parameter count (GAP aggregation, documented closed form):
  one stack           depth * (12*w^2 + 13*w)      [attention 4w^2, MLP 8w^2, plus norms/biases]
  adapters per branch n_taps * (2*bw + bw*w + w)   [norm scales/shifts + projection]
  spatial branch      stack + adapters
  temporal branch     stack * (1 if shared else n_taps) + adapters
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import LayerFeatureSet, TransformerLayer

GAP = "gap"
MLP = "mlp"
RECURRENT_GATED = "recurrent-gated"
RECURRENT_GATED_MEMORY = "recurrent-gated-with-memory"

AGGREGATION_METHODS = (GAP, MLP, RECURRENT_GATED, RECURRENT_GATED_MEMORY)


class SideConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SideNetConfig:
    width: int = 240
    heads: int = 6
    depth: int = 8
    patch: int = 16
    fusion_points: tuple[int, ...] = (0, 2, 4, 6, 7)
    max_frames: int = 8
    aggregation: str = GAP
    share_temporal_stack: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise SideConfigError(f"side width {self.width} must divide by heads {self.heads}")
        fp = tuple(self.fusion_points)
        if not fp or list(fp) != sorted(set(fp)):
            raise SideConfigError("fusion_points must be strictly increasing")
        if fp[0] < 0 or fp[-1] >= self.depth:
            raise SideConfigError(f"fusion_points must lie in [0, {self.depth})")
        if self.max_frames < 1 or self.max_frames > self.depth:
            raise SideConfigError("max_frames must lie in [1, depth]: the temporal recursion indexes side layers by frame")
        if self.aggregation not in AGGREGATION_METHODS:
            raise SideConfigError(f"aggregation must be one of {AGGREGATION_METHODS}")


@dataclass(frozen=True)
class AggregationConfig:
    method: str = GAP

    def __post_init__(self):
        if self.method not in AGGREGATION_METHODS:
            raise SideConfigError(f"aggregation must be one of {AGGREGATION_METHODS}")


class FusionAdapter(nn.Module):
    """Layer norm over backbone width followed by a per-token linear projection
    to side width."""

    def __init__(self, backbone_width: int, side_width: int):
        super().__init__()
        self.norm = nn.LayerNorm(backbone_width)
        self.proj = nn.Linear(backbone_width, side_width)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.proj(self.norm(features))


def _as_batched(taps: LayerFeatureSet | dict) -> dict[int, torch.Tensor]:
    """Accept (T, N, w) single-video features or (B, T, N, w) batches."""
    feats = taps.features if isinstance(taps, LayerFeatureSet) else taps
    out = {}
    for i, f in feats.items():
        out[i] = f.unsqueeze(0) if f.ndim == 3 else f
    return out


class SpatialSideNet(nn.Module):
    def __init__(self, cfg: SideNetConfig, backbone_width: int, tap_layers: tuple[int, ...]):
        super().__init__()
        if len(cfg.fusion_points) != len(tap_layers):
            raise SideConfigError(
                f"{len(cfg.fusion_points)} fusion points cannot pair with {len(tap_layers)} tap layers"
            )
        self.cfg = cfg
        self.tap_layers = tuple(tap_layers)
        self.adapters = nn.ModuleList(FusionAdapter(backbone_width, cfg.width) for _ in tap_layers)
        self.layers = nn.ModuleList(TransformerLayer(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self._inject = {fp: k for k, fp in enumerate(cfg.fusion_points)}

    def forward(self, taps: LayerFeatureSet | dict) -> torch.Tensor:
        """taps {i: (B, T, N, bw)} -> per-frame side tokens (B, T, N, w)."""
        feats = _as_batched(taps)
        first = feats[self.tap_layers[0]]
        b, t, n, _ = first.shape
        flat = {i: f.reshape(b * t, n, f.shape[-1]) for i, f in feats.items()}
        ref = self.adapters[0].proj.weight
        state = torch.zeros(b * t, n, self.cfg.width, dtype=ref.dtype, device=ref.device)
        for j, layer in enumerate(self.layers):
            k = self._inject.get(j)
            if k is not None:
                state = self.adapters[k](flat[self.tap_layers[k]]) + state
            state, _ = layer(state)
        return state.reshape(b, t, n, self.cfg.width)


class TemporalSideNet(nn.Module):
    def __init__(self, cfg: SideNetConfig, backbone_width: int, tap_layers: tuple[int, ...]):
        super().__init__()
        self.cfg = cfg
        self.tap_layers = tuple(tap_layers)
        self.adapters = nn.ModuleList(FusionAdapter(backbone_width, cfg.width) for _ in tap_layers)
        n_stacks = 1 if cfg.share_temporal_stack else len(tap_layers)
        self.stacks = nn.ModuleList(
            nn.ModuleList(TransformerLayer(cfg.width, cfg.heads) for _ in range(cfg.depth))
            for _ in range(n_stacks)
        )

    def forward(self, taps: LayerFeatureSet | dict) -> torch.Tensor:
        """taps {i: (B, T, N, bw)} -> per-tap final states (B, K, N, w)."""
        feats = _as_batched(taps)
        first = feats[self.tap_layers[0]]
        b, t, n, _ = first.shape
        if t > self.cfg.max_frames:
            raise SideConfigError(
                f"{t} frames exceed the temporal step budget ({self.cfg.max_frames}); raise max_frames/depth"
            )
        ref = self.adapters[0].proj.weight
        outs = []
        for k_idx in range(len(self.tap_layers)):
            f = feats[self.tap_layers[k_idx]]
            stack = self.stacks[0 if self.cfg.share_temporal_stack else k_idx]
            state = torch.zeros(b, n, self.cfg.width, dtype=ref.dtype, device=ref.device)
            for step in range(t):
                fused = self.adapters[k_idx](f[:, step]) + state
                state, _ = stack[step](fused)
            outs.append(state)
        return torch.stack(outs, dim=1)


class BranchAggregator(nn.Module):
    """Reduces one branch's set of token arrays (B, S, N, w) to (B, w)."""

    def __init__(self, method: str, width: int):
        super().__init__()
        self.method = method
        if method == MLP:
            self.map = nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, width))
        elif method == RECURRENT_GATED:
            self.cell = nn.GRUCell(width, width)
        elif method == RECURRENT_GATED_MEMORY:
            self.cell = nn.LSTMCell(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.method == GAP:
            return x.mean(dim=(1, 2))
        elems = x.mean(dim=2)  # (B, S, w)
        if self.method == MLP:
            return self.map(elems).mean(dim=1)
        b, s, w = elems.shape
        h = torch.zeros(b, w, dtype=elems.dtype, device=elems.device)
        if self.method == RECURRENT_GATED:
            for i in range(s):
                h = self.cell(elems[:, i], h)
            return h
        c = torch.zeros_like(h)
        for i in range(s):
            h, c = self.cell(elems[:, i], (h, c))
        return h


class SpatioTemporalSide(nn.Module):
    """Both branches plus aggregation; branch outputs always combine by addition."""

    def __init__(self, cfg: SideNetConfig, backbone_width: int, tap_layers: tuple[int, ...]):
        super().__init__()
        self.cfg = cfg
        self.spatial = SpatialSideNet(cfg, backbone_width, tap_layers)
        self.temporal = TemporalSideNet(cfg, backbone_width, tap_layers)
        self.spatial_agg = BranchAggregator(cfg.aggregation, cfg.width)
        self.temporal_agg = BranchAggregator(cfg.aggregation, cfg.width)

    def forward(self, taps: LayerFeatureSet | dict) -> torch.Tensor:
        return aggregate_and_combine(self.spatial(taps), self.temporal(taps), self.spatial_agg, self.temporal_agg)


def aggregate_and_combine(
    spatial: torch.Tensor,
    temporal: torch.Tensor,
    spatial_agg: BranchAggregator,
    temporal_agg: BranchAggregator,
) -> torch.Tensor:
    """(B, T, N, w) + (B, K, N, w) -> (B, w): reduce each branch over its set
    and token axes, then add."""
    return spatial_agg(spatial) + temporal_agg(temporal)


# -- closed-form parameter counts (GAP aggregation) -------------------------


def stack_param_count(width: int, depth: int) -> int:
    return depth * (12 * width * width + 13 * width)


def adapter_param_count(backbone_width: int, width: int, n_taps: int) -> int:
    return n_taps * (2 * backbone_width + backbone_width * width + width)


def side_param_count(cfg: SideNetConfig, backbone_width: int, n_taps: int) -> int:
    spatial = stack_param_count(cfg.width, cfg.depth) + adapter_param_count(backbone_width, cfg.width, n_taps)
    n_stacks = 1 if cfg.share_temporal_stack else n_taps
    temporal = n_stacks * stack_param_count(cfg.width, cfg.depth) + adapter_param_count(
        backbone_width, cfg.width, n_taps
    )
    return spatial + temporal
