"""End-to-end model: frozen dual encoder, optional side networks or PEFT
variant, fusion transformer, and prediction head.

Tuning modes
  side  frozen backbone + trainable spatio-temporal side networks (default)
  full  everything trainable, no side networks (visual representation is the
        frame-and-token mean of the last tap layer)
  peft  frozen backbone, no side networks; a PEFT variant may be attached

Attribute sentences are embedded once at construction and cached as a buffer —
the text tower is frozen, so recomputation would be waste.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbone import (
    DualEncoder,
    TextEncoderConfig,
    VisionEncoderConfig,
    assert_frozen,
    freeze_module,
    seed_module_weights,
    snapshot_parameters,
)
from .fusion import FusionConfig, FusionTransformer, Prediction, PredictionHead
from .schema import AttributeSchema
from .side import SideNetConfig, SpatioTemporalSide

MODES = ("side", "full", "peft")


class AttributeModel(nn.Module):
    def __init__(
        self,
        schema: AttributeSchema,
        vision_cfg: VisionEncoderConfig = VisionEncoderConfig(),
        text_cfg: TextEncoderConfig = TextEncoderConfig(),
        side_cfg: SideNetConfig = SideNetConfig(),
        fusion_cfg: FusionConfig | None = None,
        mode: str = "side",
        backbone_seed: int = 0,
        trainable_seed: int = 1,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.schema = schema
        self.vision_cfg = vision_cfg
        self.text_cfg = text_cfg
        self.side_cfg = side_cfg

        self.backbone = DualEncoder(vision_cfg, text_cfg)
        seed_module_weights(self.backbone, backbone_seed)

        if mode == "side":
            self.side: SpatioTemporalSide | None = SpatioTemporalSide(
                side_cfg, vision_cfg.width, vision_cfg.tap_layers
            )
            visual_width = side_cfg.width
        else:
            self.side = None
            visual_width = vision_cfg.width
        self.fusion_cfg = fusion_cfg or FusionConfig(width=side_cfg.width, heads=side_cfg.heads)
        self.fusion = FusionTransformer(self.fusion_cfg, visual_width, text_cfg.width)
        self.head = PredictionHead(self.fusion_cfg, schema.num_attributes)
        self.peft = None

        if self.side is not None:
            seed_module_weights(self.side, trainable_seed)
        seed_module_weights(self.fusion, trainable_seed + 1)
        seed_module_weights(self.head, trainable_seed + 2)

        if mode != "full":
            freeze_module(self.backbone)
        # Filled lazily on first use: the text tower is frozen and the sentences
        # are fixed per schema, so one deterministic pass suffices per run.
        self.register_buffer("text_features", torch.zeros(schema.num_attributes, text_cfg.width))
        self._text_cached = False
        self.backbone_snapshot = snapshot_parameters(self.backbone)

    # -- contracts -----------------------------------------------------------

    @property
    def num_attributes(self) -> int:
        return self.schema.num_attributes

    @property
    def backbone_needs_grad(self) -> bool:
        return self.mode == "full" or self.peft is not None

    def resnapshot_backbone(self) -> None:
        self.backbone_snapshot = snapshot_parameters(self.backbone)

    def load_backbone_weights(self, path, name_map: dict[str, str] | None = None) -> None:
        """Import pretrained backbone tensors from a named-tensor archive, then
        refresh the cached text features and the freeze snapshot."""
        from .backbone import load_named_tensors

        load_named_tensors(self.backbone, path, name_map)
        self._text_cached = False
        self.ensure_text_cache()
        self.resnapshot_backbone()

    def ensure_text_cache(self) -> None:
        if not self._text_cached:
            with torch.no_grad():
                self.text_features.copy_(
                    self.backbone.encode_text(self.schema.sentences()).to(self.text_features.dtype)
                )
            self._text_cached = True

    def check_frozen(self):
        return assert_frozen(self.backbone, self.backbone_snapshot)

    # -- forward -------------------------------------------------------------

    def encode_taps(self, videos: torch.Tensor) -> dict[int, torch.Tensor]:
        """(B, T, 3, H, W) -> tap features {i: (B, T, N_tok, width)}."""
        b, t = videos.shape[:2]
        frames = videos.reshape(b * t, *videos.shape[2:])
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.backbone_needs_grad):
            taps, _ = self.backbone.encode_frames(frames, hooks=self.peft)
        return {i: f.reshape(b, t, *f.shape[1:]) for i, f in taps.features.items()}

    def visual_representation(self, videos: torch.Tensor) -> torch.Tensor:
        taps = self.encode_taps(videos)
        if self.side is not None:
            return self.side(taps)
        return taps[self.vision_cfg.tap_layers[-1]].mean(dim=(1, 2))

    def fuse_and_predict(self, visual: torch.Tensor, text: torch.Tensor | None = None) -> Prediction:
        if text is None:
            self.ensure_text_cache()
            text = self.text_features
        fused, _ = self.fusion(visual, text)
        probs, logits = self.head(fused)
        return Prediction(probs, logits)

    def forward(self, videos: torch.Tensor) -> Prediction:
        if videos.ndim != 5:
            raise ValueError(f"expected videos (B, T, 3, H, W), got {tuple(videos.shape)}")
        return self.fuse_and_predict(self.visual_representation(videos))
