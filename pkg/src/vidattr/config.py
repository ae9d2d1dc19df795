"""Run configuration: one structured document (TOML or JSON) controlling every
module's config block. Flags override file values override defaults.

Sections: top-level ``mode``, [schema], [data], [backbone], [backbone.vision],
[backbone.text], [side_net], [fusion], [sampler], [preprocess], [train],
[peft]. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .backbone import TextEncoderConfig, VisionEncoderConfig
from .data import PreprocessConfig, SamplerConfig
from .fusion import FusionConfig
from .model import AttributeModel
from .peft import ADAPTER, LORA, PROMPT_TOKENS, PeftVariant, attach_peft
from .schema import AttributeSchema
from .side import SideNetConfig
from .train import TrainConfig

RUN_MODES = ("side", "full", "lora", "adapter", "prompt")
_MODE_TO_KIND = {"lora": LORA, "adapter": ADAPTER, "prompt": PROMPT_TOKENS}

_TUPLE_FIELDS = {"tap_layers", "image_size", "fusion_points", "mean", "std", "betas"}


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {sorted(unknown)}; valid keys: {sorted(names)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


@dataclass
class RunConfig:
    mode: str = "side"
    schema_path: str | None = None
    manifest_path: str | None = None
    backbone_seed: int = 0
    trainable_seed: int = 1
    weights_path: str | None = None
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    side_net: SideNetConfig = field(default_factory=SideNetConfig)
    fusion: FusionConfig | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    peft: PeftVariant | None = None

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.fusion is None:
            self.fusion = FusionConfig(width=self.side_net.width, heads=self.side_net.heads)
        if self.peft is not None and self.mode in _MODE_TO_KIND:
            if self.peft.kind != _MODE_TO_KIND[self.mode]:
                raise ConfigError(
                    f"mode {self.mode!r} conflicts with [peft] kind {self.peft.kind!r}"
                )

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        d = dict(d)
        known_sections = {
            "mode", "schema", "data", "backbone", "side_net", "fusion",
            "sampler", "preprocess", "train", "peft",
        }
        unknown = set(d) - known_sections
        if unknown:
            raise ConfigError(f"config has unknown sections {sorted(unknown)}")

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or base is None else base / p)

        schema_sec = dict(d.get("schema", {}))
        data_sec = dict(d.get("data", {}))
        backbone_sec = dict(d.get("backbone", {}))
        vision = backbone_sec.pop("vision", {})
        text = backbone_sec.pop("text", {})
        bseed = backbone_sec.pop("seed", 0)
        weights = backbone_sec.pop("weights", None)
        if backbone_sec:
            raise ConfigError(f"[backbone] has unknown keys {sorted(backbone_sec)}")
        sp = schema_sec.pop("path", None)
        if schema_sec:
            raise ConfigError(f"[schema] has unknown keys {sorted(schema_sec)}")
        mp = data_sec.pop("manifest", None)
        tseed = data_sec.pop("trainable_seed", 1)
        if data_sec:
            raise ConfigError(f"[data] has unknown keys {sorted(data_sec)}")

        peft_sec = d.get("peft")
        return cls(
            mode=d.get("mode", "side"),
            schema_path=resolve(sp),
            manifest_path=resolve(mp),
            backbone_seed=bseed,
            trainable_seed=tseed,
            weights_path=resolve(weights),
            vision=_build(VisionEncoderConfig, vision, "backbone.vision"),
            text=_build(TextEncoderConfig, text, "backbone.text"),
            side_net=_build(SideNetConfig, d.get("side_net", {}), "side_net"),
            fusion=_build(FusionConfig, d["fusion"], "fusion") if "fusion" in d else None,
            sampler=_build(SamplerConfig, d.get("sampler", {}), "sampler"),
            preprocess=_build(PreprocessConfig, d.get("preprocess", {}), "preprocess"),
            train=_build(TrainConfig, d.get("train", {}), "train"),
            peft=_build(PeftVariant, peft_sec, "peft") if peft_sec else None,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            if path.suffix == ".toml":
                with open(path, "rb") as f:
                    d = tomllib.load(f)
            else:
                with open(path, "r", encoding="utf-8") as f:
                    d = json.load(f)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: cannot parse ({e})") from None
        return cls.from_dict(d, base=path.parent)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "schema": {"path": self.schema_path},
            "data": {"manifest": self.manifest_path, "trainable_seed": self.trainable_seed},
            "backbone": {
                "seed": self.backbone_seed,
                "weights": self.weights_path,
                "vision": dataclasses.asdict(self.vision),
                "text": dataclasses.asdict(self.text),
            },
            "side_net": dataclasses.asdict(self.side_net),
            "fusion": dataclasses.asdict(self.fusion),
            "sampler": dataclasses.asdict(self.sampler),
            "preprocess": dataclasses.asdict(self.preprocess),
            "train": dataclasses.asdict(self.train),
            "peft": dataclasses.asdict(self.peft) if self.peft else None,
        }
        return d

    def load_schema(self) -> AttributeSchema:
        if not self.schema_path:
            raise ConfigError("config has no [schema] path")
        return AttributeSchema.load(self.schema_path)

    def peft_variant(self) -> PeftVariant | None:
        if self.mode in _MODE_TO_KIND:
            return self.peft or PeftVariant(kind=_MODE_TO_KIND[self.mode])
        return None


def build_model(cfg: RunConfig, schema: AttributeSchema) -> AttributeModel:
    """Construct (and optionally PEFT-augment / weight-load) a model per the run config."""
    mode = "side" if cfg.mode == "side" else ("full" if cfg.mode == "full" else "peft")
    model = AttributeModel(
        schema,
        vision_cfg=cfg.vision,
        text_cfg=cfg.text,
        side_cfg=cfg.side_net,
        fusion_cfg=cfg.fusion,
        mode=mode,
        backbone_seed=cfg.backbone_seed,
        trainable_seed=cfg.trainable_seed,
    )
    variant = cfg.peft_variant()
    if variant is not None:
        attach_peft(model, variant, seed=cfg.trainable_seed + 3)
    if cfg.weights_path:
        model.load_backbone_weights(cfg.weights_path)
    return model
