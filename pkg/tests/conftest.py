import pytest
import torch

from vidattr import bundled_schema_path
from vidattr.backbone import TextEncoderConfig, VisionEncoderConfig
from vidattr.data import PreprocessConfig, SamplerConfig, TrackletBatcher, generate_synthetic, load_manifest
from vidattr.fusion import FusionConfig
from vidattr.model import AttributeModel
from vidattr.schema import AttributeSchema
from vidattr.side import SideNetConfig

TOY_VISION = VisionEncoderConfig(width=32, depth=4, heads=2, patch=16, tap_layers=(0, 1, 2, 3), image_size=(32, 32))
TOY_TEXT = TextEncoderConfig(width=32, depth=2, heads=2, context=77, vocab=258)
TOY_SIDE = SideNetConfig(width=16, heads=2, depth=8, fusion_points=(0, 2, 4, 6), max_frames=8)
TOY_FUSION = FusionConfig(layers=1, width=16, heads=2)

# Shallow variant where the frame count can cover every temporal side layer.
TOY_SIDE_D4 = SideNetConfig(width=16, heads=2, depth=4, fusion_points=(0, 1, 2, 3), max_frames=4)

TOY_PRE = PreprocessConfig(height=32, width=32)


@pytest.fixture(scope="session")
def toy_schema() -> AttributeSchema:
    return AttributeSchema.load(bundled_schema_path("synthetic_small"))


@pytest.fixture(scope="session")
def mars_schema() -> AttributeSchema:
    return AttributeSchema.load(bundled_schema_path("mars_reconstructed"))


@pytest.fixture(scope="session")
def duke_schema() -> AttributeSchema:
    return AttributeSchema.load(bundled_schema_path("duke_reconstructed"))


def make_toy_model(schema, mode="side", side_cfg=TOY_SIDE, backbone_seed=0, trainable_seed=1) -> AttributeModel:
    return AttributeModel(
        schema,
        vision_cfg=TOY_VISION,
        text_cfg=TOY_TEXT,
        side_cfg=side_cfg,
        fusion_cfg=TOY_FUSION,
        mode=mode,
        backbone_seed=backbone_seed,
        trainable_seed=trainable_seed,
    )


@pytest.fixture()
def toy_model(toy_schema) -> AttributeModel:
    return make_toy_model(toy_schema)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory, toy_schema):
    """32 synthetic tracklets, seed 7, shared across the suite (read-only)."""
    out = tmp_path_factory.mktemp("synth32")
    generate_synthetic(32, toy_schema, seed=7, out_dir=out)
    return out


@pytest.fixture(scope="session")
def synth_tracklets(synth_dir, toy_schema):
    return load_manifest(synth_dir / "manifest.jsonl", toy_schema)


def make_batcher(tracklets, schema, k=6, seed=1) -> TrackletBatcher:
    return TrackletBatcher(tracklets, schema, SamplerConfig(k=k, seed=seed), TOY_PRE)


def toy_videos(b=2, t=6, size=32, seed=0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, t, 3, size, size, generator=g)
