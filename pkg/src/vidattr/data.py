"""Tracklet ingestion, frame sampling, preprocessing, and synthetic data generation.

A manifest is line-delimited JSON, one tracklet per line:

    {"id": "...", "split": "train", "frames": ["frames/x/f00.png", ...],
     "labels": [0, 1, ...]}                      # -1 marks an unknown entry
or
    {"id": "...", "split": "test", "frames": [...],
     "group_values": {"top color": "red", "hat": true, "motion": null}}

Frame paths are resolved relative to the manifest's directory. Missing image
files are reported lazily, when the frame is actually read.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .schema import AttributeSchema, LabelVector, SchemaError, MULTI_CLASS

UNIFORM_RANDOM = "uniform-random"
EVENLY_SPACED = "evenly-spaced"

TRAIN = "train"
TEST = "test"

# Normalization constants matching the common pretrained dual-encoder release;
# the toy backbone uses plain 0.5/0.5.
PRETRAINED_MEAN = (0.48145466, 0.4578275, 0.40821073)
PRETRAINED_STD = (0.26862954, 0.26130258, 0.27577711)


class DataError(ValueError):
    """Manifest, frame file, or sampler configuration problem."""


@dataclass(frozen=True)
class PreprocessConfig:
    """Resize target and per-channel normalization. Output dims must stay
    divisible by 16 so token grids line up with a stock 16-pixel patch."""

    height: int = 224
    width: int = 224
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise DataError(f"resize dims ({self.height}, {self.width}) must be divisible by 16")
        if any(s <= 0 for s in self.std):
            raise DataError("std entries must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 6
    policy: str = UNIFORM_RANDOM
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise DataError("frames per sample must be >= 1")
        if self.policy not in (UNIFORM_RANDOM, EVENLY_SPACED):
            raise DataError(f"unknown sampling policy {self.policy!r}")


@dataclass
class Tracklet:
    id: str
    frame_paths: list[Path]
    label: LabelVector
    split: str

    def __post_init__(self):
        if not self.frame_paths:
            raise DataError(f"tracklet {self.id!r}: frame list is empty")
        if self.split not in (TRAIN, TEST):
            raise DataError(f"tracklet {self.id!r}: unknown split tag {self.split!r}")


@dataclass
class VideoTensor:
    """Preprocessed frame stack (T, H, W, C) float32 plus the source indices."""

    data: np.ndarray
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise DataError(f"video tensor must be (T, H, W, 3), got {self.data.shape}")

    def to_torch(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.data.transpose(0, 3, 1, 2)))


def _id_hash(tracklet_id: str) -> int:
    return int.from_bytes(hashlib.sha256(tracklet_id.encode("utf-8")).digest()[:8], "little")


def epoch_seed(base_seed: int, epoch: int) -> int:
    """Derived sampler seed for per-epoch frame resampling."""
    return int(np.random.SeedSequence([int(base_seed), int(epoch)]).generate_state(1)[0])


def choose_frame_indices(n_frames: int, cfg: SamplerConfig, tracklet_id: str) -> np.ndarray:
    """Ascending frame indices for one tracklet.

    Uniform-random draws k distinct indices when the tracklet is long enough,
    otherwise k draws with replacement; both sorted so temporal order is
    preserved. Deterministic for a given (seed, tracklet id).
    """
    if n_frames < 1:
        raise DataError("tracklet has no frames")
    if cfg.policy == EVENLY_SPACED:
        idx = np.rint(np.linspace(0, n_frames - 1, cfg.k)).astype(np.int64)
        return idx
    rng = np.random.default_rng([cfg.seed, _id_hash(tracklet_id)])
    if n_frames >= cfg.k:
        idx = rng.choice(n_frames, size=cfg.k, replace=False)
    else:
        idx = rng.integers(0, n_frames, size=cfg.k)
    return np.sort(idx).astype(np.int64)


def load_frame(path: Path, pre: PreprocessConfig) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((pre.width, pre.height), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read frame {path}: {e}") from None
    mean = np.asarray(pre.mean, dtype=np.float32)
    std = np.asarray(pre.std, dtype=np.float32)
    return (arr - mean) / std


def sample_frames(
    tracklet: Tracklet,
    cfg: SamplerConfig,
    pre: PreprocessConfig = PreprocessConfig(),
) -> VideoTensor:
    """Sample k frames from a tracklet, ascending in time, and preprocess them."""
    indices = choose_frame_indices(len(tracklet.frame_paths), cfg, tracklet.id)
    frames = np.stack([load_frame(tracklet.frame_paths[i], pre) for i in indices])
    return VideoTensor(frames, tuple(int(i) for i in indices))


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _label_from_group_values(values: dict, schema: AttributeSchema, tid: str) -> LabelVector:
    m = schema.num_attributes
    y = np.zeros(m, dtype=np.int8)
    known = np.zeros(m, dtype=bool)
    for g in schema.groups:
        if g.name not in values:
            raise DataError(f"tracklet {tid!r}: group_values missing group {g.name!r}")
        v = values[g.name]
        sl = schema.group_slice(g.name)
        if v is None:
            continue
        known[sl] = True
        if g.kind == MULTI_CLASS:
            if v not in g.classes:
                raise DataError(f"tracklet {tid!r}: {v!r} is not a class of group {g.name!r}")
            y[sl.start + g.classes.index(v)] = 1
        else:
            y[sl.start] = 1 if v in (True, 1, "1", "true") else 0
    extra = set(values) - {g.name for g in schema.groups}
    if extra:
        raise DataError(f"tracklet {tid!r}: group_values names unknown groups {sorted(extra)}")
    return LabelVector(y, known)


def _label_from_flat(raw: Sequence, schema: AttributeSchema, tid: str) -> LabelVector:
    arr = np.asarray(raw, dtype=np.int64)
    if arr.shape != (schema.num_attributes,):
        raise DataError(
            f"tracklet {tid!r}: label length {arr.shape[0] if arr.ndim == 1 else arr.shape} "
            f"does not match schema M={schema.num_attributes}"
        )
    known = arr != -1
    y = np.where(known, arr, 0).astype(np.int8)
    return LabelVector(y, known)


def load_manifest(path: str | Path, schema: AttributeSchema) -> list[Tracklet]:
    """Read and validate a JSONL manifest; order is preserved from the file."""
    path = Path(path)
    base = path.parent
    tracklets: list[Tracklet] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e})") from None
            tid = rec.get("id")
            if not tid:
                raise DataError(f"{path}:{lineno}: record has no id")
            if "labels" in rec:
                label = _label_from_flat(rec["labels"], schema, tid)
            elif "group_values" in rec:
                label = _label_from_group_values(rec["group_values"], schema, tid)
            else:
                raise DataError(f"tracklet {tid!r}: needs 'labels' or 'group_values'")
            try:
                label.validate(schema)
            except SchemaError as e:
                raise DataError(f"tracklet {tid!r}: {e}") from None
            frames = [base / p for p in rec.get("frames", [])]
            tracklets.append(Tracklet(tid, frames, label, rec.get("split", "")))
    return tracklets


def write_manifest(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic tracklets
# ---------------------------------------------------------------------------

COLOR_MAP = {
    "red": (200, 30, 30),
    "blue": (40, 60, 200),
    "green": (40, 160, 60),
    "yellow": (230, 210, 50),
    "black": (25, 25, 25),
    "white": (245, 245, 245),
    "gray": (128, 128, 128),
    "purple": (140, 50, 170),
    "pink": (240, 130, 180),
    "brown": (130, 85, 40),
}

_MOTION_DX = {"left": -1, "right": 1, "still": 0}
_ACCESSORIES = {"hat": (250, 220, 40), "bag": (200, 40, 160), "backpack": (30, 180, 190)}

_CANVAS_W, _CANVAS_H = 32, 64
_SKIN = (224, 172, 138)


def _check_renderable(schema: AttributeSchema) -> None:
    for g in schema.groups:
        if g.kind == MULTI_CLASS:
            if g.name in ("top color", "bottom color"):
                bad = [c for c in g.classes if c not in COLOR_MAP]
                if bad:
                    raise DataError(f"synthetic renderer has no color for {bad} in group {g.name!r}")
            elif g.name == "motion":
                bad = [c for c in g.classes if c not in _MOTION_DX]
                if bad:
                    raise DataError(f"synthetic renderer supports motions {sorted(_MOTION_DX)}, not {bad}")
            else:
                raise DataError(
                    f"synthetic renderer does not support multi-class group {g.name!r} "
                    "(supported: 'top color', 'bottom color', 'motion')"
                )
        elif g.name not in _ACCESSORIES:
            raise DataError(
                f"synthetic renderer does not support binary group {g.name!r} "
                f"(supported: {sorted(_ACCESSORIES)})"
            )


def _render_frame(xc: int, top_rgb, bottom_rgb, accessories: dict[str, bool], bg: int) -> Image.Image:
    img = Image.new("RGB", (_CANVAS_W, _CANVAS_H), (bg, bg, bg))
    d = ImageDraw.Draw(img)
    d.ellipse([xc - 4, 6, xc + 4, 15], fill=_SKIN)  # head
    d.rectangle([xc - 6, 16, xc + 6, 36], fill=top_rgb)  # torso
    d.rectangle([xc - 4, 37, xc + 4, 54], fill=bottom_rgb)  # legs
    if accessories.get("hat"):
        d.rectangle([xc - 5, 2, xc + 5, 7], fill=_ACCESSORIES["hat"])
    if accessories.get("bag"):
        d.rectangle([xc + 7, 28, xc + 11, 38], fill=_ACCESSORIES["bag"])
    if accessories.get("backpack"):
        d.rectangle([xc - 11, 18, xc - 7, 32], fill=_ACCESSORIES["backpack"])
    return img


def expected_positive_ratios(schema: AttributeSchema, binary_rates: dict[str, float] | None = None) -> np.ndarray:
    """Generator-configured Bernoulli rates per binary attribute (multi-class
    classes are drawn uniformly)."""
    rates = dict(binary_rates or {})
    out = np.zeros(schema.num_attributes)
    for g in schema.groups:
        sl = schema.group_slice(g.name)
        if g.kind == MULTI_CLASS:
            out[sl] = 1.0 / len(g.classes)
        else:
            out[sl] = rates.get(g.name, 0.5)
    return out


def generate_synthetic(
    num_tracklets: int,
    schema: AttributeSchema,
    seed: int,
    out_dir: str | Path,
    test_fraction: float = 0.0,
    binary_rates: dict[str, float] | None = None,
) -> Path:
    """Render a desk-scale dataset of simple pedestrian figures.

    Every binary attribute is a deterministic function of render parameters
    (torso/leg colors, accessory blobs, horizontal drift direction), so labels
    are exact by construction. Regeneration with the same seed is
    byte-identical. Returns the manifest path.
    """
    if num_tracklets < 1:
        raise DataError("num_tracklets must be >= 1")
    _check_renderable(schema)
    out_dir = Path(out_dir)
    frames_root = out_dir / "frames"
    frames_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rates = dict(binary_rates or {})
    n_train = num_tracklets - int(round(num_tracklets * test_fraction))
    records: list[dict] = []
    for i in range(num_tracklets):
        tid = f"synth{i:04d}"
        y = np.zeros(schema.num_attributes, dtype=np.int64)
        top_rgb, bottom_rgb, dx = COLOR_MAP["gray"], COLOR_MAP["black"], 0
        accessories: dict[str, bool] = {}
        for g in schema.groups:
            sl = schema.group_slice(g.name)
            if g.kind == MULTI_CLASS:
                ci = int(rng.integers(0, len(g.classes)))
                y[sl.start + ci] = 1
                cls = g.classes[ci]
                if g.name == "top color":
                    top_rgb = COLOR_MAP[cls]
                elif g.name == "bottom color":
                    bottom_rgb = COLOR_MAP[cls]
                else:
                    dx = _MOTION_DX[cls]
            else:
                on = bool(rng.random() < rates.get(g.name, 0.5))
                accessories[g.name] = on
                y[sl.start] = int(on)
        n_frames = int(rng.integers(4, 13))
        bg = int(rng.integers(215, 245))
        x0 = int(np.clip(_CANVAS_W // 2 - dx * (n_frames - 1) // 2, 12, _CANVAS_W - 12))
        tdir = frames_root / tid
        tdir.mkdir(exist_ok=True)
        paths = []
        for t in range(n_frames):
            xc = int(np.clip(x0 + dx * t, 12, _CANVAS_W - 12))
            img = _render_frame(xc, top_rgb, bottom_rgb, accessories, bg)
            p = tdir / f"f{t:02d}.png"
            img.save(p)
            paths.append(str(p.relative_to(out_dir)))
        records.append(
            {
                "id": tid,
                "split": TRAIN if i < n_train else TEST,
                "frames": paths,
                "labels": [int(v) for v in y],
            }
        )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


# ---------------------------------------------------------------------------
# Batching for the trainer
# ---------------------------------------------------------------------------


class TrackletBatcher:
    """Assembles (videos, labels, known) torch batches from a tracklet list.

    Frame sampling is stateless: the random stream is derived per call from
    (sampler seed, epoch, tracklet id), so concurrent readers never share
    mutable state and re-batching is bit-identical.
    """

    def __init__(
        self,
        tracklets: Sequence[Tracklet],
        schema: AttributeSchema,
        sampler: SamplerConfig,
        pre: PreprocessConfig,
    ):
        if not tracklets:
            raise DataError("batcher needs at least one tracklet")
        self.tracklets = list(tracklets)
        self.schema = schema
        self.sampler = sampler
        self.pre = pre

    def __len__(self) -> int:
        return len(self.tracklets)

    def batch(self, indices: Sequence[int], epoch: int = 0):
        cfg = replace(self.sampler, seed=epoch_seed(self.sampler.seed, epoch))
        vids, labels, known, ids = [], [], [], []
        for i in indices:
            t = self.tracklets[i]
            vids.append(sample_frames(t, cfg, self.pre).to_torch())
            labels.append(torch.from_numpy(t.label.values.astype(np.float32)))
            known.append(torch.from_numpy(t.label.known))
            ids.append(t.id)
        return torch.stack(vids), torch.stack(labels), torch.stack(known), ids

    def epoch_batches(self, batch_size: int, epoch: int, shuffle_seed: int | None):
        """Index batches for one epoch, shuffled: deterministically when a seed
        is given, from fresh entropy otherwise."""
        order = np.arange(len(self.tracklets))
        rng = np.random.default_rng() if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch])
        rng.shuffle(order)
        for s in range(0, len(order), batch_size):
            yield order[s : s + batch_size].tolist()
