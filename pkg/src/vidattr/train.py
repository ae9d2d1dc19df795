"""Training loop with freeze contract, parameter accounting, checkpointing,
and deterministic-mode control.

Checkpoints are a named-tensor archive (``<prefix>.npz``: state-dict name ->
raw array, including batch-norm running statistics and the torch RNG state
under ``__rng_torch__``) plus a JSON metadata document (``<prefix>.meta.json``)
carrying every config block, the schema, its hash, and the step counter — a
checkpoint is self-contained for evaluation and explanation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import TextEncoderConfig, VisionEncoderConfig
from .data import TrackletBatcher
from .fusion import FusionConfig
from .model import AttributeModel
from .objective import LossConfig, MetricsReport, compute_metrics, weighted_bce_loss
from .peft import PeftVariant, attach_peft
from .schema import AttributeSchema, compute_positive_ratios
from .side import SideNetConfig


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 16
    steps: int = 200
    epochs: int | None = None  # when set, overrides steps
    seed: int = 0
    deterministic: bool = True
    frames_per_sample: int = 6
    eval_every: int = 0  # 0 = evaluate only at the end (if eval data is given)
    eval_seed: int = 9001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    resample_each_epoch: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ParamReport:
    total: int
    trainable: int
    by_prefix: dict[str, dict[str, int]]

    def format_table(self) -> str:
        rows = [("Component", "Total", "Trainable")]
        for prefix in sorted(self.by_prefix):
            c = self.by_prefix[prefix]
            rows.append((prefix, f"{c['total']:,}", f"{c['trainable']:,}"))
        rows.append(("all", f"{self.total:,}", f"{self.trainable:,}"))
        widths = [max(len(r[c]) for r in rows) for c in range(3)]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(r)).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def count_parameters(model: torch.nn.Module) -> ParamReport:
    """Exact integer counts from the parameter registry, broken down by the
    top-level name prefix (backbone./side./fusion./head./peft.)."""
    by_prefix: dict[str, dict[str, int]] = {}
    total = trainable = 0
    for name, p in model.named_parameters():
        prefix = name.split(".", 1)[0]
        slot = by_prefix.setdefault(prefix, {"total": 0, "trainable": 0})
        n = p.numel()
        slot["total"] += n
        total += n
        if p.requires_grad:
            slot["trainable"] += n
            trainable += n
    return ParamReport(total, trainable, by_prefix)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_ids: list[str], grad_norms: dict[str, float]):
        self.step = step
        self.batch_ids = batch_ids
        self.grad_norms = grad_norms
        super().__init__(
            f"non-finite loss at step {step}; last batch {batch_ids}; grad norms {grad_norms}"
        )


@dataclass
class TrainResult:
    log: list[dict]
    checkpoint: Path | None
    initial_loss: float
    final_loss: float
    steps_run: int
    final_metrics: MetricsReport | None = None


def _grad_norms_by_prefix(model: torch.nn.Module) -> dict[str, float]:
    acc: dict[str, float] = {}
    for name, p in model.named_parameters():
        if p.grad is not None:
            prefix = name.split(".", 1)[0]
            acc[prefix] = acc.get(prefix, 0.0) + float(p.grad.pow(2).sum())
    return {k: math.sqrt(v) for k, v in acc.items()}


def loss_config_for(schema: AttributeSchema, batcher: TrackletBatcher) -> LossConfig:
    """Ratios from the schema when present, otherwise computed from the
    training collection."""
    if schema.positive_ratios is not None:
        return LossConfig(schema.positive_ratios)
    ratios = compute_positive_ratios([t.label for t in batcher.tracklets])
    return LossConfig(ratios)


def train(
    model: AttributeModel,
    batcher: TrackletBatcher,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    loss_cfg: LossConfig | None = None,
    eval_batcher: TrackletBatcher | None = None,
    checkpoint_meta: dict | None = None,
) -> TrainResult:
    """Minibatch gradient steps on the weighted loss over trainable parameters
    only. The freeze contract is asserted at every epoch boundary and at the
    end; a non-finite loss aborts with diagnostics.
    """
    if cfg.deterministic:
        torch.manual_seed(cfg.seed)
    loss_cfg = loss_cfg or loss_config_for(batcher.schema, batcher)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)

    steps_per_epoch = max(1, math.ceil(len(batcher) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch if cfg.epochs else cfg.steps
    shuffle_seed = cfg.seed if cfg.deterministic else None

    log: list[dict] = []
    out_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / "log.jsonl"
        out_path.write_text("")

    def emit(rec: dict):
        log.append(rec)
        if out_path is not None:
            with open(out_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def check_freeze(step: int):
        if model.mode == "full":
            return
        report = model.check_frozen()
        if not report.passed:
            raise RuntimeError(f"freeze contract violated at step {step}: {report.summary()}")

    model.train()
    step = 0
    batch_iter = None
    epoch = -1
    initial_loss = final_loss = float("nan")
    last_ids: list[str] = []
    while step < total_steps:
        if batch_iter is None:
            epoch += 1
            if epoch > 0:
                check_freeze(step)
            sample_epoch = epoch if cfg.resample_each_epoch else 0
            batch_iter = iter(list(batcher.epoch_batches(cfg.batch_size, epoch, shuffle_seed)))
        try:
            indices = next(batch_iter)
        except StopIteration:
            batch_iter = None
            continue
        if len(indices) == 1 and cfg.batch_size > 1:
            continue  # trailing remainder: train-mode batch norm needs more than one instance
        videos, labels, known, last_ids = batcher.batch(indices, epoch=sample_epoch)
        pred = model(videos)
        loss = weighted_bce_loss(pred.probabilities, labels, loss_cfg, known_mask=known)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step + 1, last_ids, _grad_norms_by_prefix(model))
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        step += 1
        rec = {"step": step, "loss": float(loss.detach()), "lr": cfg.lr}
        if step == 1:
            initial_loss = rec["loss"]
        final_loss = rec["loss"]
        if cfg.eval_every and eval_batcher is not None and step % cfg.eval_every == 0:
            metrics = evaluate(model, eval_batcher, batcher.schema, cfg.batch_size)
            rec["eval"] = metrics.macro
            model.train()
        emit(rec)

    check_freeze(step)
    final_metrics = None
    if eval_batcher is not None:
        final_metrics = evaluate(model, eval_batcher, batcher.schema, cfg.batch_size)

    ckpt = None
    if out_dir is not None:
        meta = dict(checkpoint_meta or {})
        meta.update({"step": step, "train_cfg": asdict(cfg)})
        ckpt = save_checkpoint(model, Path(out_dir) / "ckpt", meta)
    return TrainResult(log, ckpt, initial_loss, final_loss, step, final_metrics)


def evaluate(
    model: AttributeModel,
    batcher: TrackletBatcher,
    schema: AttributeSchema,
    batch_size: int = 16,
    threshold: float = 0.5,
) -> MetricsReport:
    """Eval-mode forward over a tracklet collection with the batcher's frame
    seed; instance order does not affect the report."""
    model.eval()
    probs, labels, known = [], [], []
    with torch.no_grad():
        for start in range(0, len(batcher), batch_size):
            idx = list(range(start, min(start + batch_size, len(batcher))))
            videos, y, k, _ = batcher.batch(idx, epoch=0)
            pred = model(videos)
            probs.append(pred.probabilities.cpu().numpy())
            labels.append(y.cpu().numpy())
            known.append(k.cpu().numpy())
    return compute_metrics(
        np.concatenate(probs), np.concatenate(labels), schema, threshold, np.concatenate(known)
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_RNG_KEY = "__rng_torch__"


def schema_hash(schema: AttributeSchema) -> str:
    return hashlib.sha256(schema.canonical_json().encode("utf-8")).hexdigest()


def checkpoint_meta_for(model: AttributeModel, peft_variant: PeftVariant | None = None) -> dict:
    return {
        "schema": model.schema.to_json_dict(),
        "schema_hash": schema_hash(model.schema),
        "mode": model.mode,
        "vision_cfg": asdict(model.vision_cfg),
        "text_cfg": asdict(model.text_cfg),
        "side_cfg": asdict(model.side_cfg),
        "fusion_cfg": asdict(model.fusion_cfg),
        "peft": asdict(peft_variant) if peft_variant is not None else None,
    }


def save_checkpoint(model: AttributeModel, prefix: str | Path, meta: dict) -> Path:
    prefix = Path(prefix)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[_RNG_KEY] = torch.get_rng_state().numpy()
    np.savez(str(prefix) + ".npz", **arrays)
    full = dict(meta)
    full.setdefault("format", "vidattr-checkpoint-v1")
    with open(str(prefix) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(full, f, indent=2, sort_keys=True)
        f.write("\n")
    return prefix


def load_checkpoint(prefix: str | Path) -> tuple[AttributeModel, dict]:
    """Rebuild the model from checkpoint metadata and load its tensors."""
    prefix = Path(prefix)
    with open(str(prefix) + ".meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    schema = AttributeSchema.from_json_dict(meta["schema"])
    vision = VisionEncoderConfig(
        **{**meta["vision_cfg"], "tap_layers": tuple(meta["vision_cfg"]["tap_layers"]),
           "image_size": tuple(meta["vision_cfg"]["image_size"])}
    )
    text = TextEncoderConfig(**meta["text_cfg"])
    side = SideNetConfig(**{**meta["side_cfg"], "fusion_points": tuple(meta["side_cfg"]["fusion_points"])})
    fusion = FusionConfig(**meta["fusion_cfg"])
    model = AttributeModel(schema, vision, text, side, fusion, mode=meta["mode"])
    if meta.get("peft"):
        attach_peft(model, PeftVariant(**meta["peft"]))
    with np.load(str(prefix) + ".npz") as z:
        state = {k: torch.from_numpy(z[k]) for k in z.files if k != _RNG_KEY}
        if _RNG_KEY in z.files:
            torch.set_rng_state(torch.from_numpy(z[_RNG_KEY]))
    model.load_state_dict(state)
    model._text_cached = True  # the archive carries the filled text buffer
    model.resnapshot_backbone()
    return model, meta
