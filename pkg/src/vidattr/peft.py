"""Alternative parameter-efficient tuning strategies on the frozen vision tower.

All variant parameters live in a ``PeftModule`` owned by the model (name
prefix ``peft.``); the frozen tower consults it through hook callbacks, so
backbone tensors are never wrapped or replaced and the freeze contract stays
byte-exact.

* low-rank (lora): a parallel down/up pair next to every linear layer of the
  tower (qkv, attention out, both MLP linears). The up matrix starts at zero,
  so attaching changes nothing until training moves it. Scale is 1 (the
  conventional alpha/rank ratio with alpha = rank).
* adapter: down-project -> SiLU -> up-project residual blocks after the
  attention and MLP sublayers of every layer; up-projection starts at zero.
* prompt-tokens: learnable tokens prepended to every layer's input and
  stripped from its output.

Trainable parameter counts (closed form, per tower of given width/depth):
  lora     depth * 16 * rank * width
  adapter  depth * (4*width*bottleneck + 2*bottleneck + 2*width)
  prompt   depth * prompt_len * width
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import VisionEncoderConfig, seed_module_weights

LORA = "lora"
ADAPTER = "adapter"
PROMPT_TOKENS = "prompt-tokens"

PEFT_KINDS = (LORA, ADAPTER, PROMPT_TOKENS)

_LORA_SITES = {"qkv": 3, "proj": 1, "fc1": 4, "fc2": 1}  # output-width multiple
_LORA_IN = {"qkv": 1, "proj": 1, "fc1": 1, "fc2": 4}  # input-width multiple


@dataclass(frozen=True)
class PeftVariant:
    kind: str
    rank: int = 4
    bottleneck: int = 64
    prompt_len: int = 8

    def __post_init__(self):
        if self.kind not in PEFT_KINDS:
            raise ValueError(f"kind must be one of {PEFT_KINDS}, got {self.kind!r}")
        if min(self.rank, self.bottleneck, self.prompt_len) < 1:
            raise ValueError("rank, bottleneck, and prompt_len must be positive")


class PeftModule(nn.Module):
    def __init__(self, variant: PeftVariant, vision_cfg: VisionEncoderConfig):
        super().__init__()
        self.variant = variant
        w = vision_cfg.width
        if variant.kind == LORA:
            self.down = nn.ModuleList()
            self.up = nn.ModuleList()
            for _ in range(vision_cfg.depth):
                self.down.append(
                    nn.ModuleDict(
                        {s: nn.Linear(_LORA_IN[s] * w, variant.rank, bias=False) for s in _LORA_SITES}
                    )
                )
                self.up.append(
                    nn.ModuleDict(
                        {s: nn.Linear(variant.rank, _LORA_SITES[s] * w, bias=False) for s in _LORA_SITES}
                    )
                )
        elif variant.kind == ADAPTER:
            self.adapt_down = nn.ModuleList()
            self.adapt_up = nn.ModuleList()
            for _ in range(vision_cfg.depth):
                self.adapt_down.append(
                    nn.ModuleDict({s: nn.Linear(w, variant.bottleneck) for s in ("attn", "mlp")})
                )
                self.adapt_up.append(
                    nn.ModuleDict({s: nn.Linear(variant.bottleneck, w) for s in ("attn", "mlp")})
                )
            self.act = nn.SiLU()
        else:
            self.prompts = nn.Parameter(torch.zeros(vision_cfg.depth, variant.prompt_len, w))

    @property
    def n_prompt(self) -> int:
        return self.variant.prompt_len if self.variant.kind == PROMPT_TOKENS else 0

    def zero_init_residual_paths(self) -> None:
        """Zero the output side of every residual branch so attachment is a no-op."""
        with torch.no_grad():
            if self.variant.kind == LORA:
                for layer in self.up:
                    for lin in layer.values():
                        lin.weight.zero_()
            elif self.variant.kind == ADAPTER:
                for layer in self.adapt_up:
                    for lin in layer.values():
                        lin.weight.zero_()
                        lin.bias.zero_()

    # -- hook interface consumed by the vision tower -------------------------

    def lora_delta(self, layer_idx: int, site: str, x: torch.Tensor):
        if self.variant.kind != LORA:
            return None
        return self.up[layer_idx][site](self.down[layer_idx][site](x))

    def after_attn(self, layer_idx: int, x: torch.Tensor) -> torch.Tensor:
        return self._adapt(layer_idx, "attn", x)

    def after_mlp(self, layer_idx: int, x: torch.Tensor) -> torch.Tensor:
        return self._adapt(layer_idx, "mlp", x)

    def _adapt(self, layer_idx: int, site: str, x: torch.Tensor) -> torch.Tensor:
        if self.variant.kind != ADAPTER:
            return x
        return x + self.adapt_up[layer_idx][site](self.act(self.adapt_down[layer_idx][site](x)))

    def prompt_tokens(self, layer_idx: int):
        if self.variant.kind != PROMPT_TOKENS:
            return None
        return self.prompts[layer_idx]


def peft_param_count(variant: PeftVariant, vision_cfg: VisionEncoderConfig) -> int:
    """Closed-form trainable parameter count for a variant (counting oracle)."""
    w, d = vision_cfg.width, vision_cfg.depth
    if variant.kind == LORA:
        return d * 16 * variant.rank * w
    if variant.kind == ADAPTER:
        return d * (4 * w * variant.bottleneck + 2 * variant.bottleneck + 2 * w)
    return d * variant.prompt_len * w


@dataclass
class ComparisonReport:
    """Side-by-side budget and quality figures for tuning strategies."""

    rows: list[dict]

    def to_json_dict(self) -> dict:
        return {"rows": self.rows}

    def format_table(self) -> str:
        header = ("Method", "Precision", "Recall", "F1", "Trainable Params")
        cells = [header]
        for r in self.rows:
            if r.get("error"):
                cells.append((r["method"], "-", "-", "-", f"error: {r['error']}"))
                continue
            cells.append(
                (
                    r["method"],
                    f"{100 * r['precision']:.2f}",
                    f"{100 * r['recall']:.2f}",
                    f"{100 * r['f1']:.2f}",
                    f"{r['trainable_params']:,}",
                )
            )
        widths = [max(len(row[c]) for row in cells) for c in range(5)]
        lines = []
        for i, row in enumerate(cells):
            lines.append(" | ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip())
            if i == 0:
                lines.append("-+-".join("-" * w for w in widths))
        return "\n".join(lines)


def compare_peft(
    run_cfg,
    schema,
    train_batcher,
    eval_batcher=None,
    variants: tuple[str, ...] = ("side", "lora", "adapter", "prompt"),
    steps: int | None = None,
) -> ComparisonReport:
    """Train each tuning strategy under an identical budget and report
    trainable parameters, wall time per step, peak RSS, and final
    precision/recall/F1. A variant that fails is reported, not fatal.
    """
    import dataclasses
    import resource
    import time

    from .config import build_model  # deferred: config imports this module
    from .train import count_parameters, evaluate, train

    rows: list[dict] = []
    for v in variants:
        row: dict = {"method": v}
        try:
            vcfg = dataclasses.replace(run_cfg, mode=v, peft=None, fusion=run_cfg.fusion)
            tcfg = dataclasses.replace(run_cfg.train, steps=steps or run_cfg.train.steps, epochs=None)
            model = build_model(vcfg, schema)
            counts = count_parameters(model)
            row["trainable_params"] = counts.trainable
            row["total_params"] = counts.total
            t0 = time.perf_counter()
            result = train(model, train_batcher, tcfg)
            elapsed = time.perf_counter() - t0
            row["seconds_per_step"] = elapsed / max(result.steps_run, 1)
            row["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
            row["initial_loss"] = result.initial_loss
            row["final_loss"] = result.final_loss
            row["loss_halved"] = bool(result.final_loss <= 0.5 * result.initial_loss)
            metrics = evaluate(model, eval_batcher or train_batcher, schema, tcfg.batch_size)
            row["precision"] = metrics.macro["precision"]
            row["recall"] = metrics.macro["recall"]
            row["f1"] = metrics.macro["f1"]
        except Exception as e:  # a failing variant must not sink the harness
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
    return ComparisonReport(rows)


def attach_peft(model, variant: PeftVariant, seed: int = 0):
    """Attach a PEFT variant to a model built without side networks.

    The backbone must already be frozen; attaching twice is an error. With the
    low-rank and adapter variants the model's outputs are bitwise unchanged at
    attachment (their residual output paths start at zero).
    """
    if getattr(model, "peft", None) is not None:
        raise RuntimeError("a PEFT variant is already attached to this model")
    if getattr(model, "side", None) is not None:
        raise RuntimeError("PEFT variants attach to a model built without side networks (mode 'peft')")
    if any(p.requires_grad for p in model.backbone.parameters()):
        raise RuntimeError("backbone must be frozen before attaching a PEFT variant")
    mod = PeftModule(variant, model.backbone.vision.cfg)
    seed_module_weights(mod, seed)
    mod.zero_init_residual_paths()
    model.peft = mod
    return model
