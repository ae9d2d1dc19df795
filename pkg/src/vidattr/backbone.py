"""Frozen dual-encoder backbone: a vision transformer that exposes per-layer
token features at configurable tap layers, and a text transformer that embeds
one sentence per attribute.

Toy weights (used by every desk-scale test) are fully determined by one
integer seed: parameters are visited in sorted-name order and filled from a
``torch.Generator(seed)`` — tensors with ndim >= 2 i.i.d. normal(0, 0.02),
1-D ``*weight`` tensors (normalization scales) set to 1, everything else set
to 0. Alternate implementations can reproduce the weights from this rule.

Real pretrained weights load from a named-tensor archive (``.npz``: name ->
raw array) whose keys must match this module's state-dict names; see
``load_named_tensors`` and the name-mapping table in the README.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VisionEncoderConfig:
    width: int = 768
    depth: int = 12
    heads: int = 12
    patch: int = 16
    tap_layers: tuple[int, ...] = (0, 3, 6, 9, 11)
    image_size: tuple[int, int] = (224, 224)  # (H, W)

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must divide by heads {self.heads}")
        taps = tuple(self.tap_layers)
        if not taps or list(taps) != sorted(set(taps)):
            raise ValueError("tap_layers must be strictly increasing")
        if taps[0] < 0 or taps[-1] >= self.depth:
            raise ValueError(f"tap_layers must lie in [0, {self.depth})")
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"image size {self.image_size} must divide by patch {self.patch}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch, self.image_size[1] // self.patch)

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return 1 + gh * gw


@dataclass(frozen=True)
class TextEncoderConfig:
    width: int = 512
    depth: int = 12
    heads: int = 8
    context: int = 77
    vocab: int = 49408

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must divide by heads {self.heads}")
        if self.vocab < 258:
            raise ValueError("vocab must hold 256 byte tokens plus start/end markers")


@dataclass
class LayerFeatureSet:
    """Token features recorded after each tap layer: tap index -> (T, N_tok, width).
    Token 0 is the classification token."""

    features: dict[int, torch.Tensor]

    def __getitem__(self, tap: int) -> torch.Tensor:
        return self.features[tap]

    @property
    def tap_layers(self) -> list[int]:
        return list(self.features)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention: softmax(Q K^T / sqrt(d)) V per head,
    Q/K/V projected from the input by one fused linear layer."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, need_attn: bool = False, hooks=None, layer_idx: int = 0):
        b, n, w = x.shape
        qkv = self.qkv(x)
        if hooks is not None:
            delta = hooks.lora_delta(layer_idx, "qkv", x)
            if delta is not None:
                qkv = qkv + delta
        q, k, v = qkv.reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, w)
        proj = self.proj(out)
        if hooks is not None:
            delta = hooks.lora_delta(layer_idx, "proj", out)
            if delta is not None:
                proj = proj + delta
        return proj, (att if need_attn else None)


class Mlp(nn.Module):
    def __init__(self, width: int, hidden_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden_ratio * width)
        self.fc2 = nn.Linear(hidden_ratio * width, width)
        self.act = nn.GELU()

    def forward(self, x, hooks=None, layer_idx: int = 0):
        h = self.fc1(x)
        if hooks is not None:
            delta = hooks.lora_delta(layer_idx, "fc1", x)
            if delta is not None:
                h = h + delta
        h = self.act(h)
        out = self.fc2(h)
        if hooks is not None:
            delta = hooks.lora_delta(layer_idx, "fc2", h)
            if delta is not None:
                out = out + delta
        return out


class TransformerLayer(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)). With both
    sublayers emitting zero the layer is exactly the identity."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = MultiHeadSelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = Mlp(width)

    def forward(self, x, need_attn: bool = False, hooks=None, layer_idx: int = 0):
        a, att = self.attn(self.ln1(x), need_attn, hooks, layer_idx)
        x = x + a
        if hooks is not None:
            x = hooks.after_attn(layer_idx, x)
        x = x + self.mlp(self.ln2(x), hooks, layer_idx)
        if hooks is not None:
            x = hooks.after_mlp(layer_idx, x)
        return x, att


class VisionTransformer(nn.Module):
    """Patchify -> prepend classification token -> add positions -> pre-norm
    transformer stack, recording the token array output by each tap layer."""

    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.width, kernel_size=cfg.patch, stride=cfg.patch)
        self.class_token = nn.Parameter(torch.zeros(1, cfg.width))
        self.pos_embedding = nn.Parameter(torch.zeros(cfg.num_tokens, cfg.width))
        self.layers = nn.ModuleList(TransformerLayer(cfg.width, cfg.heads) for _ in range(cfg.depth))

    def forward(self, frames: torch.Tensor, need_attn: bool = False, hooks=None):
        """frames: (F, 3, H, W) -> (taps {i: (F, N_tok, width)}, attention list or None).

        Frames never mix: each one flows through the stack independently, so
        permuting the frame axis permutes every output identically.
        """
        f, c, h, w = frames.shape
        if (h, w) != self.cfg.image_size or c != 3:
            raise ValueError(f"frames {(c, h, w)} incompatible with configured image size {self.cfg.image_size}")
        x = self.patch_embed(frames).flatten(2).transpose(1, 2)
        x = torch.cat([self.class_token.unsqueeze(0).expand(f, -1, -1), x], dim=1)
        x = x + self.pos_embedding
        taps: dict[int, torch.Tensor] = {}
        attns: list[torch.Tensor] = []
        n_prompt = 0
        for i, layer in enumerate(self.layers):
            if hooks is not None:
                p = hooks.prompt_tokens(i)
                if p is not None:
                    x = torch.cat([p.unsqueeze(0).expand(f, -1, -1), x[:, n_prompt:]], dim=1)
                    n_prompt = p.shape[0]
            x, att = layer(x, need_attn, hooks, i)
            if need_attn:
                attns.append(att)
            if i in self.cfg.tap_layers:
                taps[i] = x[:, n_prompt:]
        ordered = {i: taps[i] for i in self.cfg.tap_layers}
        return LayerFeatureSet(ordered), (attns if need_attn else None)


SOT_OFFSET, EOT_OFFSET = 2, 1  # ids vocab-2 and vocab-1


def tokenize(text: str, context: int, vocab: int) -> list[int]:
    """Byte-level tokenization: lowercase UTF-8 bytes bracketed by start/end
    markers, truncated to the context budget with a logged warning."""
    body = list(text.lower().encode("utf-8"))
    budget = context - 2
    if len(body) > budget:
        logger.warning("prompt %r exceeds the %d-token budget; truncating", text, context)
        body = body[:budget]
    return [vocab - SOT_OFFSET] + body + [vocab - EOT_OFFSET]


class TextTransformer(nn.Module):
    """Byte-token transformer pooled at the end-of-sequence position and
    linearly projected."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab, cfg.width)
        self.pos_embedding = nn.Parameter(torch.zeros(cfg.context, cfg.width))
        self.layers = nn.ModuleList(TransformerLayer(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.pool_proj = nn.Linear(cfg.width, cfg.width, bias=False)

    def encode_one(self, text: str) -> torch.Tensor:
        ids = torch.tensor(tokenize(text, self.cfg.context, self.cfg.vocab), dtype=torch.long)
        x = self.token_embedding(ids).unsqueeze(0) + self.pos_embedding[: ids.shape[0]]
        for i, layer in enumerate(self.layers):
            x, _ = layer(x, layer_idx=i)
        pooled = self.ln_final(x[0, -1])  # final token is the end marker
        return self.pool_proj(pooled)

    def forward(self, sentences: list[str]) -> torch.Tensor:
        """(M sentences) -> (M, width). Sentences are encoded one at a time,
        unpadded, so a batch row is bitwise equal to a single-sentence call."""
        if not sentences:
            raise ValueError("need at least one sentence")
        return torch.stack([self.encode_one(s) for s in sentences])


class DualEncoder(nn.Module):
    """The frozen backbone pair. ``encode_frames`` runs without gradient unless
    an attached tuning method needs backpropagation through the tower."""

    def __init__(self, vision_cfg: VisionEncoderConfig, text_cfg: TextEncoderConfig):
        super().__init__()
        self.vision = VisionTransformer(vision_cfg)
        self.text = TextTransformer(text_cfg)

    def encode_frames(self, frames: torch.Tensor, need_attn: bool = False, hooks=None):
        return self.vision(frames, need_attn=need_attn, hooks=hooks)

    def encode_text(self, sentences: list[str]) -> torch.Tensor:
        with torch.no_grad():
            return self.text(sentences)


# ---------------------------------------------------------------------------
# Deterministic initialization, freezing, and weight import
# ---------------------------------------------------------------------------


def seed_module_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Fill a module's parameters deterministically from one integer seed.

    Normative order: parameters sorted by qualified name. Rule: ndim >= 2 ->
    i.i.d. normal(0, std^2) drawn from ``torch.Generator(seed)``; 1-D tensors
    named ``*weight`` -> 1; everything else -> 0.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2:
                if p.dtype == torch.float32:
                    p.normal_(0.0, std, generator=g)
                else:  # draws stay float32 so the stream is dtype-independent
                    p.copy_(torch.empty(p.shape, dtype=torch.float32).normal_(0.0, std, generator=g).to(p.dtype))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def freeze_module(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def snapshot_parameters(module: nn.Module) -> dict[str, str]:
    """Name -> SHA-256 of the raw parameter bytes, for byte-exact freeze checks."""
    out = {}
    for name, p in module.named_parameters():
        out[name] = hashlib.sha256(p.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
    return out


@dataclass
class FreezeReport:
    passed: bool
    changed: list[str] = field(default_factory=list)
    grad_accumulated: list[str] = field(default_factory=list)
    requires_grad: list[str] = field(default_factory=list)
    checked: int = 0

    def summary(self) -> str:
        if self.passed:
            return f"frozen: all {self.checked} backbone parameters unchanged"
        parts = []
        if self.changed:
            parts.append(f"changed: {self.changed}")
        if self.grad_accumulated:
            parts.append(f"gradient accumulated: {self.grad_accumulated}")
        if self.requires_grad:
            parts.append(f"requires_grad set: {self.requires_grad}")
        return "freeze violation — " + "; ".join(parts)


def assert_frozen(module: nn.Module, snapshot: dict[str, str]) -> FreezeReport:
    """Verify every parameter is byte-identical to its snapshot, carries no
    accumulated gradient, and is not marked trainable. Never raises; the
    report names each offender."""
    report = FreezeReport(passed=True)
    current = dict(module.named_parameters())
    for name, p in current.items():
        report.checked += 1
        digest = hashlib.sha256(p.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
        if snapshot.get(name) != digest:
            report.changed.append(name)
        if p.grad is not None and bool((p.grad != 0).any()):
            report.grad_accumulated.append(name)
        if p.requires_grad:
            report.requires_grad.append(name)
    missing = set(snapshot) - set(current)
    if missing:
        report.changed.extend(sorted(missing))
    report.passed = not (report.changed or report.grad_accumulated or report.requires_grad)
    return report


def save_named_tensors(module: nn.Module, path) -> None:
    """Write the state dict as a named-tensor archive (npz: name -> array)."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    np.savez(path, **arrays)


def load_named_tensors(module: nn.Module, path, name_map: dict[str, str] | None = None) -> None:
    """Load a named-tensor archive into a module.

    ``name_map`` translates archive keys to this module's state-dict names
    (identity when omitted). Shape mismatches and missing keys are errors.
    """
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    if name_map:
        arrays = {name_map.get(k, k): v for k, v in arrays.items()}
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ValueError(f"archive is missing tensors: {sorted(missing)[:5]}{'...' if len(missing) > 5 else ''}")
    converted = {}
    for k, v in arrays.items():
        if k not in state:
            raise ValueError(f"archive tensor {k!r} has no destination in the model")
        if tuple(state[k].shape) != tuple(v.shape):
            raise ValueError(f"tensor {k!r}: archive shape {v.shape} != model shape {tuple(state[k].shape)}")
        converted[k] = torch.from_numpy(np.ascontiguousarray(v)).to(state[k].dtype)
    module.load_state_dict(converted)
