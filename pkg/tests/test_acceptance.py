"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with:  pytest tests/test_acceptance.py -v -s

Criterion 4's loss-decay clause is expected to fail: with batch normalization
as the last transform before the sigmoid, the output logit scale is carried
entirely by the per-attribute BN affine parameters, and an adaptive-moment
optimizer at lr 0.001 moves each coordinate by at most ~lr per step — after
200 steps the scale reaches ~1.2, flooring the per-element cross entropy near
0.22 (~35-40% of its starting value, not <10%). The assertion is kept faithful
rather than loosened; classification quality (macro F1) does reach 1.0.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from vidattr import bundled_schema_path
from vidattr.backbone import TextEncoderConfig, VisionEncoderConfig, VisionTransformer, seed_module_weights
from vidattr.cli import dispatch
from vidattr.data import PreprocessConfig, SamplerConfig, TrackletBatcher, generate_synthetic, load_manifest
from vidattr.fusion import FusionConfig, attention_rollout, rollout_from_attentions
from vidattr.model import AttributeModel
from vidattr.objective import LossConfig, compute_metrics, imbalance_weights, weighted_bce_loss
from vidattr.peft import PeftVariant, attach_peft
from vidattr.schema import AttributeGroup, AttributeSchema
from vidattr.side import BranchAggregator, SideNetConfig, SpatioTemporalSide
from vidattr.train import TrainConfig, count_parameters, evaluate, train

from conftest import TOY_PRE, TOY_SIDE_D4, make_batcher, make_toy_model


@contextmanager
def criterion(n: int, desc: str):
    t0 = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"FAIL criterion {n}: {desc} ({time.monotonic() - t0:.1f}s)")
        raise
    print(f"PASS criterion {n}: {desc} ({time.monotonic() - t0:.1f}s)")


def _train_quick(schema, tracklets, steps, batch=16, frames=6, seed=0):
    model = make_toy_model(schema)
    batcher = make_batcher(tracklets, schema, k=frames, seed=1)
    cfg = TrainConfig(lr=1e-3, batch_size=batch, steps=steps, seed=seed, frames_per_sample=frames)
    result = train(model, batcher, cfg)
    return model, result


def test_criterion_1_report_layout(toy_schema, synth_tracklets):
    with criterion(1, "full-scale results not reproduced; report tables mirror the published layout"):
        model, _ = _train_quick(toy_schema, synth_tracklets[:8], steps=2, batch=8)
        report = evaluate(model, make_batcher(synth_tracklets[:8], toy_schema, seed=9), toy_schema)
        table = report.format_table()
        lines = table.splitlines()
        assert lines[0].split("|")[0].strip() == "Attribute"
        assert [c.strip() for c in lines[0].split("|")] == ["Attribute", "Acc", "F1"]
        assert any(l.startswith("Average") for l in lines)
        assert all(k in table for k in ("Accuracy", "Precision", "Recall", "F1"))
        # comparison harness table mirrors the strategy-comparison layout
        from vidattr.peft import ComparisonReport

        hdr = ComparisonReport([]).format_table().splitlines()[0]
        assert [c.strip() for c in hdr.split("|")] == ["Method", "Precision", "Recall", "F1", "Trainable Params"]


def test_criterion_2_freeze_contract(toy_schema, synth_tracklets):
    with criterion(2, "zero backbone parameters change over 50 steps (byte-compared)"):
        t0 = time.monotonic()
        model, _ = _train_quick(toy_schema, synth_tracklets, steps=50)
        report = model.check_frozen()
        assert report.passed, report.summary()
        assert report.checked > 0
        assert time.monotonic() - t0 < 60.0


def test_criterion_3_gradient_liveness(toy_schema, synth_tracklets):
    with criterion(3, ">=99% of side/adapter/fusion/head parameter arrays get nonzero gradients"):
        t0 = time.monotonic()
        model = make_toy_model(toy_schema, side_cfg=TOY_SIDE_D4)
        batcher = make_batcher(synth_tracklets, toy_schema, k=4, seed=1)
        cfg = TrainConfig(lr=1e-3, batch_size=16, steps=1, seed=0, frames_per_sample=4)
        videos, labels, known, _ = batcher.batch(list(range(16)), epoch=0)
        model.train()
        pred = model(videos)
        loss = weighted_bce_loss(pred.probabilities, labels,
                                 LossConfig(np.full(toy_schema.num_attributes, 0.5)), known)
        loss.backward()
        arrays = [(n, p) for n, p in model.named_parameters()
                  if n.split(".", 1)[0] in ("side", "fusion", "head")]
        assert arrays
        live = [n for n, p in arrays if p.grad is not None and bool((p.grad != 0).any())]
        frac = len(live) / len(arrays)
        assert frac >= 0.99, f"only {frac:.1%} of {len(arrays)} arrays carry gradient"
        assert time.monotonic() - t0 < 10.0


def test_criterion_4_overfit_smoke(toy_schema, synth_tracklets):
    with criterion(4, "32 tracklets, 8 attributes, 200 steps @ lr 0.001: macro F1 >= 0.95 and loss < 10% of initial"):
        t0 = time.monotonic()
        model, result = _train_quick(toy_schema, synth_tracklets, steps=200, batch=16)
        report = evaluate(model, make_batcher(synth_tracklets, toy_schema, seed=9001), toy_schema)
        elapsed = time.monotonic() - t0
        assert elapsed < 300.0
        assert model.check_frozen().passed  # snapshot-hash comparison after 200 steps
        assert report.macro["f1"] >= 0.95, f"macro F1 {report.macro['f1']:.3f}"
        ratio = result.final_loss / result.initial_loss
        assert result.final_loss < 0.1 * result.initial_loss, (
            f"loss decayed to {100 * ratio:.1f}% of initial "
            f"({result.initial_loss:.4f} -> {result.final_loss:.4f}); "
            "the <10% bound is unreachable at lr 0.001 in 200 steps with batch-normalized logits"
        )


def test_criterion_5_loss_correctness():
    with criterion(5, "weighted loss matches a scalar reference on 100 random triples (rel < 1e-10)"):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            n, m = int(rng.integers(1, 7)), int(rng.integers(1, 6))
            p = rng.uniform(1e-4, 1 - 1e-4, size=(n, m))
            y = rng.integers(0, 2, size=(n, m))
            r = rng.uniform(0, 1, size=m)
            got = float(
                weighted_bce_loss(
                    torch.tensor(p, dtype=torch.float64),
                    torch.tensor(y, dtype=torch.float64),
                    LossConfig(r),
                )
            )
            ref = 0.0
            for i in range(n):
                for j in range(m):
                    w = math.exp(1 - r[j]) if y[i, j] == 1 else math.exp(r[j])
                    pc = min(max(p[i, j], 1e-7), 1 - 1e-7)
                    ref += w * (y[i, j] * math.log(pc) + (1 - y[i, j]) * math.log(1 - pc))
            ref = -ref / (n * m)
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
        assert worst < 1e-10, f"worst relative error {worst:.2e}"
        r_half = torch.tensor([0.5], dtype=torch.float64)
        w_pos = imbalance_weights(r_half, torch.tensor([[1.0]], dtype=torch.float64))
        w_neg = imbalance_weights(r_half, torch.tensor([[0.0]], dtype=torch.float64))
        assert float(w_pos) == float(w_neg)


def test_criterion_6_metric_oracle():
    with criterion(6, "metrics equal brute-force confusion counting on 200x10 random matrices"):
        schema = AttributeSchema([AttributeGroup(f"g{j}", "binary") for j in range(10)])
        rng = np.random.default_rng(11)
        probs = rng.uniform(0, 1, size=(200, 10))
        labels = rng.integers(0, 2, size=(200, 10))
        rep = compute_metrics(probs, labels, schema)
        for j in range(10):
            tp = tn = fp = fn = 0
            for i in range(200):
                pred = probs[i, j] > 0.5
                pos = labels[i, j] == 1
                tp += pred and pos
                tn += (not pred) and (not pos)
                fp += pred and not pos
                fn += (not pred) and pos
            a = rep.per_attribute[j]
            assert (a.tp, a.tn, a.fp, a.fn) == (tp, tn, fp, fn)
            acc = (tp + tn) / 200
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            assert abs(a.accuracy - acc) <= 1e-12
            assert abs(a.precision - prec) <= 1e-12
            assert abs(a.recall - rec) <= 1e-12
            assert abs(a.f1 - f1) <= 1e-12


def _fd_max_rel_err(model, videos, labels, loss_cfg, param_tensors, coords_per_tensor=4, h=1e-6):
    def loss_value():
        with torch.no_grad():
            pred = model(videos)
            return float(weighted_bce_loss(pred.probabilities, labels, loss_cfg))

    model.zero_grad(set_to_none=True)
    pred = model(videos)
    loss = weighted_bce_loss(pred.probabilities, labels, loss_cfg)
    loss.backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in param_tensors:
        assert p.grad is not None, name
        flat = p.detach().reshape(-1)
        gflat = p.grad.reshape(-1)
        idxs = rng.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()), replace=False)
        for i in idxs:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
            up = loss_value()
            with torch.no_grad():
                flat[i] = orig - h
            down = loss_value()
            with torch.no_grad():
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(gflat[i])
            denom = max(abs(an), abs(fd), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def test_criterion_7_gradient_checks():
    with criterion(7, "analytic gradients match double-precision central differences (rel < 1e-4)"):
        t0 = time.monotonic()
        schema = AttributeSchema(
            [AttributeGroup("color", "multi-class", ("red", "blue")), AttributeGroup("hat", "binary")]
        )
        model = AttributeModel(
            schema,
            vision_cfg=VisionEncoderConfig(width=8, depth=2, heads=2, patch=16,
                                           tap_layers=(0, 1), image_size=(32, 32)),
            text_cfg=TextEncoderConfig(width=8, depth=1, heads=2, vocab=258),
            side_cfg=SideNetConfig(width=8, heads=2, depth=2, fusion_points=(0, 1), max_frames=2),
            fusion_cfg=FusionConfig(layers=1, width=8, heads=2),
            mode="side",
        ).double()
        model.train()
        g = torch.Generator().manual_seed(5)
        videos = torch.randn(3, 2, 3, 32, 32, generator=g, dtype=torch.float64)
        labels = torch.tensor([[1, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=torch.float64)
        loss_cfg = LossConfig(np.array([0.4, 0.6, 0.3]))
        targets = [
            ("side.spatial.adapters.0.proj.weight", model.side.spatial.adapters[0].proj.weight),
            ("side.spatial.adapters.1.proj.weight", model.side.spatial.adapters[1].proj.weight),
            ("side.temporal.adapters.0.proj.weight", model.side.temporal.adapters[0].proj.weight),
            ("side.temporal.adapters.1.proj.weight", model.side.temporal.adapters[1].proj.weight),
            ("fusion.vis_proj.weight", model.fusion.vis_proj.weight),
            ("fusion.text_proj.weight", model.fusion.text_proj.weight),
            ("fusion.blocks.0.attn.qkv.weight", model.fusion.blocks[0].attn.qkv.weight),
            ("fusion.blocks.0.mlp.fc1.weight", model.fusion.blocks[0].mlp.fc1.weight),
            ("head.dense.0.weight", model.head.dense[0].weight),
            ("head.bn.weight", model.head.bn.weight),
        ]
        worst = _fd_max_rel_err(model, videos, labels, loss_cfg, targets)
        assert worst < 1e-4, f"max relative error {worst:.2e}"
        assert time.monotonic() - t0 < 120.0


def test_criterion_8_permutation_properties():
    with criterion(8, "spatial GAP invariant to frame permutation; temporal output order-sensitive"):
        cfg = SideNetConfig(width=16, heads=2, depth=8, fusion_points=(0, 2, 4, 6), max_frames=8)
        side = SpatioTemporalSide(cfg, 32, (0, 1, 2, 3))
        seed_module_weights(side, 7)
        g = torch.Generator().manual_seed(3)
        taps = {i: torch.randn(2, 6, 5, 32, generator=g) for i in (0, 1, 2, 3)}
        agg = BranchAggregator("gap", 16)
        with torch.no_grad():
            s = agg(side.spatial(taps))
            perm = torch.randperm(6, generator=g)
            s_p = agg(side.spatial({i: f[:, perm] for i, f in taps.items()}))
            assert float((s - s_p).abs().max()) < 1e-5
            fwd = side.temporal(taps)
            rev = side.temporal({i: torch.flip(f, dims=[1]) for i, f in taps.items()})
            assert float((fwd - rev).abs().max()) > 1e-3


def test_criterion_9_parameter_budget(mars_schema):
    with criterion(9, "full fine-tune ~157.53M (+-5%), side-tuning within +-25% of 15.04M and <=12% of full"):
        t0 = time.monotonic()
        side_model = AttributeModel(mars_schema, mode="side")
        side_rep = count_parameters(side_model)
        assert side_rep.by_prefix["backbone"]["trainable"] == 0
        del side_model
        full_model = AttributeModel(mars_schema, mode="full")
        full_rep = count_parameters(full_model)
        del full_model
        assert 0.95 * 157.53e6 <= full_rep.trainable <= 1.05 * 157.53e6, f"{full_rep.trainable:,}"
        assert 0.75 * 15.04e6 <= side_rep.trainable <= 1.25 * 15.04e6, f"{side_rep.trainable:,}"
        assert side_rep.trainable <= 0.12 * full_rep.trainable
        assert time.monotonic() - t0 < 10.0


def test_criterion_10_peft_identity_and_convergence(tmp_path):
    with criterion(10, "lora/adapter identity at attachment; every variant halves the loss in 200 steps"):
        # identity at attachment, bit for bit
        schema_small = AttributeSchema.load(bundled_schema_path("synthetic_small"))
        for kind in ("lora", "adapter"):
            model = make_toy_model(schema_small, mode="peft")
            model.train()
            g = torch.Generator().manual_seed(1)
            x = torch.randn(2, 4, 3, 32, 32, generator=g)
            before = model(x)
            attach_peft(model, PeftVariant(kind))
            after = model(x)
            assert torch.equal(before.probabilities, after.probabilities), kind

        # convergence: static-appearance schema (PEFT variants see order-free
        # frame means, so the drift group is excluded from their task)
        schema = AttributeSchema(
            [
                AttributeGroup("top color", "multi-class", ("red", "blue")),
                AttributeGroup("bottom color", "multi-class", ("black", "white")),
                AttributeGroup("hat", "binary"),
                AttributeGroup("bag", "binary"),
            ]
        )
        data_dir = tmp_path / "static"
        generate_synthetic(32, schema, seed=13, out_dir=data_dir)
        tracklets = load_manifest(data_dir / "manifest.jsonl", schema)
        batcher = TrackletBatcher(tracklets, schema, SamplerConfig(k=4, seed=1), TOY_PRE)
        cfg = TrainConfig(lr=1e-3, batch_size=16, steps=200, seed=0, frames_per_sample=4)
        ratios = {}
        for kind in ("lora", "adapter", "prompt-tokens"):
            model = make_toy_model(schema, mode="peft")
            attach_peft(model, PeftVariant(kind))
            result = train(model, batcher, cfg)
            assert model.check_frozen().passed, kind
            ratios[kind] = result.final_loss / result.initial_loss
        bad = {k: round(v, 3) for k, v in ratios.items() if v > 0.5}
        assert not bad, f"variants missing the 50% reduction: {bad}"


def test_criterion_11_rollout_oracle():
    with criterion(11, "rollout equals the explicit renormalized matrix product; uniform attention is flat"):
        cfg = VisionEncoderConfig(width=16, depth=2, heads=2, patch=16, tap_layers=(0, 1), image_size=(32, 32))
        vt = VisionTransformer(cfg)
        seed_module_weights(vt, 3)
        frames = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            _, attns = vt(frames, need_attn=True)
        rollout = rollout_from_attentions(attns)

        def renorm(a):
            a = a.mean(dim=1) + torch.eye(a.shape[-1])
            return a / a.sum(dim=-1, keepdim=True)

        explicit = renorm(attns[1]) @ renorm(attns[0])
        assert float((rollout - explicit).abs().max()) < 1e-6

        schema = AttributeSchema.load(bundled_schema_path("synthetic_small"))
        model = make_toy_model(schema)
        with torch.no_grad():
            for layer in model.backbone.vision.layers:
                layer.attn.qkv.weight.zero_()
                layer.attn.qkv.bias.zero_()
        model.resnapshot_backbone()
        maps = attention_rollout(model, frames, attribute_index=0)
        assert float(np.abs(maps - maps.mean(axis=(1, 2), keepdims=True)).max()) < 1e-6


def test_criterion_12_determinism(tmp_path, synth_dir):
    with criterion(12, "two deterministic runs produce identical training logs and evaluation reports"):
        schema_path = bundled_schema_path("synthetic_small")
        cfg_text = f"""
mode = "side"
[schema]
path = "{schema_path}"
[data]
manifest = "{synth_dir / 'manifest.jsonl'}"
[backbone.vision]
width = 32
depth = 4
heads = 2
patch = 16
tap_layers = [0, 1, 2, 3]
image_size = [32, 32]
[backbone.text]
width = 32
depth = 2
heads = 2
vocab = 258
[side_net]
width = 16
heads = 2
depth = 8
fusion_points = [0, 2, 4, 6]
max_frames = 8
[fusion]
layers = 1
width = 16
heads = 2
[preprocess]
height = 32
width = 32
[train]
lr = 0.001
batch_size = 16
steps = 12
seed = 3
deterministic = true
frames_per_sample = 6
"""
        cfg_path = tmp_path / "run.toml"
        cfg_path.write_text(cfg_text)
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert dispatch(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
            assert dispatch(["eval", "--checkpoint", str(out / "ckpt"), "--out", str(out / "ev"),
                             "--split", "train"]) == 0
            outs.append(out)
        a, b = outs
        assert (a / "log.jsonl").read_bytes() == (b / "log.jsonl").read_bytes()
        assert (a / "ev" / "metrics.json").read_bytes() == (b / "ev" / "metrics.json").read_bytes()
        assert (a / "ev" / "metrics_table.txt").read_bytes() == (b / "ev" / "metrics_table.txt").read_bytes()
