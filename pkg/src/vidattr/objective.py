"""Imbalance-weighted binary cross-entropy and group-averaged multi-label metrics.

The loss weights each element by how rare its label is in the training set:
a positive of attribute j gets weight e^(1 - r_j), a negative gets e^(r_j),
where r_j is the training-set positive ratio. At r = 0.5 both weights agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

MEAN_OVER_NM = "mean-over-nm"
SUM_OVER_N_DIV_M = "sum-over-n-div-m"

_REDUCTIONS = (MEAN_OVER_NM, SUM_OVER_N_DIV_M)


@dataclass
class LossConfig:
    """ratios: per-attribute positive fractions from the training split.

    reduction: ``mean-over-nm`` divides by the number of scored elements so
    batch size does not rescale the gradient; ``sum-over-n-div-m`` keeps the
    batch sum and divides by M only.
    """

    ratios: np.ndarray
    reduction: str = MEAN_OVER_NM
    eps: float = 1e-7

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.ratios.ndim != 1:
            raise ValueError("ratios must be a 1-D vector of length M")
        if np.any(self.ratios < 0) or np.any(self.ratios > 1):
            raise ValueError("ratios must lie in [0, 1]")
        if self.reduction not in _REDUCTIONS:
            raise ValueError(f"reduction must be one of {_REDUCTIONS}, got {self.reduction!r}")


def imbalance_weights(ratios: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Elementwise weights: e^(1-r_j) where y=1, e^(r_j) where y=0."""
    r = ratios.unsqueeze(0).expand_as(labels)
    return torch.where(labels > 0.5, torch.exp(1.0 - r), torch.exp(r))


def weighted_bce_loss(
    probabilities: torch.Tensor,
    labels: torch.Tensor,
    cfg: LossConfig,
    known_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scalar weighted binary cross-entropy over a (N, M) batch.

    Unknown-labeled elements (known_mask False) contribute nothing and, under
    the default reduction, shrink the divisor.
    """
    if probabilities.shape != labels.shape or probabilities.ndim != 2:
        raise ValueError(
            f"probabilities {tuple(probabilities.shape)} and labels {tuple(labels.shape)} must both be (N, M)"
        )
    if probabilities.shape[1] != cfg.ratios.shape[0]:
        raise ValueError(f"batch has M={probabilities.shape[1]}, loss config has M={cfg.ratios.shape[0]}")
    labels_f = labels.to(probabilities.dtype)
    uniq = torch.unique(labels_f)
    if not bool(torch.isin(uniq, torch.tensor([0.0, 1.0], dtype=labels_f.dtype)).all()):
        raise ValueError("labels must be binary (0/1); mark unknowns via known_mask")

    ratios = torch.as_tensor(cfg.ratios, dtype=probabilities.dtype, device=probabilities.device)
    p = probabilities.clamp(cfg.eps, 1.0 - cfg.eps)
    w = imbalance_weights(ratios, labels_f)
    ll = labels_f * torch.log(p) + (1.0 - labels_f) * torch.log(1.0 - p)
    weighted = w * ll
    if known_mask is not None:
        known = known_mask.to(probabilities.dtype)
        weighted = weighted * known
        n_scored = known.sum()
    else:
        n_scored = torch.tensor(float(weighted.numel()), dtype=probabilities.dtype)
    if cfg.reduction == MEAN_OVER_NM:
        denom = torch.clamp(n_scored, min=1.0)
    else:
        denom = torch.tensor(float(probabilities.shape[1]), dtype=probabilities.dtype)
    return -weighted.sum() / denom


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    """Per-attribute confusion integers; shards merge by elementwise addition."""

    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass
class AttributeMetrics:
    name: str
    group: str
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Per-attribute metrics rolled up to group means and a macro mean across groups."""

    per_attribute: list[AttributeMetrics]
    per_group: dict[str, dict[str, float]]
    macro: dict[str, float]
    threshold: float
    scored_instances: int

    @property
    def flagged(self) -> list[str]:
        return [a.name for a in self.per_attribute if a.zero_division]

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "scored_instances": self.scored_instances,
            "macro": self.macro,
            "per_group": self.per_group,
            "per_attribute": [
                {
                    "name": a.name,
                    "group": a.group,
                    "tp": a.tp,
                    "tn": a.tn,
                    "fp": a.fp,
                    "fn": a.fn,
                    "accuracy": a.accuracy,
                    "precision": a.precision,
                    "recall": a.recall,
                    "f1": a.f1,
                    "zero_division": a.zero_division,
                }
                for a in self.per_attribute
            ],
            "zero_division_flagged": self.flagged,
        }

    def format_table(self) -> str:
        """Aligned per-group table (Attribute | Acc | F1) with a trailing Average
        row, plus a one-line macro summary, for terminal display."""
        rows = [("Attribute", "Acc", "F1")]
        for gname, vals in self.per_group.items():
            rows.append((gname, f"{100 * vals['accuracy']:.2f}", f"{100 * vals['f1']:.2f}"))
        rows.append(("Average", f"{100 * self.macro['accuracy']:.2f}", f"{100 * self.macro['f1']:.2f}"))
        widths = [max(len(r[c]) for r in rows) for c in range(3)]
        lines = []
        for i, r in enumerate(rows):
            lines.append(" | ".join(cell.ljust(widths[c]) for c, cell in enumerate(r)).rstrip())
            if i == 0 or i == len(rows) - 2:
                lines.append("-+-".join("-" * w for w in widths))
        summary = (
            f"Accuracy {100 * self.macro['accuracy']:.2f}  Precision {100 * self.macro['precision']:.2f}  "
            f"Recall {100 * self.macro['recall']:.2f}  F1 {100 * self.macro['f1']:.2f}"
        )
        return "\n".join(lines + ["", summary])


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def compute_confusion(
    probabilities: np.ndarray,
    labels: np.ndarray,
    threshold: float = 0.5,
    known_mask: np.ndarray | None = None,
) -> ConfusionCounts:
    """Binarize predictions at the threshold (positive iff p > threshold) and
    count TP/TN/FP/FN per attribute, skipping unknown-labeled elements."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.shape != labels.shape or probabilities.ndim != 2:
        raise ValueError("probabilities and labels must both be (N, M)")
    known = np.ones(labels.shape, dtype=bool) if known_mask is None else np.asarray(known_mask, dtype=bool)
    pred = probabilities > threshold
    pos = labels == 1
    tp = np.logical_and.reduce([pred, pos, known]).sum(axis=0)
    tn = np.logical_and.reduce([~pred, ~pos, known]).sum(axis=0)
    fp = np.logical_and.reduce([pred, ~pos, known]).sum(axis=0)
    fn = np.logical_and.reduce([~pred, pos, known]).sum(axis=0)
    return ConfusionCounts(tp.astype(np.int64), tn.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64))


def metrics_from_confusion(counts: ConfusionCounts, schema) -> MetricsReport:
    per_attr: list[AttributeMetrics] = []
    for j, attr in enumerate(schema.binary_attributes):
        tp, tn, fp, fn = (int(counts.tp[j]), int(counts.tn[j]), int(counts.fp[j]), int(counts.fn[j]))
        flags: list[str] = []
        acc, acc_zero = _safe_div(tp + tn, tp + tn + fp + fn)
        prec, p_zero = _safe_div(tp, tp + fp)
        rec, r_zero = _safe_div(tp, tp + fn)
        f1, f_zero = _safe_div(2 * prec * rec, prec + rec)
        for flag, bit in (("accuracy", acc_zero), ("precision", p_zero), ("recall", r_zero), ("f1", f_zero)):
            if bit:
                flags.append(flag)
        per_attr.append(AttributeMetrics(attr.name, attr.group, tp, tn, fp, fn, acc, prec, rec, f1, flags))

    per_group: dict[str, dict[str, float]] = {}
    for g in schema.groups:
        sl = schema.group_slice(g.name)
        members = per_attr[sl]
        per_group[g.name] = {
            "accuracy": float(np.mean([m.accuracy for m in members])),
            "precision": float(np.mean([m.precision for m in members])),
            "recall": float(np.mean([m.recall for m in members])),
            "f1": float(np.mean([m.f1 for m in members])),
        }
    macro = {
        key: float(np.mean([per_group[g.name][key] for g in schema.groups]))
        for key in ("accuracy", "precision", "recall", "f1")
    }
    scored = int(counts.tp.sum() + counts.tn.sum() + counts.fp.sum() + counts.fn.sum())
    return MetricsReport(per_attr, per_group, macro, threshold=0.0, scored_instances=scored)


def compute_metrics(
    probabilities: np.ndarray,
    labels: np.ndarray,
    schema,
    threshold: float = 0.5,
    known_mask: np.ndarray | None = None,
) -> MetricsReport:
    """Full evaluation: confusion counts, the four per-attribute metrics,
    group means, and the macro mean across groups.

    Zero-denominator metrics are reported as 0 and flagged per attribute.
    """
    if np.asarray(probabilities).shape[1] != schema.num_attributes:
        raise ValueError(
            f"predictions have M={np.asarray(probabilities).shape[1]}, schema has M={schema.num_attributes}"
        )
    counts = compute_confusion(probabilities, labels, threshold, known_mask)
    report = metrics_from_confusion(counts, schema)
    report.threshold = threshold
    return report
