"""Evaluation metrics and the report container.

Macro-F1 follows the convention that a class absent from both predictions
and labels is excluded from the unweighted mean; a class present on either
side contributes its F1 (zero when precision+recall is zero). Worst-case
variants take the minimum of a metric over declared subgroups, falling back
to per-domain grouping when no group tags exist.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return float((p == y).mean())


def macro_f1(predictions, labels, num_classes: int) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    if y.min() < 0 or y.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ValueError(f"labels/predictions outside [0, {num_classes})")
    scores = []
    for c in range(num_classes):
        in_p, in_y = p == c, y == c
        if not in_p.any() and not in_y.any():
            continue
        tp = float(np.sum(in_p & in_y))
        fp = float(np.sum(in_p & ~in_y))
        fn = float(np.sum(~in_p & in_y))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def pearson_r(predictions, targets) -> float:
    p, t = np.asarray(predictions, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size < 2:
        raise ValueError("need at least 2 paired samples")
    if np.std(p) == 0 or np.std(t) == 0:
        raise ValueError("correlation undefined: zero variance on one side")
    return float(np.corrcoef(p, t)[0, 1])


def worst_case_metric(per_group_values) -> float:
    values = list(per_group_values.values()) if isinstance(per_group_values, dict) else list(per_group_values)
    if len(values) == 0:
        raise ValueError("need at least one group")
    return float(min(values))


def group_values(metric_fn, predictions, labels, groups, *, warn_context: str = "") -> dict:
    """Metric per subgroup; groups=None falls back to a single implicit group."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if groups is None:
        warnings.warn(f"no group tags{warn_context}; falling back to per-domain grouping", stacklevel=2)
        return {0: metric_fn(p, y)}
    g = np.asarray(groups)
    out = {}
    for gid in np.unique(g):
        m = g == gid
        out[int(gid)] = metric_fn(p[m], y[m])
    return out


@dataclass
class MetricReport:
    """Aggregated evaluation result for one method over target domains."""

    method: str
    num_samples: int
    adaptation_update_count: int
    accuracy: float | None = None
    macro_f1: float | None = None
    worst_case_accuracy: float | None = None
    pearson_r: float | None = None
    worst_case_pearson_r: float | None = None
    per_domain: dict = field(default_factory=dict)
    skipped_domains: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("accuracy", "macro_f1", "worst_case_accuracy"):
            v = getattr(self, name)
            if v is not None and not -1e-9 <= v <= 1 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("pearson_r", "worst_case_pearson_r"):
            v = getattr(self, name)
            if v is not None and not -1 - 1e-9 <= v <= 1 + 1e-9:
                raise ValueError(f"{name}={v} outside [-1, 1]")
        if self.accuracy is not None and self.worst_case_accuracy is not None:
            if self.worst_case_accuracy > self.accuracy + 1e-9:
                raise ValueError("worst-case accuracy exceeds average accuracy")

    @property
    def primary_metric(self) -> float:
        v = self.accuracy if self.accuracy is not None else self.pearson_r
        if v is None:
            raise ValueError("report carries neither accuracy nor correlation")
        return v

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "num_samples": self.num_samples,
            "adaptation_update_count": self.adaptation_update_count,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "worst_case_accuracy": self.worst_case_accuracy,
            "pearson_r": self.pearson_r,
            "worst_case_pearson_r": self.worst_case_pearson_r,
            "per_domain": {str(k): v for k, v in sorted(self.per_domain.items())},
            "skipped_domains": list(self.skipped_domains),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            method=d["method"],
            num_samples=d["num_samples"],
            adaptation_update_count=d["adaptation_update_count"],
            accuracy=d.get("accuracy"),
            macro_f1=d.get("macro_f1"),
            worst_case_accuracy=d.get("worst_case_accuracy"),
            pearson_r=d.get("pearson_r"),
            worst_case_pearson_r=d.get("worst_case_pearson_r"),
            per_domain={int(k): v for k, v in d.get("per_domain", {}).items()},
            skipped_domains=list(d.get("skipped_domains", [])),
        )
