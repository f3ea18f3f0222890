"""Ablation harness: sweep one axis, repeat over seeds, summarize.

Each cell is a full pipeline run whose config differs from the base only
along the swept axis; all cells of a repeat share the same root seed, so
comparisons isolate the axis. Failed cells are recorded and the sweep
continues. Reports are a CSV of per-cell metrics, a mean +/- std summary,
a JSON dump of the full records, and a line plot per metric.
"""

from __future__ import annotations

import csv
import json
import pathlib
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, apply_train_scheme
from .pipeline import RunRecord, run_pipeline

AXES = ("num_experts", "aggregator_kind", "distill_target", "train_scheme", "mask_overlap", "n_su")

_METRIC_COLUMNS = ("accuracy", "macro_f1", "worst_case_accuracy", "pearson_r", "worst_case_pearson_r")


@dataclass(frozen=True)
class AblationSpec:
    axis: str
    values: tuple
    repeats: int = 3
    base_seed: int = 0
    method: str = "moe_distill"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}; expected one of {AXES}")
        if len(self.values) == 0:
            raise ValueError("values must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "num_experts":
        return replace(cfg, experts=replace(cfg.experts, num_experts=int(value)))
    if axis == "aggregator_kind":
        return replace(cfg, aggregator=replace(cfg.aggregator, kind=str(value)))
    if axis == "distill_target":
        return replace(cfg, adapt=replace(cfg.adapt, distill_target=str(value)))
    if axis == "train_scheme":
        return apply_train_scheme(cfg, str(value))
    if axis == "mask_overlap":
        return replace(cfg, meta=replace(cfg.meta, mask_overlap=bool(value)))
    if axis == "n_su":
        return replace(cfg, eval=replace(cfg.eval, n_su=int(value)))
    raise ValueError(f"unknown ablation axis {axis!r}")


def run_ablation(spec: AblationSpec, base_cfg: RunConfig, out_dir=None) -> list[RunRecord]:
    """One pipeline run per (axis value, repeat); never aborts the sweep."""
    records: list[RunRecord] = []
    for value in spec.values:
        cfg = apply_axis(base_cfg, spec.axis, value)
        for rep in range(spec.repeats):
            seed = spec.base_seed + rep
            try:
                record = run_pipeline(cfg, seed=seed)
            except Exception as exc:  # cell failure must not kill the sweep
                record = RunRecord(
                    config=cfg.to_dict(),
                    config_hash="",
                    seed=seed,
                    version="",
                    phase_seconds={},
                    reports={},
                    train_scheme=cfg.train_scheme,
                    mask_summary={},
                    checkpoint_hash="",
                    error=f"{type(exc).__name__}: {exc}",
                )
            record.axis = spec.axis
            record.axis_value = value
            records.append(record)
    if out_dir is not None:
        emit_report(records, out_dir, method=spec.method)
    return records


def _cell_metrics(record: RunRecord, method: str) -> dict:
    report = record.reports.get(method, {})
    return {m: report.get(m) for m in _METRIC_COLUMNS}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def records_table(records: list[RunRecord], method: str) -> list[list]:
    rows = [["axis", "value", "seed", *_METRIC_COLUMNS, "runtime_seconds", "error"]]
    for r in records:
        metrics = _cell_metrics(r, method)
        runtime = round(sum(r.phase_seconds.values()), 3) if r.phase_seconds else None
        rows.append(
            [r.axis, r.axis_value, r.seed]
            + [metrics[m] for m in _METRIC_COLUMNS]
            + [runtime, r.error or ""]
        )
    return rows


def summarize(records: list[RunRecord], method: str) -> list[dict]:
    """Mean and unbiased std per axis value over successful repeats."""
    by_value: dict = {}
    for r in records:
        if r.error is None:
            by_value.setdefault(r.axis_value, []).append(_cell_metrics(r, method))
    out = []
    for value, cells in by_value.items():
        row: dict = {"axis_value": value, "n": len(cells)}
        for m in _METRIC_COLUMNS:
            vals = [c[m] for c in cells if c[m] is not None]
            if vals:
                row[f"{m}_mean"] = float(np.mean(vals))
                row[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def emit_report(records: list[RunRecord], out_dir, method: str = "moe_distill") -> dict:
    """Write cells CSV, summary CSV, full JSON, and a plot per metric."""
    if not records:
        raise ValueError("need at least one record")
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cells_path = out / "cells.csv"
    with open(cells_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in records_table(records, method):
            writer.writerow([_fmt(v) for v in row])

    summary = summarize(records, method)
    summary_path = out / "summary.csv"
    keys = ["axis_value", "n"] + [
        f"{m}_{s}" for m in _METRIC_COLUMNS for s in ("mean", "std")
    ]
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in summary:
            writer.writerow([_fmt(row.get(k)) for k in keys])

    (out / "records.json").write_text(
        json.dumps([r.to_dict() for r in records], sort_keys=True, indent=1)
    )
    _plot_summary(summary, records, out, method)
    return {"cells": str(cells_path), "summary": str(summary_path)}


def _plot_summary(summary: list[dict], records: list[RunRecord], out: pathlib.Path, method: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    axis = records[0].axis if records else None
    for metric in _METRIC_COLUMNS:
        points = [
            (row["axis_value"], row[f"{metric}_mean"], row[f"{metric}_std"])
            for row in summary
            if f"{metric}_mean" in row
        ]
        if not points:
            continue
        xs = list(range(len(points)))
        means = [p[1] for p in points]
        stds = [p[2] for p in points]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(p[0]) for p in points])
        ax.set_xlabel(axis or "value")
        ax.set_ylabel(metric)
        ax.set_title(f"{method}: {metric} vs {axis}")
        fig.tight_layout()
        fig.savefig(out / f"plot_{metric}.png", dpi=120)
        plt.close(fig)


def dump_embeddings(model, registry, out_path, *, adapt_cfg, n_su: int = 24, seed: int = 0) -> int:
    """Write adapted vs unadapted student features for external projection.

    One row per evaluated sample and variant: domain_id, adapted flag, then
    the raw feature coordinates. Returns the number of evaluated samples.
    """
    import torch

    from .adapt import test_time_adapt
    from .nets import student_features

    rows = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = model.student_cfg.feature_dim
        writer.writerow(["domain_id", "adapted", *[f"f{i}" for i in range(d)]])
        for did in sorted(registry.test_ids):
            dom = registry.domain(did)
            if dom.num_samples < n_su + 1:
                continue
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1, did)))
            idx = rng.permutation(dom.num_samples)
            su, ev = idx[:n_su], idx[n_su:]
            sx = torch.as_tensor(dom.inputs[su])
            ex = torch.as_tensor(dom.inputs[ev])
            adapted = test_time_adapt(model, sx, adapt_cfg)
            with torch.no_grad():
                before = student_features(model.theta_e, ex, model.student_cfg).numpy()
                after = student_features(adapted.theta_e, ex, model.student_cfg).numpy()
            for vec in before:
                writer.writerow([did, 0, *[repr(float(v)) for v in vec]])
            for vec in after:
                writer.writerow([did, 1, *[repr(float(v)) for v in vec]])
            rows += len(ev)
    return rows
