"""End-to-end run: data, experts, warm start, meta-training, evaluation.

All randomness flows from one root seed, split into named phase seeds
(data / experts / meta / baselines / eval), so two runs that differ only in
one stage's configuration share every upstream random draw. Runs execute
single-threaded for reproducibility; a RunRecord captures the config
snapshot, phase wall-clock, per-method reports, and parameter digests.
"""

from __future__ import annotations

import csv
import json
import pathlib
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_hash
from .evalkit import MethodAssets, evaluate_method, train_erm, train_norm_student
from .metatrain import MetaConfig, TrainState, meta_train, pretrain_student_and_aggregator, train_all_experts
from .nets import AggregatorConfig, ModelState, StudentConfig
from .params import load_checkpoint, save_checkpoint
from .synthdata import cluster_domains, generate_benchmark, save_registry

PHASES = ("data", "experts", "meta", "baselines", "eval")


def phase_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(PHASES))
    return {
        name: int(child.generate_state(1)[0] % (2**31))
        for name, child in zip(PHASES, children)
    }


def build_student_cfg(cfg: RunConfig) -> StudentConfig:
    return StudentConfig(
        input_dim=cfg.data.input_dim,
        hidden_dims=cfg.student.hidden_dims,
        feature_dim=cfg.student.feature_dim,
        num_classes=cfg.data.num_classes,
        activation=cfg.student.activation,
        task=cfg.data.task,
    )


def build_agg_cfg(cfg: RunConfig) -> AggregatorConfig:
    head = cfg.aggregator.head_classes
    if head is None and cfg.adapt.distill_target in ("logits", "both"):
        head = cfg.data.num_classes if cfg.data.task == "classification" else 1
    return AggregatorConfig(
        kind=cfg.aggregator.kind,
        d=cfg.student.feature_dim,
        num_experts=cfg.experts.num_experts,
        k=cfg.aggregator.k,
        d_k=cfg.aggregator.d_k,
        inner_dim=cfg.aggregator.inner_dim,
        out_dim=cfg.aggregator.out_dim,
        head_classes=head,
    )


def build_meta_cfg(cfg: RunConfig, seed: int) -> MetaConfig:
    m = cfg.meta
    return MetaConfig(
        batch_size=m.batch_size,
        beta_s=m.beta_s,
        beta_a=m.beta_a,
        epochs=m.epochs,
        lr_decay_per_epoch=m.lr_decay_per_epoch,
        adapt_cfg=cfg.adapt,
        mask_overlap=m.mask_overlap,
        seed=seed,
        n_su=m.n_su,
        n_q=m.n_q,
        update_student=m.update_student,
        update_aggregator=m.update_aggregator,
        early_stop_patience=m.early_stop_patience,
        track_best=m.track_best,
    )


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    version: str
    phase_seconds: dict
    reports: dict
    train_scheme: str
    mask_summary: dict
    checkpoint_hash: str
    best_val: float | None = None
    best_epoch: int | None = None
    expert_data_mode: str = "redistribute"
    axis: str | None = None
    axis_value: object = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def model_digest(model: ModelState) -> str:
    """Stable digest over all trained parameter stores."""
    import hashlib

    h = hashlib.sha256()
    h.update(model.phi.state_hash().encode())
    h.update(model.theta_e.state_hash().encode())
    h.update(model.theta_c.state_hash().encode())
    for e in model.experts:
        h.update(e.state_hash().encode())
    return h.hexdigest()[:16]


def train_model(cfg: RunConfig, seeds: dict, registry) -> tuple[TrainState, dict]:
    """Experts + warm start + meta-training; returns state and timings."""
    student_cfg = build_student_cfg(cfg)
    agg_cfg = build_agg_cfg(cfg)
    timings = {}

    t = time.perf_counter()
    super_map = cluster_domains(registry, cfg.experts.num_experts, cfg.experts.strategy)
    experts = train_all_experts(
        registry, super_map,
        cfg=student_cfg,
        epochs=cfg.experts.epochs, lr=cfg.experts.lr,
        seed=seeds["experts"], batch_size=cfg.experts.batch_size,
        subsample_to=cfg.experts.subsample_to,
    )
    timings["experts"] = time.perf_counter() - t

    t = time.perf_counter()
    phi0, theta_e0, theta_c0 = pretrain_student_and_aggregator(
        registry, experts,
        student_cfg=student_cfg, agg_cfg=agg_cfg,
        epochs=cfg.meta.pretrain_epochs, lr=cfg.meta.pretrain_lr,
        batch_size=cfg.baselines.batch_size, seed=seeds["meta"],
        pretrain_student=cfg.meta.pretrain_student,
        pretrain_aggregator=cfg.meta.pretrain_aggregator,
    )
    meta_cfg = build_meta_cfg(cfg, seeds["meta"])
    state = meta_train(
        registry, experts, super_map, meta_cfg,
        student_cfg=student_cfg, agg_cfg=agg_cfg,
        init_phi=phi0, init_theta_e=theta_e0, init_theta_c=theta_c0,
    )
    timings["meta"] = time.perf_counter() - t
    return state, timings


def run_pipeline(cfg: RunConfig, seed: int | None = None, out_dir=None) -> RunRecord:
    """One full experiment; optionally persists artifacts under out_dir."""
    torch.set_num_threads(1)
    seed = cfg.seed if seed is None else seed
    seeds = phase_seeds(seed)
    timings = {}

    t = time.perf_counter()
    registry = generate_benchmark(replace(cfg.data, seed=seeds["data"]))
    timings["data"] = time.perf_counter() - t

    state, train_timings = train_model(cfg, seeds, registry)
    timings.update(train_timings)

    t = time.perf_counter()
    student_cfg = build_student_cfg(cfg)
    erm_assets = train_erm(
        registry, student_cfg,
        epochs=cfg.baselines.epochs, lr=cfg.baselines.lr,
        batch_size=cfg.baselines.batch_size, seed=seeds["baselines"],
    )
    norm_assets = None
    if "norm_adapt" in cfg.eval.methods:
        norm_assets = train_norm_student(
            registry, student_cfg,
            epochs=cfg.baselines.epochs, lr=cfg.baselines.lr,
            batch_size=cfg.baselines.batch_size, seed=seeds["baselines"] + 1,
        )
    timings["baselines"] = time.perf_counter() - t

    t = time.perf_counter()
    assets = MethodAssets(model=state.model, erm_student=erm_assets, norm_student=norm_assets)
    reports = {}
    for method in cfg.eval.methods:
        reports[method] = evaluate_method(
            method, assets, registry, cfg.adapt,
            n_su=cfg.eval.n_su, seed=seeds["eval"], strict=cfg.eval.strict,
        )
    timings["eval"] = time.perf_counter() - t

    masked = sum(1 for e in state.mask_log if e["masked_expert"] is not None)
    record = RunRecord(
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        seed=seed,
        version=__version__,
        phase_seconds={k: round(v, 3) for k, v in timings.items()},
        reports={m: r.to_dict() for m, r in reports.items()},
        train_scheme=cfg.train_scheme,
        mask_summary={"episodes": len(state.mask_log), "masked": masked},
        checkpoint_hash=model_digest(state.model),
        best_val=state.best_val,
        best_epoch=state.best_epoch,
        expert_data_mode=(
            "redistribute" if cfg.experts.subsample_to is None
            else f"subsample_to={cfg.experts.subsample_to}"
        ),
    )
    if out_dir is not None:
        persist_run(out_dir, cfg, record, state, registry)
    return record


def persist_run(out_dir, cfg: RunConfig, record: RunRecord, state: TrainState, registry) -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(record.to_json())
    save_registry(registry, out / "registry")
    save_model_state(out / "model", state.model)
    write_training_curve(out / "training_curve.csv", state.history)
    with open(out / "mask_log.jsonl", "w") as fh:
        for entry in state.mask_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def write_training_curve(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "batch_loss_mean", "val_metric", "beta_a", "beta_s"])
        for row in history:
            writer.writerow(
                [row["epoch"], row["batch_loss_mean"], row["val_metric"], row["beta_a"], row["beta_s"]]
            )


# ---------------------------------------------------------------------------
# Model persistence


def save_model_state(path, model: ModelState) -> None:
    stores = {"phi": model.phi, "theta_e": model.theta_e, "theta_c": model.theta_c}
    for i, e in enumerate(model.experts):
        stores[f"expert_{i:03d}"] = e
    extra = {
        "student_cfg": asdict(model.student_cfg),
        "expert_cfg": asdict(model.expert_cfg),
        "agg_cfg": asdict(model.agg_cfg),
        "num_experts": len(model.experts),
    }
    save_checkpoint(path, stores, extra)


def load_model_state(path) -> ModelState:
    stores, extra = load_checkpoint(path)
    s = dict(extra["student_cfg"])
    s["hidden_dims"] = tuple(s["hidden_dims"])
    e = dict(extra["expert_cfg"])
    e["hidden_dims"] = tuple(e["hidden_dims"])
    experts = [stores[f"expert_{i:03d}"] for i in range(extra["num_experts"])]
    return ModelState(
        StudentConfig(**s),
        StudentConfig(**e),
        AggregatorConfig(**extra["agg_cfg"]),
        stores["theta_e"],
        stores["theta_c"],
        stores["phi"],
        experts,
    )
