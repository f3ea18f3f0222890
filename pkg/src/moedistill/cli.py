"""Command-line front end.

Stages write their artifacts under ``--out`` and later stages read them back,
so a full experiment is:

    moedistill gen-data --out runs/a
    moedistill train-experts --out runs/a
    moedistill pretrain --out runs/a
    moedistill meta-train --out runs/a
    moedistill adapt-eval --out runs/a

``ablate`` and ``privacy-run`` are self-contained. Failures exit nonzero
with a structured error JSON on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import sys
from dataclasses import replace

import torch

from .ablation import AblationSpec, emit_report, run_ablation
from .config import RunConfig, config_hash, load_config, save_config
from .evalkit import MethodAssets, evaluate_method, train_erm, train_norm_student
from .metatrain import meta_train, pretrain_student_and_aggregator, train_all_experts
from .params import load_checkpoint, save_checkpoint
from .pipeline import (
    build_agg_cfg,
    build_meta_cfg,
    build_student_cfg,
    load_model_state,
    phase_seeds,
    run_pipeline,
    save_model_state,
    write_training_curve,
)
from .privacy import run_privacy_experiment, split_privacy
from .synthdata import SuperDomainMap, cluster_domains, generate_benchmark, load_registry, save_registry


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.strict:
        cfg = replace(cfg, eval=replace(cfg.eval, strict=True))
    return cfg


def _out(args) -> pathlib.Path:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: pathlib.Path, stage: str) -> pathlib.Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `{stage}` first")
    return path


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


def cmd_gen_data(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    seeds = phase_seeds(cfg.seed)
    registry = generate_benchmark(replace(cfg.data, seed=seeds["data"]))
    save_registry(registry, out / "registry")
    save_config(cfg, out / "run_config.yaml")
    (out / "seeds.json").write_text(json.dumps(seeds, sort_keys=True))
    _emit(
        {
            "stage": "gen-data",
            "domains": len(registry.domains),
            "source": len(registry.source_ids),
            "val": len(registry.val_ids),
            "test": len(registry.test_ids),
            "out": str(out / "registry"),
        }
    )


def cmd_train_experts(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    registry = load_registry(_require(out / "registry", "gen-data"))
    seeds = phase_seeds(cfg.seed)
    super_map = cluster_domains(registry, cfg.experts.num_experts, cfg.experts.strategy)
    experts = train_all_experts(
        registry, super_map,
        cfg=build_student_cfg(cfg),
        epochs=cfg.experts.epochs, lr=cfg.experts.lr,
        seed=seeds["experts"], batch_size=cfg.experts.batch_size,
        subsample_to=cfg.experts.subsample_to,
    )
    stores = {f"expert_{i:03d}": e for i, e in enumerate(experts)}
    extra = {
        "assignment": {str(k): v for k, v in super_map.assignment.items()},
        "num_experts": super_map.num_experts,
        "strategy": cfg.experts.strategy,
    }
    save_checkpoint(out / "experts", stores, extra)
    _emit({"stage": "train-experts", "num_experts": len(experts), "out": str(out / "experts")})


def _load_experts(out: pathlib.Path):
    stores, extra = load_checkpoint(_require(out / "experts", "train-experts"))
    experts = [stores[f"expert_{i:03d}"] for i in range(extra["num_experts"])]
    assignment = {int(k): v for k, v in extra["assignment"].items()}
    return experts, SuperDomainMap(assignment, extra["num_experts"])


def cmd_pretrain(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    registry = load_registry(_require(out / "registry", "gen-data"))
    experts, _ = _load_experts(out)
    seeds = phase_seeds(cfg.seed)
    phi0, theta_e0, theta_c0 = pretrain_student_and_aggregator(
        registry, experts,
        student_cfg=build_student_cfg(cfg), agg_cfg=build_agg_cfg(cfg),
        epochs=cfg.meta.pretrain_epochs, lr=cfg.meta.pretrain_lr,
        batch_size=cfg.baselines.batch_size, seed=seeds["meta"],
        pretrain_student=cfg.meta.pretrain_student,
        pretrain_aggregator=cfg.meta.pretrain_aggregator,
    )
    save_checkpoint(
        out / "warmstart",
        {"phi": phi0, "theta_e": theta_e0, "theta_c": theta_c0},
        {"scheme": cfg.train_scheme},
    )
    _emit({"stage": "pretrain", "scheme": cfg.train_scheme, "out": str(out / "warmstart")})


def cmd_meta_train(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    registry = load_registry(_require(out / "registry", "gen-data"))
    experts, super_map = _load_experts(out)
    seeds = phase_seeds(cfg.seed)
    student_cfg, agg_cfg = build_student_cfg(cfg), build_agg_cfg(cfg)
    warm = out / "warmstart"
    if warm.exists():
        stores, _ = load_checkpoint(warm)
        phi0, theta_e0, theta_c0 = stores["phi"], stores["theta_e"], stores["theta_c"]
    else:
        phi0, theta_e0, theta_c0 = pretrain_student_and_aggregator(
            registry, experts,
            student_cfg=student_cfg, agg_cfg=agg_cfg,
            epochs=cfg.meta.pretrain_epochs, lr=cfg.meta.pretrain_lr,
            batch_size=cfg.baselines.batch_size, seed=seeds["meta"],
            pretrain_student=cfg.meta.pretrain_student,
            pretrain_aggregator=cfg.meta.pretrain_aggregator,
        )
    state = meta_train(
        registry, experts, super_map, build_meta_cfg(cfg, seeds["meta"]),
        student_cfg=student_cfg, agg_cfg=agg_cfg,
        init_phi=phi0, init_theta_e=theta_e0, init_theta_c=theta_c0,
    )
    save_model_state(out / "model", state.model)
    write_training_curve(out / "training_curve.csv", state.history)
    with open(out / "mask_log.jsonl", "w") as fh:
        for entry in state.mask_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _emit(
        {
            "stage": "meta-train",
            "epochs_run": len(state.history),
            "best_val": state.best_val,
            "best_epoch": state.best_epoch,
            "outer_updates": state.outer_updates,
            "out": str(out / "model"),
        }
    )


def cmd_adapt_eval(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    registry = load_registry(_require(out / "registry", "gen-data"))
    model = load_model_state(_require(out / "model", "meta-train"))
    seeds = phase_seeds(cfg.seed)
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
    assets = MethodAssets(model=model, erm_student=erm_assets, norm_student=norm_assets)
    reports = {}
    for method in cfg.eval.methods:
        reports[method] = evaluate_method(
            method, assets, registry, cfg.adapt,
            n_su=cfg.eval.n_su, seed=seeds["eval"], strict=cfg.eval.strict,
        ).to_dict()
    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    payload = {"config_hash": config_hash(cfg), "seed": cfg.seed, "reports": reports}
    (reports_dir / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    _emit({"stage": "adapt-eval", "out": str(reports_dir / "eval.json"), "reports": reports})


def cmd_ablate(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    values = _parse_values(args.axis, args.values)
    spec = AblationSpec(
        axis=args.axis, values=tuple(values), repeats=args.repeats, base_seed=cfg.seed
    )
    records = run_ablation(spec, cfg, out / "ablation")
    failed = [r.seed for r in records if r.error]
    _emit(
        {
            "stage": "ablate",
            "axis": args.axis,
            "cells": len(records),
            "failed_cells": len(failed),
            "out": str(out / "ablation"),
        }
    )


def _parse_values(axis: str, raw: str) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("--values must be a non-empty comma-separated list")
    if axis in ("num_experts", "n_su"):
        return [int(p) for p in parts]
    if axis == "mask_overlap":
        return [p.lower() in ("1", "true", "yes") for p in parts]
    return parts


def cmd_privacy_run(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    torch.set_num_threads(1)
    seeds = phase_seeds(cfg.seed)
    registry = generate_benchmark(replace(cfg.data, seed=seeds["data"]))
    split = split_privacy(registry, args.fraction_private, cfg.seed)
    result = run_privacy_experiment(
        registry, split, cfg.experts.num_experts,
        student_cfg=build_student_cfg(cfg), agg_cfg=build_agg_cfg(cfg),
        adapt_cfg=cfg.adapt, meta_cfg=build_meta_cfg(cfg, seeds["meta"]),
        expert_epochs=cfg.experts.epochs, expert_lr=cfg.experts.lr,
        pretrain_epochs=cfg.meta.pretrain_epochs, pretrain_lr=cfg.meta.pretrain_lr,
        erm_epochs=cfg.baselines.epochs, erm_lr=cfg.baselines.lr,
        n_su=cfg.eval.n_su, seed=cfg.seed, strict=cfg.eval.strict,
    )
    privacy_dir = out / "privacy"
    privacy_dir.mkdir(exist_ok=True)
    payload = {
        "reports": {
            "moe_distill": result["moe_distill"].to_dict(),
            "erm": result["erm"].to_dict(),
        },
        "private_ids": result["private_ids"],
        "public_ids": result["public_ids"],
        "private_reads_after_pretraining": sum(
            1 for r in result["access_log"]
            if r["private"] and r["phase"] != "expert_pretraining"
        ),
        "masked_episodes": sum(
            1 for e in result["mask_log"] if e["masked_expert"] is not None
        ),
    }
    (privacy_dir / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    with open(privacy_dir / "audit_log.jsonl", "w") as fh:
        for entry in result["access_log"]:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _emit({"stage": "privacy-run", "out": str(privacy_dir), **{k: payload[k] for k in ("private_reads_after_pretraining", "masked_episodes")}})


def cmd_report(args) -> None:
    out = _out(args)
    tables = out / "tables"
    tables.mkdir(exist_ok=True)
    written = []
    eval_json = out / "reports" / "eval.json"
    if eval_json.exists():
        payload = json.loads(eval_json.read_text())
        path = tables / "methods.csv"
        _write_methods_table(payload["reports"], path)
        written.append(str(path))
    records_json = out / "ablation" / "records.json"
    if records_json.exists():
        from .pipeline import RunRecord

        records = [RunRecord.from_dict(d) for d in json.loads(records_json.read_text())]
        emit_report(records, tables / "ablation")
        written.append(str(tables / "ablation"))
    if not written:
        raise FileNotFoundError("nothing to report; run adapt-eval or ablate first")
    _emit({"stage": "report", "written": written})


def _write_methods_table(reports: dict, path) -> None:
    metrics = ["accuracy", "macro_f1", "worst_case_accuracy", "pearson_r", "worst_case_pearson_r", "adaptation_update_count"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *metrics])
        for method in sorted(reports):
            r = reports[method]
            writer.writerow([method] + [r.get(m, "") if r.get(m) is not None else "" for m in metrics])


def cmd_run(args) -> None:
    cfg = _load_cfg(args)
    out = _out(args)
    record = run_pipeline(cfg, seed=cfg.seed, out_dir=out / "run")
    _emit(
        {
            "stage": "run",
            "out": str(out / "run"),
            "checkpoint_hash": record.checkpoint_hash,
            "reports": {
                m: {k: v for k, v in r.items() if isinstance(v, (int, float)) and v is not None}
                for m, r in record.reports.items()
            },
        }
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moedistill",
        description="Test-time adaptation via meta-distilled mixtures of domain experts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
        p.add_argument("--out", type=str, required=True, help="artifact directory")
        p.add_argument("--strict", action="store_true", help="turn soft warnings into errors")
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train-experts", cmd_train_experts)
    add("pretrain", cmd_pretrain)
    add("meta-train", cmd_meta_train)
    add("adapt-eval", cmd_adapt_eval)
    add("run", cmd_run)
    add(
        "ablate",
        cmd_ablate,
        **{
            "--axis": {"type": str, "required": True},
            "--values": {"type": str, "required": True, "help": "comma-separated axis values"},
            "--repeats": {"type": int, "default": 3},
        },
    )
    add(
        "privacy-run",
        cmd_privacy_run,
        **{"--fraction-private": {"type": float, "default": 0.5, "dest": "fraction_private"}},
    )
    add("report", cmd_report)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
