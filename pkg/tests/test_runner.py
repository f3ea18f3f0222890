import csv
import dataclasses
import json
import pathlib

import pytest

from moedistill.ablation import (
    AblationSpec,
    apply_axis,
    dump_embeddings,
    emit_report,
    run_ablation,
    summarize,
)
from moedistill.cli import main
from moedistill.config import (
    TRAIN_SCHEMES,
    RunConfig,
    apply_train_scheme,
    config_from_dict,
    config_hash,
    load_config,
    save_config,
)
from moedistill.pipeline import (
    PHASES,
    RunRecord,
    load_model_state,
    phase_seeds,
    run_pipeline,
)

TINY = {
    "data": {
        "num_source_domains": 4,
        "num_target_domains": 2,
        "num_classes": 3,
        "input_dim": 6,
        "samples_per_domain_range": [50, 70],
        "shift_strength": 0.5,
        "num_val_domains": 1,
    },
    "experts": {"num_experts": 2, "epochs": 2, "lr": 1e-2},
    "student": {"hidden_dims": [8], "feature_dim": 8},
    "aggregator": {"kind": "transformer", "k": 2},
    "adapt": {"alpha": 0.05},
    "meta": {"batch_size": 2, "epochs": 1, "n_su": 8, "n_q": 8, "pretrain_epochs": 1},
    "baselines": {"epochs": 2},
    "eval": {"n_su": 8},
    "seed": 0,
}


def tiny_cfg():
    return config_from_dict(TINY)


# ---------------------------------------------------------------------------
# Config


def test_empty_dict_gives_defaults():
    assert config_from_dict({}) == RunConfig()
    assert config_from_dict(None) == RunConfig()


def test_config_dict_round_trip():
    cfg = tiny_cfg()
    assert config_from_dict(cfg.to_dict()) == cfg


def test_config_hash_ignores_key_order_but_not_values():
    cfg = tiny_cfg()
    reordered = json.loads(json.dumps(TINY))
    reordered["meta"] = dict(reversed(list(reordered["meta"].items())))
    assert config_hash(config_from_dict(reordered)) == config_hash(cfg)
    bumped = json.loads(json.dumps(TINY))
    bumped["seed"] = 1
    assert config_hash(config_from_dict(bumped)) != config_hash(cfg)


def test_yaml_round_trip(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "run.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ValueError):
        config_from_dict({"nonsense": {}})
    with pytest.raises(ValueError):
        config_from_dict({"meta": {"learning_rate": 1.0}})


def test_train_scheme_flags():
    cfg = RunConfig()
    expect = {
        "meta/meta": (True, True, True, True),
        "pretrain/meta": (True, False, True, True),
        "meta/random": (True, True, False, False),
        "pretrain/random": (True, False, False, False),
    }
    for scheme in TRAIN_SCHEMES:
        got = apply_train_scheme(cfg, scheme)
        flags = (
            got.meta.pretrain_aggregator,
            got.meta.update_aggregator,
            got.meta.pretrain_student,
            got.meta.update_student,
        )
        assert flags == expect[scheme], scheme
        assert got.train_scheme == scheme
    with pytest.raises(ValueError):
        apply_train_scheme(cfg, "meta/frozen")


def test_phase_seeds_deterministic_and_distinct():
    a = phase_seeds(7)
    b = phase_seeds(7)
    c = phase_seeds(8)
    assert a == b
    assert set(a) == set(PHASES)
    assert len(set(a.values())) == len(PHASES)
    assert a != c


# ---------------------------------------------------------------------------
# Pipeline


def test_pipeline_record_contents(tmp_path):
    cfg = tiny_cfg()
    record = run_pipeline(cfg, out_dir=tmp_path / "run")
    assert record.config_hash == config_hash(cfg)
    assert set(record.reports) == set(cfg.eval.methods)
    for rep in record.reports.values():
        assert 0.0 <= rep["accuracy"] <= 1.0
    assert record.train_scheme == "meta/meta"
    assert record.mask_summary["episodes"] > 0
    assert record.mask_summary["masked"] == record.mask_summary["episodes"]
    assert len(record.checkpoint_hash) == 16
    assert set(record.phase_seconds) == set(PHASES)
    assert record.error is None

    out = tmp_path / "run"
    for rel in ("record.json", "training_curve.csv", "mask_log.jsonl",
                "model/manifest.json", "registry/registry.json"):
        assert (out / rel).exists(), rel
    stored = json.loads((out / "record.json").read_text())
    assert RunRecord.from_dict(stored) == record


def test_pipeline_rerun_is_bit_reproducible():
    cfg = tiny_cfg()
    a = run_pipeline(cfg)
    b = run_pipeline(cfg)
    assert a.checkpoint_hash == b.checkpoint_hash
    assert a.reports == b.reports
    c = run_pipeline(cfg, seed=1)
    assert c.checkpoint_hash != a.checkpoint_hash


def test_saved_model_round_trips(tmp_path):
    cfg = tiny_cfg()
    run_pipeline(cfg, out_dir=tmp_path / "run")
    model = load_model_state(tmp_path / "run" / "model")
    again = load_model_state(tmp_path / "run" / "model")
    assert model.theta_e.equal(again.theta_e)
    assert model.phi.equal(again.phi)
    assert len(model.experts) == cfg.experts.num_experts
    assert model.student_cfg.input_dim == cfg.data.input_dim


# ---------------------------------------------------------------------------
# Ablation


def test_apply_axis_sets_expected_fields():
    cfg = tiny_cfg()
    assert apply_axis(cfg, "num_experts", 3).experts.num_experts == 3
    assert apply_axis(cfg, "aggregator_kind", "avg").aggregator.kind == "avg"
    assert apply_axis(cfg, "distill_target", "logits").adapt.distill_target == "logits"
    assert apply_axis(cfg, "mask_overlap", False).meta.mask_overlap is False
    assert apply_axis(cfg, "n_su", 4).eval.n_su == 4
    assert apply_axis(cfg, "n_su", 4).meta.n_su == cfg.meta.n_su  # training untouched
    assert apply_axis(cfg, "train_scheme", "pretrain/meta").train_scheme == "pretrain/meta"
    with pytest.raises(ValueError):
        AblationSpec(axis="dropout", values=(0.1,))
    with pytest.raises(ValueError):
        AblationSpec(axis="n_su", values=())


def test_ablation_sweep_bookkeeping_and_report(tmp_path):
    cfg = tiny_cfg()
    spec = AblationSpec(axis="num_experts", values=(1, 2), repeats=2, base_seed=0)
    records = run_ablation(spec, cfg)
    assert len(records) == 4
    assert [(r.axis_value, r.seed) for r in records] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert all(r.axis == "num_experts" and r.error is None for r in records)

    summary = summarize(records, "moe_distill")
    assert [row["axis_value"] for row in summary] == [1, 2]
    for row in summary:
        assert row["n"] == 2
        assert 0.0 <= row["accuracy_mean"] <= 1.0
        assert row["accuracy_std"] >= 0.0

    out = tmp_path / "ablate"
    paths = emit_report(records, out)
    for key in ("cells", "summary"):
        assert pathlib.Path(paths[key]).exists()
    assert (out / "records.json").exists()
    plots = list(out.glob("plot_*.png"))
    assert plots, "expected at least one plot"

    first = pathlib.Path(paths["cells"]).read_bytes()
    emit_report(records, out)
    assert pathlib.Path(paths["cells"]).read_bytes() == first

    with open(paths["cells"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 5  # header + 4 cells


def test_ablation_survives_failing_cell():
    cfg = tiny_cfg()
    # second value is an unknown aggregator kind: that cell must fail alone
    spec = AblationSpec(axis="aggregator_kind", values=("avg", "bogus"), repeats=1)
    records = run_ablation(spec, cfg)
    assert len(records) == 2
    assert records[0].error is None
    assert records[1].error is not None
    assert records[1].reports == {}


def test_dump_embeddings_counts_rows(tmp_path):
    from moedistill.adapt import AdaptConfig
    from moedistill.synthdata import generate_benchmark

    cfg = tiny_cfg()
    run_pipeline(cfg, out_dir=tmp_path / "run")
    model = load_model_state(tmp_path / "run" / "model")
    registry = generate_benchmark(dataclasses.replace(cfg.data, seed=phase_seeds(cfg.seed)["data"]))
    out_csv = tmp_path / "emb.csv"
    n = dump_embeddings(model, registry, out_csv, adapt_cfg=AdaptConfig(alpha=0.05), n_su=8)
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert n > 0
    assert len(rows) == 2 * n + 1  # adapted + unadapted variant per sample, plus header


# ---------------------------------------------------------------------------
# CLI


def write_cfg(tmp_path) -> pathlib.Path:
    path = tmp_path / "cfg.yaml"
    save_config(tiny_cfg(), path)
    return path


def test_cli_staged_run(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "art"
    base = ["--config", str(cfg_path), "--out", str(out)]
    for cmd in ("gen-data", "train-experts", "pretrain", "meta-train", "adapt-eval"):
        code = main([cmd] + base)
        captured = capsys.readouterr()
        assert code == 0, (cmd, captured.err)
        json.loads(captured.out)  # every stage prints a JSON status line

    report = json.loads((out / "reports" / "eval.json").read_text())
    assert set(report["reports"]) == set(tiny_cfg().eval.methods)
    assert (out / "registry" / "registry.json").exists()
    assert (out / "model" / "manifest.json").exists()
    assert (out / "training_curve.csv").exists()

    code = main(["report", "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    assert (out / "tables" / "methods.csv").exists()


def test_cli_run_subcommand(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "full"
    code = main(["run", "--config", str(cfg_path), "--out", str(out), "--seed", "1"])
    captured = capsys.readouterr()
    assert code == 0, captured.err
    record = json.loads((out / "run" / "record.json").read_text())
    assert record["seed"] == 1


def test_cli_missing_stage_errors_as_json(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "empty"
    code = main(["adapt-eval", "--config", str(cfg_path), "--out", str(out)])
    captured = capsys.readouterr()
    assert code == 1
    payload = json.loads(captured.err.strip().splitlines()[-1])
    assert "error" in payload and payload["error"]["message"]


def test_cli_ablate_and_privacy(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "ab"
    code = main([
        "ablate", "--config", str(cfg_path), "--out", str(out),
        "--axis", "num_experts", "--values", "1,2", "--repeats", "1",
    ])
    captured = capsys.readouterr()
    assert code == 0, captured.err
    assert (out / "ablation" / "summary.csv").exists()

    pout = tmp_path / "priv"
    code = main([
        "privacy-run", "--config", str(cfg_path), "--out", str(pout),
        "--fraction-private", "0.5",
    ])
    captured = capsys.readouterr()
    assert code == 0, captured.err
    payload = json.loads((pout / "privacy" / "report.json").read_text())
    assert payload["private_reads_after_pretraining"] == 0
    assert payload["masked_episodes"] == 0
    assert (pout / "privacy" / "audit_log.jsonl").exists()
