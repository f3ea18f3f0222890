"""Run configuration: nested sections, YAML round trip, canonical hashing.

A config is a plain tree of sections (data, experts, student, aggregator,
adapt, meta, baselines, eval) mirroring the stages of a run. The hash is
taken over the canonicalized JSON form (sorted keys, defaults filled in), so
two configs that differ only in field order or omitted defaults hash alike.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .adapt import AdaptConfig
from .synthdata import BenchmarkSpec

TRAIN_SCHEMES = ("pretrain/random", "meta/random", "pretrain/meta", "meta/meta")


@dataclass(frozen=True)
class ExpertSection:
    num_experts: int = 5
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    strategy: str = "round_robin"
    subsample_to: int | None = None


@dataclass(frozen=True)
class StudentSection:
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    activation: str = "relu"


@dataclass(frozen=True)
class AggregatorSection:
    kind: str = "transformer"
    k: int = 4
    d_k: int | None = None
    inner_dim: int | None = None
    out_dim: int | None = None
    head_classes: int | None = None


@dataclass(frozen=True)
class MetaSection:
    batch_size: int = 4
    beta_s: float = 2e-3
    beta_a: float = 2e-3
    epochs: int = 15
    lr_decay_per_epoch: float = 0.98
    mask_overlap: bool = True
    n_su: int = 24
    n_q: int = 16
    update_student: bool = True
    update_aggregator: bool = True
    early_stop_patience: int | None = None
    track_best: bool = True
    pretrain_student: bool = True
    pretrain_aggregator: bool = True
    pretrain_epochs: int = 8
    pretrain_lr: float = 1e-3


@dataclass(frozen=True)
class BaselineSection:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(frozen=True)
class EvalSection:
    n_su: int = 24
    strict: bool = False
    methods: tuple[str, ...] = ("moe_distill", "moe_distill_no_adapt", "erm", "norm_adapt")


@dataclass(frozen=True)
class RunConfig:
    data: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    experts: ExpertSection = field(default_factory=ExpertSection)
    student: StudentSection = field(default_factory=StudentSection)
    aggregator: AggregatorSection = field(default_factory=AggregatorSection)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    meta: MetaSection = field(default_factory=MetaSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["samples_per_domain_range"] = list(d["data"]["samples_per_domain_range"])
        d["student"]["hidden_dims"] = list(d["student"]["hidden_dims"])
        d["eval"]["methods"] = list(d["eval"]["methods"])
        return d

    @property
    def train_scheme(self) -> str:
        agg = "meta" if self.meta.update_aggregator else "pretrain"
        if self.meta.update_student and self.meta.pretrain_student:
            student = "meta"
        elif not self.meta.update_student and not self.meta.pretrain_student:
            student = "random"
        else:
            student = "custom"
        return f"{agg}/{student}"


_SECTIONS = {
    "data": BenchmarkSpec,
    "experts": ExpertSection,
    "student": StudentSection,
    "aggregator": AggregatorSection,
    "adapt": AdaptConfig,
    "meta": MetaSection,
    "baselines": BaselineSection,
    "eval": EvalSection,
}

_TUPLE_FIELDS = {
    ("data", "samples_per_domain_range"),
    ("student", "hidden_dims"),
    ("eval", "methods"),
}


def config_from_dict(d: dict) -> RunConfig:
    """Build a config from a (possibly partial) dict; unknown keys error."""
    d = dict(d or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(d.pop(name, {}) or {})
        known = {f.name for f in fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"unknown keys in section {name!r}: {sorted(unknown)}")
        for key in list(section):
            if (name, key) in _TUPLE_FIELDS and section[key] is not None:
                section[key] = tuple(section[key])
        kwargs[name] = cls(**section)
    seed = d.pop("seed", 0)
    if d:
        raise ValueError(f"unknown top-level config keys: {sorted(d)}")
    return RunConfig(seed=seed, **kwargs)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw or {})


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def apply_train_scheme(cfg: RunConfig, scheme: str) -> RunConfig:
    """Set the four warm-start/update flags from an 'aggregator/student' name."""
    if scheme not in TRAIN_SCHEMES:
        raise ValueError(f"unknown training scheme {scheme!r}; expected one of {TRAIN_SCHEMES}")
    agg, student = scheme.split("/")
    meta = replace(
        cfg.meta,
        pretrain_aggregator=True,
        update_aggregator=(agg == "meta"),
        pretrain_student=(student == "meta"),
        update_student=(student == "meta"),
    )
    return replace(cfg, meta=meta)
