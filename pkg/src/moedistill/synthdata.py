"""Synthetic multi-domain benchmarks with controllable domain shift.

Each benchmark shares a set of class-conditional Gaussian prototypes across
all domains. A domain applies its own affine transform (a rotation generated
from a skew-symmetric matrix plus a translation, both scaled by
``shift_strength``) to samples drawn from those prototypes, so every domain
carries the same label semantics but a different input geometry.

Domains are correlated through a small number of latent styles: each style
owns a base rotation/translation and domains jitter around their style's
base. Source domains cycle through the styles; target domains re-draw a
style with a larger jitter, which makes them related to the training
distribution but out of it. The style id is stored in domain metadata so
super-domain clustering can optionally follow it.

The regression variant keeps the same input geometry and replaces labels
with a linear response whose weights drift per domain, giving Pearson-r
metrics something real to measure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg

SPLIT_SOURCE = "source"
SPLIT_VAL = "target-val"
SPLIT_TEST = "target-test"

_STYLE_JITTER_SOURCE = 0.15
_STYLE_JITTER_TARGET = 1.2
_TRANSLATION_SCALE = 0.6
_STYLE_GAIN_RANGE = (1.2, 2.2)
_DOMAIN_GAIN_JITTER = (0.9, 1.1)


@dataclass(frozen=True)
class BenchmarkSpec:
    num_source_domains: int = 20
    num_target_domains: int = 8
    num_classes: int = 5
    input_dim: int = 8
    samples_per_domain_range: tuple[int, int] = (100, 300)
    shift_strength: float = 1.0
    seed: int = 0
    task: str = "classification"
    num_val_domains: int = 2
    num_styles: int = 8
    num_groups: int = 0
    prototype_scale: float = 1.5
    noise_scale: float = 1.0
    label_noise: float = 0.0

    def __post_init__(self):
        if self.num_source_domains < 1 or self.num_target_domains < 1:
            raise ValueError("need at least one source and one target domain")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification benchmark needs num_classes >= 2")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 (rotations need a plane)")
        lo, hi = self.samples_per_domain_range
        if lo < 1 or hi < lo:
            raise ValueError("samples_per_domain_range must satisfy 1 <= lo <= hi")
        if self.shift_strength < 0:
            raise ValueError("shift_strength must be >= 0")
        if not 0 <= self.num_val_domains < self.num_target_domains:
            raise ValueError("num_val_domains must be in [0, num_target_domains)")
        if self.num_styles < 1:
            raise ValueError("num_styles must be >= 1")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must be in [0, 1)")


@dataclass
class DomainDataset:
    """One domain's samples plus metadata."""

    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray
    split: str
    group_tags: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty [n, input_dim] matrix")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels and inputs disagree on sample count")
        if self.split not in (SPLIT_SOURCE, SPLIT_VAL, SPLIT_TEST):
            raise ValueError(f"unknown split {self.split!r}")
        if self.group_tags is not None and self.group_tags.shape[0] != self.num_samples:
            raise ValueError("group_tags and inputs disagree on sample count")

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class DomainRegistry:
    domains: list[DomainDataset]
    spec: BenchmarkSpec

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate domain_id in registry")
        if set(self.source_ids) & set(self.target_ids):
            raise ValueError("source and target domain ids overlap")
        self._by_id = {d.domain_id: d for d in self.domains}

    @property
    def source_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains if d.split == SPLIT_SOURCE]

    @property
    def val_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains if d.split == SPLIT_VAL]

    @property
    def test_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains if d.split == SPLIT_TEST]

    @property
    def target_ids(self) -> list[int]:
        return self.val_ids + self.test_ids

    def domain(self, domain_id: int) -> DomainDataset:
        return self._by_id[domain_id]

    def subset(self, ids) -> "DomainRegistry":
        keep = set(ids)
        return DomainRegistry([d for d in self.domains if d.domain_id in keep], self.spec)


@dataclass(frozen=True)
class SuperDomainMap:
    assignment: dict[int, int]
    num_experts: int

    def __post_init__(self):
        used = set(self.assignment.values())
        if any(not 0 <= e < self.num_experts for e in used):
            raise ValueError("expert index out of range")
        if used != set(range(self.num_experts)):
            raise ValueError("every expert index needs at least one assigned domain")

    def expert_of(self, domain_id: int) -> int:
        return self.assignment[domain_id]

    def domains_of(self, expert_idx: int) -> list[int]:
        return sorted(d for d, e in self.assignment.items() if e == expert_idx)


@dataclass
class Episode:
    """Unlabeled support batch plus labeled query batch from one domain."""

    support_x: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    domain_id: int


# ---------------------------------------------------------------------------
# Generation


def _skew(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    k = (a - a.T) / 2.0
    return k / max(np.linalg.norm(k, 2), 1e-12)


def _domain_transform(
    rng: np.random.Generator, style: dict, jitter: float, shift: float, dim: int
) -> tuple[np.ndarray, np.ndarray, float]:
    k = _skew_mix(style["skew"], _skew(rng, dim), jitter)
    gain = style["gain"] * float(rng.uniform(*_DOMAIN_GAIN_JITTER))
    rot = scipy.linalg.expm(shift * gain * k)
    trans = shift * _TRANSLATION_SCALE * (style["shift_dir"] + jitter * rng.standard_normal(dim))
    return rot, trans, gain


def _skew_mix(base: np.ndarray, noise: np.ndarray, jitter: float) -> np.ndarray:
    k = base + jitter * noise
    return k / max(np.linalg.norm(k, 2), 1e-12)


def generate_benchmark(spec: BenchmarkSpec) -> DomainRegistry:
    """Build a registry of source / target-val / target-test domains.

    Deterministic in ``spec`` (including its seed). Sample counts are drawn
    uniformly from ``samples_per_domain_range``, so domains are imbalanced.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    dim, c = spec.input_dim, spec.num_classes
    prototypes = spec.prototype_scale * rng.standard_normal((c, dim))
    w_base = rng.standard_normal(dim) / np.sqrt(dim)

    styles = []
    for _ in range(spec.num_styles):
        styles.append(
            {
                "skew": _skew(rng, dim),
                "shift_dir": rng.standard_normal(dim),
                "gain": float(rng.uniform(*_STYLE_GAIN_RANGE)),
                "dw": rng.standard_normal(dim) / np.sqrt(dim),
            }
        )

    lo, hi = spec.samples_per_domain_range
    n_total = spec.num_source_domains + spec.num_target_domains
    domains: list[DomainDataset] = []
    for idx in range(n_total):
        is_source = idx < spec.num_source_domains
        if is_source:
            split = SPLIT_SOURCE
            style_id = idx % spec.num_styles
            jitter = _STYLE_JITTER_SOURCE
        else:
            t_rank = idx - spec.num_source_domains
            split = SPLIT_VAL if t_rank < spec.num_val_domains else SPLIT_TEST
            style_id = int(rng.integers(spec.num_styles))
            jitter = _STYLE_JITTER_TARGET
        style = styles[style_id]
        rot, trans, gain = _domain_transform(rng, style, jitter, spec.shift_strength, dim)
        n = int(rng.integers(lo, hi + 1))

        if spec.task == "classification":
            y = rng.integers(0, c, size=n)
            raw = prototypes[y] + spec.noise_scale * rng.standard_normal((n, dim))
            if spec.label_noise > 0:
                flip = rng.random(n) < spec.label_noise
                y = np.where(flip, rng.integers(0, c, size=n), y)
            labels = y.astype(np.int64)
        else:
            raw = rng.standard_normal((n, dim))
            w_dom = w_base + spec.shift_strength * gain * style["dw"]
            labels = (raw @ w_dom + 0.1 * rng.standard_normal(n)).astype(np.float32)

        x = (raw @ rot.T + trans).astype(np.float32)
        groups = None
        if spec.num_groups > 0:
            groups = rng.integers(0, spec.num_groups, size=n).astype(np.int64)
        domains.append(
            DomainDataset(
                domain_id=idx,
                inputs=x,
                labels=labels,
                split=split,
                group_tags=groups,
                meta={"style": style_id, "gain": round(gain, 6)},
            )
        )
    return DomainRegistry(domains, spec)


# ---------------------------------------------------------------------------
# Super-domain clustering


def cluster_domains(
    registry: DomainRegistry, n_experts: int, strategy: str = "round_robin", key: str = "style"
) -> SuperDomainMap:
    """Assign every source domain to one of ``n_experts`` super-domains.

    ``round_robin`` cycles sorted source ids through the expert indices, so
    super-domain sizes differ by at most one. ``metadata_key`` groups by a
    domain metadata value (e.g. the generator's latent style); the number of
    distinct values must equal ``n_experts``.
    """
    source_ids = sorted(registry.source_ids)
    if not 1 <= n_experts <= len(source_ids):
        raise ValueError(f"n_experts={n_experts} not in [1, {len(source_ids)}]")
    if strategy == "round_robin":
        assignment = {d: i % n_experts for i, d in enumerate(source_ids)}
    elif strategy == "metadata_key":
        values = sorted({registry.domain(d).meta[key] for d in source_ids})
        if len(values) != n_experts:
            raise ValueError(
                f"metadata key {key!r} has {len(values)} distinct values, expected {n_experts}"
            )
        index = {v: i for i, v in enumerate(values)}
        assignment = {d: index[registry.domain(d).meta[key]] for d in source_ids}
    else:
        raise ValueError(f"unknown clustering strategy {strategy!r}")
    return SuperDomainMap(assignment, n_experts)


# ---------------------------------------------------------------------------
# Episode sampling


def sample_episode(
    domain: DomainDataset, n_su: int, n_q: int, rng: np.random.Generator
) -> Episode:
    """Draw disjoint unlabeled-support and labeled-query sets from a domain."""
    if n_su < 1 or n_q < 1:
        raise ValueError("n_su and n_q must be >= 1")
    if n_su + n_q > domain.num_samples:
        raise ValueError(
            f"domain {domain.domain_id} has {domain.num_samples} samples; "
            f"episode needs n_su+n_q={n_su + n_q}"
        )
    idx = rng.permutation(domain.num_samples)[: n_su + n_q]
    su, q = idx[:n_su], idx[n_su:]
    return Episode(
        support_x=domain.inputs[su],
        query_x=domain.inputs[q],
        query_y=domain.labels[q],
        domain_id=domain.domain_id,
    )


# ---------------------------------------------------------------------------
# Serialization


def save_registry(registry: DomainRegistry, out_dir) -> None:
    """Write ``registry.json`` plus one binary blob per domain array.

    Inputs are row-major float32; labels are int32 (classification) or
    float32 (regression); group tags int32. Byte-identical across repeated
    saves of the same registry.
    """
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in registry.domains:
        x_file = f"domain_{d.domain_id:04d}_x.bin"
        y_file = f"domain_{d.domain_id:04d}_y.bin"
        d.inputs.astype("<f4").tofile(out / x_file)
        if registry.spec.task == "classification":
            d.labels.astype("<i4").tofile(out / y_file)
        else:
            d.labels.astype("<f4").tofile(out / y_file)
        entry = {
            "domain_id": d.domain_id,
            "split": d.split,
            "num_samples": int(d.num_samples),
            "input_dim": int(d.input_dim),
            "meta": d.meta,
            "inputs_file": x_file,
            "labels_file": y_file,
        }
        if d.group_tags is not None:
            g_file = f"domain_{d.domain_id:04d}_g.bin"
            d.group_tags.astype("<i4").tofile(out / g_file)
            entry["groups_file"] = g_file
        entries.append(entry)
    spec_dict = asdict(registry.spec)
    spec_dict["samples_per_domain_range"] = list(spec_dict["samples_per_domain_range"])
    manifest = {"format_version": 1, "spec": spec_dict, "domains": entries}
    (out / "registry.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_registry(in_dir) -> DomainRegistry:
    import pathlib

    src = pathlib.Path(in_dir)
    manifest = json.loads((src / "registry.json").read_text())
    spec_dict = dict(manifest["spec"])
    spec_dict["samples_per_domain_range"] = tuple(spec_dict["samples_per_domain_range"])
    spec = BenchmarkSpec(**spec_dict)
    domains = []
    for entry in manifest["domains"]:
        n, dim = entry["num_samples"], entry["input_dim"]
        x = np.fromfile(src / entry["inputs_file"], dtype="<f4").reshape(n, dim)
        if spec.task == "classification":
            y = np.fromfile(src / entry["labels_file"], dtype="<i4").astype(np.int64)
        else:
            y = np.fromfile(src / entry["labels_file"], dtype="<f4")
        groups = None
        if "groups_file" in entry:
            groups = np.fromfile(src / entry["groups_file"], dtype="<i4").astype(np.int64)
        domains.append(
            DomainDataset(
                domain_id=entry["domain_id"],
                inputs=x,
                labels=y,
                split=entry["split"],
                group_tags=groups,
                meta=entry["meta"],
            )
        )
    return DomainRegistry(domains, spec)


def pooled_source_arrays(registry: DomainRegistry) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate all source-domain samples (ERM-style pooled training set)."""
    src = [registry.domain(i) for i in sorted(registry.source_ids)]
    x = np.concatenate([d.inputs for d in src], axis=0)
    y = np.concatenate([d.labels for d in src], axis=0)
    return x, y


def benchmark_spec_from_dict(d: dict) -> BenchmarkSpec:
    d = dict(d)
    if "samples_per_domain_range" in d:
        d["samples_per_domain_range"] = tuple(d["samples_per_domain_range"])
    return BenchmarkSpec(**d)


def with_seed(spec: BenchmarkSpec, seed: int) -> BenchmarkSpec:
    return replace(spec, seed=seed)
