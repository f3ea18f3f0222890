"""Privacy-regulated training: private domains only ever export expert weights.

Source domains are split into a private and a public set. Experts train on
private raw data; everything after that (warm starts, meta-training,
baselines, evaluation) runs on public and target data only, with expert
masking disabled since the two phases share no domains. An access-logging
wrapper around the registry records every raw-data read with its phase;
reading a private domain outside expert pretraining raises immediately, and
the persisted log proves the clean run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import DomainDataset, DomainRegistry

PHASE_EXPERT = "expert_pretraining"


class PrivacyViolationError(RuntimeError):
    """Private raw data was touched outside expert pretraining."""


@dataclass(frozen=True)
class PrivacySplit:
    private_ids: frozenset
    public_ids: frozenset

    def __post_init__(self):
        if self.private_ids & self.public_ids:
            raise ValueError("private and public domain ids overlap")
        if not self.private_ids or not self.public_ids:
            raise ValueError("both privacy sides must be non-empty")


def split_privacy(registry: DomainRegistry, fraction_private: float, seed: int) -> PrivacySplit:
    """Deterministic random split of the source domains."""
    if not 0 < fraction_private < 1:
        raise ValueError("fraction_private must lie strictly between 0 and 1")
    ids = sorted(registry.source_ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 source domains to split")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9F1)))
    order = rng.permutation(len(ids))
    n_priv = int(round(fraction_private * len(ids)))
    n_priv = min(max(n_priv, 1), len(ids) - 1)
    private = frozenset(ids[i] for i in order[:n_priv])
    public = frozenset(ids[i] for i in order[n_priv:])
    return PrivacySplit(private, public)


@dataclass
class AccessRecord:
    phase: str
    domain_id: int
    private: bool


class AuditedRegistry:
    """Registry proxy that logs raw-data reads and enforces the firewall.

    Quacks like :class:`DomainRegistry` for everything downstream code uses
    (``spec``, id lists, ``domain``). The active phase is set by the caller;
    any ``domain()`` call is logged, and a private domain requested outside
    the expert-pretraining phase raises :class:`PrivacyViolationError`.
    """

    def __init__(self, registry: DomainRegistry, split: PrivacySplit):
        self._registry = registry
        self.split = split
        self.log: list[AccessRecord] = []
        self.phase = PHASE_EXPERT

    def set_phase(self, phase: str) -> None:
        self.phase = phase

    @property
    def spec(self):
        return self._registry.spec

    @property
    def source_ids(self):
        return self._registry.source_ids

    @property
    def val_ids(self):
        return self._registry.val_ids

    @property
    def test_ids(self):
        return self._registry.test_ids

    @property
    def target_ids(self):
        return self._registry.target_ids

    def domain(self, domain_id: int) -> DomainDataset:
        is_private = domain_id in self.split.private_ids
        self.log.append(AccessRecord(self.phase, domain_id, is_private))
        if is_private and self.phase != PHASE_EXPERT:
            raise PrivacyViolationError(
                f"private domain {domain_id} requested during phase {self.phase!r}"
            )
        return self._registry.domain(domain_id)

    def private_view(self) -> "RegistryView":
        return RegistryView(self, sorted(self.split.private_ids))

    def public_view(self) -> "RegistryView":
        return RegistryView(self, sorted(self.split.public_ids))

    def reads_after_pretraining(self) -> list[AccessRecord]:
        return [r for r in self.log if r.private and r.phase != PHASE_EXPERT]

    def log_as_dicts(self) -> list[dict]:
        return [
            {"phase": r.phase, "domain_id": r.domain_id, "private": r.private}
            for r in self.log
        ]


@dataclass
class RegistryView:
    """A registry facade whose source domains are a subset of the parent's.

    Target domains pass through unchanged (they hold no private data); every
    raw read still flows through the audited parent.
    """

    parent: AuditedRegistry
    _source_ids: list

    @property
    def spec(self):
        return self.parent.spec

    @property
    def source_ids(self):
        return list(self._source_ids)

    @property
    def val_ids(self):
        return self.parent.val_ids

    @property
    def test_ids(self):
        return self.parent.test_ids

    @property
    def target_ids(self):
        return self.parent.target_ids

    def domain(self, domain_id: int) -> DomainDataset:
        return self.parent.domain(domain_id)


def run_privacy_experiment(
    registry: DomainRegistry,
    split: PrivacySplit,
    num_experts: int,
    *,
    student_cfg,
    agg_cfg,
    adapt_cfg,
    meta_cfg,
    expert_epochs: int = 20,
    expert_lr: float = 1e-3,
    pretrain_epochs: int = 5,
    pretrain_lr: float = 1e-3,
    erm_epochs: int = 20,
    erm_lr: float = 1e-3,
    n_su: int = 24,
    seed: int = 0,
    strict: bool = False,
) -> dict:
    """Full private-experts / public-meta-training run.

    Returns the two evaluation reports (adapted student vs public-only ERM),
    the complete access log, and the per-episode mask log (which must be
    empty of masking, since masking is forced off).
    """
    from dataclasses import replace

    from .evalkit import MethodAssets, evaluate_method, train_erm
    from .metatrain import meta_train, pretrain_student_and_aggregator, train_all_experts
    from .synthdata import cluster_domains

    audited = AuditedRegistry(registry, split)

    audited.set_phase(PHASE_EXPERT)
    private = audited.private_view()
    if num_experts > len(private.source_ids):
        raise ValueError("more experts than private domains")
    super_map = cluster_domains(private, num_experts)
    experts = train_all_experts(
        private, super_map, cfg=student_cfg, epochs=expert_epochs, lr=expert_lr, seed=seed
    )

    audited.set_phase("meta_training")
    public = audited.public_view()
    meta_cfg = replace(meta_cfg, mask_overlap=False, seed=seed)
    phi0, theta_e0, theta_c0 = pretrain_student_and_aggregator(
        public, experts,
        student_cfg=student_cfg, agg_cfg=agg_cfg,
        epochs=pretrain_epochs, lr=pretrain_lr, seed=seed,
    )
    state = meta_train(
        public, experts, None, meta_cfg,
        student_cfg=student_cfg, agg_cfg=agg_cfg,
        init_phi=phi0, init_theta_e=theta_e0, init_theta_c=theta_c0,
    )
    if any(entry["masked_expert"] is not None for entry in state.mask_log):
        raise AssertionError("masking must stay disabled in the privacy setting")

    erm_assets = train_erm(public, student_cfg, epochs=erm_epochs, lr=erm_lr, seed=seed)

    audited.set_phase("evaluation")
    assets = MethodAssets(model=state.model, erm_student=erm_assets)
    report_moe = evaluate_method(
        "moe_distill", assets, audited, adapt_cfg, n_su=n_su, seed=seed, strict=strict
    )
    report_erm = evaluate_method(
        "erm", assets, audited, adapt_cfg, n_su=n_su, seed=seed, strict=strict
    )

    violations = audited.reads_after_pretraining()
    if violations:
        raise PrivacyViolationError(f"{len(violations)} private reads escaped the firewall")
    return {
        "moe_distill": report_moe,
        "erm": report_erm,
        "access_log": audited.log_as_dicts(),
        "mask_log": state.mask_log,
        "private_ids": sorted(split.private_ids),
        "public_ids": sorted(split.public_ids),
    }
