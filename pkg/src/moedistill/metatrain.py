"""Expert pretraining, warm starts, and the episodic bi-level training loop.

The outer loop follows the usual episodic recipe: sample a batch of source
domains, draw a support/query episode from each, adapt the student's
extractor with one distillation step against the (optionally masked)
aggregated expert features, score the adapted student on the labeled query
set, and update (phi, theta_e, theta_c) from the accumulated query loss with
Adam. The aggregator and the student use separate outer learning rates, both
decayed once per epoch.

Masking zeroes the token of the expert whose super-domain contains the
sampled episode's domain, so the aggregator must serve episodes whose
closest expert is unavailable, mimicking test-time conditions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .adapt import AdaptConfig, DivergenceError, MaskSpec, dist_update, test_time_adapt
from .metrics import macro_f1, pearson_r
from .nets import (
    AggregatorConfig,
    ModelState,
    StudentConfig,
    aggregate,
    aggregator_head,
    expert_feature_tokens,
    init_params,
    init_student,
    split_student,
    student_logits,
)
from .params import ParamStore
from .synthdata import DomainDataset, DomainRegistry, Episode, SuperDomainMap, sample_episode


@dataclass(frozen=True)
class MetaConfig:
    batch_size: int = 4
    beta_s: float = 2e-3
    beta_a: float = 2e-3
    epochs: int = 15
    lr_decay_per_epoch: float = 0.98
    adapt_cfg: AdaptConfig = field(default_factory=AdaptConfig)
    mask_overlap: bool = True
    seed: int = 0
    n_su: int = 24
    n_q: int = 16
    update_student: bool = True
    update_aggregator: bool = True
    early_stop_patience: int | None = None
    track_best: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.beta_s <= 0 or self.beta_a <= 0:
            raise ValueError("meta learning rates must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.n_su < 1 or self.n_q < 1:
            raise ValueError("episode sizes must be >= 1")


@dataclass
class TrainState:
    model: ModelState
    optimizer: torch.optim.Adam | None
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    outer_updates: int = 0
    inner_updates: int = 0
    last_batch_loss: float | None = None
    mask_log: list = field(default_factory=list)
    history: list = field(default_factory=list)
    best_val: float | None = None
    best_epoch: int | None = None
    stopped_early: bool = False

    @property
    def phi(self) -> ParamStore:
        return self.model.phi

    @property
    def theta_e(self) -> ParamStore:
        return self.model.theta_e

    @property
    def theta_c(self) -> ParamStore:
        return self.model.theta_c

    @property
    def experts(self) -> list[ParamStore]:
        return self.model.experts


# ---------------------------------------------------------------------------
# Plain supervised training (experts, ERM warm starts, baselines)


def supervised_train(
    cfg: StudentConfig,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
    init: ParamStore | None = None,
    weight_decay: float = 0.0,
) -> ParamStore:
    """Adam training of a full student (extractor + classifier) on (x, y).

    ``epochs=0`` returns the initialization unchanged. Raises
    :class:`DivergenceError` when the loss stops being finite.
    """
    params = init if init is not None else init_params(cfg, seed)
    if epochs == 0:
        return params
    leaves = params.as_leaves()
    theta_e, theta_c = split_student(leaves)
    opt = torch.optim.Adam(leaves.tensors(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE11)))
    xt = torch.as_tensor(x, dtype=leaves.dtype)
    if cfg.task == "classification":
        yt = torch.as_tensor(np.asarray(y), dtype=torch.long)
    else:
        yt = torch.as_tensor(np.asarray(y), dtype=leaves.dtype)
    n = xt.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits = student_logits(theta_e, theta_c, xt[idx], cfg)
            if cfg.task == "classification":
                loss = F.cross_entropy(logits, yt[idx])
            else:
                loss = F.mse_loss(logits.squeeze(-1), yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"supervised loss diverged at epoch {epoch} (lr={lr}); lower the learning rate"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
    return leaves.detach()


def train_expert(
    super_domain_data: list[DomainDataset],
    epochs: int,
    lr: float,
    seed: int,
    *,
    cfg: StudentConfig,
    batch_size: int = 64,
) -> ParamStore:
    """Train one expert on the union of its super-domain's samples."""
    if not super_domain_data:
        raise ValueError("expert needs at least one domain of data")
    x = np.concatenate([d.inputs for d in super_domain_data], axis=0)
    y = np.concatenate([d.labels for d in super_domain_data], axis=0)
    return supervised_train(
        cfg, x, y, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed
    )


def train_all_experts(
    registry: DomainRegistry,
    super_map: SuperDomainMap,
    *,
    cfg: StudentConfig,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    subsample_to: int | None = None,
) -> list[ParamStore]:
    """One expert per super-domain, each with its own derived seed.

    ``subsample_to``, when set, caps each expert's pooled training set at
    that many samples (drawn deterministically), which keeps the total
    pretraining data comparable across different expert counts.
    """
    experts = []
    seeds = np.random.SeedSequence((seed, 0xE4)).spawn(super_map.num_experts)
    for i in range(super_map.num_experts):
        data = [registry.domain(d) for d in super_map.domains_of(i)]
        if subsample_to is not None:
            data = _subsample_domains(data, subsample_to, seeds[i])
        expert_seed = int(seeds[i].generate_state(1)[0] % (2**31))
        experts.append(
            train_expert(data, epochs, lr, expert_seed, cfg=cfg, batch_size=batch_size)
        )
    return experts


def _subsample_domains(data: list[DomainDataset], cap: int, seed_seq) -> list[DomainDataset]:
    total = sum(d.num_samples for d in data)
    if total <= cap:
        return data
    rng = np.random.default_rng(seed_seq.spawn(1)[0])
    keep_frac = cap / total
    out = []
    for d in data:
        k = max(1, int(round(keep_frac * d.num_samples)))
        idx = rng.permutation(d.num_samples)[:k]
        out.append(
            DomainDataset(
                domain_id=d.domain_id,
                inputs=d.inputs[idx],
                labels=d.labels[idx],
                split=d.split,
                group_tags=None if d.group_tags is None else d.group_tags[idx],
                meta=dict(d.meta),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Warm start of aggregator and student


def pretrain_student_and_aggregator(
    registry: DomainRegistry,
    experts: list[ParamStore],
    *,
    student_cfg: StudentConfig,
    agg_cfg: AggregatorConfig,
    expert_cfg: StudentConfig | None = None,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    pretrain_student: bool = True,
    pretrain_aggregator: bool = True,
) -> tuple[ParamStore, ParamStore, ParamStore]:
    """ERM warm start: returns (phi0, theta_e0, theta_c0).

    The student trains on pooled source data. The aggregator trains through
    a classifier attached to its pooled output; that classifier is kept only
    when the config declares a logit head, otherwise it is discarded here.
    Either phase can be skipped, leaving fresh random initializations.
    """
    from .synthdata import pooled_source_arrays

    expert_cfg = expert_cfg or student_cfg
    x, y = pooled_source_arrays(registry)
    ss = np.random.SeedSequence((seed, 0xA6))
    student_seed, agg_seed = (int(s.generate_state(1)[0] % (2**31)) for s in ss.spawn(2))

    if pretrain_student:
        student = supervised_train(
            student_cfg, x, y, epochs=epochs, lr=lr, batch_size=batch_size, seed=student_seed
        )
        theta_e0, theta_c0 = split_student(student)
    else:
        theta_e0, theta_c0 = init_student(student_cfg, student_seed)

    phi0 = init_params(agg_cfg, agg_seed)
    if pretrain_aggregator and len(phi0):
        phi0 = _pretrain_aggregator(
            phi0, experts, x, y, agg_cfg, expert_cfg,
            epochs=epochs, lr=lr, batch_size=batch_size, seed=agg_seed,
        )
    return phi0, theta_e0, theta_c0


def _pretrain_aggregator(
    phi0: ParamStore,
    experts: list[ParamStore],
    x: np.ndarray,
    y: np.ndarray,
    agg_cfg: AggregatorConfig,
    expert_cfg: StudentConfig,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> ParamStore:
    task = expert_cfg.task
    num_out = expert_cfg.num_classes if task == "classification" else 1
    phi = phi0.as_leaves()
    temporary_head = agg_cfg.head_classes is None
    if temporary_head:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAD)))
        bound = 1.0 / math.sqrt(agg_cfg.output_dim)
        head_w = torch.as_tensor(
            rng.uniform(-bound, bound, size=(agg_cfg.output_dim, num_out)), dtype=phi.dtype
        ).requires_grad_(True)
        head_b = torch.as_tensor(
            rng.uniform(-bound, bound, size=(num_out,)), dtype=phi.dtype
        ).requires_grad_(True)
    params = phi.tensors() + ([head_w, head_b] if temporary_head else [])
    opt = torch.optim.Adam(params, lr=lr)

    xt = torch.as_tensor(x, dtype=phi.dtype)
    with torch.no_grad():
        tokens_all = expert_feature_tokens(experts, xt, expert_cfg)
    if task == "classification":
        yt = torch.as_tensor(np.asarray(y), dtype=torch.long)
    else:
        yt = torch.as_tensor(np.asarray(y), dtype=phi.dtype)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA9)))
    n = xt.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            agg = aggregate(phi, tokens_all[idx], agg_cfg)
            if temporary_head:
                logits = agg @ head_w + head_b
            else:
                logits = aggregator_head(phi, agg, agg_cfg)
            if task == "classification":
                loss = F.cross_entropy(logits, yt[idx])
            else:
                loss = F.mse_loss(logits.squeeze(-1), yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"aggregator warm-start loss diverged at epoch {epoch} (lr={lr})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
    return phi.detach()


# ---------------------------------------------------------------------------
# Bi-level meta-training


def query_loss(
    theta_e: ParamStore,
    theta_c: ParamStore,
    episode: Episode,
    student_cfg: StudentConfig,
) -> torch.Tensor:
    qx = torch.as_tensor(episode.query_x, dtype=theta_e.dtype)
    logits = student_logits(theta_e, theta_c, qx, student_cfg)
    if student_cfg.task == "classification":
        qy = torch.as_tensor(episode.query_y, dtype=torch.long)
        return F.cross_entropy(logits, qy)
    qy = torch.as_tensor(episode.query_y, dtype=theta_e.dtype)
    return F.mse_loss(logits.squeeze(-1), qy)


def compute_meta_loss(
    phi: ParamStore,
    theta_e: ParamStore,
    theta_c: ParamStore,
    experts: list[ParamStore],
    episodes: list[Episode],
    super_map: SuperDomainMap | None,
    cfg: MetaConfig,
    *,
    student_cfg: StudentConfig,
    agg_cfg: AggregatorConfig,
    expert_cfg: StudentConfig | None = None,
    mask_log: list | None = None,
) -> torch.Tensor:
    """Accumulated post-adaptation query loss over a meta batch.

    Per episode: adapt theta_e with the inner distillation step (masking the
    overlapping expert when configured), then score the adapted student on
    the labeled query set. Losses are summed over the batch.
    """
    total = None
    for ep in episodes:
        if cfg.mask_overlap:
            if super_map is None or ep.domain_id not in super_map.assignment:
                raise ValueError(
                    f"episode domain {ep.domain_id} has no super-domain assignment; "
                    "masking requires one"
                )
            mask = MaskSpec(super_map.expert_of(ep.domain_id))
        else:
            mask = MaskSpec(None)
        if mask_log is not None:
            mask_log.append({"domain_id": ep.domain_id, "masked_expert": mask.masked_expert})
        sx = torch.as_tensor(ep.support_x, dtype=theta_e.dtype)
        adapted = dist_update(
            theta_e, phi, experts, sx, mask, cfg.adapt_cfg,
            student_cfg=student_cfg, agg_cfg=agg_cfg, expert_cfg=expert_cfg,
        )
        loss = query_loss(adapted, theta_c, ep, student_cfg)
        total = loss if total is None else total + loss
    return total


def meta_step(
    state: TrainState,
    episodes: list[Episode],
    super_map: SuperDomainMap | None,
    cfg: MetaConfig,
) -> TrainState:
    """One outer update from a batch of episodes. Mutates and returns state."""
    model = state.model
    batch_log: list = []
    loss = compute_meta_loss(
        model.phi, model.theta_e, model.theta_c, model.experts,
        episodes, super_map, cfg,
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg, expert_cfg=model.expert_cfg,
        mask_log=batch_log,
    )
    if not torch.isfinite(loss):
        raise DivergenceError(f"meta batch loss is {loss.item()} at step {state.step}")
    if state.optimizer is not None:
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.outer_updates += 1
    for entry in batch_log:
        entry["step"] = state.step
    state.mask_log.extend(batch_log)
    state.inner_updates += len(episodes) * cfg.adapt_cfg.num_inner_steps
    state.step += 1
    state.last_batch_loss = float(loss.detach())
    return state


def _validation_score(
    model: ModelState, registry: DomainRegistry, cfg: MetaConfig, seed: int
) -> float | None:
    """Adapt-then-predict score pooled over validation target domains."""
    preds, labels = [], []
    frozen = model.detached()
    for did in sorted(registry.val_ids):
        dom = registry.domain(did)
        if dom.num_samples < cfg.n_su + 1:
            continue
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1A, did)))
        idx = rng.permutation(dom.num_samples)
        su, rest = idx[: cfg.n_su], idx[cfg.n_su :]
        sx = torch.as_tensor(dom.inputs[su], dtype=frozen.theta_e.dtype)
        adapted = test_time_adapt(frozen, sx, cfg.adapt_cfg)
        with torch.no_grad():
            logits = student_logits(
                adapted.theta_e, adapted.theta_c,
                torch.as_tensor(dom.inputs[rest], dtype=frozen.theta_e.dtype),
                model.student_cfg,
            )
        if model.task == "classification":
            preds.append(logits.argmax(dim=-1).numpy())
        else:
            preds.append(logits.squeeze(-1).numpy())
        labels.append(dom.labels[rest])
    if not preds:
        return None
    p, y = np.concatenate(preds), np.concatenate(labels)
    if model.task == "classification":
        return macro_f1(p, y, model.student_cfg.num_classes)
    return pearson_r(p, y)


def _build_optimizer(model: ModelState, cfg: MetaConfig) -> torch.optim.Adam | None:
    groups = []
    if cfg.update_aggregator and len(model.phi):
        groups.append({"params": model.phi.tensors(), "lr": cfg.beta_a, "base_lr": cfg.beta_a})
    if cfg.update_student:
        tensors = model.theta_e.tensors() + model.theta_c.tensors()
        groups.append({"params": tensors, "lr": cfg.beta_s, "base_lr": cfg.beta_s})
    if not groups:
        return None
    return torch.optim.Adam(groups)


def meta_train(
    registry: DomainRegistry,
    experts: list[ParamStore],
    super_map: SuperDomainMap | None,
    cfg: MetaConfig,
    *,
    student_cfg: StudentConfig,
    agg_cfg: AggregatorConfig,
    expert_cfg: StudentConfig | None = None,
    init_phi: ParamStore,
    init_theta_e: ParamStore,
    init_theta_c: ParamStore,
) -> TrainState:
    """Episodic training with per-epoch learning-rate decay and best tracking.

    An epoch is ceil(num_source_domains / batch_size) meta batches with
    domains sampled uniformly. When validation target domains exist the best
    checkpoint (by validation macro-F1, or correlation for regression) is
    restored into the returned state; early stopping kicks in after
    ``early_stop_patience`` epochs without improvement.
    """
    expert_cfg = expert_cfg or student_cfg
    model = ModelState(
        student_cfg, expert_cfg, agg_cfg,
        init_theta_e.as_leaves(), init_theta_c.as_leaves(), init_phi.as_leaves(),
        [e.detach() for e in experts],
    )
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x3E7A)))
    state = TrainState(model=model, optimizer=_build_optimizer(model, cfg), rng=rng)
    source_ids = sorted(registry.source_ids)
    if not source_ids:
        raise ValueError("meta-training needs at least one source domain")
    steps_per_epoch = math.ceil(len(source_ids) / cfg.batch_size)
    best: dict | None = None
    epochs_since_best = 0

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        if state.optimizer is not None:
            factor = cfg.lr_decay_per_epoch**epoch
            for group in state.optimizer.param_groups:
                group["lr"] = group["base_lr"] * factor
        epoch_losses = []
        if state.optimizer is not None:
            for _ in range(steps_per_epoch):
                replace_flag = cfg.batch_size > len(source_ids)
                chosen = rng.choice(source_ids, size=cfg.batch_size, replace=replace_flag)
                episodes = [
                    sample_episode(registry.domain(int(d)), cfg.n_su, cfg.n_q, rng)
                    for d in chosen
                ]
                meta_step(state, episodes, super_map, cfg)
                epoch_losses.append(state.last_batch_loss)
        val = _validation_score(model, registry, cfg, cfg.seed)
        state.history.append(
            {
                "epoch": epoch,
                "batch_loss_mean": float(np.mean(epoch_losses)) if epoch_losses else None,
                "val_metric": val,
                "beta_a": cfg.beta_a * cfg.lr_decay_per_epoch**epoch,
                "beta_s": cfg.beta_s * cfg.lr_decay_per_epoch**epoch,
            }
        )
        if val is not None and cfg.track_best:
            if best is None or val > best["val"]:
                best = {
                    "val": val,
                    "epoch": epoch,
                    "phi": model.phi.detach().clone(),
                    "theta_e": model.theta_e.detach().clone(),
                    "theta_c": model.theta_c.detach().clone(),
                }
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if cfg.early_stop_patience is not None and epochs_since_best >= cfg.early_stop_patience:
                state.stopped_early = True
                break

    if best is not None:
        state.best_val, state.best_epoch = best["val"], best["epoch"]
        state.model = ModelState(
            student_cfg, expert_cfg, agg_cfg,
            best["theta_e"], best["theta_c"], best["phi"], model.experts,
        )
    else:
        state.model = model.detached()
    return state
