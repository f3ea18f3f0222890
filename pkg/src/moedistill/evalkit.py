"""Evaluation protocol over held-out target domains, plus baseline methods.

Four methods share one protocol. For every target domain a fixed
support/eval split is drawn from a per-domain seeded rng, so all methods see
identical evaluation pools and identical support batches:

* ``moe_distill`` -- adapt the extractor once on the unlabeled support
  batch, then classify the rest of the domain.
* ``moe_distill_no_adapt`` -- same trained model, adaptation skipped.
* ``erm`` -- a student trained on pooled source data, no adaptation.
* ``norm_adapt`` -- a student with feature-wise normalization layers whose
  statistics are recomputed from the support batch (zero gradient updates).

Support samples are excluded from the evaluated pool, so adaptation data
never inflates the metrics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .adapt import AdaptConfig, DivergenceError, UpdateCounter, test_time_adapt
from .metrics import MetricReport, accuracy, macro_f1, pearson_r, worst_case_metric
from .nets import ModelState, StudentConfig, init_params, split_student, student_logits
from .params import ParamStore
from .synthdata import DomainRegistry
from .metatrain import supervised_train

METHODS = ("moe_distill", "moe_distill_no_adapt", "erm", "norm_adapt")
_NORM_EPS = 1e-5


# ---------------------------------------------------------------------------
# ERM baseline


def train_erm(
    registry: DomainRegistry,
    cfg: StudentConfig,
    *,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
) -> "ErmAssets":
    """Pooled-source supervised training of a plain student."""
    from .synthdata import pooled_source_arrays

    x, y = pooled_source_arrays(registry)
    params = supervised_train(
        cfg, x, y, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed
    )
    theta_e, theta_c = split_student(params)
    return ErmAssets(theta_e, theta_c, cfg)


# ---------------------------------------------------------------------------
# Normalization-adaptation baseline


@dataclass
class NormAssets:
    """Trained normalization-student parameters plus source-pool statistics."""

    params: ParamStore
    cfg: StudentConfig
    source_stats: list


def init_norm_student(cfg: StudentConfig, seed: int) -> ParamStore:
    base = init_params(cfg, seed)
    entries = dict(base.items())
    for i, width in enumerate(cfg.hidden_dims):
        entries[f"norm{i}.g"] = torch.ones(width, dtype=base.dtype)
        entries[f"norm{i}.b"] = torch.zeros(width, dtype=base.dtype)
    return ParamStore(entries)


def _norm_forward(
    params: ParamStore, x: torch.Tensor, cfg: StudentConfig, stats: list | None
) -> tuple[torch.Tensor, list]:
    """Features plus the per-layer statistics actually used.

    ``stats=None`` standardizes each hidden activation with the current
    batch's mean/variance (training mode); otherwise the provided
    (mean, var) pairs are applied.
    """
    act = {"relu": torch.relu, "tanh": torch.tanh, "linear": lambda t: t}[cfg.activation]
    h = x.to(params.dtype)
    used = []
    n_layers = len(cfg.extractor_dims) - 1
    for i in range(n_layers):
        h = h @ params[f"ext{i}.w"] + params[f"ext{i}.b"]
        if i < n_layers - 1:
            if stats is None:
                mu = h.mean(dim=0, keepdim=True)
                var = h.var(dim=0, unbiased=False, keepdim=True)
            else:
                mu, var = stats[i]
            used.append((mu.detach(), var.detach()))
            h = (h - mu) / torch.sqrt(var + _NORM_EPS)
            h = h * params[f"norm{i}.g"] + params[f"norm{i}.b"]
            h = act(h)
    return h, used


def compute_norm_stats(params: ParamStore, x: torch.Tensor, cfg: StudentConfig) -> list:
    """Layer statistics induced by a reference batch (no gradients)."""
    with torch.no_grad():
        _, stats = _norm_forward(params, x, cfg, stats=None)
    return stats


def norm_student_logits(
    params: ParamStore, x: torch.Tensor, cfg: StudentConfig, stats: list
) -> torch.Tensor:
    feats, _ = _norm_forward(params, x, cfg, stats)
    return feats @ params["cls.w"] + params["cls.b"]


def train_norm_student(
    registry: DomainRegistry,
    cfg: StudentConfig,
    *,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
) -> NormAssets:
    """Train on pooled source with batch statistics, then freeze pool stats."""
    from .synthdata import pooled_source_arrays

    x, y = pooled_source_arrays(registry)
    params = init_norm_student(cfg, seed)
    leaves = params.as_leaves()
    opt = torch.optim.Adam(leaves.tensors(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB4)))
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
            feats, _ = _norm_forward(leaves, xt[idx], cfg, stats=None)
            logits = feats @ leaves["cls.w"] + leaves["cls.b"]
            if cfg.task == "classification":
                loss = F.cross_entropy(logits, yt[idx])
            else:
                loss = F.mse_loss(logits.squeeze(-1), yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"norm-student loss diverged at epoch {epoch} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
    trained = leaves.detach()
    return NormAssets(trained, cfg, compute_norm_stats(trained, xt, cfg))


# ---------------------------------------------------------------------------
# Shared protocol


@dataclass
class ErmAssets:
    theta_e: ParamStore
    theta_c: ParamStore
    cfg: StudentConfig


@dataclass
class MethodAssets:
    """Everything the evaluator might need; unused entries may stay None."""

    model: ModelState | None = None
    erm_student: ErmAssets | None = None
    norm_student: NormAssets | None = None


def _domain_pools(domain, n_su: int, seed: int, min_eval: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1, domain.domain_id)))
    if domain.num_samples < n_su + min_eval:
        return None
    idx = rng.permutation(domain.num_samples)
    return idx[:n_su], idx[n_su:]


def evaluate_method(
    method: str,
    assets: MethodAssets,
    registry: DomainRegistry,
    adapt_cfg: AdaptConfig,
    *,
    n_su: int = 24,
    seed: int = 0,
    split: str = "test",
    strict: bool = False,
) -> MetricReport:
    """Run one method over the registry's target domains and score it.

    The same (seed, domain) pools are drawn regardless of method, so reports
    for different methods are directly comparable. Domains too small for the
    protocol are skipped with a warning (error under ``strict``).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    task = registry.spec.task
    ids = {"test": registry.test_ids, "val": registry.val_ids, "all-targets": registry.target_ids}[split]
    min_eval = 2 if task == "regression" else 1
    counter = UpdateCounter.new()
    all_preds, all_labels, all_groups, all_domains = [], [], [], []
    per_domain: dict[int, dict] = {}
    skipped: list[int] = []

    for did in sorted(ids):
        dom = registry.domain(did)
        pools = _domain_pools(dom, n_su, seed, min_eval)
        if pools is None:
            msg = f"domain {did} too small for n_su={n_su}; skipped"
            if strict:
                raise ValueError(msg)
            warnings.warn(msg, stacklevel=2)
            skipped.append(did)
            continue
        su, ev = pools
        sx = torch.as_tensor(dom.inputs[su])
        ex = torch.as_tensor(dom.inputs[ev])
        preds = _predict(method, assets, sx, ex, adapt_cfg, counter, did, strict, n_su)
        labels = dom.labels[ev]
        all_preds.append(preds)
        all_labels.append(labels)
        all_domains.append(np.full(len(ev), did))
        all_groups.append(dom.group_tags[ev] if dom.group_tags is not None else None)
        per_domain[did] = _domain_metrics(preds, labels, task, registry.spec.num_classes)
        per_domain[did]["updates"] = counter.per_domain.get(did, 0)

    if not per_domain:
        raise ValueError(f"no evaluable domains in split {split!r}")
    p = np.concatenate(all_preds)
    y = np.concatenate(all_labels)
    dom_tags = np.concatenate(all_domains)
    groups = None
    if all(g is not None for g in all_groups):
        groups = np.concatenate(all_groups)
    return _build_report(method, p, y, groups, dom_tags, per_domain, skipped, counter, task, registry.spec.num_classes)


def _predict(
    method: str,
    assets: MethodAssets,
    support_x: torch.Tensor,
    eval_x: torch.Tensor,
    adapt_cfg: AdaptConfig,
    counter: UpdateCounter,
    domain_id: int,
    strict: bool,
    n_su: int,
) -> np.ndarray:
    if method in ("moe_distill", "moe_distill_no_adapt"):
        if assets.model is None:
            raise ValueError(f"method {method} needs a trained model in assets")
        model = assets.model
        if method == "moe_distill":
            model = test_time_adapt(
                model, support_x, adapt_cfg,
                counter=counter, domain_id=domain_id, expected_n_su=n_su, strict=strict,
            )
        with torch.no_grad():
            out = student_logits(model.theta_e, model.theta_c, eval_x, model.student_cfg)
        task = model.task
    elif method == "erm":
        if assets.erm_student is None:
            raise ValueError("method erm needs a pooled-source student in assets")
        erm = assets.erm_student
        with torch.no_grad():
            out = student_logits(erm.theta_e, erm.theta_c, eval_x, erm.cfg)
        task = erm.cfg.task
    else:  # norm_adapt
        if assets.norm_student is None:
            raise ValueError("method norm_adapt needs a normalization student in assets")
        na = assets.norm_student
        stats = compute_norm_stats(na.params, support_x, na.cfg)
        with torch.no_grad():
            out = norm_student_logits(na.params, eval_x, na.cfg, stats)
        task = na.cfg.task
    if task == "classification":
        return out.argmax(dim=-1).numpy()
    return out.squeeze(-1).numpy().astype(np.float64)


def _domain_metrics(preds, labels, task: str, num_classes: int) -> dict:
    if task == "classification":
        return {
            "accuracy": accuracy(preds, labels),
            "macro_f1": macro_f1(preds, labels, num_classes),
            "n": int(len(labels)),
        }
    return {"pearson_r": pearson_r(preds, labels), "n": int(len(labels))}


def _build_report(
    method, p, y, groups, dom_tags, per_domain, skipped, counter, task, num_classes
) -> MetricReport:
    if task == "classification":
        acc = accuracy(p, y)
        f1 = macro_f1(p, y, num_classes)
        wc = _worst_case(lambda a, b: accuracy(a, b), p, y, groups, dom_tags)
        return MetricReport(
            method=method, num_samples=len(y),
            adaptation_update_count=counter.total,
            accuracy=acc, macro_f1=f1, worst_case_accuracy=wc,
            per_domain=per_domain, skipped_domains=skipped,
        )
    r = pearson_r(p, y)
    wc_r = _worst_case(lambda a, b: pearson_r(a, b), p, y, groups, dom_tags)
    return MetricReport(
        method=method, num_samples=len(y),
        adaptation_update_count=counter.total,
        pearson_r=r, worst_case_pearson_r=wc_r,
        per_domain=per_domain, skipped_domains=skipped,
    )


def _worst_case(metric_fn, p, y, groups, dom_tags) -> float:
    if groups is None:
        warnings.warn(
            "no group tags on this benchmark; worst-case uses per-domain grouping",
            stacklevel=2,
        )
        groups = dom_tags
    vals = {}
    for gid in np.unique(groups):
        m = groups == gid
        vals[int(gid)] = metric_fn(p[m], y[m])
    return worst_case_metric(vals)
