"""Inner-loop distillation update, expert masking, and test-time adaptation.

The inner update moves the student's feature extractor toward the
aggregator's output on an unlabeled support batch:

    theta_e' = theta_e - alpha * grad ||A(M(x); phi) - f(x; theta_e)||

The classifier is never touched by this update. When ``second_order`` is on,
the returned parameters keep their differentiable dependence on both
``theta_e`` and ``phi``, which is what lets the outer meta-objective train
the aggregator at all.

Distillation targets:

* ``features`` -- match extractor output to the aggregated expert feature.
* ``logits`` -- match softened class probabilities. Both sides go through a
  logit head owned by the aggregator parameters (``head.*``), so the frozen
  classifier stays out of the inner loss.
* ``both`` -- sum of the two.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import torch

from .nets import (
    AggregatorConfig,
    ModelState,
    StudentConfig,
    aggregate,
    aggregator_head,
    expert_feature_tokens,
    student_features,
)
from .params import ParamStore

DISTILL_TARGETS = ("features", "logits", "both")
LOSS_FORMS = ("mean_squared", "l2_norm")


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.1
    num_inner_steps: int = 1
    distill_target: str = "features"
    loss_form: str = "mean_squared"
    second_order: bool = True
    temperature: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.num_inner_steps < 1:
            raise ValueError("num_inner_steps must be >= 1")
        if self.distill_target not in DISTILL_TARGETS:
            raise ValueError(f"distill_target must be one of {DISTILL_TARGETS}")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {LOSS_FORMS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class MaskSpec:
    """Which expert's feature token to zero out, if any."""

    masked_expert: int | None = None


@dataclass
class UpdateCounter:
    """Counts gradient-based adaptation updates, per domain and in total."""

    per_domain: dict[int, int]
    total: int = 0

    @classmethod
    def new(cls) -> "UpdateCounter":
        return cls(per_domain={}, total=0)

    def add(self, domain_id: int, n: int) -> None:
        self.per_domain[domain_id] = self.per_domain.get(domain_id, 0) + n
        self.total += n


def mask_experts(expert_feats: torch.Tensor, mask: MaskSpec | None) -> torch.Tensor:
    """Zero one expert's feature row; the zero token stays in the stack.

    ``expert_feats`` is [..., num_experts, d]. With no mask this is the
    identity (the input tensor is returned unchanged).
    """
    if mask is None or mask.masked_expert is None:
        return expert_feats
    n = expert_feats.shape[-2]
    if not 0 <= mask.masked_expert < n:
        raise ValueError(f"masked_expert={mask.masked_expert} out of range for {n} experts")
    out = expert_feats.clone()
    out[..., mask.masked_expert, :] = 0.0
    return out


def _pair_loss(a: torch.Tensor, b: torch.Tensor, loss_form: str) -> torch.Tensor:
    if loss_form == "mean_squared":
        return ((a - b) ** 2).mean()
    return torch.linalg.vector_norm(a - b, dim=-1).mean()


def distill_loss(
    theta_e: ParamStore,
    phi: ParamStore,
    teacher_tokens: torch.Tensor,
    support_x: torch.Tensor,
    cfg: AdaptConfig,
    *,
    student_cfg: StudentConfig,
    agg_cfg: AggregatorConfig,
) -> torch.Tensor:
    """Distillation loss between aggregated teacher output and the student.

    ``teacher_tokens`` are the (possibly masked) per-expert feature stacks
    for the support batch, shape [n_su, num_experts, d].
    """
    agg = aggregate(phi, teacher_tokens, agg_cfg)
    feats = student_features(theta_e, support_x, student_cfg)
    losses = []
    if cfg.distill_target in ("features", "both"):
        if agg.shape[-1] != feats.shape[-1]:
            raise ValueError(
                f"aggregated dim {agg.shape[-1]} != student feature dim {feats.shape[-1]}"
            )
        losses.append(_pair_loss(agg, feats, cfg.loss_form))
    if cfg.distill_target in ("logits", "both"):
        t = cfg.temperature
        teacher_p = torch.softmax(aggregator_head(phi, agg, agg_cfg) / t, dim=-1)
        student_p = torch.softmax(aggregator_head(phi, feats, agg_cfg) / t, dim=-1)
        losses.append(_pair_loss(teacher_p, student_p, cfg.loss_form))
    return sum(losses[1:], start=losses[0])


def dist_update(
    theta_e: ParamStore,
    phi: ParamStore,
    experts: list[ParamStore],
    support_x: torch.Tensor,
    mask: MaskSpec | None,
    cfg: AdaptConfig,
    *,
    student_cfg: StudentConfig,
    agg_cfg: AggregatorConfig,
    expert_cfg: StudentConfig | None = None,
) -> ParamStore:
    """One or more gradient steps on the distillation loss.

    Returns a new parameter store; ``theta_e`` itself is never modified and
    the classifier is not an input. ``alpha == 0`` returns ``theta_e``
    unchanged (bit-identical), as does an exactly-zero-residual loss.
    """
    if support_x.ndim != 2 or support_x.shape[0] < 1:
        raise ValueError("support_x must be a non-empty [n_su, input_dim] batch")
    tokens = expert_feature_tokens(experts, support_x, expert_cfg or student_cfg)
    tokens = mask_experts(tokens, mask)
    if cfg.alpha == 0:
        return theta_e
    current = theta_e.map(
        lambda t: t if t.requires_grad or t.grad_fn is not None else t.detach().requires_grad_(True)
    )
    for step in range(cfg.num_inner_steps):
        loss = distill_loss(
            current, phi, tokens, support_x, cfg, student_cfg=student_cfg, agg_cfg=agg_cfg
        )
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"distillation loss is {loss.item()} at inner step {step} "
                f"(alpha={cfg.alpha}, target={cfg.distill_target})"
            )
        names = list(current.names)
        grads = torch.autograd.grad(
            loss,
            [current[n] for n in names],
            create_graph=cfg.second_order,
            allow_unused=True,
        )
        updated = {}
        for n, g in zip(names, grads):
            updated[n] = current[n] if g is None else current[n] - cfg.alpha * g
        current = ParamStore(updated)
    return current


def test_time_adapt(
    state: ModelState,
    unlabeled_x: torch.Tensor,
    cfg: AdaptConfig,
    *,
    counter: UpdateCounter | None = None,
    domain_id: int = -1,
    expected_n_su: int | None = None,
    strict: bool = False,
) -> ModelState:
    """Adapt the extractor once per target domain from an unlabeled batch.

    No expert is masked at test time. Exactly ``num_inner_steps`` updates
    run regardless of how many samples are classified afterwards; the
    counter is incremented by that amount. The classifier comes back as the
    very same store the state already holds.
    """
    if expected_n_su is not None and unlabeled_x.shape[0] < expected_n_su:
        msg = (
            f"domain {domain_id}: only {unlabeled_x.shape[0]} unlabeled samples "
            f"for adaptation, expected {expected_n_su}"
        )
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, stacklevel=2)
    inner_cfg = replace(cfg, second_order=False)
    theta_e_prime = dist_update(
        state.theta_e.detach(),
        state.phi.detach(),
        state.experts,
        unlabeled_x,
        None,
        inner_cfg,
        student_cfg=state.student_cfg,
        agg_cfg=state.agg_cfg,
        expert_cfg=state.expert_cfg,
    ).detach()
    if counter is not None:
        counter.add(domain_id, cfg.num_inner_steps)
    return ModelState(
        state.student_cfg,
        state.expert_cfg,
        state.agg_cfg,
        theta_e_prime,
        state.theta_c,
        state.phi,
        state.experts,
    )
