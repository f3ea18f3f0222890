import numpy as np
import pytest
import torch

from moedistill.adapt import (
    AdaptConfig,
    DivergenceError,
    MaskSpec,
    UpdateCounter,
    dist_update,
    distill_loss,
    mask_experts,
)
from moedistill.adapt import test_time_adapt as run_adapt
from moedistill.nets import (
    AggregatorConfig,
    ModelState,
    StudentConfig,
    aggregate,
    expert_feature_tokens,
    init_params,
    init_student,
    split_student,
    student_logits,
)
from moedistill.params import ParamStore


def scalar_setup():
    """1-d linear student and a single expert, for hand-checkable updates."""
    cfg = StudentConfig(input_dim=1, hidden_dims=(), feature_dim=1, num_classes=2, activation="linear")
    agg_cfg = AggregatorConfig(kind="avg", d=1, num_experts=1)
    theta_e = ParamStore(
        {"ext0.w": torch.tensor([[0.7]], dtype=torch.float64),
         "ext0.b": torch.tensor([-0.2], dtype=torch.float64)}
    )
    expert = ParamStore(
        {"ext0.w": torch.tensor([[1.3]], dtype=torch.float64),
         "ext0.b": torch.tensor([0.4], dtype=torch.float64)}
    )
    x = torch.tensor([[2.0]], dtype=torch.float64)
    return cfg, agg_cfg, theta_e, expert, x


def tiny_model(seed=0, n_experts=3, kind="transformer", dtype=torch.float32, head_classes=None):
    cfg = StudentConfig(input_dim=4, hidden_dims=(6,), feature_dim=8, num_classes=3)
    agg_cfg = AggregatorConfig(kind=kind, d=8, num_experts=n_experts, k=2, head_classes=head_classes)
    theta_e, theta_c = init_student(cfg, seed)
    phi = init_params(agg_cfg, seed + 1, dtype=dtype)
    experts = [init_params(cfg, seed + 10 + i, dtype=dtype) for i in range(n_experts)]
    if dtype == torch.float64:
        theta_e, theta_c = theta_e.to(dtype), theta_c.to(dtype)
    return ModelState(cfg, cfg, agg_cfg, theta_e, theta_c, phi, experts)


# ---------------------------------------------------------------------------
# Masking


def test_mask_zeroes_exactly_one_row():
    feats = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = mask_experts(feats, MaskSpec(0))
    assert torch.equal(out, torch.tensor([[0.0, 0.0], [3.0, 4.0]]))


def test_mask_absent_is_identity():
    feats = torch.randn(4, 3, 5)
    assert mask_experts(feats, MaskSpec(None)) is feats
    assert mask_experts(feats, None) is feats


def test_mask_out_of_range_rejected():
    with pytest.raises(ValueError):
        mask_experts(torch.randn(3, 2), MaskSpec(3))


def test_masked_expert_perturbation_changes_nothing():
    model = tiny_model(seed=3)
    x = torch.randn(6, 4, generator=torch.Generator().manual_seed(0))
    tokens = mask_experts(expert_feature_tokens(model.experts, x, model.expert_cfg), MaskSpec(1))
    out1 = aggregate(model.phi, tokens, model.agg_cfg)
    noisy = list(model.experts)
    noisy[1] = init_params(model.expert_cfg, 999)
    tokens2 = mask_experts(expert_feature_tokens(noisy, x, model.expert_cfg), MaskSpec(1))
    out2 = aggregate(model.phi, tokens2, model.agg_cfg)
    assert torch.equal(out1, out2)


def test_adapted_params_invariant_to_masked_expert_reinit():
    model = tiny_model(seed=5)
    cfg = AdaptConfig(alpha=0.1)
    x = torch.randn(8, 4, generator=torch.Generator().manual_seed(1))
    adapted1 = dist_update(
        model.theta_e, model.phi, model.experts, x, MaskSpec(2), cfg,
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
    )
    reinit = list(model.experts)
    reinit[2] = init_params(model.expert_cfg, 12345)
    adapted2 = dist_update(
        model.theta_e, model.phi, reinit, x, MaskSpec(2), cfg,
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
    )
    assert adapted1.detach().equal(adapted2.detach())


# ---------------------------------------------------------------------------
# Inner update oracle


def test_hand_derived_gradient_step():
    cfg, agg_cfg, theta_e, expert, x = scalar_setup()
    alpha = 0.05
    adapt = AdaptConfig(alpha=alpha, loss_form="mean_squared")
    got = dist_update(
        theta_e, ParamStore({}), [expert], x, None, adapt,
        student_cfg=cfg, agg_cfg=agg_cfg,
    )
    # straight-line oracle: f = x*w + b, teacher t = x*we + be,
    # L = (t - f)^2, dL/dw = -2x(t - f), dL/db = -2(t - f)
    w, b = 0.7, -0.2
    t = 2.0 * 1.3 + 0.4
    f = 2.0 * w + b
    dw = -2.0 * 2.0 * (t - f)
    db = -2.0 * (t - f)
    assert abs(got["ext0.w"].item() - (w - alpha * dw)) < 1e-10
    assert abs(got["ext0.b"].item() - (b - alpha * db)) < 1e-10


def test_alpha_zero_bit_identical():
    cfg, agg_cfg, theta_e, expert, x = scalar_setup()
    got = dist_update(
        theta_e, ParamStore({}), [expert], x, None, AdaptConfig(alpha=0.0),
        student_cfg=cfg, agg_cfg=agg_cfg,
    )
    assert got is theta_e


def test_zero_residual_bit_identical():
    # expert extractor equals the student extractor, avg over one expert:
    # teacher equals student features exactly, so the gradient is exactly 0
    cfg, agg_cfg, theta_e, _, x = scalar_setup()
    expert = theta_e.clone()
    got = dist_update(
        theta_e, ParamStore({}), [expert], x, None, AdaptConfig(alpha=0.3),
        student_cfg=cfg, agg_cfg=agg_cfg,
    )
    assert got.equal(theta_e)


def test_negative_alpha_rejected():
    with pytest.raises(ValueError):
        AdaptConfig(alpha=-0.1)


def test_empty_support_rejected():
    model = tiny_model()
    with pytest.raises(ValueError):
        dist_update(
            model.theta_e, model.phi, model.experts, torch.zeros(0, 4), None, AdaptConfig(),
            student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
        )


def test_nan_support_raises_divergence():
    model = tiny_model()
    x = torch.full((4, 4), float("nan"))
    with pytest.raises(DivergenceError):
        dist_update(
            model.theta_e, model.phi, model.experts, x, None, AdaptConfig(alpha=0.1),
            student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
        )


def test_multiple_inner_steps_differ_from_one():
    model = tiny_model(seed=9, dtype=torch.float64)
    x = torch.randn(8, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    one = dist_update(
        model.theta_e, model.phi, model.experts, x, None,
        AdaptConfig(alpha=0.05, num_inner_steps=1),
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
    )
    three = dist_update(
        model.theta_e, model.phi, model.experts, x, None,
        AdaptConfig(alpha=0.05, num_inner_steps=3),
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
    )
    assert not one.detach().allclose(three.detach())


def test_descent_property_with_halving():
    # gradient descent on the smooth squared loss must not increase it for
    # a small enough step; allow up to 10 halvings from a generous start
    for trial in range(50):
        model = tiny_model(seed=100 + trial, dtype=torch.float64)
        g = torch.Generator().manual_seed(trial)
        x = torch.randn(6, 4, generator=g, dtype=torch.float64)
        tokens = expert_feature_tokens(model.experts, x, model.expert_cfg)
        base_cfg = AdaptConfig(alpha=0.5, loss_form="mean_squared")
        before = distill_loss(
            model.theta_e, model.phi, tokens, x, base_cfg,
            student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
        ).item()
        alpha, ok = 0.5, False
        for _ in range(10):
            cfg = AdaptConfig(alpha=alpha, loss_form="mean_squared")
            adapted = dist_update(
                model.theta_e, model.phi, model.experts, x, None, cfg,
                student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
            )
            after = distill_loss(
                adapted, model.phi, tokens, x, cfg,
                student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
            ).item()
            if after <= before + 1e-12:
                ok = True
                break
            alpha /= 2
        assert ok, f"trial {trial}: no descent even at alpha={alpha}"


def test_l2_norm_loss_form_runs_and_descends():
    model = tiny_model(seed=7, dtype=torch.float64)
    x = torch.randn(6, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    cfg = AdaptConfig(alpha=0.01, loss_form="l2_norm")
    tokens = expert_feature_tokens(model.experts, x, model.expert_cfg)
    before = distill_loss(model.theta_e, model.phi, tokens, x, cfg,
                          student_cfg=model.student_cfg, agg_cfg=model.agg_cfg).item()
    adapted = dist_update(model.theta_e, model.phi, model.experts, x, None, cfg,
                          student_cfg=model.student_cfg, agg_cfg=model.agg_cfg)
    after = distill_loss(adapted, model.phi, tokens, x, cfg,
                         student_cfg=model.student_cfg, agg_cfg=model.agg_cfg).item()
    assert after < before


def test_logits_target_uses_phi_head():
    model = tiny_model(seed=11, head_classes=3, dtype=torch.float64)
    x = torch.randn(5, 4, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    phi = model.phi.as_leaves()
    adapted = dist_update(
        model.theta_e, phi, model.experts, x, None,
        AdaptConfig(alpha=0.05, distill_target="logits", second_order=True),
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
    )
    probe = sum(t.sum() for t in adapted.tensors())
    grads = torch.autograd.grad(probe, phi.tensors(), allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_first_order_cuts_phi_dependence():
    model = tiny_model(seed=11, dtype=torch.float64)
    x = torch.randn(5, 4, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    phi = model.phi.as_leaves()
    adapted = dist_update(
        model.theta_e, phi, model.experts, x, None,
        AdaptConfig(alpha=0.05, second_order=False),
        student_cfg=model.student_cfg, agg_cfg=model.agg_cfg,
    )
    probe = sum(t.sum() for t in adapted.tensors())
    grads = torch.autograd.grad(probe, phi.tensors(), allow_unused=True)
    assert all(g is None or g.abs().sum() == 0 for g in grads)


# ---------------------------------------------------------------------------
# Test-time adaptation


def test_classifier_untouched_and_shared():
    model = tiny_model(seed=21)
    x = torch.randn(10, 4, generator=torch.Generator().manual_seed(6))
    before = model.theta_c.state_hash()
    adapted = run_adapt(model, x, AdaptConfig(alpha=0.1))
    assert adapted.theta_c is model.theta_c
    assert model.theta_c.state_hash() == before
    assert not adapted.theta_e.equal(model.theta_e)


def test_counter_is_o1_in_inference_count():
    model = tiny_model(seed=22)
    cfg = AdaptConfig(alpha=0.05, num_inner_steps=1)
    support = torch.randn(24, 4, generator=torch.Generator().manual_seed(7))
    for size in (10, 100, 1000):
        counter = UpdateCounter.new()
        adapted = run_adapt(model, support, cfg, counter=counter, domain_id=size)
        eval_x = torch.randn(size, 4, generator=torch.Generator().manual_seed(8))
        with torch.no_grad():
            student_logits(adapted.theta_e, adapted.theta_c, eval_x, model.student_cfg)
        assert counter.per_domain[size] == 1
        assert counter.total == 1


def test_adapted_params_independent_of_inference_count():
    model = tiny_model(seed=23)
    support = torch.randn(24, 4, generator=torch.Generator().manual_seed(9))
    a = run_adapt(model, support, AdaptConfig(alpha=0.05))
    b = run_adapt(model, support, AdaptConfig(alpha=0.05))
    assert a.theta_e.equal(b.theta_e)


def test_alpha_zero_predictions_unchanged():
    model = tiny_model(seed=24)
    support = torch.randn(12, 4, generator=torch.Generator().manual_seed(10))
    x = torch.randn(30, 4, generator=torch.Generator().manual_seed(11))
    adapted = run_adapt(model, support, AdaptConfig(alpha=0.0))
    with torch.no_grad():
        p0 = student_logits(model.theta_e, model.theta_c, x, model.student_cfg)
        p1 = student_logits(adapted.theta_e, adapted.theta_c, x, model.student_cfg)
    assert torch.equal(p0, p1)


def test_small_support_warns_or_errors():
    model = tiny_model(seed=25)
    support = torch.randn(4, 4, generator=torch.Generator().manual_seed(12))
    with pytest.warns(UserWarning):
        run_adapt(model, support, AdaptConfig(alpha=0.01), expected_n_su=24)
    with pytest.raises(ValueError):
        run_adapt(model, support, AdaptConfig(alpha=0.01), expected_n_su=24, strict=True)


def test_counter_accumulates_num_inner_steps():
    model = tiny_model(seed=26)
    support = torch.randn(8, 4, generator=torch.Generator().manual_seed(13))
    counter = UpdateCounter.new()
    run_adapt(model, support, AdaptConfig(alpha=0.01, num_inner_steps=4),
                    counter=counter, domain_id=7)
    assert counter.per_domain == {7: 4}
