"""Path construction, loss region, guidance arithmetic, and sampler oracles."""

import math

import numpy as np
import pytest
import torch

from cosync.conditioning import ConditioningBundle, MaskSpec
from cosync.flow import (
    ConditionBranch,
    FlowBatch,
    GuidanceSpec,
    apply_branch,
    cfg_field,
    cfm_loss,
    euler_sample,
    infill_extract,
    make_flow_batch,
    splice_reference,
)


def stub_bundle(rows: int, cols: int) -> ConditioningBundle:
    zeros = torch.zeros(rows, cols, dtype=torch.float64)
    return ConditioningBundle(
        h_m=zeros, text_pad=zeros.clone(), text_ca=zeros.clone(),
        x_lip=zeros.clone(), h_text=zeros.clone(), mask=None,
    )


def rand_bundle(rng, rows: int, cols: int) -> ConditioningBundle:
    def draw():
        return torch.from_numpy(rng.standard_normal((rows, cols)))

    return ConditioningBundle(
        h_m=draw(), text_pad=draw(), text_ca=draw(),
        x_lip=draw(), h_text=draw(), mask=None,
    )


# -- path ------------------------------------------------------------------


def test_path_endpoints():
    rng = np.random.default_rng(0)
    x1 = rng.random((3, 5))
    at_zero = make_flow_batch(x1, np.random.default_rng(1), t_sampler=lambda r: 0.0)
    assert torch.equal(at_zero.xt, at_zero.x0)
    at_one = make_flow_batch(x1, np.random.default_rng(1), t_sampler=lambda r: 1.0)
    assert torch.equal(at_one.xt, at_one.x1)


def test_path_target_is_displacement():
    batch = make_flow_batch(np.random.default_rng(2).random((3, 5)), np.random.default_rng(3))
    assert torch.equal(batch.target, batch.x1 - batch.x0)


def test_path_is_seed_deterministic():
    x1 = np.random.default_rng(4).random((3, 5))
    a = make_flow_batch(x1, np.random.default_rng(5))
    b = make_flow_batch(x1, np.random.default_rng(5))
    assert a.t == b.t
    assert torch.equal(a.x0, b.x0)


def test_path_rejects_non_finite_data():
    bad = np.full((2, 2), np.nan)
    with pytest.raises(ValueError, match="non-finite"):
        make_flow_batch(bad, np.random.default_rng(6))


def test_path_rejects_bad_timestep():
    with pytest.raises(ValueError, match="outside"):
        make_flow_batch(np.ones((2, 2)), np.random.default_rng(7), t_sampler=lambda r: 1.5)


# -- loss ------------------------------------------------------------------


def test_cfm_loss_zero_on_exact_prediction():
    batch = make_flow_batch(np.random.default_rng(8).random((3, 6)), np.random.default_rng(9))
    assert float(cfm_loss(batch.target.clone(), batch, None)) == 0.0


def test_cfm_loss_unit_offset():
    batch = make_flow_batch(np.random.default_rng(10).random((3, 6)), np.random.default_rng(11))
    assert float(cfm_loss(batch.target + 1.0, batch, None)) == pytest.approx(1.0, abs=1e-12)


def test_cfm_loss_ignores_error_outside_mask():
    batch = make_flow_batch(np.random.default_rng(12).random((3, 6)), np.random.default_rng(13))
    v = batch.target.clone()
    v[:, 0] += 100.0  # outside the span below
    assert float(cfm_loss(v, batch, MaskSpec(2, 6))) == 0.0
    assert float(cfm_loss(v, batch, None)) > 0.0


def test_cfm_loss_rejects_shape_mismatch():
    batch = make_flow_batch(np.ones((3, 6)), np.random.default_rng(14))
    with pytest.raises(ValueError, match="shape"):
        cfm_loss(torch.zeros(3, 5, dtype=torch.float64), batch, None)


# -- branches --------------------------------------------------------------


def test_full_branch_is_untouched():
    bundle = rand_bundle(np.random.default_rng(15), 3, 4)
    assert apply_branch(bundle, ConditionBranch.FULL) is bundle


def test_acoustic_branch_zeroes_text_keeps_audio_and_lip():
    bundle = rand_bundle(np.random.default_rng(16), 3, 4)
    out = apply_branch(bundle, ConditionBranch.ACOUSTIC_ONLY)
    assert torch.equal(out.h_m, bundle.h_m)
    assert torch.equal(out.x_lip, bundle.x_lip)
    for name in ("text_pad", "text_ca", "h_text"):
        assert not bool((getattr(out, name) != 0).any())


def test_unconditional_branch_zeroes_everything():
    bundle = rand_bundle(np.random.default_rng(17), 3, 4)
    out = apply_branch(bundle, ConditionBranch.UNCONDITIONAL)
    for name in ("h_m", "text_pad", "text_ca", "x_lip", "h_text"):
        assert not bool((getattr(out, name) != 0).any())


def test_branch_zeroing_is_idempotent_and_ordered():
    bundle = rand_bundle(np.random.default_rng(18), 3, 4)
    via_ac = apply_branch(apply_branch(bundle, ConditionBranch.ACOUSTIC_ONLY), ConditionBranch.UNCONDITIONAL)
    direct = apply_branch(bundle, ConditionBranch.UNCONDITIONAL)
    for name in ("h_m", "text_pad", "text_ca", "x_lip", "h_text"):
        assert torch.equal(getattr(via_ac, name), getattr(direct, name))


# -- guidance --------------------------------------------------------------


def test_guidance_zero_scales_is_bitwise_identity():
    rng = np.random.default_rng(19)
    v_full = torch.from_numpy(rng.standard_normal((4, 5)))
    out = cfg_field(
        v_full,
        torch.from_numpy(rng.standard_normal((4, 5))),
        torch.from_numpy(rng.standard_normal((4, 5))),
        GuidanceSpec(0.0, 0.0),
    )
    assert torch.equal(out, v_full)


def test_guidance_scalar_example():
    out = cfg_field(
        torch.tensor([3.0]), torch.tensor([2.0]), torch.tensor([1.0]), GuidanceSpec(1.0, 1.0)
    )
    assert float(out) == pytest.approx(5.0, abs=1e-12)


def test_guidance_superposition():
    rng = np.random.default_rng(20)
    g = GuidanceSpec(0.4, 1.7)
    for _ in range(20):
        a = [torch.from_numpy(rng.standard_normal((3, 4))) for _ in range(3)]
        b = [torch.from_numpy(rng.standard_normal((3, 4))) for _ in range(3)]
        lhs = cfg_field(*(x + y for x, y in zip(a, b)), g)
        rhs = cfg_field(*a, g) + cfg_field(*b, g)
        assert float((lhs - rhs).abs().max()) < 1e-9


def test_guidance_rejects_shape_mismatch_and_non_finite():
    g = GuidanceSpec(1.0, 1.0)
    with pytest.raises(ValueError, match="shape"):
        cfg_field(torch.zeros(2, 2), torch.zeros(2, 3), torch.zeros(2, 2), g)
    bad = torch.full((2, 2), float("inf"), dtype=torch.float64)
    with pytest.raises(ValueError, match="non-finite"):
        cfg_field(bad, torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64), g)


@pytest.mark.parametrize("bad", [dict(lambda_a=-0.5), dict(lambda_s=float("nan"))])
def test_guidance_spec_validation(bad):
    with pytest.raises(ValueError):
        GuidanceSpec(**bad).validate()


def test_guidance_active_flag():
    assert not GuidanceSpec().active
    assert GuidanceSpec(lambda_a=0.5).active
    assert GuidanceSpec(lambda_s=0.5).active


# -- sampler ---------------------------------------------------------------


def test_sampler_constant_field_lands_exactly():
    rng = np.random.default_rng(21)
    c = torch.from_numpy(rng.standard_normal((3, 4)))
    bundle = stub_bundle(3, 4)
    for nfe in (1, 5, 32):
        x0 = torch.from_numpy(rng.standard_normal((3, 4)))
        out = euler_sample(lambda x, b, t: c, bundle, GuidanceSpec(), nfe, rng, x0=x0)
        assert float((out - (x0 + c)).abs().max()) < 1e-12


def test_sampler_linear_field_compounds():
    bundle = stub_bundle(1, 1)
    out = euler_sample(
        lambda x, b, t: x, bundle, GuidanceSpec(), 32, np.random.default_rng(22),
        x0=torch.ones(1, 1, dtype=torch.float64),
    )
    expected = (1.0 + 1.0 / 32.0) ** 32
    assert abs(float(out) - expected) < 1e-9
    assert abs(float(out) - math.e) / math.e < 0.02


def test_sampler_single_step():
    rng = np.random.default_rng(23)
    c = torch.from_numpy(rng.standard_normal((2, 3)))
    x0 = torch.from_numpy(rng.standard_normal((2, 3)))
    out = euler_sample(lambda x, b, t: c, stub_bundle(2, 3), GuidanceSpec(), 1, rng, x0=x0)
    assert torch.allclose(out, x0 + c, atol=1e-15)


def test_sampler_default_noise_is_seed_deterministic():
    c = torch.zeros(2, 3, dtype=torch.float64)
    a = euler_sample(lambda x, b, t: c, stub_bundle(2, 3), GuidanceSpec(), 4, np.random.default_rng(24))
    b = euler_sample(lambda x, b, t: c, stub_bundle(2, 3), GuidanceSpec(), 4, np.random.default_rng(24))
    assert torch.equal(a, b)


def test_sampler_call_counts_and_inactive_guidance_equivalence():
    calls = []

    def model(x, bundle, t):
        calls.append(t)
        return torch.ones_like(x) * 0.5

    bundle = stub_bundle(2, 2)
    x0 = torch.zeros(2, 2, dtype=torch.float64)
    plain = euler_sample(model, bundle, GuidanceSpec(), 8, np.random.default_rng(25), x0=x0)
    assert len(calls) == 8
    assert calls == [k / 8 for k in range(8)]
    calls.clear()
    guided = euler_sample(model, bundle, GuidanceSpec(1.0, 2.0), 8, np.random.default_rng(25), x0=x0)
    assert len(calls) == 24  # three branches per step
    # The stub ignores its conditioning, so every branch agrees and the
    # guided combination collapses to the plain field.
    assert torch.allclose(guided, plain, atol=1e-12)


def test_sampler_reports_non_finite_step():
    def model(x, bundle, t):
        return torch.full_like(x, float("nan")) if t >= 0.5 else torch.zeros_like(x)

    with pytest.raises(RuntimeError, match="step 2"):
        euler_sample(
            model, stub_bundle(1, 1), GuidanceSpec(), 4, np.random.default_rng(26),
            x0=torch.zeros(1, 1, dtype=torch.float64),
        )


def test_sampler_rejects_bad_nfe():
    with pytest.raises(ValueError, match="nfe"):
        euler_sample(lambda x, b, t: x, stub_bundle(1, 1), GuidanceSpec(), 0, np.random.default_rng(27))


# -- splicing --------------------------------------------------------------


def test_splice_keeps_reference_outside_span():
    gen = torch.ones(2, 5, dtype=torch.float64)
    ref = torch.zeros(2, 5, dtype=torch.float64)
    out = splice_reference(gen, ref, MaskSpec(1, 4))
    expected = torch.tensor(
        [[0.0, 1.0, 1.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0, 0.0]], dtype=torch.float64
    )
    assert torch.equal(out, expected)


def test_splice_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        splice_reference(torch.ones(2, 5), torch.ones(2, 4), MaskSpec(1, 4))


def test_infill_extract_returns_span():
    gen = torch.arange(10, dtype=torch.float64).reshape(2, 5)
    out = infill_extract(gen, MaskSpec(1, 4))
    assert torch.equal(out, gen[:, 1:4])


def test_infill_extract_with_reference_matches_plain_span():
    rng = np.random.default_rng(28)
    gen = torch.from_numpy(rng.standard_normal((2, 5)))
    ref = torch.from_numpy(rng.standard_normal((2, 5)))
    mask = MaskSpec(2, 5)
    assert torch.equal(infill_extract(gen, mask, reference=ref), infill_extract(gen, mask))


def test_flow_batch_fields_are_consistent():
    batch = make_flow_batch(np.random.default_rng(29).random((2, 4)), np.random.default_rng(30))
    assert isinstance(batch, FlowBatch)
    recon = (1.0 - batch.t) * batch.x0 + batch.t * batch.x1
    assert torch.allclose(batch.xt, recon, atol=1e-15)
