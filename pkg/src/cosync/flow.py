"""Flow-matching path, loss, guidance arithmetic, and the Euler sampler.

Training draws a straight path x_t = (1-t) x0 + t x1 between Gaussian
noise and data and regresses the constant field x1 - x0.  Inference
integrates the learned field with a fixed-grid Euler solver, optionally
blending three condition branches into one guided field:

    v_cfg = v_full + lambda_a (v_full - v_ac) + lambda_s (v_ac - v_unc)

Branches zero condition arrays rather than dropping them, so shapes are
identical across branches.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .conditioning import ConditioningBundle, MaskSpec


@dataclass
class FlowBatch:
    """One training path sample; ``target`` is constant along the path."""

    x0: torch.Tensor
    x1: torch.Tensor
    t: float
    xt: torch.Tensor
    target: torch.Tensor


def make_flow_batch(x1, rng: np.random.Generator, t_sampler=None) -> FlowBatch:
    """Draw noise and a timestep, and build the interpolant for ``x1``."""
    data = torch.as_tensor(np.asarray(x1), dtype=torch.float64)
    if not bool(torch.isfinite(data).all()):
        raise ValueError("data tensor has non-finite values")
    noise = torch.from_numpy(rng.standard_normal(tuple(data.shape)))
    t = float(rng.uniform(0.0, 1.0)) if t_sampler is None else float(t_sampler(rng))
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"sampled t={t} outside [0, 1]")
    return FlowBatch(
        x0=noise,
        x1=data,
        t=t,
        xt=(1.0 - t) * noise + t * data,
        target=data - noise,
    )


def cfm_loss(v_pred: torch.Tensor, batch: FlowBatch, loss_mask: MaskSpec | None) -> torch.Tensor:
    """Mean squared error against the path field, over the loss region.

    With a mask, only columns inside the span count; with ``None`` the
    whole sequence does.
    """
    if v_pred.shape != batch.target.shape:
        raise ValueError(
            f"prediction shape {tuple(v_pred.shape)} != target {tuple(batch.target.shape)}"
        )
    diff = v_pred - batch.target
    if loss_mask is not None:
        loss_mask.validate(diff.shape[-1])
        diff = diff[..., loss_mask.start : loss_mask.end]
    return (diff * diff).mean()


class ConditionBranch(enum.Enum):
    FULL = "full"
    ACOUSTIC_ONLY = "acoustic_only"
    UNCONDITIONAL = "unconditional"


def apply_branch(bundle: ConditioningBundle, branch: ConditionBranch) -> ConditioningBundle:
    """Zero out the condition arrays the branch is blind to."""
    if branch is ConditionBranch.FULL:
        return bundle
    zeroed = dict(
        text_pad=torch.zeros_like(bundle.text_pad),
        text_ca=torch.zeros_like(bundle.text_ca),
        h_text=torch.zeros_like(bundle.h_text),
    )
    if branch is ConditionBranch.UNCONDITIONAL:
        zeroed["h_m"] = torch.zeros_like(bundle.h_m)
        zeroed["x_lip"] = torch.zeros_like(bundle.x_lip)
    return bundle.replace(**zeroed)


@dataclass
class GuidanceSpec:
    lambda_a: float = 0.0
    lambda_s: float = 0.0

    def validate(self) -> None:
        for name in ("lambda_a", "lambda_s"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")

    @property
    def active(self) -> bool:
        return self.lambda_a != 0.0 or self.lambda_s != 0.0


def cfg_field(v_full, v_ac, v_unc, g: GuidanceSpec) -> torch.Tensor:
    """Dual-scale guidance blend; exact linear combination, elementwise."""
    g.validate()
    if not (v_full.shape == v_ac.shape == v_unc.shape):
        raise ValueError("guidance branches disagree on shape")
    for v in (v_full, v_ac, v_unc):
        if not bool(torch.isfinite(v).all()):
            raise ValueError("non-finite branch field")
    return v_full + g.lambda_a * (v_full - v_ac) + g.lambda_s * (v_ac - v_unc)


def _field(model, x, bundle, t):
    out = model(x, bundle, t)
    return out[0] if isinstance(out, tuple) else out


def euler_sample(
    model,
    bundle: ConditioningBundle,
    g: GuidanceSpec,
    nfe: int,
    rng: np.random.Generator,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Integrate the field from noise on the grid t_k = k/nfe.

    One model evaluation per step without guidance, three with.  Raises
    with the step index if the state or field goes non-finite.
    """
    g.validate()
    if nfe < 1:
        raise ValueError("nfe must be at least 1")
    if x0 is None:
        x0 = torch.from_numpy(rng.standard_normal(tuple(bundle.h_m.shape)))
    x = torch.as_tensor(x0, dtype=torch.float64).clone()

    branches = None
    if g.active:
        branches = (
            bundle,
            apply_branch(bundle, ConditionBranch.ACOUSTIC_ONLY),
            apply_branch(bundle, ConditionBranch.UNCONDITIONAL),
        )
    step = 1.0 / nfe
    with torch.no_grad():
        for k in range(nfe):
            t_k = k / nfe
            if g.active:
                v_full, v_ac, v_unc = (_field(model, x, b, t_k) for b in branches)
                v = cfg_field(v_full, v_ac, v_unc, g)
            else:
                v = _field(model, x, bundle, t_k)
            x = x + step * v
            if not bool(torch.isfinite(x).all()):
                raise RuntimeError(f"non-finite sampler state at step {k}")
    return x


def splice_reference(x_generated: torch.Tensor, reference, mask: MaskSpec) -> torch.Tensor:
    """Replace the non-target columns with the reference mel."""
    mask.validate(x_generated.shape[-1])
    ref = torch.as_tensor(np.asarray(reference), dtype=torch.float64)
    if ref.shape != x_generated.shape:
        raise ValueError("reference shape must match the generated sequence")
    out = ref.clone()
    out[..., mask.start : mask.end] = x_generated[..., mask.start : mask.end]
    return out


def infill_extract(x_generated: torch.Tensor, mask: MaskSpec, reference=None) -> torch.Tensor:
    """Columns of the target span; with ``reference``, splice first.

    Splicing changes nothing inside the span, but pairs with
    :func:`splice_reference` when callers also want the full sequence.
    """
    mask.validate(x_generated.shape[-1])
    x = x_generated if reference is None else splice_reference(x_generated, reference, mask)
    return x[..., mask.start : mask.end]
