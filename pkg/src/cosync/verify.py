"""Self-contained invariant suite backing the ``verify`` command.

Every check is named, independent, and quick; a crash inside a check is
reported as that check failing rather than taking the suite down.  The
module-level ``fault_hook`` lets tests corrupt freshly built models to
prove the suite actually notices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import perturb_parameters
from .conditioning import ConditioningBundle, MaskSpec, sample_mask
from .flow import GuidanceSpec, cfg_field, euler_sample
from .model import DubbingModel, ModelConfig, tiny_config, toy_config
from .regularizers import ContrastiveConfig, ContrastiveHead, ctc_loss
from .trainer import frame_align_features
from .flow import FlowBatch, cfm_loss

# Test hook: when set, applied to every model the suite builds.
fault_hook = None


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _small_model_config() -> ModelConfig:
    cfg = toy_config()
    cfg.d = 64
    cfg.n_heads = 4
    cfg.n_layers = 4
    cfg.phase_bounds = (1, 2)
    return cfg


def _build_model(config: ModelConfig, mutator, seed: int = 0) -> DubbingModel:
    torch.manual_seed(seed)
    model = DubbingModel(config)
    if mutator is not None:
        mutator(model)
    return model


def _random_bundle(model: DubbingModel, rng, length: int = 16) -> tuple:
    cfg = model.config
    m_raw = rng.random((cfg.num_mel_bins, length))
    text_ids = rng.integers(0, cfg.text_vocab_size, size=max(2, length // 8))
    lip_raw = rng.standard_normal((cfg.lip_dim, max(1, length // 2)))
    mask = sample_mask(length, rng)
    bundle = model.build_bundle(m_raw, text_ids, lip_raw, mask)
    return bundle, mask


def _embedded_input(model: DubbingModel, x, bundle) -> torch.Tensor:
    """Replicate the trunk entry (projection + position conv) for comparison."""
    from .conditioning import assemble_prior

    u = assemble_prior(bundle.h_m, bundle.text_pad, bundle.text_ca, x)
    z = model.backbone.in_proj(u.transpose(-2, -1)[None])
    z = z + model.backbone.conv_pos(z.transpose(-2, -1)).transpose(-2, -1)
    return z[0].transpose(-2, -1)


def check_identity_at_init(mutator=None) -> str:
    model = _build_model(_small_model_config(), mutator)
    rng = np.random.default_rng(0)
    for trial in range(3):
        bundle, _ = _random_bundle(model, rng)
        x = torch.from_numpy(rng.standard_normal(tuple(bundle.h_m.shape)))
        v, taps = model(x, bundle, 0.25)
        if bool((v != 0).any()):
            raise AssertionError(f"trial {trial}: field nonzero at init")
        expected = _embedded_input(model, x, bundle)
        if not torch.equal(taps.z_out, expected):
            raise AssertionError(f"trial {trial}: trunk is not the identity at init")
        x0 = torch.from_numpy(rng.standard_normal(tuple(bundle.h_m.shape)))
        out = euler_sample(model, bundle, GuidanceSpec(), 4, rng, x0=x0)
        if not torch.equal(out, x0):
            raise AssertionError(f"trial {trial}: sampler moved x0 at init")
    return "field bitwise zero, trunk identity, sampler returns x0"


def check_zero_gate_neutrality(mutator=None) -> str:
    model = _build_model(_small_model_config(), mutator)
    rng = np.random.default_rng(1)
    for trial in range(3):
        bundle, _ = _random_bundle(model, rng)
        x = torch.from_numpy(rng.standard_normal(tuple(bundle.h_m.shape)))
        v_a, taps_a = model(x, bundle, 0.5)
        muted = bundle.replace(x_lip=torch.zeros_like(bundle.x_lip))
        v_b, taps_b = model(x, muted, 0.5)
        if not (torch.equal(v_a, v_b) and torch.equal(taps_a.z_out, taps_b.z_out)):
            raise AssertionError(f"trial {trial}: lip stream leaks through zero gates")
    return "random vs zero lip stream identical at init (field and hidden states)"


def check_mask_statistics(mutator=None) -> str:
    rng = np.random.default_rng(2)
    fracs = np.array([sample_mask(200, rng).span / 200 for _ in range(10_000)])
    if fracs.min() < 0.70 or fracs.max() > 1.00:
        raise AssertionError(f"fraction range [{fracs.min():.3f}, {fracs.max():.3f}]")
    mean = float(fracs.mean())
    if not 0.84 <= mean <= 0.86:
        raise AssertionError(f"mean fraction {mean:.4f} outside [0.84, 0.86]")
    return f"10k draws at L=200: range ok, mean {mean:.4f}"


def check_cfg_reduction(mutator=None) -> str:
    rng = np.random.default_rng(3)
    v_full = torch.from_numpy(rng.standard_normal((5, 7)))
    v_ac = torch.from_numpy(rng.standard_normal((5, 7)))
    v_unc = torch.from_numpy(rng.standard_normal((5, 7)))
    out = cfg_field(v_full, v_ac, v_unc, GuidanceSpec(0.0, 0.0))
    if not torch.equal(out, v_full):
        raise AssertionError("zero scales do not reduce to the conditional field")
    scalar = cfg_field(
        torch.tensor([3.0]), torch.tensor([2.0]), torch.tensor([1.0]),
        GuidanceSpec(1.0, 1.0),
    )
    if abs(float(scalar) - 5.0) > 1e-12:
        raise AssertionError(f"scalar case gave {float(scalar)}")
    return "zero-scale reduction bitwise, scalar case (3,2,1 | 1,1) = 5"


def check_cfg_linearity(mutator=None) -> str:
    rng = np.random.default_rng(4)
    g = GuidanceSpec(0.7, 1.3)
    for trial in range(20):
        a = [torch.from_numpy(rng.standard_normal((4, 6))) for _ in range(3)]
        b = [torch.from_numpy(rng.standard_normal((4, 6))) for _ in range(3)]
        lhs = cfg_field(*(x + y for x, y in zip(a, b)), g)
        rhs = cfg_field(*a, g) + cfg_field(*b, g)
        if float((lhs - rhs).abs().max()) > 1e-9:
            raise AssertionError(f"superposition violated on trial {trial}")
    return "superposition holds on 20 random triples at 1e-9"


def check_sampler_constant_field(mutator=None) -> str:
    rng = np.random.default_rng(5)
    c = torch.from_numpy(rng.standard_normal((3, 4)))
    bundle = _stub_bundle(3, 4)
    for nfe in (1, 7, 32):
        x0 = torch.from_numpy(rng.standard_normal((3, 4)))
        out = euler_sample(lambda x, b, t: c, bundle, GuidanceSpec(), nfe, rng, x0=x0)
        if float((out - (x0 + c)).abs().max()) > 1e-12:
            raise AssertionError(f"constant field drift at nfe={nfe}")
    return "x0 + c recovered at nfe 1, 7, 32 within 1e-12"


def check_sampler_exponential(mutator=None) -> str:
    bundle = _stub_bundle(1, 1)
    rng = np.random.default_rng(6)
    out = euler_sample(
        lambda x, b, t: x, bundle, GuidanceSpec(), 32, rng,
        x0=torch.ones(1, 1, dtype=torch.float64),
    )
    expected = (1.0 + 1.0 / 32.0) ** 32
    got = float(out[0, 0])
    if abs(got - expected) > 1e-9:
        raise AssertionError(f"(1+1/32)^32 mismatch: {got} vs {expected}")
    if abs(got - math.e) / math.e > 0.02:
        raise AssertionError("rollout not within 2% of e")
    return f"growth rollout = {got:.6f}, matches (1+1/32)^32 and is within 2% of e"


def _stub_bundle(bins: int, length: int) -> ConditioningBundle:
    zeros = torch.zeros(bins, length, dtype=torch.float64)
    return ConditioningBundle(
        h_m=zeros, text_pad=zeros.clone(), text_ca=zeros.clone(),
        x_lip=zeros.clone(), h_text=zeros.clone(), mask=None,
    )


def check_contrastive_units(mutator=None) -> str:
    torch.manual_seed(0)
    head = ContrastiveHead(4, 4, ContrastiveConfig(tau=0.07, proj_dim=4))
    with torch.no_grad():
        single = head.loss(
            torch.from_numpy(np.random.default_rng(7).standard_normal((4, 1))),
            torch.from_numpy(np.random.default_rng(8).standard_normal((4, 1))),
        )
        if abs(float(single)) > 1e-12:
            raise AssertionError("single-frame loss is not zero")
        n = 6
        col = np.random.default_rng(9).standard_normal((4, 1))
        same = torch.from_numpy(np.repeat(col, n, axis=1))
        uniform = head.loss(same, same)
        if abs(float(uniform) - math.log(n)) > 1e-9:
            raise AssertionError(f"identical-frame loss {float(uniform)} != log {n}")
        head.proj_hidden.weight.copy_(torch.eye(4))
        head.proj_hidden.bias.zero_()
        head.proj_align.weight.copy_(torch.eye(4))
        head.proj_align.bias.zero_()
        head.config.tau = 1.0
        pair = torch.eye(4, dtype=torch.float64)[:, :2]
        ortho = head.loss(pair, pair)
        expected = math.log(1.0 + math.exp(-1.0))
        if abs(float(ortho) - expected) > 1e-9:
            raise AssertionError(f"orthogonal-pair loss {float(ortho)} != {expected}")
    return "unit cases: N=1 -> 0, identical -> log N, orthogonal pair -> log(1+1/e)"


def check_ctc_units(mutator=None) -> str:
    uniform = torch.zeros(2, 1, dtype=torch.float64)
    got = float(ctc_loss(uniform, [1]))
    if abs(got - math.log(2.0)) > 1e-9:
        raise AssertionError(f"uniform single-frame loss {got} != log 2")
    rng = np.random.default_rng(10)
    for _ in range(12):
        vocab = int(rng.integers(2, 4))
        steps = int(rng.integers(1, 5))
        t_len = int(rng.integers(1, 3))
        target = rng.integers(1, vocab, size=t_len)
        repeats = int((target[1:] == target[:-1]).sum()) if t_len > 1 else 0
        if steps < t_len + repeats:
            continue
        logits = torch.from_numpy(rng.standard_normal((vocab, steps)))
        got = float(ctc_loss(logits, target))
        want = _brute_force_ctc(logits, list(target))
        if abs(got - want) > 1e-9:
            raise AssertionError(f"brute-force mismatch: {got} vs {want}")
    return "uniform unit case and randomized brute-force agreement at 1e-9"


def _brute_force_ctc(logits: torch.Tensor, target: list, blank: int = 0) -> float:
    from itertools import product

    probs = torch.softmax(logits, dim=0).numpy()
    vocab, steps = probs.shape
    total = 0.0
    for path in product(range(vocab), repeat=steps):
        collapsed = []
        prev = None
        for symbol in path:
            if symbol != prev:
                collapsed.append(symbol)
            prev = symbol
        collapsed = [s for s in collapsed if s != blank]
        if collapsed == target:
            p = 1.0
            for s_idx, symbol in enumerate(path):
                p *= probs[symbol, s_idx]
            total += p
    return -math.log(total) if total > 0 else math.inf


def check_gradient_subset(mutator=None) -> str:
    torch.manual_seed(0)
    model = _build_model(tiny_config(), mutator)
    rng = np.random.default_rng(11)
    perturb_parameters(model, rng, scale=0.05)
    loss_fn = _combined_loss_fn(model, rng)

    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    params = list(model.parameters())
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.clone() for p in params]

    coords = []
    pick = np.random.default_rng(12)
    for p_idx, p in enumerate(params):
        flat = int(p.numel())
        for c in pick.choice(flat, size=min(2, flat), replace=False):
            coords.append((p_idx, int(c)))
    worst = 0.0
    h = 1e-5
    with torch.no_grad():
        for p_idx, c in coords:
            flat = params[p_idx].reshape(-1)
            orig = float(flat[c])
            flat[c] = orig + h
            plus = float(loss_fn())
            flat[c] = orig - h
            minus = float(loss_fn())
            flat[c] = orig
            numeric = (plus - minus) / (2 * h)
            analytic = float(grads[p_idx].reshape(-1)[c])
            denom = max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, abs(analytic - numeric) / denom)
    if worst >= 1e-4:
        raise AssertionError(f"max relative gradient error {worst:.2e}")
    return f"{len(coords)} coordinates checked, max relative error {worst:.2e}"


def _combined_loss_fn(model: DubbingModel, rng):
    """Total training loss on one fixed synthetic sample, as a closure."""
    cfg = model.config
    length, tokens = 8, 2
    mel = rng.random((cfg.num_mel_bins, length))
    text_ids = np.array([1, 2])
    lip = rng.standard_normal((cfg.lip_dim, length // 2))
    align = rng.standard_normal((cfg.align_dim, tokens))
    mask = MaskSpec(1, length)
    x0 = torch.from_numpy(rng.standard_normal((cfg.num_mel_bins, length)))
    t = 0.37
    x1 = torch.from_numpy(mel)
    xt = (1 - t) * x0 + t * x1
    target_ids = text_ids + 1
    f_av = torch.from_numpy(frame_align_features(align, length))

    def loss_fn():
        bundle = model.build_bundle(mel, text_ids, lip, mask)
        v, taps = model(xt, bundle, t)
        batch = FlowBatch(x0=x0, x1=x1, t=t, xt=xt, target=x1 - x0)
        l_fm = cfm_loss(v, batch, mask)
        l_cl = model.contrastive.loss(taps.z_ca, f_av)
        l_ctc = ctc_loss(model.ctc_head(taps.z_out), target_ids)
        return l_fm + l_cl + l_ctc

    return loss_fn


def check_time_modulation(mutator=None) -> str:
    model = _build_model(tiny_config(), mutator)
    rng = np.random.default_rng(13)
    perturb_parameters(model, rng, scale=0.1)
    layer = model.backbone.layers[0]
    emb_a = model.backbone.time_embed(0.3)
    emb_b = model.backbone.time_embed(0.8)
    mods_same_t = [layer.modulation(emb_a), layer.modulation(emb_a)]
    for u, w in zip(*mods_same_t):
        if not torch.equal(u, w):
            raise AssertionError("modulation changed between identical timesteps")
    if all(torch.equal(u, w) for u, w in zip(layer.modulation(emb_a), layer.modulation(emb_b))):
        raise AssertionError("modulation blind to the timestep after perturbation")
    return "modulation vectors depend on t only, and do depend on t"


def check_phase_isolation(mutator=None) -> str:
    model = _build_model(_small_model_config(), mutator)
    rng = np.random.default_rng(14)
    perturb_parameters(model, rng, scale=0.05)
    with torch.no_grad():
        for layer in model.backbone.layers:
            if hasattr(layer, "lip_gate"):
                layer.lip_gate.zero_()
            if hasattr(layer, "cross"):
                # Zero value path entirely: attention output becomes exactly
                # zero, so even softmax row-sum rounding cannot leak content.
                layer.cross.v.weight.zero_()
                layer.cross.v.bias.zero_()
    bundle, _ = _random_bundle(model, rng)
    x = torch.from_numpy(rng.standard_normal(tuple(bundle.h_m.shape)))
    v_ref, _ = model(x, bundle, 0.4)
    poked = bundle.replace(
        x_lip=bundle.x_lip + torch.from_numpy(rng.standard_normal(tuple(bundle.x_lip.shape))),
        h_text=bundle.h_text + torch.from_numpy(rng.standard_normal(tuple(bundle.h_text.shape))),
    )
    v_poked, _ = model(x, poked, 0.4)
    if not torch.equal(v_ref, v_poked):
        raise AssertionError("output depends on muted side inputs")
    return "muted gates and value maps make the field blind to lip and text memory"


CHECKS = [
    ("identity-at-init", check_identity_at_init),
    ("zero-gate-neutrality", check_zero_gate_neutrality),
    ("mask-span-statistics", check_mask_statistics),
    ("cfg-reduction", check_cfg_reduction),
    ("cfg-linearity", check_cfg_linearity),
    ("sampler-constant-field", check_sampler_constant_field),
    ("sampler-exponential-growth", check_sampler_exponential),
    ("contrastive-unit-values", check_contrastive_units),
    ("ctc-unit-values", check_ctc_units),
    ("gradient-subset", check_gradient_subset),
    ("time-modulation-purity", check_time_modulation),
    ("phase-isolation", check_phase_isolation),
]


def run_all(mutator=None) -> list:
    """Run every named check; a raised exception fails that check only."""
    active = mutator if mutator is not None else fault_hook
    results = []
    for name, fn in CHECKS:
        try:
            detail = fn(active)
            results.append(CheckResult(name, True, detail))
        except Exception as err:  # noqa: BLE001 - report, don't crash the suite
            results.append(CheckResult(name, False, str(err)))
    return results
