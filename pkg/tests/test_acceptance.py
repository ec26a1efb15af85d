"""Acceptance gate: one test per numbered criterion, stated tolerances.

Each test prints a single ``criterion N: PASS`` line with the measured
numbers once its assertions hold; under ``pytest -v`` the per-test
PASSED/FAILED rows double as the pass/fail table.  Criteria 8 and 9
share one training run through a module fixture.
"""

import gc
import itertools
import math
import time

import numpy as np
import pytest
import torch

from cosync.backbone import Backbone, BackboneConfig, perturb_parameters
from cosync.conditioning import ConditioningBundle, MaskSpec, sample_mask
from cosync.data import SyntheticTaskSpec, generate_synthetic_corpus
from cosync.flow import FlowBatch, GuidanceSpec, cfg_field, cfm_loss, euler_sample
from cosync.model import DubbingModel, tiny_config, toy_config
from cosync.regularizers import ContrastiveConfig, ContrastiveHead, ctc_loss
from cosync.trainer import TrainConfig, Trainer, frame_align_features, overfit_probe

# Settled by a small sweep: 3e-3 also clears the thresholds but bounces
# mid-run on this corpus; 2e-3 lands smoother with more margin.
TOY_TRAIN = dict(
    lr=2e-3, warmup_steps=300, batch_size=8, w_cl=0.1, w_ctc=0.1,
    steps=2000, seed=0, checkpoint_every=10**9,
)


def conclude(n: int, detail: str) -> None:
    print(f"criterion {n}: PASS — {detail}", flush=True)


# -- 1: identity at init, default scale ------------------------------------


def test_criterion_01_identity_at_init():
    start = time.monotonic()
    torch.manual_seed(0)
    model = Backbone(BackboneConfig())
    model.eval()
    cfg = model.config
    rng = np.random.default_rng(0)
    length = 2
    bundle = ConditioningBundle(
        h_m=torch.from_numpy(rng.standard_normal((100, length))),
        text_pad=torch.from_numpy(rng.standard_normal((256, length))),
        text_ca=torch.from_numpy(rng.standard_normal((256, length))),
        x_lip=torch.from_numpy(rng.standard_normal((cfg.d, length))),
        h_text=torch.from_numpy(rng.standard_normal((cfg.c_text, 3))),
        mask=None,
    )
    try:
        with torch.no_grad():
            xs = torch.from_numpy(rng.standard_normal((20, 100, length)))
            v, _ = model(xs, bundle, 0.5)
            assert v.shape == xs.shape
            assert bool((v == 0).all()), "field not bitwise zero at init"

            x0 = torch.from_numpy(rng.standard_normal((100, length)))
            for nfe in (1, 2):
                out = euler_sample(model, bundle, GuidanceSpec(), nfe, rng, x0=x0)
                assert torch.equal(out, x0), f"nfe={nfe} altered x0"
    finally:
        del model
        gc.collect()
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    conclude(1, f"zero field on 20 inputs, euler fixed point, {elapsed:.1f}s")


# -- 2: full-parameter gradient check on the tiny config -------------------


def _loss_pipeline(model: DubbingModel, rng):
    """The combined training loss on one fixed sample, split into stages.

    ``stages`` recomputes only from the named entry point down, reusing
    cached values above it.  Every cache is the bitwise output of the
    stage it replaces (fixed inputs, no randomness at loss time), and
    the three terms are always summed in the same order, so each staged
    loss equals the full recomputation exactly; only work is saved.
    """
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
    batch = FlowBatch(x0=x0, x1=x1, t=t, xt=xt, target=x1 - x0)
    target_ids = text_ids + 1
    f_av = torch.from_numpy(frame_align_features(align, length))
    cache: dict = {}

    def from_bundle(bundle):
        v, taps = model(xt, bundle, t)
        cache["taps"] = taps
        l_fm = cfm_loss(v, batch, mask)
        cache["l_fm"] = l_fm.detach()
        return (l_fm + from_contrastive(taps.z_ca)) + from_ctc(taps.z_out)

    def from_contrastive(z_ca):
        l_cl = model.contrastive.loss(z_ca, f_av)
        cache["l_cl"] = l_cl.detach()
        return l_cl

    def from_ctc(z_out):
        l_ctc = ctc_loss(model.ctc_head(z_out), target_ids)
        cache["l_ctc"] = l_ctc.detach()
        return l_ctc

    def full():
        bundle = model.build_bundle(mel, text_ids, lip, mask)
        cache["bundle"] = bundle
        return from_bundle(bundle)

    stages = {
        "conditioning": full,
        "backbone": lambda: from_bundle(cache["bundle"]),
        "contrastive": lambda: (cache["l_fm"] + from_contrastive(cache["taps"].z_ca))
        + cache["l_ctc"],
        "ctc_head": lambda: (cache["l_fm"] + cache["l_cl"]) + from_ctc(cache["taps"].z_out),
    }
    return full, stages


def test_criterion_02_gradcheck_all_parameters():
    start = time.monotonic()
    torch.manual_seed(0)
    model = DubbingModel(tiny_config())
    rng = np.random.default_rng(2)
    # Init has exact zeros on every gate, which silences most paths;
    # check at a perturbed point so all of them carry gradient.
    perturb_parameters(model, rng, scale=0.05)
    full, stages = _loss_pipeline(model, rng)

    model.zero_grad(set_to_none=True)
    full().backward()
    named = list(model.named_parameters())
    grads = {
        name: (torch.zeros_like(p) if p.grad is None else p.grad.clone())
        for name, p in named
    }

    h = 1e-5
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for name, p in named:
            stage_fn = stages[name.split(".", 1)[0]]
            full()  # refresh caches at the unperturbed point for this group
            flat = p.reshape(-1)
            grad_flat = grads[name].reshape(-1)
            for c in range(flat.numel()):
                orig = float(flat[c])
                flat[c] = orig + h
                plus = float(stage_fn())
                flat[c] = orig - h
                minus = float(stage_fn())
                flat[c] = orig
                numeric = (plus - minus) / (2 * h)
                analytic = float(grad_flat[c])
                denom = max(abs(analytic), abs(numeric), 1e-3)
                worst = max(worst, abs(analytic - numeric) / denom)
                checked += 1
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"
    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    conclude(2, f"{checked} parameters, max rel err {worst:.2e}, {elapsed:.0f}s")


# -- 3: sampler oracles ----------------------------------------------------


class _FieldModel:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x, bundle, t):
        return self.fn(x, t)


def test_criterion_03_sampler_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(3)
    x0 = torch.from_numpy(rng.standard_normal((5, 9)))
    c = torch.from_numpy(rng.standard_normal((5, 9)))
    for nfe in (1, 7, 32):
        out = euler_sample(_FieldModel(lambda x, t: c), None, GuidanceSpec(), nfe, rng, x0=x0)
        err = float((out - (x0 + c)).abs().max())
        assert err <= 1e-12, f"constant field off by {err:.2e} at nfe={nfe}"

    one = torch.ones((1, 1), dtype=torch.float64)
    out = euler_sample(_FieldModel(lambda x, t: x), None, GuidanceSpec(), 32, rng, x0=one)
    got = float(out[0, 0])
    expected = (1 + 1 / 32) ** 32
    assert abs(got - expected) <= 1e-9
    assert abs(got - math.e) <= 0.02 * math.e
    elapsed = time.monotonic() - start
    assert elapsed < 1.0, f"took {elapsed:.2f}s"
    conclude(3, f"constant exact, growth {got:.6f} vs e {math.e:.6f}, {elapsed * 1e3:.0f}ms")


# -- 4: guidance blend identities ------------------------------------------


def test_criterion_04_guidance_identities():
    rng = np.random.default_rng(4)
    shape = (3, 11)
    v_full, v_ac, v_unc = (torch.from_numpy(rng.standard_normal(shape)) for _ in range(3))
    assert torch.equal(cfg_field(v_full, v_ac, v_unc, GuidanceSpec(0.0, 0.0)), v_full)

    scalar = cfg_field(
        torch.full((1,), 3.0), torch.full((1,), 2.0), torch.full((1,), 1.0),
        GuidanceSpec(1.0, 1.0),
    )
    assert float(scalar[0]) == 5.0

    g = GuidanceSpec(0.7, 1.3)
    for _ in range(50):
        xs = [torch.from_numpy(rng.standard_normal(shape)) for _ in range(3)]
        ys = [torch.from_numpy(rng.standard_normal(shape)) for _ in range(3)]
        a, b = rng.standard_normal(2)
        mixed = cfg_field(*(a * x + b * y for x, y in zip(xs, ys)), g)
        split = a * cfg_field(*xs, g) + b * cfg_field(*ys, g)
        assert float((mixed - split).abs().max()) <= 1e-9
    conclude(4, "reduction bitwise, scalar 5, superposition on 50 triples")


# -- 5: loss unit values and the CTC brute force ---------------------------


def _brute_force_ctc(logits: torch.Tensor, target, blank: int = 0) -> float:
    probs = torch.softmax(logits, dim=0)
    vocab, frames = logits.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=frames):
        collapsed = [k for k, _ in itertools.groupby(path)]
        collapsed = [s for s in collapsed if s != blank]
        if collapsed == list(target):
            p = 1.0
            for s, symbol in enumerate(path):
                p *= float(probs[symbol, s])
            total += p
    return -math.log(total)


def test_criterion_05_loss_unit_values():
    torch.manual_seed(5)
    head = ContrastiveHead(6, 4, ContrastiveConfig())
    f64 = dict(dtype=torch.float64)
    with torch.no_grad():
        single = head.loss(torch.randn(6, 1, **f64), torch.randn(4, 1, **f64))
        assert float(single) == 0.0

        frames = 7
        z = torch.randn(6, 1, **f64).expand(6, frames)
        f = torch.randn(4, 1, **f64).expand(4, frames)
        identical = head.loss(z, f)
        assert abs(float(identical) - math.log(frames)) <= 1e-9

        pinned = ContrastiveHead(2, 2, ContrastiveConfig(tau=1.0, proj_dim=2))
        pinned.proj_hidden.weight.copy_(torch.eye(2))
        pinned.proj_hidden.bias.zero_()
        pinned.proj_align.weight.copy_(torch.eye(2))
        pinned.proj_align.bias.zero_()
        eye = torch.eye(2, dtype=torch.float64)
        orthogonal = pinned.loss(eye, eye)
        assert abs(float(orthogonal) - math.log(1 + math.exp(-1))) <= 1e-9

    uniform = ctc_loss(torch.zeros((2, 1), dtype=torch.float64), [1])
    assert abs(float(uniform) - (-math.log(0.5))) <= 1e-9

    rng = np.random.default_rng(5)
    cases = 0
    for vocab in (2, 3):
        for t_len in (1, 2, 3):
            for target in itertools.product(range(1, vocab), repeat=t_len):
                repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
                for frames in range(1, 6):
                    if frames < t_len + repeats:
                        continue
                    logits = torch.from_numpy(rng.standard_normal((vocab, frames)))
                    fast = float(ctc_loss(logits, list(target)))
                    slow = _brute_force_ctc(logits, target)
                    assert abs(fast - slow) <= 1e-9, (vocab, target, frames)
                    cases += 1
    # Complete enumeration: 9 feasible (target, frames) pairs at V=2 plus
    # 40 at V=3.
    assert cases == 49
    conclude(5, f"InfoNCE units exact, CTC matches brute force on {cases} instances")


# -- 6: zero lip gate is neutral at init -----------------------------------


def test_criterion_06_zero_gate_neutrality():
    torch.manual_seed(6)
    model = DubbingModel(toy_config())
    model.eval()
    cfg = model.config
    rng = np.random.default_rng(6)
    with torch.no_grad():
        for trial in range(10):
            length = 2 * int(rng.integers(4, 12))
            tokens = rng.integers(1, cfg.text_vocab_size, size=max(2, length // 4))
            mel = rng.random((cfg.num_mel_bins, length))
            lip = rng.standard_normal((cfg.lip_dim, length // 2))
            bundle = model.build_bundle(mel, tokens, lip, MaskSpec(1, length))
            muted = bundle.replace(x_lip=torch.zeros_like(bundle.x_lip))
            xt = torch.from_numpy(rng.standard_normal((cfg.num_mel_bins, length)))
            t = float(rng.random())
            v_a, taps_a = model(xt, bundle, t)
            v_b, taps_b = model(xt, muted, t)
            assert torch.equal(v_a, v_b), f"field differs on bundle {trial}"
            assert torch.equal(taps_a.z_out, taps_b.z_out)
    conclude(6, "lip stream inert across 10 random bundles")


# -- 7: mask span statistics -----------------------------------------------


def test_criterion_07_mask_span_statistics():
    rng = np.random.default_rng(7)
    length = 200
    fractions = np.array([sample_mask(length, rng).span / length for _ in range(10_000)])
    low, high, mean = float(fractions.min()), float(fractions.max()), float(fractions.mean())
    assert low >= 0.70 and high <= 1.00
    assert 0.84 <= mean <= 0.86
    conclude(7, f"10k masks in [{low:.3f}, {high:.3f}], mean {mean:.4f}")


# -- 8 and 9: the overfit experiment ---------------------------------------


@pytest.fixture(scope="module")
def overfit():
    corpus = generate_synthetic_corpus(SyntheticTaskSpec()).records
    assert len(corpus) == 16
    model_config = toy_config()
    params = sum(p.numel() for p in DubbingModel(model_config).parameters())
    assert params <= 1_000_000, f"toy model has {params} parameters"
    config = TrainConfig(**TOY_TRAIN)
    assert config.steps <= 2000
    start = time.monotonic()
    report = overfit_probe(corpus, model_config, config)
    wall = time.monotonic() - start
    assert wall < 900.0, f"training took {wall:.0f}s"
    return dict(report=report, wall=wall, params=params)


def test_criterion_08_overfit_experiment(overfit):
    report = overfit["report"]
    ratio = report.final_l_fm / report.initial_l_fm
    assert ratio < 0.1, f"loss ratio {ratio:.3f}"
    mse = report.mean_region_mse(32)
    base = report.mean_region_mse(32, untrained=True)
    assert mse <= base / 5.0, f"mse {mse:.4f} vs untrained {base:.4f}"
    assert report.pooled[32] < report.untrained_pooled[32]
    conclude(
        8,
        f"{overfit['params']} params, {overfit['wall']:.0f}s, "
        f"loss ratio {ratio:.3f}, mse {mse:.4f} vs untrained {base:.4f}, "
        f"sync {report.pooled[32]:.4f} vs {report.untrained_pooled[32]:.4f}",
    )


def test_criterion_09_nfe_robustness(overfit):
    report = overfit["report"]
    mse32 = report.mean_region_mse(32)
    mse16 = report.mean_region_mse(16)
    mse8 = report.mean_region_mse(8)
    assert mse8 <= 2.0 * mse32, f"nfe=8 mse {mse8:.4f} vs {mse32:.4f}"
    assert mse16 <= 2.0 * mse32, f"nfe=16 mse {mse16:.4f} vs {mse32:.4f}"
    conclude(9, f"mse@8/32 {mse8 / mse32:.3f}, mse@16/32 {mse16 / mse32:.3f}")


# -- 10: determinism and resume --------------------------------------------


def test_criterion_10_determinism_and_resume(tmp_path):
    spec = SyntheticTaskSpec(
        num_utterances=4, vocab_size=3, num_mel_bins=4, lip_dim=3,
        align_dim=3, tokens_min=4, tokens_max=6,
    )
    corpus = generate_synthetic_corpus(spec).records

    def csv_of(trainer) -> str:
        return "\n".join(r.csv_row() for r in trainer.history)

    runs = []
    for _ in range(2):
        trainer = Trainer(tiny_config(), TrainConfig(steps=40, batch_size=2, seed=9), corpus)
        trainer.run()
        runs.append(trainer)
    assert csv_of(runs[0]) == csv_of(runs[1])

    half = Trainer(tiny_config(), TrainConfig(steps=20, batch_size=2, seed=9), corpus)
    half.run()
    path = str(tmp_path / "mid.pt")
    half.save_checkpoint(path)
    resumed = Trainer.load_checkpoint(path, corpus)
    resumed.config.steps = 40
    resumed.run()
    assert csv_of(resumed) == csv_of(runs[0])
    for p, q in zip(resumed.model.parameters(), runs[0].model.parameters()):
        assert torch.equal(p, q)
    conclude(10, "twin runs byte-identical, midpoint resume exact")
