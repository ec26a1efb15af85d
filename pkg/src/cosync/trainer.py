"""Optimization loop binding conditioning, trunk, path loss, and regularizers.

One numpy Generator drives every stochastic choice (batch picks, mask
spans, condition dropout, path noise, timesteps) in a fixed per-sample
order, and its bit state rides along in checkpoints, which makes
mid-run resume reproduce the uninterrupted trajectory exactly.  Batches
are drawn without replacement per step rather than by epoch bookkeeping
so the only training state is (parameters, moments, rng, step).

Per-sample recipe: sample a mask, build the conditioning bundle, draw a
condition branch, build the path interpolant, regress the field, and on
full-condition samples add the contrastive and CTC regularizers.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditioning import MaskSpec, sample_mask
from .flow import (
    ConditionBranch,
    GuidanceSpec,
    apply_branch,
    cfm_loss,
    euler_sample,
    make_flow_batch,
    splice_reference,
)
from .metrics import pooled_sync_kl, region_mse, sync_kl
from .model import DubbingModel, ModelConfig
from .regularizers import ctc_loss

CHECKPOINT_VERSION = 1
HISTORY_WINDOW = 25
LOSS_CSV_HEADER = "step,l_fm,l_cl,l_ctc,total,branch"
EVAL_CSV_HEADER = "utt_id,nfe,region_mse,sync_kl"
PROBE_NFES = (8, 16, 32)


class TrainAbort(RuntimeError):
    """A non-finite loss; carries the offending sample for diagnosis."""

    def __init__(self, utt_id: str, detail: str):
        super().__init__(f"aborting on sample {utt_id}: {detail}")
        self.utt_id = utt_id


class CheckpointError(Exception):
    """Checkpoint missing, corrupt, or from an incompatible version."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 8
    p_drop_text: float = 0.1
    p_drop_all: float = 0.1
    w_cl: float = 1.0
    w_ctc: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    warmup_steps: int = 500
    full_sequence_loss: bool = False

    def validate(self) -> None:
        for name in ("p_drop_text", "p_drop_all"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.p_drop_text + self.p_drop_all > 1.0:
            raise ValueError("dropout probabilities exceed 1 combined")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("optimizer settings must be non-negative (eps positive)")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.checkpoint_every < 1 or self.warmup_steps < 0:
            raise ValueError("bad schedule settings")
        if self.w_cl < 0 or self.w_ctc < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        payload = dict(payload)
        if "betas" in payload:
            payload["betas"] = tuple(payload["betas"])
        return cls(**payload)


@dataclass
class LossReport:
    """One optimization step; regularizer fields are None when no sample ran them."""

    step: int
    l_fm: float
    l_cl: float | None
    l_ctc: float | None
    total: float
    branch_counts: dict

    @property
    def branch_tag(self) -> str:
        c = self.branch_counts
        return f"f{c.get('full', 0)}a{c.get('acoustic_only', 0)}u{c.get('unconditional', 0)}"

    def csv_row(self) -> str:
        def fmt(value):
            return "" if value is None else repr(value)

        return ",".join(
            [str(self.step), fmt(self.l_fm), fmt(self.l_cl), fmt(self.l_ctc),
             fmt(self.total), self.branch_tag]
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def frame_align_features(align_feat: np.ndarray, length: int) -> np.ndarray:
    """Expand per-token alignment columns to frame rate by nearest repeat."""
    tokens = align_feat.shape[-1]
    idx = (np.arange(length) * tokens) // length
    return align_feat[:, idx]


class Trainer:
    """Owns the model, optimizer, rng, and step counter for one run."""

    def __init__(
        self,
        model_config: ModelConfig,
        train_config: TrainConfig,
        corpus: list,
    ):
        train_config.validate()
        if not corpus:
            raise ValueError("empty corpus")
        max_id = max(int(r.text_ids.max()) for r in corpus)
        if max_id + 1 >= model_config.ctc_vocab_size:
            raise ValueError(
                f"token id {max_id} does not fit a {model_config.ctc_vocab_size}-way "
                "CTC vocabulary with a reserved blank"
            )
        if max_id >= model_config.text_vocab_size:
            raise ValueError(f"token id {max_id} outside the text vocabulary")
        self.config = train_config
        self.corpus = list(corpus)
        torch.manual_seed(train_config.seed)
        self.model = DubbingModel(model_config)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=train_config.lr,
            betas=tuple(train_config.betas),
            eps=train_config.eps,
            weight_decay=train_config.weight_decay,
        )
        self.rng = np.random.default_rng(train_config.seed)
        self.step = 0
        self.history: list = []

    # -- per-sample pieces ------------------------------------------------

    def _draw_branch(self) -> ConditionBranch:
        u = float(self.rng.uniform())
        if u < self.config.p_drop_all:
            return ConditionBranch.UNCONDITIONAL
        if u < self.config.p_drop_all + self.config.p_drop_text:
            return ConditionBranch.ACOUSTIC_ONLY
        return ConditionBranch.FULL

    def _sample_losses(self, record):
        length = record.num_frames
        mask = sample_mask(length, self.rng)
        branch = self._draw_branch()
        bundle = self.model.build_bundle(record.mel, record.text_ids, record.lip_raw, mask)
        bundle = apply_branch(bundle, branch)
        flow = make_flow_batch(record.mel, self.rng)
        v, taps = self.model(flow.xt, bundle, flow.t)
        loss_mask = None if self.config.full_sequence_loss else mask
        l_fm = cfm_loss(v, flow, loss_mask)
        total = l_fm
        l_cl = l_ctc = None
        if branch is ConditionBranch.FULL and taps.z_ca is not None:
            f_av = torch.as_tensor(
                frame_align_features(record.align_feat, length), dtype=torch.float64
            )
            l_cl = self.model.contrastive.loss(taps.z_ca, f_av)
            logits = self.model.ctc_head(taps.z_out)
            l_ctc = ctc_loss(logits, record.text_ids + 1, blank_id=self.model.ctc_head.config.blank_id)
            total = total + self.config.w_cl * l_cl + self.config.w_ctc * l_ctc
        return dict(total=total, l_fm=l_fm, l_cl=l_cl, l_ctc=l_ctc, branch=branch)

    def _current_lr(self) -> float:
        if self.config.warmup_steps > 0:
            ramp = min(1.0, (self.step + 1) / self.config.warmup_steps)
            return self.config.lr * ramp
        return self.config.lr

    def pick_batch(self) -> list:
        size = min(self.config.batch_size, len(self.corpus))
        idx = self.rng.choice(len(self.corpus), size=size, replace=False)
        return [self.corpus[int(i)] for i in idx]

    # -- the step ---------------------------------------------------------

    def train_step(self, records: list) -> LossReport:
        lr = self._current_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)

        totals, fm_vals, cl_vals, ctc_vals = [], [], [], []
        counts: dict = {}
        for record in records:
            sample = self._sample_losses(record)
            for key in ("total", "l_fm", "l_cl", "l_ctc"):
                term = sample[key]
                if term is not None and not bool(torch.isfinite(term)):
                    raise TrainAbort(
                        record.utt_id, f"non-finite {key} at step {self.step + 1}"
                    )
            totals.append(sample["total"])
            fm_vals.append(float(sample["l_fm"].detach()))
            if sample["l_cl"] is not None:
                cl_vals.append(float(sample["l_cl"].detach()))
                ctc_vals.append(float(sample["l_ctc"].detach()))
            branch = sample["branch"].value
            counts[branch] = counts.get(branch, 0) + 1

        batch = len(records)
        loss = torch.stack(totals).mean()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        loss = loss.detach()

        report = LossReport(
            step=self.step,
            l_fm=float(np.mean(fm_vals)),
            l_cl=float(np.sum(cl_vals) / batch) if cl_vals else None,
            l_ctc=float(np.sum(ctc_vals) / batch) if ctc_vals else None,
            total=float(loss),
            branch_counts=counts,
        )
        self.history.append(report)
        return report

    def run(self, on_step=None) -> list:
        """Train until ``config.steps``; returns the reports produced."""
        produced = []
        while self.step < self.config.steps:
            report = self.train_step(self.pick_batch())
            produced.append(report)
            if on_step is not None:
                on_step(report)
        return produced

    # -- persistence ------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        payload = dict(
            version=CHECKPOINT_VERSION,
            model_config=self.model.config.to_dict(),
            train_config=self.config.to_dict(),
            model_state=self.model.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            rng_state=self.rng.bit_generator.state,
            step=self.step,
            history=[r.to_dict() for r in self.history],
        )
        tmp = path + ".tmp"
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def load_checkpoint(cls, path: str, corpus: list) -> "Trainer":
        payload = read_checkpoint(path)
        trainer = cls(
            ModelConfig.from_dict(payload["model_config"]),
            TrainConfig.from_dict(payload["train_config"]),
            corpus,
        )
        trainer.model.load_state_dict(payload["model_state"])
        trainer.optimizer.load_state_dict(payload["optimizer_state"])
        trainer.rng.bit_generator.state = payload["rng_state"]
        trainer.step = payload["step"]
        trainer.history = [LossReport(**row) for row in payload["history"]]
        return trainer


def read_checkpoint(path: str) -> dict:
    """Load and version-check a checkpoint payload."""
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint payload")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def load_model(path: str):
    """Model + payload from a checkpoint, for inference-style use."""
    payload = read_checkpoint(path)
    config = ModelConfig.from_dict(payload["model_config"])
    torch.manual_seed(0)
    model = DubbingModel(config)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


# -- overfit probe --------------------------------------------------------


@dataclass
class ProbeReport:
    """Plot-ready numbers from one train-and-evaluate cycle."""

    loss_rows: list
    initial_l_fm: float
    final_l_fm: float
    rows: list = field(default_factory=list)  # (utt_id, nfe, region_mse, sync_kl)
    untrained_rows: list = field(default_factory=list)
    pooled: dict = field(default_factory=dict)  # nfe -> pooled sync divergence
    untrained_pooled: dict = field(default_factory=dict)

    def mean_region_mse(self, nfe: int, untrained: bool = False) -> float:
        rows = self.untrained_rows if untrained else self.rows
        vals = [r[2] for r in rows if r[1] == nfe]
        return float(np.mean(vals))

    def eval_csv(self, untrained: bool = False) -> str:
        rows = self.untrained_rows if untrained else self.rows
        lines = [EVAL_CSV_HEADER]
        for utt_id, nfe, mse, kl in rows:
            lines.append(f"{utt_id},{nfe},{repr(mse)},{repr(kl)}")
        return "\n".join(lines) + "\n"


def evaluate_corpus(model: DubbingModel, corpus: list, seed: int, nfes=PROBE_NFES):
    """Sample every utterance's target span at each NFE and score it.

    Deterministic in ``seed``; the per-(utterance, nfe) noise streams are
    independent, so trained and untrained models see identical noise.
    """
    rows = []
    spliced_by_nfe: dict = {nfe: [] for nfe in nfes}
    with torch.no_grad():
        for u_idx, record in enumerate(corpus):
            length = record.num_frames
            mask = MaskSpec(record.ref_len, length)
            bundle = model.build_bundle(record.mel, record.text_ids, record.lip_raw, mask)
            for nfe in nfes:
                rng = np.random.default_rng([seed, u_idx, nfe])
                x = euler_sample(model, bundle, GuidanceSpec(), nfe, rng)
                spliced = splice_reference(x, record.mel, mask)
                mse = region_mse(x, record.mel, mask)
                kl = sync_kl(record.mel, spliced)
                rows.append((record.utt_id, nfe, mse, kl))
                spliced_by_nfe[nfe].append(spliced)
    pooled = {
        nfe: pooled_sync_kl([r.mel for r in corpus], spliced_by_nfe[nfe]) for nfe in nfes
    }
    return rows, pooled


def overfit_probe(
    corpus: list,
    model_config: ModelConfig,
    train_config: TrainConfig,
    nfes=PROBE_NFES,
    on_step=None,
) -> ProbeReport:
    """Train on a small corpus, then score generated spans at several NFEs.

    Also scores a freshly initialized model on the same noise draws: at
    init the field is exactly zero, so its samples are the raw noise and
    form the natural untrained baseline.
    """
    if len(corpus) > 64:
        raise ValueError("probe corpora are capped at 64 utterances")
    trainer = Trainer(model_config, train_config, corpus)
    trainer.run(on_step=on_step)
    window = min(HISTORY_WINDOW, len(trainer.history))
    initial = float(np.mean([r.l_fm for r in trainer.history[:window]]))
    final = float(np.mean([r.l_fm for r in trainer.history[-window:]]))
    report = ProbeReport(
        loss_rows=list(trainer.history), initial_l_fm=initial, final_l_fm=final
    )
    report.rows, report.pooled = evaluate_corpus(
        trainer.model, corpus, train_config.seed, nfes
    )
    torch.manual_seed(train_config.seed)
    untrained = DubbingModel(trainer.model.config)
    report.untrained_rows, report.untrained_pooled = evaluate_corpus(
        untrained, corpus, train_config.seed, nfes
    )
    return report
