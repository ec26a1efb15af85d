"""Auxiliary training losses tying hidden states to linguistic content.

Two regularizers supplement the flow-matching objective:

* a frame-level contrastive loss between cross-attention outputs and
  alignment features, both projected into one shared space and
  L2-normalized, with in-utterance frames as negatives;
* a CTC loss on the final hidden states after two stride-2 temporal
  downsampling stages, computed with a log-space forward algorithm.

Both are differentiable end to end and carry finite-difference oracle
tests on tiny instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

ZERO_NORM_GUARD = 1e-12


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    proj_dim: int = 32

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.proj_dim < 1:
            raise ValueError("projection dim must be positive")


@dataclass
class CtcHeadConfig:
    vocab_size: int = 2547
    downsample_stages: int = 2
    blank_id: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("CTC vocabulary needs at least blank plus one label")
        if not 0 <= self.blank_id < self.vocab_size:
            raise ValueError("blank id outside vocabulary")
        if self.downsample_stages != 2:
            raise ValueError("head is defined with exactly two downsampling stages")


def _l2_normalize_columns(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=0)
    if bool((norms < ZERO_NORM_GUARD).any()):
        raise ValueError("zero-norm frame cannot be normalized")
    return x / norms


class ContrastiveHead(nn.Module):
    """Projects both streams to a shared space and scores frame matches."""

    def __init__(self, d: int, align_dim: int, config: ContrastiveConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.proj_hidden = nn.Linear(d, config.proj_dim)
        self.proj_align = nn.Linear(align_dim, config.proj_dim)
        self.double()

    def similarity(self, z_ca: torch.Tensor, f_av: torch.Tensor) -> torch.Tensor:
        """Temperature-scaled cosine similarity matrix [N, N]."""
        if z_ca.shape[-1] != f_av.shape[-1]:
            raise ValueError("streams must share the frame count")
        if z_ca.shape[-1] < 1:
            raise ValueError("need at least one frame")
        z_hat = _l2_normalize_columns(self.proj_hidden(z_ca.transpose(-2, -1)).transpose(-2, -1))
        f_hat = _l2_normalize_columns(self.proj_align(f_av.transpose(-2, -1)).transpose(-2, -1))
        return (z_hat.transpose(-2, -1) @ f_hat) / self.config.tau

    def loss(self, z_ca: torch.Tensor, f_av: torch.Tensor) -> torch.Tensor:
        """Mean over frames of -log softmax at the matching frame."""
        sim = self.similarity(z_ca, f_av)
        log_prob = torch.log_softmax(sim, dim=-1)
        return -log_prob.diagonal().mean()


class CtcHead(nn.Module):
    """Two stride-2 convolutions with Mish, then a linear map to the vocabulary."""

    def __init__(self, d: int, config: CtcHeadConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.down1 = nn.Conv1d(d, d, 3, stride=2, padding=1)
        self.down2 = nn.Conv1d(d, d, 3, stride=2, padding=1)
        self.act = nn.Mish()
        self.to_vocab = nn.Linear(d, config.vocab_size)
        self.double()

    def forward(self, z_out: torch.Tensor) -> torch.Tensor:
        """[d, L] -> logits [vocab, ceil(L/4)]; needs L >= 4."""
        length = z_out.shape[-1]
        if length < 4:
            raise ValueError(f"need at least 4 frames to downsample twice, got {length}")
        squeeze = z_out.ndim == 2
        x = z_out[None] if squeeze else z_out
        x = self.act(self.down1(x))
        x = self.act(self.down2(x))
        logits = self.to_vocab(x.transpose(-2, -1)).transpose(-2, -1)
        assert logits.shape[-1] == math.ceil(length / 4)
        return logits[0] if squeeze else logits


def ctc_loss(logits: torch.Tensor, target_ids, blank_id: int = 0) -> torch.Tensor:
    """CTC negative log-likelihood via the log-space forward algorithm.

    ``logits`` is [V, S] (unnormalized); ``target_ids`` must not contain
    the blank.  Raises when no alignment of length S can spell the
    target (S < T + number of adjacent repeats).
    """
    target = torch.as_tensor(target_ids, dtype=torch.long).reshape(-1)
    vocab, steps = logits.shape
    if target.numel() == 0:
        raise ValueError("empty CTC target")
    if bool((target < 0).any()) or bool((target >= vocab).any()):
        raise ValueError("CTC target id outside vocabulary")
    if bool((target == blank_id).any()):
        raise ValueError("CTC target may not contain the blank")
    repeats = int((target[1:] == target[:-1]).sum()) if target.numel() > 1 else 0
    needed = target.numel() + repeats
    if steps < needed:
        raise ValueError(
            f"target of length {target.numel()} with {repeats} repeats needs "
            f"{needed} frames, got {steps}"
        )

    log_probs = torch.log_softmax(logits, dim=0)  # [V, S]
    # Extended label sequence: blank, l1, blank, l2, ..., blank.
    ext = torch.full((2 * target.numel() + 1,), blank_id, dtype=torch.long)
    ext[1::2] = target
    n_ext = ext.numel()

    # Large negative stand-in for log 0: keeps dead paths contributing
    # exactly zero probability without the NaN gradients true -inf causes.
    dead = torch.tensor(-1e30, dtype=logits.dtype)
    alpha = torch.full((n_ext,), -1e30, dtype=logits.dtype)
    alpha[0] = log_probs[ext[0], 0]
    alpha[1] = log_probs[ext[1], 0]

    can_skip = torch.zeros(n_ext, dtype=torch.bool)
    can_skip[2:] = (ext[2:] != blank_id) & (ext[2:] != ext[:-2])
    for s in range(1, steps):
        from_prev = torch.cat([dead[None], alpha[:-1]])
        skip = torch.cat([dead[None], dead[None], alpha[:-2]])
        skip = torch.where(can_skip, skip, dead)
        candidates = torch.stack([alpha, from_prev, skip])
        alpha = torch.logsumexp(candidates, dim=0) + log_probs[ext, s]

    tail = torch.logsumexp(alpha[-2:], dim=0)
    return -tail


def combine_losses(l_fm, l_cl, l_ctc, w_cl: float, w_ctc: float):
    """Weighted total: l_fm + w_cl * l_cl + w_ctc * l_ctc."""
    return l_fm + w_cl * l_cl + w_ctc * l_ctc
