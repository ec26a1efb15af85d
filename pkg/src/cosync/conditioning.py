"""Conditioning streams: temporal masking, dual text expansion, lip upsampling.

Everything the velocity network consumes besides the noisy mel itself is
assembled here into a :class:`ConditioningBundle`:

* ``h_m``       -- mel context with the target span zeroed out
* ``text_pad``  -- token features left-aligned, learned pad vector after
* ``text_ca``   -- token features spread over frames by cross-attention
* ``x_lip``     -- lip motion upsampled to mel rate at model width
* ``h_text``    -- encoded token memory for the backbone's cross-attention

Public tensors follow the channel-first [C, L] convention; a leading
batch dimension is accepted everywhere and preserved.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def sinusoidal_positions(length: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed sin/cos position table of shape [length, dim]; dim must be even."""
    if dim % 2 != 0:
        raise ValueError(f"position dim must be even, got {dim}")
    half = dim // 2
    pos = torch.arange(length, dtype=dtype)[:, None]
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    angles = pos * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


@dataclass(frozen=True)
class MaskSpec:
    """Half-open target span [start, end) over L mel frames."""

    start: int
    end: int

    def validate(self, num_frames: int) -> None:
        if not 0 <= self.start < self.end <= num_frames:
            raise ValueError(
                f"mask [{self.start}, {self.end}) out of bounds for length {num_frames}"
            )

    @property
    def span(self) -> int:
        return self.end - self.start


def sample_mask(num_frames: int, rng: np.random.Generator, frac: float | None = None) -> MaskSpec:
    """Draw a training mask: span fraction uniform in [0.70, 1.00], start uniform.

    ``frac`` forces the fraction (used at full span and in tests); the span
    is ``min(L, ceil(frac * L))`` so the realized fraction never drops
    below the drawn one.
    """
    if num_frames < 2:
        raise ValueError(f"need at least 2 frames to mask, got {num_frames}")
    fraction = float(rng.uniform(0.70, 1.00)) if frac is None else float(frac)
    span = min(num_frames, math.ceil(fraction * num_frames))
    start = int(rng.integers(0, num_frames - span + 1))
    return MaskSpec(start=start, end=start + span)


def apply_mask(m_raw, mask: MaskSpec | None) -> torch.Tensor:
    """Zero the columns inside the mask span; ``None`` disables masking."""
    out = torch.as_tensor(m_raw, dtype=torch.float64).clone()
    if mask is not None:
        mask.validate(out.shape[-1])
        out[..., mask.start : mask.end] = 0.0
    return out


def mask_indicator(mask: MaskSpec, num_frames: int, dtype=torch.float64) -> torch.Tensor:
    """Binary vector [L], 1 inside the span."""
    mask.validate(num_frames)
    out = torch.zeros(num_frames, dtype=dtype)
    out[mask.start : mask.end] = 1.0
    return out


class ConvResidualBlock(nn.Module):
    """Depthwise conv + pointwise MLP with a residual, over [B, C, T]."""

    def __init__(self, channels: int, hidden: int, kernel: int = 7):
        super().__init__()
        self.depthwise = nn.Conv1d(channels, channels, kernel, padding=kernel // 2, groups=channels)
        self.norm = nn.LayerNorm(channels)
        self.pw_in = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.pw_out = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.depthwise(x).transpose(-2, -1)
        y = self.pw_out(self.act(self.pw_in(self.norm(y))))
        return x + y.transpose(-2, -1)


class TextEncoder(nn.Module):
    """Token embedding followed by a stack of convolutional residual blocks."""

    def __init__(self, vocab_size: int, c_text: int, hidden: int = 512, n_blocks: int = 4):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, c_text)
        self.blocks = nn.ModuleList(ConvResidualBlock(c_text, hidden) for _ in range(n_blocks))
        self.double()

    def forward(self, text_ids) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(text_ids), dtype=torch.long)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        if ids.numel() == 0:
            raise ValueError("empty token sequence")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError("token id outside vocabulary")
        x = self.embedding(ids).transpose(-2, -1)  # [B, C, T]
        for block in self.blocks:
            x = block(x)
        return x[0] if squeeze else x


class PaddedTextExpander(nn.Module):
    """Left-align token features and fill the tail with one learned pad column.

    The pad vector starts at zero, so padded columns are exactly zero at
    initialization.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.pad_vector = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    def forward(self, text_emb: torch.Tensor, length: int) -> torch.Tensor:
        tokens = text_emb.shape[-1]
        if tokens > length:
            raise ValueError(f"{tokens} tokens exceed {length} frames")
        if tokens == length:
            return text_emb
        tail_shape = text_emb.shape[:-2] + (text_emb.shape[-2], length - tokens)
        tail = self.pad_vector[:, None].expand(tail_shape)
        return torch.cat([text_emb, tail], dim=-1)


class CrossAttentionExpander(nn.Module):
    """Spread token features over L frames with position-query attention.

    Queries are learned projections of sinusoidal frame positions; keys
    and values are learned projections of the token columns.  The query
    projection starts at zero, so initial attention is uniform and every
    output column is the mean of the value projections.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.d_k = c_out
        self.pe_dim = c_out + (c_out % 2)
        self.query = nn.Linear(self.pe_dim, self.d_k, bias=False)
        self.key = nn.Linear(c_in, self.d_k)
        self.value = nn.Linear(c_in, c_out)
        nn.init.zeros_(self.query.weight)
        self.double()

    def forward(self, text_emb: torch.Tensor, length: int, return_attn: bool = False):
        if text_emb.shape[-1] < 1:
            raise ValueError("empty text memory")
        tokens = text_emb.transpose(-2, -1)  # [.., T, C_in]
        keys = self.key(tokens)
        values = self.value(tokens)
        queries = self.query(sinusoidal_positions(length, self.pe_dim))  # [L, d_k]
        logits = queries @ keys.transpose(-2, -1) / math.sqrt(self.d_k)
        attn = torch.softmax(logits, dim=-1)  # [.., L, T]
        out = (attn @ values).transpose(-2, -1)  # [.., C_out, L]
        if return_attn:
            return out, attn
        return out


def nearest_upsample(lip_raw: torch.Tensor, length: int) -> torch.Tensor:
    """Repeat visual frames so the sequence covers ``length`` mel frames."""
    visual = lip_raw.shape[-1]
    if visual < 1:
        raise ValueError("empty lip sequence")
    idx = (torch.arange(length) * visual) // length
    return lip_raw[..., idx]


class LipUpsampler(nn.Module):
    """Nearest-neighbor repeat, two kernel-3 convolutions, projection to width d."""

    def __init__(self, lip_dim: int, d: int):
        super().__init__()
        self.conv1 = nn.Conv1d(lip_dim, lip_dim, 3, padding=1)
        self.conv2 = nn.Conv1d(lip_dim, lip_dim, 3, padding=1)
        self.act = nn.GELU()
        self.proj = nn.Linear(lip_dim, d)
        self.double()

    def forward(self, lip_raw, length: int) -> torch.Tensor:
        x = torch.as_tensor(lip_raw, dtype=torch.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        x = nearest_upsample(x, length)
        x = self.act(self.conv1(x))
        x = self.conv2(x)
        x = self.proj(x.transpose(-2, -1)).transpose(-2, -1)  # [.., d, L]
        return x[0] if squeeze else x


def place_lip(x_lip: torch.Tensor, mask: MaskSpec | None) -> torch.Tensor:
    """Zero lip columns outside the target span; ``None`` keeps full coverage."""
    if mask is None:
        return x_lip
    mask.validate(x_lip.shape[-1])
    out = torch.zeros_like(x_lip)
    out[..., mask.start : mask.end] = x_lip[..., mask.start : mask.end]
    return out


@dataclass
class ConditioningBundle:
    """All conditioning streams for one utterance (or one batch of equal length)."""

    h_m: torch.Tensor
    text_pad: torch.Tensor
    text_ca: torch.Tensor
    x_lip: torch.Tensor
    h_text: torch.Tensor
    mask: MaskSpec | None

    @property
    def num_frames(self) -> int:
        return self.h_m.shape[-1]

    def replace(self, **changes) -> "ConditioningBundle":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        length = self.h_m.shape[-1]
        for name in ("text_pad", "text_ca", "x_lip"):
            stream = getattr(self, name)
            if stream.shape[-1] != length:
                raise ValueError(f"{name} length {stream.shape[-1]} != {length}")
        if self.mask is not None:
            self.mask.validate(length)
            inside = self.h_m[..., self.mask.start : self.mask.end]
            if inside.numel() and inside.abs().max() != 0:
                raise ValueError("h_m is nonzero inside the mask span")


class ConditioningEncoder(nn.Module):
    """Builds the full :class:`ConditioningBundle` from raw streams."""

    def __init__(
        self,
        vocab_size: int,
        d: int,
        lip_dim: int,
        c_text: int = 512,
        c_pad: int = 256,
        c_ca: int = 256,
        text_hidden: int = 512,
        text_blocks: int = 4,
        lip_full_coverage: bool = False,
    ):
        super().__init__()
        self.lip_full_coverage = lip_full_coverage
        self.text_encoder = TextEncoder(vocab_size, c_text, text_hidden, text_blocks)
        self.to_pad = nn.Linear(c_text, c_pad)
        self.to_ca = nn.Linear(c_text, c_ca)
        self.pad_expander = PaddedTextExpander(c_pad)
        self.ca_expander = CrossAttentionExpander(c_ca, c_ca)
        self.lip_upsampler = LipUpsampler(lip_dim, d)
        self.double()

    def build_bundle(self, m_raw, text_ids, lip_raw, mask: MaskSpec | None) -> ConditioningBundle:
        m = torch.as_tensor(np.asarray(m_raw), dtype=torch.float64)
        length = m.shape[-1]
        h_text = self.text_encoder(text_ids)
        x_lip = self.lip_upsampler(lip_raw, length)
        if not self.lip_full_coverage:
            x_lip = place_lip(x_lip, mask)
        text_pad = self.pad_expander(self.to_pad(h_text.transpose(-2, -1)).transpose(-2, -1), length)
        text_ca = self.ca_expander(self.to_ca(h_text.transpose(-2, -1)).transpose(-2, -1), length)
        bundle = ConditioningBundle(
            h_m=apply_mask(m, mask),
            text_pad=text_pad,
            text_ca=text_ca,
            x_lip=x_lip,
            h_text=h_text,
            mask=mask,
        )
        bundle.validate()
        return bundle


def assemble_prior(h_m, text_pad, text_ca, x_t) -> torch.Tensor:
    """Channel-wise concatenation [x_t; h_m; text_pad; text_ca]."""
    streams = (x_t, h_m, text_pad, text_ca)
    length = x_t.shape[-1]
    for stream in streams:
        if stream.shape[-1] != length:
            raise ValueError("conditioning streams disagree on sequence length")
    return torch.cat(streams, dim=-2)
