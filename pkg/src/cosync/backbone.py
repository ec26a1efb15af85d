"""Velocity-field transformer with three progressively richer layer stages.

The trunk is a stack of pre-norm transformer layers sharing one
self-attention + time-adaptive MLP core.  Layers are partitioned into
three contiguous stages:

* stage 1 runs the core only,
* stage 2 additionally injects the lip stream through a per-layer
  zero-initialized gate,
* stage 3 additionally cross-attends into the text memory with a
  time-gated residual.

All residual gates and the final projection start at zero, so a freshly
initialized network is the identity inside every block and emits an
exactly-zero field.  Everything runs in float64.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
from torch import nn

from .conditioning import ConditioningBundle, assemble_prior

LN_EPS = 1e-6


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new parameters are created with."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@dataclass
class BackboneConfig:
    n_layers: int = 22
    d: int = 1024
    n_heads: int = 16
    phase_bounds: tuple = (8, 15)
    in_channels: int = 712
    out_channels: int = 100
    conv_pos_kernel: int = 31
    conv_pos_groups: int = 16
    c_text: int = 512
    mlp_ratio: int = 4
    time_freq_dim: int = 256
    time_embed_dim: int | None = None

    @property
    def t_dim(self) -> int:
        return self.d if self.time_embed_dim is None else self.time_embed_dim

    def validate(self) -> None:
        p1, p2 = self.phase_bounds
        if not 0 < p1 <= p2 <= self.n_layers:
            raise ValueError(f"phase bounds {self.phase_bounds} invalid for {self.n_layers} layers")
        if self.d % self.n_heads != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if self.d % self.conv_pos_groups != 0:
            raise ValueError("conv position groups must divide hidden size")
        if self.conv_pos_kernel % 2 != 1:
            raise ValueError("conv position kernel must be odd")
        if self.time_freq_dim % 2 != 0:
            raise ValueError("time frequency dim must be even")
        for name in ("n_layers", "d", "n_heads", "in_channels", "out_channels", "c_text", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def stage_of(self, layer_index: int) -> int:
        """Stage (1, 2, or 3) of the 1-based layer index."""
        p1, p2 = self.phase_bounds
        if layer_index <= p1:
            return 1
        if layer_index <= p2:
            return 2
        return 3


@dataclass
class HiddenStates:
    """Named activation taps from one forward pass.

    ``z_style``/``z_lip``/``z_out`` come from the final layer (before the
    output projection); ``z_ca`` is the raw cross-attention output of the
    last stage-3 layer, kept before its gate so it stays informative at
    initialization.  Attention row lists are filled only on request.
    """

    z_style: torch.Tensor
    z_lip: torch.Tensor
    z_out: torch.Tensor
    z_ca: torch.Tensor | None
    self_attn: list = field(default_factory=list)
    cross_attn: list = field(default_factory=list)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Shift-scale an already-normalized activation; identity at zero."""
    return x * (1.0 + scale) + shift


def lip_inject(z_style: torch.Tensor, x_lip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """Gated additive lip injection: z_style + gate ⊙ x_lip.

    ``gate`` is a per-channel vector broadcast over time; zero gate means
    the lip stream is invisible.
    """
    if z_style.shape != x_lip.shape:
        raise ValueError(f"lip stream shape {tuple(x_lip.shape)} != {tuple(z_style.shape)}")
    return z_style + gate * x_lip


class TimeEmbedding(nn.Module):
    """Sinusoidal features of t followed by a 2-layer MLP."""

    def __init__(self, t_dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim)
        )

    def forward(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.ndim != 0:
            raise ValueError("t must be a scalar")
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"t={float(t)} outside [0, 1]")
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
        )
        args = 1000.0 * t * freqs
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)]))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        batch, length, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (batch, length, self.n_heads, self.head_dim)
        q, k, v = (u.view(shape).transpose(1, 2) for u in (q, k, v))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(batch, length, d)
        y = self.out(y)
        return (y, attn) if return_attn else (y, None)


class MultiHeadCrossAttention(nn.Module):
    def __init__(self, d: int, c_text: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(c_text, d)
        self.v = nn.Linear(c_text, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, return_attn: bool = False):
        if memory.shape[-2] < 1:
            raise ValueError("empty text memory")
        batch, length, d = x.shape
        tokens = memory.shape[-2]
        q = self.q(x).view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k(memory).view(batch, tokens, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v(memory).view(batch, tokens, self.n_heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(batch, length, d)
        y = self.out(y)
        return (y, attn) if return_attn else (y, None)


class TransformerLayer(nn.Module):
    """One trunk layer; richer stages own extra sub-modules.

    The time-conditioned modulation head emits, per residual branch, a
    (shift, scale, gate) triple; head weights and biases start at zero so
    every branch starts as the identity.
    """

    def __init__(self, config: BackboneConfig, stage: int):
        super().__init__()
        self.stage = stage
        d, t_dim = config.d, config.t_dim
        self.norm_attn = nn.LayerNorm(d, elementwise_affine=False, eps=LN_EPS)
        self.attn = MultiHeadSelfAttention(d, config.n_heads)
        self.norm_mlp = nn.LayerNorm(d, elementwise_affine=False, eps=LN_EPS)
        self.mlp = nn.Sequential(
            nn.Linear(d, config.mlp_ratio * d),
            nn.GELU(),
            nn.Linear(config.mlp_ratio * d, d),
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(t_dim, 6 * d))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)
        if stage >= 2:
            self.lip_gate = nn.Parameter(torch.zeros(d))
        if stage >= 3:
            self.norm_ca = nn.LayerNorm(d, elementwise_affine=False, eps=LN_EPS)
            self.cross = MultiHeadCrossAttention(d, config.c_text, config.n_heads)
            self.adaln_ca = nn.Sequential(nn.SiLU(), nn.Linear(t_dim, 3 * d))
            nn.init.zeros_(self.adaln_ca[1].weight)
            nn.init.zeros_(self.adaln_ca[1].bias)

    def modulation(self, t_emb: torch.Tensor):
        """Core-branch (shift, scale, gate) pairs; pure function of t."""
        return self.adaln(t_emb).chunk(6, dim=-1)

    def modulation_ca(self, t_emb: torch.Tensor):
        if self.stage < 3:
            raise ValueError("layer has no cross-attention branch")
        return self.adaln_ca(t_emb).chunk(3, dim=-1)

    def style_block(self, z: torch.Tensor, t_emb: torch.Tensor, return_attn: bool = False):
        """Gated self-attention residual then gated MLP residual."""
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(t_emb)
        y, attn = self.attn(modulate(self.norm_attn(z), shift_a, scale_a), return_attn)
        z = z + gate_a * y
        z = z + gate_m * self.mlp(modulate(self.norm_mlp(z), shift_m, scale_m))
        return z, attn

    def context_align_block(
        self, z_lip: torch.Tensor, h_text: torch.Tensor, t_emb: torch.Tensor,
        return_attn: bool = False,
    ):
        """Cross-attend into the text memory; returns (z_out, z_ca[, attn])."""
        shift_c, scale_c, gate_c = self.modulation_ca(t_emb)
        z_ca, attn = self.cross(
            modulate(self.norm_ca(z_lip), shift_c, scale_c), h_text, return_attn
        )
        return z_lip + gate_c * z_ca, z_ca, attn

    def forward(
        self,
        z: torch.Tensor,
        t_emb: torch.Tensor,
        x_lip: torch.Tensor | None,
        h_text: torch.Tensor | None,
        return_attn: bool = False,
    ):
        z_style, attn = self.style_block(z, t_emb, return_attn)
        z_lip = z_style
        z_ca = cross_attn = None
        if self.stage >= 2:
            z_lip = lip_inject(z_style, x_lip, self.lip_gate)
        z_out = z_lip
        if self.stage >= 3:
            z_out, z_ca, cross_attn = self.context_align_block(
                z_lip, h_text, t_emb, return_attn
            )
        return z_out, dict(
            z_style=z_style, z_lip=z_lip, z_out=z_out, z_ca=z_ca,
            self_attn=attn, cross_attn=cross_attn,
        )


class Backbone(nn.Module):
    """Unified projection, conv position encoding, staged trunk, field head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d
        with default_dtype(torch.float64):
            self.in_proj = nn.Linear(config.in_channels, d)
            self.conv_pos = nn.Conv1d(
                d, d, config.conv_pos_kernel,
                padding=config.conv_pos_kernel // 2, groups=config.conv_pos_groups,
            )
            self.time_embed = TimeEmbedding(config.t_dim, config.time_freq_dim)
            self.layers = nn.ModuleList(
                TransformerLayer(config, config.stage_of(i + 1))
                for i in range(config.n_layers)
            )
            self.out_proj = nn.Linear(d, config.out_channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x_t, bundle: ConditioningBundle, t, return_attn: bool = False):
        """Velocity field for noisy input ``x_t`` at time ``t``.

        Accepts [F, L] with a 2-D bundle, or [B, F, L] with matching or
        broadcastable bundle streams.  Returns (v, taps) with v shaped
        like ``x_t`` but ``out_channels`` wide.
        """
        x = torch.as_tensor(x_t, dtype=torch.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        batch = x.shape[0]

        def lift(stream):
            s = stream if stream.ndim == 3 else stream[None]
            return s.expand(batch, *s.shape[1:])

        h_m, text_pad, text_ca = (
            lift(s) for s in (bundle.h_m, bundle.text_pad, bundle.text_ca)
        )
        unified = assemble_prior(h_m, text_pad, text_ca, x)
        if unified.shape[-2] != self.config.in_channels:
            raise ValueError(
                f"assembled {unified.shape[-2]} channels, expected {self.config.in_channels}"
            )
        x_lip = lift(bundle.x_lip).transpose(-2, -1)
        if x_lip.shape[-1] != self.config.d:
            raise ValueError("lip stream width must equal the hidden size")
        h_text = lift(bundle.h_text).transpose(-2, -1)

        z = self.in_proj(unified.transpose(-2, -1))
        z = z + self.conv_pos(z.transpose(-2, -1)).transpose(-2, -1)
        t_emb = self.time_embed(t)

        taps = None
        last_ca = None
        self_rows, cross_rows = [], []
        for layer in self.layers:
            z, layer_taps = layer(z, t_emb, x_lip, h_text, return_attn)
            if layer_taps["z_ca"] is not None:
                last_ca = layer_taps["z_ca"]
            if return_attn:
                self_rows.append(layer_taps["self_attn"])
                if layer_taps["cross_attn"] is not None:
                    cross_rows.append(layer_taps["cross_attn"])
            taps = layer_taps

        def tap(stream):
            if stream is None:
                return None
            out = stream.transpose(-2, -1)  # back to channel-first [.., d, L]
            return out[0] if squeeze else out

        states = HiddenStates(
            z_style=tap(taps["z_style"]),
            z_lip=tap(taps["z_lip"]),
            z_out=tap(z),
            z_ca=tap(last_ca),
            self_attn=self_rows,
            cross_attn=cross_rows,
        )
        v = self.out_proj(z).transpose(-2, -1)
        if squeeze:
            v = v[0]
        return v, states

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def perturb_parameters(module: nn.Module, rng, scale: float = 0.05) -> None:
    """Add seeded Gaussian noise to every parameter, in place.

    At the exact init point the zero gates hide most of the network from
    the output, which would make gradient checks vacuous; a small nudge
    wakes every path up.
    """
    with torch.no_grad():
        for p in module.parameters():
            noise = rng.standard_normal(tuple(p.shape)) * scale
            p.add_(torch.from_numpy(noise).to(p.dtype))
