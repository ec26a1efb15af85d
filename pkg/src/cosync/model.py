"""Full dubbing model: conditioning encoder, trunk, and auxiliary heads.

One :class:`ModelConfig` fixes every width in the system.  Three presets
are provided: ``default`` at published scale, ``toy`` small enough to
overfit on a laptop CPU, and ``tiny`` sized for exhaustive
finite-difference checks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig
from .conditioning import ConditioningBundle, ConditioningEncoder, MaskSpec
from .regularizers import ContrastiveConfig, ContrastiveHead, CtcHead, CtcHeadConfig


@dataclass
class ModelConfig:
    num_mel_bins: int = 100
    text_vocab_size: int = 2547
    lip_dim: int = 512
    align_dim: int = 512
    c_text: int = 512
    c_pad: int = 256
    c_ca: int = 256
    text_hidden: int = 512
    text_blocks: int = 4
    n_layers: int = 22
    d: int = 1024
    n_heads: int = 16
    phase_bounds: tuple = (8, 15)
    conv_pos_kernel: int = 31
    conv_pos_groups: int = 16
    mlp_ratio: int = 4
    time_freq_dim: int = 256
    time_embed_dim: int | None = None
    tau: float = 0.07
    proj_dim: int = 128
    ctc_vocab_size: int = 2547
    lip_full_coverage: bool = False

    @property
    def in_channels(self) -> int:
        return 2 * self.num_mel_bins + self.c_pad + self.c_ca

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            n_layers=self.n_layers,
            d=self.d,
            n_heads=self.n_heads,
            phase_bounds=tuple(self.phase_bounds),
            in_channels=self.in_channels,
            out_channels=self.num_mel_bins,
            conv_pos_kernel=self.conv_pos_kernel,
            conv_pos_groups=self.conv_pos_groups,
            c_text=self.c_text,
            mlp_ratio=self.mlp_ratio,
            time_freq_dim=self.time_freq_dim,
            time_embed_dim=self.time_embed_dim,
        )

    def validate(self) -> None:
        self.backbone_config().validate()
        ContrastiveConfig(tau=self.tau, proj_dim=self.proj_dim).validate()
        CtcHeadConfig(vocab_size=self.ctc_vocab_size).validate()
        if self.text_vocab_size < 2:
            raise ValueError("text vocabulary needs at least two entries")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["phase_bounds"] = list(self.phase_bounds)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        payload = dict(payload)
        if "phase_bounds" in payload:
            payload["phase_bounds"] = tuple(payload["phase_bounds"])
        return cls(**payload)


def default_config() -> ModelConfig:
    return ModelConfig()


def toy_config() -> ModelConfig:
    """Under a million parameters; trains in minutes on one CPU thread.

    The trunk width must stay at or above ``num_mel_bins``: the velocity
    target contains the full per-frame noise vector, and a narrower
    residual stream puts an irreducible floor of roughly
    ``(1 - d / num_mel_bins)`` on the flow loss no matter how long the
    model trains.  Width over depth, therefore.
    """
    return ModelConfig(
        num_mel_bins=100,
        text_vocab_size=8,
        lip_dim=16,
        align_dim=16,
        c_text=64,
        c_pad=32,
        c_ca=32,
        text_hidden=64,
        text_blocks=2,
        n_layers=3,
        d=128,
        n_heads=4,
        phase_bounds=(1, 2),
        conv_pos_kernel=15,
        conv_pos_groups=8,
        mlp_ratio=2,
        time_freq_dim=64,
        time_embed_dim=64,
        proj_dim=32,
        ctc_vocab_size=9,
    )


def tiny_config() -> ModelConfig:
    """Small enough to finite-difference every trunk parameter."""
    return ModelConfig(
        num_mel_bins=4,
        text_vocab_size=3,
        lip_dim=3,
        align_dim=3,
        c_text=8,
        c_pad=3,
        c_ca=3,
        text_hidden=8,
        text_blocks=1,
        n_layers=3,
        d=16,
        n_heads=2,
        phase_bounds=(1, 2),
        conv_pos_kernel=3,
        conv_pos_groups=2,
        mlp_ratio=2,
        time_freq_dim=8,
        time_embed_dim=8,
        proj_dim=4,
        ctc_vocab_size=4,
    )


PRESETS = {"default": default_config, "toy": toy_config, "tiny": tiny_config}


class DubbingModel(nn.Module):
    """Everything trainable under one roof, all in float64."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.conditioning = ConditioningEncoder(
            vocab_size=config.text_vocab_size,
            d=config.d,
            lip_dim=config.lip_dim,
            c_text=config.c_text,
            c_pad=config.c_pad,
            c_ca=config.c_ca,
            text_hidden=config.text_hidden,
            text_blocks=config.text_blocks,
            lip_full_coverage=config.lip_full_coverage,
        )
        self.backbone = Backbone(config.backbone_config())
        self.contrastive = ContrastiveHead(
            config.d,
            config.align_dim,
            ContrastiveConfig(tau=config.tau, proj_dim=config.proj_dim),
        )
        self.ctc_head = CtcHead(config.d, CtcHeadConfig(vocab_size=config.ctc_vocab_size))

    def build_bundle(self, m_raw, text_ids, lip_raw, mask: MaskSpec | None) -> ConditioningBundle:
        return self.conditioning.build_bundle(m_raw, text_ids, lip_raw, mask)

    def forward(self, x_t, bundle: ConditioningBundle, t, return_attn: bool = False):
        return self.backbone(x_t, bundle, t, return_attn=return_attn)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
