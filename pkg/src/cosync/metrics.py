"""Desk-scale evaluation: duration divergence and masked-region error.

The duration divergence here is a declared stand-in for the full-scale
metric in the literature: voiced segments are found by thresholding
per-frame mean energy at a fraction of the utterance's own maximum, and
the KL divergence is taken between smoothed histograms of segment
durations.  Values are comparable between runs of this codebase only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .conditioning import MaskSpec

REL_THRESHOLD = 0.2
N_BINS = 10
SMOOTHING_EPS = 1e-6


def _to_numpy(mel) -> np.ndarray:
    if isinstance(mel, torch.Tensor):
        mel = mel.detach().cpu().numpy()
    return np.asarray(mel, dtype=np.float64)


def frame_energy(mel) -> np.ndarray:
    """Mean over mel bins, per frame."""
    return _to_numpy(mel).mean(axis=0)


def segment_speech(mel, energy_threshold: float) -> list:
    """Maximal runs of frames whose mean energy exceeds the threshold."""
    energy = frame_energy(mel)
    voiced = energy > energy_threshold
    segments = []
    start = None
    for i, on in enumerate(voiced):
        if on and start is None:
            start = i
        elif not on and start is not None:
            segments.append((start, i))
            start = None
    if start is not None:
        segments.append((start, len(voiced)))
    return segments


def voiced_durations(mel, rel_threshold: float = REL_THRESHOLD) -> np.ndarray:
    """Segment durations using a threshold relative to the utterance's peak."""
    threshold = rel_threshold * float(frame_energy(mel).max())
    return np.array([end - start for start, end in segment_speech(mel, threshold)])


@dataclass
class DurationHistogram:
    """Smoothed duration distribution over shared bin edges."""

    bin_edges: np.ndarray
    probs: np.ndarray
    smoothing_eps: float

    @classmethod
    def from_durations(
        cls, durations: np.ndarray, bin_edges: np.ndarray, eps: float = SMOOTHING_EPS
    ) -> "DurationHistogram":
        n_bins = len(bin_edges) - 1
        if len(durations) == 0:
            probs = np.full(n_bins, 1.0 / n_bins)
        else:
            counts, _ = np.histogram(durations, bins=bin_edges)
            probs = (1.0 - eps) * counts / counts.sum() + eps / n_bins
        return cls(bin_edges=bin_edges, probs=probs, smoothing_eps=eps)

    def validate(self) -> None:
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("histogram probabilities do not sum to 1")
        n_bins = len(self.bin_edges) - 1
        if (self.probs < self.smoothing_eps / n_bins).any():
            raise ValueError("smoothing floor violated")


def shared_bin_edges(all_durations: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width bins over [1, max duration]; guarded when degenerate."""
    top = float(all_durations.max()) if len(all_durations) else 1.0
    if top <= 1.0:
        top = 2.0
    return np.linspace(1.0, top, n_bins + 1)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def sync_kl(
    gt_mel,
    gen_mel,
    bins: int = N_BINS,
    rel_threshold: float = REL_THRESHOLD,
    eps: float = SMOOTHING_EPS,
) -> float:
    """KL between voiced-segment duration histograms, ground truth first."""
    gt_dur = voiced_durations(gt_mel, rel_threshold)
    if len(gt_dur) == 0:
        raise ValueError("ground truth has no voiced segments")
    gen_dur = voiced_durations(gen_mel, rel_threshold)
    edges = shared_bin_edges(np.concatenate([gt_dur, gen_dur]), bins)
    p = DurationHistogram.from_durations(gt_dur, edges, eps)
    q = DurationHistogram.from_durations(gen_dur, edges, eps)
    p.validate()
    q.validate()
    return kl_divergence(p.probs, q.probs)


def pooled_sync_kl(
    gt_mels: list,
    gen_mels: list,
    bins: int = N_BINS,
    rel_threshold: float = REL_THRESHOLD,
    eps: float = SMOOTHING_EPS,
) -> float:
    """Sync divergence over durations pooled across a whole corpus."""
    if len(gt_mels) != len(gen_mels) or not gt_mels:
        raise ValueError("need matching non-empty mel lists")
    gt_dur = np.concatenate([voiced_durations(m, rel_threshold) for m in gt_mels] or [[]])
    if len(gt_dur) == 0:
        raise ValueError("ground truth has no voiced segments")
    gen_parts = [voiced_durations(m, rel_threshold) for m in gen_mels]
    gen_dur = np.concatenate(gen_parts) if gen_parts else np.array([])
    edges = shared_bin_edges(np.concatenate([gt_dur, gen_dur]), bins)
    p = DurationHistogram.from_durations(gt_dur, edges, eps)
    q = DurationHistogram.from_durations(gen_dur, edges, eps)
    return kl_divergence(p.probs, q.probs)


def region_mse(gen, gt, mask: MaskSpec) -> float:
    """Mean squared error over the target span only."""
    gen_arr, gt_arr = _to_numpy(gen), _to_numpy(gt)
    if gen_arr.shape != gt_arr.shape:
        raise ValueError(f"shape mismatch {gen_arr.shape} vs {gt_arr.shape}")
    mask.validate(gen_arr.shape[-1])
    diff = gen_arr[..., mask.start : mask.end] - gt_arr[..., mask.start : mask.end]
    return float(np.mean(diff * diff))
