"""Synthetic audio-visual corpus: generation, validation, and disk format.

Each utterance couples four streams derived from one shared token
sequence:

* ``mel``        -- [F, L]   mel-like frames, values in [0, 1]
* ``lip_raw``    -- [D_v, L_v] lip-motion frames at a coarser rate,
                    L = stride * L_v
* ``text_ids``   -- [T]      token ids
* ``align_feat`` -- [D_a, T] per-token alignment embedding

Records are stored as an uncompressed ``.npz`` next to a plain-text
``.meta`` sidecar (``key=value`` lines).  Writes are atomic and
byte-deterministic: the same ``SyntheticTaskSpec`` always produces
identical files, which the tests rely on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

ARRAY_KEYS = ("mel", "lip_raw", "text_ids", "align_feat")
META_KEYS = ("utt_id", "ref_len")

# Token 0 renders quiet frames, every other token loud ones, so energy
# thresholding can recover the segment structure downstream.
QUIET_LEVEL = (0.0, 0.08)
LOUD_LEVEL = (0.25, 1.0)


class RecordError(Exception):
    """A record failed validation or could not be read.

    ``code`` is a stable machine-readable tag; ``message`` is for humans.
    Codes in use: missing-file, missing-meta, meta-malformed,
    missing-array, bad-shape, shape-mismatch, length-mismatch,
    non-finite, mel-range, text-ids, empty, ref-len.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class UtteranceRecord:
    """One utterance with all four streams plus its reference prefix length."""

    utt_id: str
    mel: np.ndarray
    lip_raw: np.ndarray
    text_ids: np.ndarray
    align_feat: np.ndarray
    ref_len: int

    @property
    def num_frames(self) -> int:
        return self.mel.shape[1]

    @property
    def lip_stride(self) -> int:
        return self.mel.shape[1] // self.lip_raw.shape[1]

    def validate(self) -> None:
        """Raise :class:`RecordError` unless every invariant holds."""
        if self.mel.ndim != 2 or self.lip_raw.ndim != 2 or self.align_feat.ndim != 2:
            raise RecordError("bad-shape", f"{self.utt_id}: streams must be 2-D")
        if self.text_ids.ndim != 1:
            raise RecordError("bad-shape", f"{self.utt_id}: text_ids must be 1-D")
        for key in ARRAY_KEYS:
            arr = getattr(self, key)
            if arr.size == 0:
                raise RecordError("empty", f"{self.utt_id}: {key} is empty")
            if not np.isfinite(arr).all():
                raise RecordError("non-finite", f"{self.utt_id}: {key} has non-finite values")
        if self.mel.min() < 0.0 or self.mel.max() > 1.0:
            raise RecordError("mel-range", f"{self.utt_id}: mel values outside [0, 1]")
        if self.text_ids.min() < 0:
            raise RecordError("text-ids", f"{self.utt_id}: negative token id")
        if self.align_feat.shape[1] != self.text_ids.shape[0]:
            raise RecordError(
                "shape-mismatch",
                f"{self.utt_id}: align_feat covers {self.align_feat.shape[1]} tokens, "
                f"text has {self.text_ids.shape[0]}",
            )
        frames, lip_frames = self.mel.shape[1], self.lip_raw.shape[1]
        if lip_frames > frames or frames % lip_frames != 0:
            raise RecordError(
                "length-mismatch",
                f"{self.utt_id}: {lip_frames} lip frames do not evenly divide {frames} mel frames",
            )
        if not 0 <= self.ref_len < frames:
            raise RecordError(
                "ref-len",
                f"{self.utt_id}: ref_len {self.ref_len} outside [0, {frames})",
            )


@dataclass
class SyntheticTaskSpec:
    """Knobs for the synthetic corpus generator."""

    num_utterances: int = 16
    vocab_size: int = 8
    num_mel_bins: int = 100
    lip_dim: int = 16
    align_dim: int = 16
    frames_per_token: int = 4
    tokens_min: int = 6
    tokens_max: int = 12
    lip_stride: int = 2
    noise_sigma: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.num_utterances < 1:
            raise ValueError("num_utterances must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        for name in ("num_mel_bins", "lip_dim", "align_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise ValueError("need 1 <= tokens_min <= tokens_max")
        if self.lip_stride < 1 or self.frames_per_token % self.lip_stride != 0:
            raise ValueError("lip_stride must divide frames_per_token")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SyntheticCorpus:
    """Generated records together with the templates that produced them."""

    spec: SyntheticTaskSpec
    records: list = field(default_factory=list)
    mel_templates: np.ndarray | None = None
    lip_templates: np.ndarray | None = None
    align_embed: np.ndarray | None = None


def _sample_tokens(rng: np.random.Generator, count: int, vocab: int) -> np.ndarray:
    """Token sequence with no immediate repeats, uniform over the rest."""
    toks = np.empty(count, dtype=np.int64)
    toks[0] = rng.integers(0, vocab)
    for j in range(1, count):
        toks[j] = (toks[j - 1] + rng.integers(1, vocab)) % vocab
    return toks


def generate_synthetic_corpus(spec: SyntheticTaskSpec) -> SyntheticCorpus:
    """Build the full corpus for ``spec``.

    All four streams of an utterance share one token sequence: mel frames
    repeat that token's mel template (plus clipped Gaussian noise), lip
    frames repeat its lip template at ``lip_stride``, and ``align_feat``
    looks its column up in a fixed embedding table.  Deterministic in
    ``spec`` including the seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    mel_templates = np.empty((spec.vocab_size, spec.num_mel_bins))
    mel_templates[0] = rng.uniform(*QUIET_LEVEL, size=spec.num_mel_bins)
    mel_templates[1:] = rng.uniform(
        *LOUD_LEVEL, size=(spec.vocab_size - 1, spec.num_mel_bins)
    )
    lip_templates = rng.uniform(-1.0, 1.0, size=(spec.vocab_size, spec.lip_dim))
    align_embed = rng.standard_normal((spec.align_dim, spec.vocab_size))

    corpus = SyntheticCorpus(
        spec=spec,
        mel_templates=mel_templates,
        lip_templates=lip_templates,
        align_embed=align_embed,
    )
    for i in range(spec.num_utterances):
        count = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
        toks = _sample_tokens(rng, count, spec.vocab_size)
        frames = count * spec.frames_per_token

        mel = np.repeat(mel_templates[toks], spec.frames_per_token, axis=0).T
        if spec.noise_sigma > 0:
            mel = mel + spec.noise_sigma * rng.standard_normal(mel.shape)
            mel = np.clip(mel, 0.0, 1.0)
        mel = np.ascontiguousarray(mel)

        lip_frames = frames // spec.lip_stride
        per_token = spec.frames_per_token // spec.lip_stride
        lip_raw = np.ascontiguousarray(np.repeat(lip_templates[toks], per_token, axis=0).T)
        assert lip_raw.shape[1] == lip_frames

        record = UtteranceRecord(
            utt_id=f"utt{i:04d}",
            mel=mel,
            lip_raw=lip_raw,
            text_ids=toks,
            align_feat=np.ascontiguousarray(align_embed[:, toks]),
            ref_len=int(rng.integers(0, max(1, frames // 5))),
        )
        record.validate()
        corpus.records.append(record)
    return corpus


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_record(record: UtteranceRecord, directory: str) -> str:
    """Write ``<utt_id>.npz`` plus ``<utt_id>.meta`` into ``directory``.

    Validates first, writes atomically, and keeps the byte stream a pure
    function of the record (fixed dtypes, uncompressed archive).
    """
    record.validate()
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, record.utt_id)

    tmp = base + ".npz.tmp"
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            mel=record.mel.astype("<f8"),
            lip_raw=record.lip_raw.astype("<f8"),
            text_ids=record.text_ids.astype("<i8"),
            align_feat=record.align_feat.astype("<f8"),
        )
    os.replace(tmp, base + ".npz")

    meta = f"utt_id={record.utt_id}\nref_len={record.ref_len}\n"
    _atomic_write_bytes(base + ".meta", meta.encode("utf-8"))
    return base + ".npz"


def _parse_meta(path: str) -> dict:
    if not os.path.exists(path):
        raise RecordError("missing-meta", f"no sidecar at {path}")
    parsed = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise RecordError("meta-malformed", f"{path}: bad line {line!r}")
            key, value = line.split("=", 1)
            parsed[key] = value
    for key in META_KEYS:
        if key not in parsed:
            raise RecordError("meta-malformed", f"{path}: missing key {key!r}")
    try:
        parsed["ref_len"] = int(parsed["ref_len"])
    except ValueError:
        raise RecordError("meta-malformed", f"{path}: ref_len is not an integer") from None
    return parsed


def load_record(npz_path: str) -> UtteranceRecord:
    """Read one record back and re-validate every invariant."""
    if not os.path.exists(npz_path):
        raise RecordError("missing-file", f"no record at {npz_path}")
    meta = _parse_meta(os.path.splitext(npz_path)[0] + ".meta")
    with np.load(npz_path, allow_pickle=False) as archive:
        arrays = {}
        for key in ARRAY_KEYS:
            if key not in archive:
                raise RecordError("missing-array", f"{npz_path}: missing {key!r}")
            arrays[key] = archive[key]
    record = UtteranceRecord(
        utt_id=meta["utt_id"], ref_len=meta["ref_len"], **arrays
    )
    record.validate()
    return record


def load_corpus_dir(directory: str) -> list:
    """Load every ``.npz`` under ``directory``, sorted by filename."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".npz"))
    if not names:
        raise RecordError("missing-file", f"no records under {directory}")
    return [load_record(os.path.join(directory, n)) for n in names]
