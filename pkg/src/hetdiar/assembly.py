"""Heterogeneous training-batch assembly with speaker-occupation soft labels.

Batches are formed by repeatedly sampling a speaker, one of its
utterances, and a random contiguous crop, concatenating the crops along
time until ``B * T`` frames are collected, truncating the excess, and
reshaping row-major into ``B`` rows of ``T`` frames. A crop may straddle
a row boundary, in which case it contributes frames to both rows. Each
row's soft label is the exact fraction of its frames occupied by each
training speaker, kept in rational arithmetic until the final float
conversion.

With ``overlap_mode="additive-mix"`` the tail of each crop is summed
with the head of the next one, and every overlapped frame credits half
its occupation mass to each of the two speakers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .errors import DataError
from .validation import check_feature_matrix, check_rng

HALF = Fraction(1, 2)


def _frames_of(utterance) -> np.ndarray:
    if hasattr(utterance, "frames"):
        return utterance.frames
    return np.asarray(utterance, dtype=np.float64)


@dataclass
class CorpusIndex:
    """Training corpus: speaker ids and their utterance feature matrices."""

    speakers: list[str]
    utterances: list[list[np.ndarray]]

    def __post_init__(self):
        if len(self.speakers) < 2:
            raise DataError("a training corpus needs at least 2 speakers")
        if len(self.speakers) != len(set(self.speakers)):
            raise DataError("duplicate speaker ids in corpus index")
        if len(self.utterances) != len(self.speakers):
            raise DataError("speakers and utterance lists are misaligned")
        self.utterances = [
            [check_feature_matrix(_frames_of(u), name=f"utterance of {spk}") for u in utts]
            for spk, utts in zip(self.speakers, self.utterances)
        ]
        for spk, utts in zip(self.speakers, self.utterances):
            if not utts:
                raise DataError(f"speaker {spk!r} has no utterances")

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def feature_dim(self) -> int:
        return self.utterances[0][0].shape[1]

    def min_utterance_frames(self) -> int:
        return min(u.shape[0] for utts in self.utterances for u in utts)


@dataclass
class AssemblyConfig:
    batch_size: int = 16
    temporal_frames: int = 100
    feature_dim: int = 16
    crop_min: int = 50
    crop_max: int = 150
    overlap_mode: str = "none"  # "none" | "additive-mix"
    overlap_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.temporal_frames, self.feature_dim) < 1:
            raise DataError("batch_size, temporal_frames, feature_dim must be >= 1")
        if not 1 <= self.crop_min <= self.crop_max:
            raise DataError(
                f"need 1 <= crop_min <= crop_max, got [{self.crop_min}, {self.crop_max}]"
            )
        if self.overlap_mode not in ("none", "additive-mix"):
            raise DataError(f"unknown overlap_mode {self.overlap_mode!r}")
        if self.overlap_mode == "additive-mix" and not 0 < self.overlap_fraction <= 0.5:
            raise DataError("overlap_fraction must be in (0, 0.5]")


@dataclass
class AssembledBatch:
    """A (B, T, D) tensor with per-row provenance and soft labels.

    ``provenance[b]`` is an ordered list of (speaker_id, mass) spans whose
    rational masses sum to exactly T; ``labels[b, c]`` is speaker c's mass
    divided by T, converted to float at the last moment.
    """

    tensor: np.ndarray
    provenance: list[list[tuple[str, Fraction]]]
    labels: np.ndarray
    speakers: tuple[str, ...]
    crop_lengths: list[int] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.tensor.shape[0]

    def row_speakers(self, b: int) -> set[str]:
        return {spk for spk, _ in self.provenance[b]}

    def is_multispeaker(self, b: int) -> bool:
        return len(self.row_speakers(b)) >= 2


def crop_region(utterance, rng, cfg: AssemblyConfig) -> np.ndarray:
    """Uniform-length, uniform-offset contiguous crop of one utterance."""
    frames = _frames_of(utterance)
    n = frames.shape[0]
    if n < cfg.crop_min:
        raise DataError(f"utterance of {n} frames is shorter than crop_min={cfg.crop_min}")
    rng = check_rng(rng)
    hi = min(cfg.crop_max, n)
    length = int(rng.integers(cfg.crop_min, hi + 1))
    start = int(rng.integers(0, n - length + 1))
    return frames[start:start + length]


def soft_labels(provenance: list[list[tuple[str, Fraction]]], speakers,
                temporal_frames: int) -> np.ndarray:
    """Row-stochastic label matrix from provenance spans, exact in rationals."""
    speakers = tuple(speakers)
    col = {spk: c for c, spk in enumerate(speakers)}
    labels = np.zeros((len(provenance), len(speakers)))
    for b, spans in enumerate(provenance):
        masses: dict[str, Fraction] = {}
        total = Fraction(0)
        for spk, mass in spans:
            if spk not in col:
                raise DataError(f"provenance references unknown speaker {spk!r}")
            masses[spk] = masses.get(spk, Fraction(0)) + Fraction(mass)
            total += Fraction(mass)
        if total != temporal_frames:
            raise DataError(
                f"row {b}: provenance mass {total} does not sum to T={temporal_frames}"
            )
        for spk, mass in masses.items():
            labels[b, col[spk]] = float(mass / temporal_frames)
    return labels


def mix_overlap(block_a: tuple[str, np.ndarray], block_b: tuple[str, np.ndarray],
                fraction: float, temporal_frames: int):
    """Additively overlap the tail of block_a with the head of block_b.

    The overlap length is ``round(fraction * temporal_frames)`` frames
    (clipped to both block lengths); every overlapped frame credits half
    its mass to each speaker. Returns (frames, provenance spans).
    """
    if not 0 < fraction <= 0.5:
        raise DataError("overlap fraction must be in (0, 0.5]")
    spk_a, frames_a = block_a[0], _frames_of(block_a[1])
    spk_b, frames_b = block_b[0], _frames_of(block_b[1])
    k = min(int(round(fraction * temporal_frames)), len(frames_a), len(frames_b))
    if k == 0:
        frames = np.vstack([frames_a, frames_b])
        return frames, [(spk_a, Fraction(len(frames_a))), (spk_b, Fraction(len(frames_b)))]
    mixed = frames_a[-k:] + frames_b[:k]
    frames = np.vstack([frames_a[:-k], mixed, frames_b[k:]])
    spans = [
        (spk_a, Fraction(len(frames_a) - k)),
        (spk_a, k * HALF),
        (spk_b, k * HALF),
        (spk_b, Fraction(len(frames_b) - k)),
    ]
    return frames, [(s, m) for s, m in spans if m > 0]


def assemble_batch(index: CorpusIndex, cfg: AssemblyConfig, rng) -> AssembledBatch:
    """Draw one (B, T, D) training batch with provenance and soft labels."""
    rng = check_rng(rng)
    if index.feature_dim != cfg.feature_dim:
        raise DataError(
            f"corpus feature dim {index.feature_dim} != configured {cfg.feature_dim}"
        )
    if index.min_utterance_frames() < cfg.crop_min:
        raise DataError(
            "corpus contains utterances shorter than crop_min; cannot assemble batches"
        )
    b, t, d = cfg.batch_size, cfg.temporal_frames, cfg.feature_dim
    target = b * t

    buf = np.zeros((target + cfg.crop_max, d))
    # per collected frame: list of (speaker column, mass in half-frame units)
    occupancy: list[list[tuple[int, int]]] = []
    crop_lengths: list[int] = []
    total = 0
    mix = cfg.overlap_mode == "additive-mix"
    prev_pure_tail = 0  # frames at the stream tail not yet overlapped

    while total < target:
        spk_idx = int(rng.integers(0, index.n_speakers))
        utts = index.utterances[spk_idx]
        utt = utts[int(rng.integers(0, len(utts)))]
        crop = crop_region(utt, rng, cfg)
        crop_lengths.append(len(crop))
        k = 0
        if mix and total > 0:
            k = min(int(round(cfg.overlap_fraction * t)), prev_pure_tail, len(crop))
        if k > 0:
            buf[total - k:total] += crop[:k]
            for i in range(total - k, total):
                occupancy[i] = [(occupancy[i][0][0], 1), (spk_idx, 1)]
        buf[total:total + len(crop) - k] = crop[k:]
        occupancy.extend([(spk_idx, 2)] for _ in range(len(crop) - k))
        total += len(crop) - k
        prev_pure_tail = len(crop) - k

    stream = buf[:target]
    occupancy = occupancy[:target]
    tensor = np.ascontiguousarray(stream.reshape(b, t, d))

    provenance: list[list[tuple[str, Fraction]]] = []
    for row in range(b):
        spans: list[tuple[str, Fraction]] = []
        for frame in occupancy[row * t:(row + 1) * t]:
            for spk_idx, halves in frame:
                spk = index.speakers[spk_idx]
                mass = Fraction(halves, 2)
                if spans and spans[-1][0] == spk:
                    spans[-1] = (spk, spans[-1][1] + mass)
                else:
                    spans.append((spk, mass))
        provenance.append(spans)

    labels = soft_labels(provenance, index.speakers, t)
    return AssembledBatch(tensor=tensor, provenance=provenance, labels=labels,
                          speakers=tuple(index.speakers), crop_lengths=crop_lengths)


class BatchAssembler:
    """Single-consumer batch stream owning one seeded generator."""

    def __init__(self, index: CorpusIndex, config: AssemblyConfig):
        self.index = index
        self.config = config
        self._rng = np.random.default_rng(config.seed)

    def next_batch(self) -> AssembledBatch:
        return assemble_batch(self.index, self.config, self._rng)

    def batches(self, n: int) -> Iterator[AssembledBatch]:
        for _ in range(n):
            yield self.next_batch()


def augmentation_rate(batches) -> float:
    """Fraction of rows whose provenance lists two or more distinct speakers."""
    multi = rows = 0
    for batch in batches:
        rows += batch.batch_size
        multi += sum(batch.is_multispeaker(b) for b in range(batch.batch_size))
    if rows == 0:
        raise DataError("augmentation_rate needs at least one batch")
    return multi / rows


def analyze_batches(index: CorpusIndex, cfg: AssemblyConfig, n_batches: int) -> dict:
    """Batch-stream statistics for the ``analyze-batches`` report."""
    assembler = BatchAssembler(index, cfg)
    rows = multi_rows = batches_multi = 0
    crop_hist: dict[int, int] = {}
    speakers_hist: dict[int, int] = {}
    for batch in assembler.batches(n_batches):
        rows += batch.batch_size
        batch_multi = False
        for b in range(batch.batch_size):
            k = len(batch.row_speakers(b))
            speakers_hist[k] = speakers_hist.get(k, 0) + 1
            if k >= 2:
                multi_rows += 1
                batch_multi = True
        batches_multi += batch_multi
        for length in batch.crop_lengths:
            crop_hist[length] = crop_hist.get(length, 0) + 1
    return {
        "rows_total": rows,
        "rows_multispeaker": multi_rows,
        "augmentation_rate": multi_rows / rows,
        "batches_total": n_batches,
        "batches_multispeaker": batches_multi,
        "batch_augmentation_rate": batches_multi / n_batches if n_batches else 0.0,
        "crop_length_histogram": {str(k): crop_hist[k] for k in sorted(crop_hist)},
        "speakers_per_row_histogram": {str(k): speakers_hist[k] for k in sorted(speakers_hist)},
    }
