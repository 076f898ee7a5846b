"""Diarization scoring: RTTM round-tripping, DER, and JER.

All interval arithmetic is done in integer milliseconds so scores are
bit-stable across platforms. The reference-to-hypothesis speaker mapping
is the one-to-one assignment maximizing matched speaker time, solved
exactly with the Hungarian algorithm; overlapping reference speech is
scored unless ``ignore_overlap`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError

MS = 1000


def _to_ms(seconds: float) -> int:
    return int(round(seconds * MS))


@dataclass
class RttmRecord:
    session_id: str
    onset_s: float
    duration_s: float
    speaker_label: str
    channel: int = 1
    type: str = "SPEAKER"

    def __post_init__(self):
        if self.duration_s <= 0:
            raise DataError(f"RTTM record duration must be > 0, got {self.duration_s}")
        if self.onset_s < 0:
            raise DataError(f"RTTM record onset must be >= 0, got {self.onset_s}")
        if not self.speaker_label:
            raise DataError("RTTM record needs a non-empty speaker label")


@dataclass
class DiarizationHypothesis:
    """Per-session list of (start_s, end_s, speaker_label) intervals."""

    session_id: str
    intervals: list[tuple[float, float, str]] = field(default_factory=list)

    def __post_init__(self):
        for start, end, label in self.intervals:
            if not start < end:
                raise DataError(f"interval [{start}, {end}) is empty or reversed")
            if not label:
                raise DataError("interval speaker labels must be non-empty")

    @property
    def speakers(self) -> list[str]:
        seen: list[str] = []
        for _, _, label in self.intervals:
            if label not in seen:
                seen.append(label)
        return seen

    def total_speech_s(self) -> float:
        return sum(end - start for start, end, _ in self.intervals)

    def to_records(self, channel: int = 1) -> list[RttmRecord]:
        return [
            RttmRecord(self.session_id, start, end - start, label, channel=channel)
            for start, end, label in self.intervals
        ]

    @classmethod
    def from_records(cls, session_id: str, records) -> "DiarizationHypothesis":
        ivals = [
            (r.onset_s, r.onset_s + r.duration_s, r.speaker_label)
            for r in records
            if r.session_id == session_id
        ]
        return cls(session_id, sorted(ivals))


def parse_rttm(text: str) -> list[RttmRecord]:
    """Parse RTTM lines; malformed lines raise with their line number."""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 9:
            raise DataError(f"RTTM line {lineno}: expected >= 9 fields, got {len(fields)}")
        if fields[0] != "SPEAKER":
            raise DataError(f"RTTM line {lineno}: expected type SPEAKER, got {fields[0]!r}")
        try:
            record = RttmRecord(
                session_id=fields[1],
                channel=int(fields[2]),
                onset_s=float(fields[3]),
                duration_s=float(fields[4]),
                speaker_label=fields[7],
            )
        except ValueError as exc:
            raise DataError(f"RTTM line {lineno}: {exc}") from exc
        records.append(record)
    return records


def write_rttm(records) -> str:
    lines = [
        f"SPEAKER {r.session_id} {r.channel} {r.onset_s:.3f} {r.duration_s:.3f} "
        f"<NA> <NA> {r.speaker_label} <NA> <NA>"
        for r in records
    ]
    return "".join(line + "\n" for line in lines)


def _intervals_ms(hyp: DiarizationHypothesis) -> list[tuple[int, int, str]]:
    return [(_to_ms(s), _to_ms(e), lab) for s, e, lab in hyp.intervals]


def _merge_spans(spans: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, e in sorted(spans):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


@dataclass
class _Timeline:
    """Elementary segments with active reference/hypothesis speaker sets."""

    segments: list[tuple[int, frozenset, frozenset]]  # (duration_ms, ref set, hyp set)
    ref_speakers: list[str]
    hyp_speakers: list[str]


def _build_timeline(reference: DiarizationHypothesis, hypothesis: DiarizationHypothesis,
                    collar_s: float) -> _Timeline:
    ref = _intervals_ms(reference)
    hyp = _intervals_ms(hypothesis)
    collar = _to_ms(collar_s)
    excluded = []
    if collar > 0:
        for s, e, _ in ref:
            excluded.append((max(0, s - collar), s + collar))
            excluded.append((max(0, e - collar), e + collar))
        excluded = _merge_spans(excluded)

    points = {0}
    for s, e, _ in ref + hyp:
        points.add(s)
        points.add(e)
    for s, e in excluded:
        points.add(s)
        points.add(e)
    order = sorted(points)

    segments = []
    for a, b in zip(order, order[1:]):
        if any(s <= a and b <= e for s, e in excluded):
            continue
        active_ref = frozenset(lab for s, e, lab in ref if s <= a and b <= e)
        active_hyp = frozenset(lab for s, e, lab in hyp if s <= a and b <= e)
        if active_ref or active_hyp:
            segments.append((b - a, active_ref, active_hyp))

    ref_speakers = sorted({lab for _, _, lab in ref})
    hyp_speakers = sorted({lab for _, _, lab in hyp})
    return _Timeline(segments, ref_speakers, hyp_speakers)


def _overlap_matrix(tl: _Timeline) -> np.ndarray:
    r_index = {lab: i for i, lab in enumerate(tl.ref_speakers)}
    h_index = {lab: i for i, lab in enumerate(tl.hyp_speakers)}
    overlap = np.zeros((len(tl.ref_speakers), len(tl.hyp_speakers)), dtype=np.int64)
    for dur, active_ref, active_hyp in tl.segments:
        for r in active_ref:
            for h in active_hyp:
                overlap[r_index[r], h_index[h]] += dur
    return overlap


def optimal_speaker_mapping(tl: _Timeline) -> dict[str, str]:
    """One-to-one ref-to-hyp mapping maximizing matched speaker time."""
    overlap = _overlap_matrix(tl)
    if overlap.size == 0:
        return {}
    rows, cols = linear_sum_assignment(-overlap)
    return {tl.ref_speakers[i]: tl.hyp_speakers[j] for i, j in zip(rows, cols)}


@dataclass
class ScoringResult:
    der: float
    jer: float
    missed_s: float
    false_alarm_s: float
    confusion_s: float
    scored_speech_s: float
    mapping: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "der": self.der,
            "jer": self.jer,
            "missed": self.missed_s,
            "false_alarm": self.false_alarm_s,
            "confusion": self.confusion_s,
            "scored_speech": self.scored_speech_s,
            "mapping": dict(self.mapping),
        }


def _der_components(reference: DiarizationHypothesis, hypothesis: DiarizationHypothesis,
                    collar_s: float, ignore_overlap: bool):
    tl = _build_timeline(reference, hypothesis, collar_s)
    mapping = optimal_speaker_mapping(tl)
    miss = fa = conf = total = 0
    for dur, active_ref, active_hyp in tl.segments:
        if ignore_overlap and len(active_ref) > 1:
            continue
        n_ref, n_hyp = len(active_ref), len(active_hyp)
        correct = sum(1 for r in active_ref if mapping.get(r) in active_hyp)
        total += n_ref * dur
        miss += max(0, n_ref - n_hyp) * dur
        fa += max(0, n_hyp - n_ref) * dur
        conf += (min(n_ref, n_hyp) - correct) * dur
    return miss, fa, conf, total, mapping


def der(reference: DiarizationHypothesis, hypothesis: DiarizationHypothesis,
        collar_s: float = 0.0, ignore_overlap: bool = False) -> float:
    """Diarization error rate under the optimal speaker mapping.

    A collar of ``collar_s`` seconds around every reference boundary is
    excluded from scoring.
    """
    if collar_s < 0:
        raise DataError("collar must be >= 0")
    miss, fa, conf, total, _ = _der_components(reference, hypothesis, collar_s,
                                               ignore_overlap)
    if total == 0:
        raise DataError(f"session {reference.session_id!r}: zero reference speech time")
    return (miss + fa + conf) / total


def jer(reference: DiarizationHypothesis, hypothesis: DiarizationHypothesis) -> float:
    """Jaccard error rate: mean per-reference-speaker 1 - |∩| / |∪|.

    Uses the same optimal mapping as DER (collar 0); reference speakers
    left unmapped score 1.
    """
    tl = _build_timeline(reference, hypothesis, collar_s=0.0)
    if not tl.ref_speakers:
        raise DataError(f"session {reference.session_id!r}: no reference speakers")
    mapping = optimal_speaker_mapping(tl)

    ref = _intervals_ms(reference)
    hyp = _intervals_ms(hypothesis)
    per_speaker = []
    for r in tl.ref_speakers:
        r_spans = _merge_spans([(s, e) for s, e, lab in ref if lab == r])
        h = mapping.get(r)
        if h is None:
            per_speaker.append(1.0)
            continue
        h_spans = _merge_spans([(s, e) for s, e, lab in hyp if lab == h])
        inter = _span_intersection(r_spans, h_spans)
        r_total = sum(e - s for s, e in r_spans)
        h_total = sum(e - s for s, e in h_spans)
        union = r_total + h_total - inter
        per_speaker.append(1.0 - inter / union if union else 1.0)
    return float(np.mean(per_speaker))


def _span_intersection(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> int:
    total = 0
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            total += hi - lo
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return total


def score_session(reference: DiarizationHypothesis, hypothesis: DiarizationHypothesis,
                  collar_s: float = 0.0, ignore_overlap: bool = False) -> ScoringResult:
    """Full scoring report for one session."""
    miss, fa, conf, total, mapping = _der_components(reference, hypothesis, collar_s,
                                                     ignore_overlap)
    if total == 0:
        raise DataError(f"session {reference.session_id!r}: zero reference speech time")
    return ScoringResult(
        der=(miss + fa + conf) / total,
        jer=jer(reference, hypothesis),
        missed_s=miss / MS,
        false_alarm_s=fa / MS,
        confusion_s=conf / MS,
        scored_speech_s=total / MS,
        mapping=mapping,
    )
