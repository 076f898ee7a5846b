"""Deterministic synthetic multi-speaker corpora.

Speakers are parametric sources in feature space: a spectral profile
vector plus per-dimension variability scales driving smoothed noise
(moving-average window 5, normalized to unit marginal variance, so
frames keep short-term correlation). Sessions alternate speaker turns
with exponential-ish durations and come with exact reference RTTM.

Every random draw runs on its own seed substream keyed by
(corpus seed, domain, index), so adding speakers, utterances, or
sessions never perturbs previously generated material. An optional
waveform mode renders each speaker as a band-limited tone mixture for
end-to-end WAV ingestion tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureMatrix, write_wav
from .io import write_feature_dump
from .metrics import DiarizationHypothesis, RttmRecord, write_rttm
from .validation import check_positive

SMOOTHING_WINDOW = 5


def substream(seed: int, *key) -> np.random.Generator:
    """Independent generator for (seed, domain, index...) keys."""
    parts = [seed & 0xFFFFFFFF]
    for item in key:
        if isinstance(item, str):
            parts.extend(item.encode("utf-8"))
        else:
            parts.append(int(item) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(parts))


@dataclass
class SyntheticSpeaker:
    id: str
    spectral_profile: np.ndarray
    variability: np.ndarray
    fundamental_seed: int

    def __post_init__(self):
        self.spectral_profile = np.asarray(self.spectral_profile, dtype=np.float64)
        self.variability = np.asarray(self.variability, dtype=np.float64)
        if np.any(self.variability <= 0):
            raise DataError("speaker variability scales must be positive")


@dataclass
class SessionScript:
    turns: list[tuple[str, float, float]]  # (speaker_id, start_s, end_s)
    n_speakers: int

    def __post_init__(self):
        if not 2 <= self.n_speakers <= 7:
            raise DataError(f"sessions carry 2..7 speakers, got {self.n_speakers}")
        starts = [t[1] for t in self.turns]
        if starts != sorted(starts):
            raise DataError("session turns must be time-ordered")

    def total_speech_s(self) -> float:
        return sum(end - start for _, start, end in self.turns)


@dataclass
class TurnModel:
    mean_turn_s: float = 2.5
    pause_prob: float = 0.0
    mean_pause_s: float = 0.4
    min_turn_s: float = 0.5

    def __post_init__(self):
        if self.mean_turn_s <= self.min_turn_s:
            raise DataError("mean_turn_s must exceed min_turn_s")
        if not 0 <= self.pause_prob < 1:
            raise DataError("pause_prob must be in [0, 1)")


def generate_speakers(n: int, dim: int, margin: float, seed: int,
                      profile_scale: float = 3.0,
                      variability_range: tuple[float, float] = (0.3, 0.6),
                      max_retries: int = 1000) -> list[SyntheticSpeaker]:
    """Draw speaker profiles, resampling until pairwise distances >= margin."""
    if n < 2:
        raise DataError("a corpus needs at least 2 speakers")
    speakers: list[SyntheticSpeaker] = []
    for i in range(n):
        rng = substream(seed, "speaker", i)
        for attempt in range(max_retries + 1):
            profile = rng.normal(0.0, profile_scale, size=dim)
            if all(np.linalg.norm(profile - s.spectral_profile) >= margin
                   for s in speakers):
                break
        else:
            raise DataError(
                f"could not place speaker {i} at margin {margin} "
                f"after {max_retries} retries")
        variability = rng.uniform(*variability_range, size=dim)
        speakers.append(SyntheticSpeaker(
            id=f"spk{i:03d}", spectral_profile=profile, variability=variability,
            fundamental_seed=i))
    return speakers


def _smooth_noise(rng: np.random.Generator, n_frames: int, dim: int) -> np.ndarray:
    """Moving-average filtered white noise with unit marginal variance."""
    w = SMOOTHING_WINDOW
    white = rng.standard_normal((n_frames + w - 1, dim))
    kernel = np.ones(w) / np.sqrt(w)
    out = np.empty((n_frames, dim))
    for j in range(dim):
        out[:, j] = np.convolve(white[:, j], kernel, mode="valid")
    return out


def synth_utterance(speaker: SyntheticSpeaker, duration_s: float, rng,
                    frame_shift_s: float = 0.01,
                    frame_length_s: float = 0.025) -> FeatureMatrix:
    check_positive(duration_s, "duration_s")
    n_frames = int(round(duration_s / frame_shift_s))
    if n_frames < 1:
        raise DataError(f"duration {duration_s}s yields no frames")
    dim = speaker.spectral_profile.shape[0]
    noise = _smooth_noise(rng, n_frames, dim)
    frames = speaker.spectral_profile + speaker.variability * noise
    return FeatureMatrix(frames, frame_shift_s=frame_shift_s,
                         frame_length_s=frame_length_s)


def synth_session(speakers: list[SyntheticSpeaker], total_s: float,
                  turn_model: TurnModel, rng, frame_shift_s: float = 0.01,
                  session_id: str = "session",
                  frame_length_s: float = 0.025):
    """One multi-speaker session: features, script, and reference RTTM."""
    if len(speakers) < 2:
        raise DataError("a session needs at least 2 speakers")
    if total_s <= turn_model.mean_turn_s:
        raise DataError("total_s must exceed the mean turn length")
    h = frame_shift_s
    total_frames = int(round(total_s / h))
    min_frames = max(1, int(round(turn_model.min_turn_s / h)))
    mean_extra = turn_model.mean_turn_s - turn_model.min_turn_s

    chunks: list[np.ndarray] = []
    turns: list[tuple[str, float, float]] = []
    dim = speakers[0].spectral_profile.shape[0]
    t = 0
    prev_idx = -1
    while t < total_frames:
        idx = int(rng.integers(0, len(speakers)))
        while idx == prev_idx:
            idx = int(rng.integers(0, len(speakers)))
        prev_idx = idx
        dur = min_frames + int(round(rng.exponential(mean_extra) / h))
        dur = min(dur, total_frames - t)
        if dur < 1:
            break
        speaker = speakers[idx]
        feats = synth_utterance(speaker, dur * h, rng, frame_shift_s=h,
                                frame_length_s=frame_length_s)
        chunks.append(feats.frames[:dur])
        turns.append((speaker.id, t * h, (t + dur) * h))
        t += dur
        if turn_model.pause_prob > 0 and t < total_frames:
            if rng.random() < turn_model.pause_prob:
                pause = max(1, int(round(rng.exponential(turn_model.mean_pause_s) / h)))
                pause = min(pause, total_frames - t)
                if pause > 0:
                    chunks.append(np.zeros((pause, dim)))
                    t += pause

    frames = np.concatenate(chunks, axis=0)
    script = SessionScript(turns=turns, n_speakers=len(speakers))
    records = [
        RttmRecord(session_id, start, end - start, spk)
        for spk, start, end in turns
    ]
    features = FeatureMatrix(frames, frame_shift_s=h, frame_length_s=frame_length_s)
    return features, script, records


def reference_hypothesis(session_id: str, script: SessionScript) -> DiarizationHypothesis:
    return DiarizationHypothesis(
        session_id, [(start, end, spk) for spk, start, end in script.turns])


def speech_regions(script: SessionScript) -> list[tuple[float, float]]:
    """Oracle speech regions: merged turn spans without speaker labels."""
    regions: list[list[float]] = []
    for _, start, end in sorted(script.turns, key=lambda t: t[1]):
        if regions and start <= regions[-1][1] + 1e-9:
            regions[-1][1] = max(regions[-1][1], end)
        else:
            regions.append([start, end])
    return [(s, e) for s, e in regions]


def speaker_tone_waveform(speaker: SyntheticSpeaker, duration_s: float,
                          sample_rate: int, rng) -> np.ndarray:
    """Band-limited tone mixture keyed to the speaker (waveform mode)."""
    base = 180.0 + 35.0 * (speaker.fundamental_seed % 12)
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    wave = np.zeros_like(t)
    for harmonic, gain in ((1, 1.0), (2, 0.5), (3, 0.25)):
        wave += gain * np.sin(2 * np.pi * base * harmonic * t)
    wave += 0.01 * rng.standard_normal(t.shape)
    return 0.3 * wave / np.max(np.abs(wave))


@dataclass
class CorpusConfig:
    seed: int = 0
    n_speakers: int = 20
    utterances_per_speaker: int = 3
    utterance_duration_s: tuple[float, float] = (8.0, 14.0)
    feature_dim: int = 16
    margin: float = 4.0
    profile_scale: float = 3.0
    variability_range: tuple[float, float] = (0.3, 0.6)
    n_sessions: int = 10
    session_speakers: tuple[int, int] = (2, 4)
    session_duration_s: float = 60.0
    turn_model: TurnModel = field(default_factory=TurnModel)
    frame_shift_s: float = 0.01
    frame_length_s: float = 0.025


def build_corpus(config: CorpusConfig, out_dir) -> dict:
    """Generate speakers, utterances, and sessions; write files + manifest."""
    out = Path(out_dir)
    (out / "utterances").mkdir(parents=True, exist_ok=True)
    (out / "sessions").mkdir(exist_ok=True)
    (out / "rttm").mkdir(exist_ok=True)

    speakers = generate_speakers(
        config.n_speakers, config.feature_dim, config.margin, config.seed,
        profile_scale=config.profile_scale,
        variability_range=config.variability_range)

    speaker_entries = []
    for i, speaker in enumerate(speakers):
        paths = []
        for j in range(config.utterances_per_speaker):
            rng = substream(config.seed, "utterance", i, j)
            duration = rng.uniform(*config.utterance_duration_s)
            feats = synth_utterance(speaker, duration, rng,
                                    frame_shift_s=config.frame_shift_s,
                                    frame_length_s=config.frame_length_s)
            rel = f"utterances/{speaker.id}_u{j:02d}.hdfm"
            write_feature_dump(out / rel, feats.frames)
            paths.append(rel)
        speaker_entries.append({
            "id": speaker.id,
            "profile": speaker.spectral_profile.tolist(),
            "variability": speaker.variability.tolist(),
            "utterances": paths,
        })

    session_entries = []
    lo, hi = config.session_speakers
    for s in range(config.n_sessions):
        rng = substream(config.seed, "session", s)
        k = int(rng.integers(lo, hi + 1))
        chosen = [speakers[i] for i in rng.choice(len(speakers), size=k, replace=False)]
        session_id = f"sess{s:03d}"
        feats, script, records = synth_session(
            chosen, config.session_duration_s, config.turn_model, rng,
            frame_shift_s=config.frame_shift_s, session_id=session_id,
            frame_length_s=config.frame_length_s)
        feat_rel = f"sessions/{session_id}.hdfm"
        rttm_rel = f"rttm/{session_id}.rttm"
        write_feature_dump(out / feat_rel, feats.frames)
        (out / rttm_rel).write_text(write_rttm(records))
        session_entries.append({
            "id": session_id,
            "features": feat_rel,
            "rttm": rttm_rel,
            "n_speakers": k,
            "speakers": [sp.id for sp in chosen],
            "speech_regions": [[s0, e0] for s0, e0 in speech_regions(script)],
        })

    manifest = {
        "seed": config.seed,
        "feature_dim": config.feature_dim,
        "frame_shift_s": config.frame_shift_s,
        "frame_length_s": config.frame_length_s,
        "config": _config_dict(config),
        "speakers": speaker_entries,
        "sessions": session_entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _config_dict(config: CorpusConfig) -> dict:
    d = asdict(config)
    d["utterance_duration_s"] = list(config.utterance_duration_s)
    d["session_speakers"] = list(config.session_speakers)
    return d


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"corpus manifest not found: {path}")
    return json.loads(path.read_text())
