"""Acoustic front-end: WAV ingestion, log-mel / MFCC extraction, sliding
mean normalization, and uniform segmentation of sessions.

Defaults follow common telephone-speech practice: 25 ms frames with a
10 ms shift, per-frame pre-emphasis 0.97, a Hamming analysis window, and
the mel scale ``2595 * log10(1 + f / 700)``. Filterbank energies are
floored at 1e-10 before the log so silent frames stay finite.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fftpack import dct

from .errors import DataError
from .validation import check_feature_matrix, check_positive

LOG_FLOOR = 1e-10
DEFAULT_PREEMPHASIS = 0.97


@dataclass
class AudioSignal:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("AudioSignal expects a 1-D sample array")
        check_positive(self.sample_rate, "sample_rate")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    """Time-major matrix of feature frames plus frame timing metadata."""

    frames: np.ndarray
    frame_shift_s: float
    frame_length_s: float

    def __post_init__(self):
        self.frames = check_feature_matrix(self.frames)
        check_positive(self.frame_shift_s, "frame_shift_s")
        check_positive(self.frame_length_s, "frame_length_s")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames * self.frame_shift_s


@dataclass
class SegmentSpan:
    """A time span of one session, with its half-open frame interval."""

    session_id: str
    start_s: float
    end_s: float
    frame_range: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise DataError(
                f"invalid span [{self.start_s}, {self.end_s}) for {self.session_id!r}"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def load_audio(path) -> AudioSignal:
    """Read a mono 16-bit PCM WAV file; samples are divided by 32768."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            samp_width = w.getsampwidth()
            sample_rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"unsupported encoding in {path}: {exc}") from exc
    if n_channels != 1:
        raise DataError(f"non-mono input: {path} has {n_channels} channels")
    if samp_width != 2:
        raise DataError(
            f"unsupported encoding: {path} has {8 * samp_width}-bit samples, expected 16-bit"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples=samples, sample_rate=sample_rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write a mono 16-bit PCM WAV; input amplitudes are in [-1, 1]."""
    scaled = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(scaled.astype("<i2").tobytes())


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    """Number of complete frames: floor((N - L) / H) + 1, or 0 if N < L."""
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def _frame_signal(signal: AudioSignal, frame_length_s: float, frame_shift_s: float,
                  preemphasis: float, window: str) -> np.ndarray:
    frame_len = int(round(frame_length_s * signal.sample_rate))
    hop = int(round(frame_shift_s * signal.sample_rate))
    if frame_len < 2 or hop < 1:
        raise DataError("frame length/shift too small for this sample rate")
    n_frames = frame_count(len(signal.samples), frame_len, hop)
    if n_frames < 1:
        raise DataError(
            f"signal of {len(signal.samples)} samples is shorter than one "
            f"{frame_len}-sample frame"
        )
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = signal.samples[idx]
    if preemphasis > 0:
        # per-frame pre-emphasis; the first sample is emphasized against itself
        first = frames[:, :1] * (1.0 - preemphasis)
        frames = np.concatenate([first, frames[:, 1:] - preemphasis * frames[:, :-1]], axis=1)
    if window == "hamming":
        frames = frames * np.hamming(frame_len)
    elif window == "hann":
        frames = frames * np.hanning(frame_len)
    elif window != "rectangular":
        raise DataError(f"unknown analysis window {window!r}")
    return frames


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_bank(n_mels: int, nfft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over FFT bins, shape (n_mels, nfft // 2 + 1)."""
    low_mel, high_mel = hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0)
    mel_points = np.linspace(low_mel, high_mel, n_mels + 2)
    bins = np.floor((nfft + 1) * mel_to_hz(mel_points) / sample_rate).astype(int)
    bank = np.zeros((n_mels, nfft // 2 + 1))
    for j in range(n_mels):
        left, center, right = bins[j], bins[j + 1], bins[j + 2]
        for i in range(left, center):
            bank[j, i] = (i - left) / max(center - left, 1)
        for i in range(center, right):
            bank[j, i] = (right - i) / max(right - center, 1)
    return bank


def mel_filterbank(signal: AudioSignal, n_mels: int = 64,
                   frame_length_s: float = 0.025, frame_shift_s: float = 0.01,
                   preemphasis: float = DEFAULT_PREEMPHASIS,
                   window: str = "hamming") -> FeatureMatrix:
    """Log mel-filterbank energies, one row per frame."""
    if n_mels < 1:
        raise DataError("n_mels must be >= 1")
    frames = _frame_signal(signal, frame_length_s, frame_shift_s, preemphasis, window)
    nfft = 1
    while nfft < frames.shape[1]:
        nfft *= 2
    power = np.abs(np.fft.rfft(frames, nfft)) ** 2 / nfft
    bank = mel_filter_bank(n_mels, nfft, signal.sample_rate)
    energies = power @ bank.T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    return FeatureMatrix(feats, frame_shift_s=frame_shift_s, frame_length_s=frame_length_s)


def mfcc(signal: AudioSignal, n_ceps: int = 23,
         frame_length_s: float = 0.025, frame_shift_s: float = 0.01,
         n_mels: int | None = None, preemphasis: float = DEFAULT_PREEMPHASIS,
         window: str = "hamming") -> FeatureMatrix:
    """Mel-frequency cepstral coefficients (orthonormal DCT-II of log-mels)."""
    if n_mels is None:
        n_mels = max(26, n_ceps)
    if n_ceps < 1 or n_ceps > n_mels:
        raise DataError(f"n_ceps must be in [1, n_mels={n_mels}], got {n_ceps}")
    logmel = mel_filterbank(signal, n_mels=n_mels, frame_length_s=frame_length_s,
                            frame_shift_s=frame_shift_s, preemphasis=preemphasis,
                            window=window)
    ceps = dct(logmel.frames, type=2, axis=1, norm="ortho")[:, :n_ceps]
    return FeatureMatrix(ceps, frame_shift_s=frame_shift_s, frame_length_s=frame_length_s)


def sliding_mean_normalize(feats: FeatureMatrix, window_frames: int = 300) -> FeatureMatrix:
    """Subtract a per-dimension sliding-window mean from every frame.

    Windows are centered and keep ``min(window_frames, T)`` frames: near
    the edges the window slides against the boundary instead of shrinking,
    so a window of at least T frames subtracts the global mean.
    """
    if window_frames < 1:
        raise DataError("window_frames must be >= 1")
    x = feats.frames
    t = x.shape[0]
    w = min(window_frames, t)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    starts = np.clip(np.arange(t) - window_frames // 2, 0, t - w)
    means = (csum[starts + w] - csum[starts]) / w
    return FeatureMatrix(x - means, frame_shift_s=feats.frame_shift_s,
                         frame_length_s=feats.frame_length_s)


def uniform_segment(session_feats: FeatureMatrix, window_s: float = 1.5,
                    overlap_fraction: float = 0.5,
                    session_id: str = "") -> list[SegmentSpan]:
    """Cut a session into half-overlapping fixed-length spans.

    Spans advance by ``window_s * (1 - overlap_fraction)``; a trailing
    partial span is kept only if it is longer than half a window. A
    session shorter than one window yields a single span covering it.
    """
    check_positive(window_s, "window_s")
    if not 0 <= overlap_fraction < 1:
        raise DataError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    h = session_feats.frame_shift_s
    t = session_feats.n_frames
    wf = int(round(window_s / h))
    step = max(1, int(round(wf * (1.0 - overlap_fraction))))
    spans: list[SegmentSpan] = []
    start = 0
    while start + wf <= t:
        spans.append(SegmentSpan(session_id, start * h, (start + wf) * h,
                                 frame_range=(start, start + wf)))
        start += step
    if not spans:
        spans.append(SegmentSpan(session_id, 0.0, t * h, frame_range=(0, t)))
    elif t - start > wf / 2:
        spans.append(SegmentSpan(session_id, start * h, t * h, frame_range=(start, t)))
    return spans
