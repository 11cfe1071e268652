"""Speech-style features: pitch, energy, speaking rate, and 5-level binning."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .records import Level, SpeechStyle, WordStamp

WIN_S = 0.025
HOP_S = 0.010
FMIN_HZ = 50.0
FMAX_HZ = 500.0
VOICING_REL_RMS = 0.05
MIN_SAMPLE_RATE = 8000


class FeatureError(ValueError):
    pass


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono linear-PCM RIFF audio as float64 samples in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getcomptype() != "NONE":
            raise FeatureError(f"{path}: compressed audio is not supported")
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise FeatureError(f"{path}: need 16-bit mono PCM")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate_hz)
        w.writeframes(pcm.tobytes())


def frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Slice into overlapping windows; a signal shorter than ``win`` is one frame."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) <= win:
        return x[None, :]
    n = 1 + (len(x) - win) // hop
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]


def _window_sizes(sample_rate_hz: int) -> tuple[int, int]:
    return int(round(WIN_S * sample_rate_hz)), int(round(HOP_S * sample_rate_hz))


def _nccf(frame: np.ndarray, lag: int) -> float:
    head, tail = frame[:-lag], frame[lag:]
    denom = np.sqrt(np.dot(head, head) * np.dot(tail, tail))
    return float(np.dot(head, tail) / denom) if denom > 0 else 0.0


def _acf_f0(frame: np.ndarray, sample_rate_hz: int) -> float:
    frame = frame - frame.mean()
    n = len(frame)
    nfft = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(frame, nfft)
    acf = np.fft.irfft(spectrum * np.conj(spectrum), nfft)[:n]
    lag_min = max(2, int(np.floor(sample_rate_hz / FMAX_HZ)))
    lag_max = min(n - 3, int(np.ceil(sample_rate_hz / FMIN_HZ)) + 1)
    lags = np.arange(lag_min, lag_max + 1)
    # the biased ACF decays with lag, so its highest local peak is the
    # fundamental rather than a multiple of the period
    is_peak = (acf[lags] > acf[lags - 1]) & (acf[lags] >= acf[lags + 1])
    peaks = lags[is_peak]
    lag = int(peaks[np.argmax(acf[peaks])]) if peaks.size else int(lags[np.argmax(acf[lags])])
    # refine on the normalized cross-correlation, which has no lag tilt
    a, b, c = (_nccf(frame, lag + d) for d in (-1, 0, 1))
    for _ in range(3):
        if a > b and lag - 1 > lag_min - 1:
            lag -= 1
            a, b, c = _nccf(frame, lag - 1), a, b
        elif c > b and lag + 1 < n - 2:
            lag += 1
            a, b, c = b, c, _nccf(frame, lag + 1)
        else:
            break
    shift = 0.0
    denom = a - 2 * b + c
    if denom < 0:
        shift = float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    f0 = sample_rate_hz / (lag + shift)
    return float(np.clip(f0, FMIN_HZ, FMAX_HZ))


def estimate_pitch(samples: np.ndarray, sample_rate_hz: int) -> float | None:
    """Median short-time autocorrelation F0 over voiced 25 ms windows.

    A window counts as voiced when its RMS is at least 5% of the loudest
    window's RMS. Returns None when no window is voiced.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise FeatureError("empty signal")
    if sample_rate_hz < MIN_SAMPLE_RATE:
        raise FeatureError(f"sample rate {sample_rate_hz} below {MIN_SAMPLE_RATE}")
    win, hop = _window_sizes(sample_rate_hz)
    if len(x) < win:
        raise FeatureError("signal shorter than one analysis window")
    frames = frame_signal(x, win, hop)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    peak = rms.max()
    if peak <= 0:
        return None
    voiced = frames[rms >= VOICING_REL_RMS * peak]
    return float(np.median([_acf_f0(f, sample_rate_hz) for f in voiced]))


def compute_energy(samples: np.ndarray, sample_rate_hz: int = 16000) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise FeatureError("empty signal")
    win, hop = _window_sizes(sample_rate_hz)
    frames = frame_signal(x, win, hop)
    return float(np.mean(np.sqrt(np.mean(frames**2, axis=1))))


def compute_speed(word_timestamps: Sequence[WordStamp]) -> float:
    """Words per second between the first word onset and the last word offset."""
    if not word_timestamps:
        raise FeatureError("no words")
    span = word_timestamps[-1].end_s - word_timestamps[0].start_s
    if span <= 0:
        raise FeatureError("degenerate timestamps")
    return len(word_timestamps) / span


@dataclass(frozen=True)
class Quintiles:
    """Four cut points splitting a reference distribution into five bins."""

    boundaries: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if len(self.boundaries) != 4 or list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("need 4 non-decreasing boundaries")

    @classmethod
    def from_values(cls, reference_values: Iterable[float]) -> "Quintiles":
        ref = np.asarray(list(reference_values), dtype=np.float64)
        if ref.size == 0:
            raise FeatureError("empty reference distribution")
        cuts = np.percentile(ref, [20, 40, 60, 80])
        return cls(tuple(float(c) for c in cuts))

    def bin(self, value: float) -> Level:
        # a value sitting exactly on a cut point belongs to the lower bin
        k = sum(1 for b in self.boundaries if value > b)
        return Level.from_rank(k)


def quantize_quintiles(reference_values: Sequence[float], value: float) -> Level:
    return Quintiles.from_values(reference_values).bin(value)


FEATURES = ("pitch", "energy", "speed", "age")


def build_style(
    samples: np.ndarray | None,
    sample_rate_hz: int | None,
    word_timestamps: Sequence[WordStamp] | None,
    references: Mapping[str, Quintiles | Sequence[float]] | None = None,
    age_years: float | None = None,
) -> SpeechStyle:
    """Compute raw style values and their bins, leaving unavailable fields None.

    ``references`` maps a feature name (pitch, energy, speed, age) to either
    precomputed :class:`Quintiles` or raw reference values.
    """
    refs: dict[str, Quintiles] = {}
    for name, ref in (references or {}).items():
        try:
            refs[name] = ref if isinstance(ref, Quintiles) else Quintiles.from_values(ref)
        except FeatureError:
            pass

    pitch = energy = speed = None
    if samples is not None and sample_rate_hz:
        try:
            pitch = estimate_pitch(samples, sample_rate_hz)
        except FeatureError:
            pass
        try:
            energy = compute_energy(samples, sample_rate_hz)
        except FeatureError:
            pass
        if energy == 0.0:
            # digital silence carries no usable loudness level
            energy = None
    if word_timestamps:
        try:
            speed = compute_speed(word_timestamps)
        except FeatureError:
            pass

    def _bin(name: str, value: float | None) -> Level | None:
        if value is None or name not in refs:
            return None
        return refs[name].bin(value)

    return SpeechStyle(
        pitch_hz=pitch,
        energy_rms=energy,
        speed_wps=speed,
        pitch_bin=_bin("pitch", pitch),
        energy_bin=_bin("energy", energy),
        speed_bin=_bin("speed", speed),
        age_bin=_bin("age", age_years),
    )


# ---------------------------------------------------------------------------
# reference-distribution cache: one JSON object per (dataset, feature)


def write_references(table: Mapping[tuple[str, str], Quintiles], sink: IO[str]) -> None:
    for (dataset, feature), q in sorted(table.items()):
        sink.write(json.dumps({"dataset": dataset, "feature": feature, "boundaries": list(q.boundaries)}) + "\n")


def read_references(source: IO[str]) -> dict[tuple[str, str], Quintiles]:
    table = {}
    for line in source:
        if line.strip():
            d = json.loads(line)
            table[(d["dataset"], d["feature"])] = Quintiles(tuple(float(b) for b in d["boundaries"]))
    return table
