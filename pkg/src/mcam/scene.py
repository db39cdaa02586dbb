"""Synthetic multi-microphone scene generation and delay-and-sum enhancement.

A scene is a clean source made of class-specific narrowband tone segments,
replicated to N channels with integer-sample delays and per-channel white
noise whose level follows a time/channel SNR schedule. Frame-level class
labels and the scheduled best channel per frame come along as ground truth.
"""

from __future__ import annotations

import csv
import math
import wave as wavfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

WINDOW_SECONDS = 0.025
HOP_SECONDS = 0.010
MAX_DELAY_SECONDS = 0.100  # larger delays would leave the attention window

# Clean-source shape: narrowband segments, one class per segment.
SEGMENT_SECONDS = (0.2, 0.5)
TONE_AMPLITUDE = 0.1
TONE_CHIRP = 0.01  # +/-1% linear frequency sweep within a segment
EDGE_RAMP_SECONDS = 0.005
CLASS_FREQ_RANGE = (300.0, 6000.0)


def window_hop(sample_rate: int) -> tuple[int, int]:
    return round(WINDOW_SECONDS * sample_rate), round(HOP_SECONDS * sample_rate)


def num_frames(num_samples: int, sample_rate: int) -> int:
    """Frame count for 25 ms windows every 10 ms; 0 if shorter than one window."""
    window, hop = window_hop(sample_rate)
    if num_samples < window:
        return 0
    return (num_samples - window) // hop + 1


def class_frequencies(num_classes: int) -> np.ndarray:
    """Center frequency per class, geometrically spaced so bands stay distinct."""
    lo, hi = CLASS_FREQ_RANGE
    if num_classes == 1:
        return np.array([math.sqrt(lo * hi)])
    return lo * (hi / lo) ** (np.arange(num_classes) / (num_classes - 1))


@dataclass(frozen=True)
class NoiseSegment:
    """Noise state for one channel over [start, end) seconds at the given SNR."""

    start: float
    end: float
    channel: int
    snr_db: float  # math.inf means noiseless


@dataclass(frozen=True)
class SceneConfig:
    num_channels: int = 5
    sample_rate: int = 16000
    num_classes: int = 10
    utterance_seconds: float = 3.0
    channel_delays: tuple[int, ...] = (0, 0, 0, 0, 0)
    noise_schedule: tuple[NoiseSegment, ...] = field(default_factory=tuple)
    seed: int = 0

    def validate(self) -> None:
        if self.num_channels < 1:
            raise ConfigError("num_channels must be >= 1")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.utterance_seconds <= 0:
            raise ConfigError("utterance length must be positive")
        if len(self.channel_delays) != self.num_channels:
            raise ConfigError(
                f"need {self.num_channels} channel delays, got {len(self.channel_delays)}"
            )
        max_delay = MAX_DELAY_SECONDS * self.sample_rate
        for ch, delay in enumerate(self.channel_delays):
            if delay < 0:
                raise ConfigError(f"channel {ch}: delay must be >= 0")
            if delay > max_delay:
                raise ConfigError(
                    f"channel {ch}: delay {delay} exceeds {MAX_DELAY_SECONDS * 1e3:.0f} ms"
                )
        self._validate_schedule()

    def _validate_schedule(self) -> None:
        # Every sample of every channel must have exactly one defined noise state.
        for ch in range(self.num_channels):
            segs = sorted(
                (s for s in self.noise_schedule if s.channel == ch),
                key=lambda s: s.start,
            )
            if not segs:
                raise ConfigError(f"channel {ch}: noise schedule is empty")
            cursor = 0.0
            for seg in segs:
                if seg.end <= seg.start:
                    raise ConfigError(f"channel {ch}: empty noise segment at {seg.start}")
                if seg.start > cursor + 1e-9:
                    raise ConfigError(
                        f"channel {ch}: noise schedule gap at {cursor:.3f}s"
                    )
                if seg.start < cursor - 1e-9:
                    raise ConfigError(
                        f"channel {ch}: overlapping noise segments at {seg.start:.3f}s"
                    )
                cursor = seg.end
            if cursor < self.utterance_seconds - 1e-9:
                raise ConfigError(
                    f"channel {ch}: noise schedule ends at {cursor:.3f}s, "
                    f"utterance is {self.utterance_seconds:.3f}s"
                )


def uniform_schedule(num_channels: int, seconds: float, snr_db: float) -> tuple[NoiseSegment, ...]:
    """One noise state per channel covering the whole utterance."""
    return tuple(NoiseSegment(0.0, seconds, ch, snr_db) for ch in range(num_channels))


@dataclass
class MultiChannelWaveform:
    samples: np.ndarray  # (N, S) float64
    sample_rate: int
    frame_labels: np.ndarray  # (T,) int
    clean_channel_trace: np.ndarray  # (T,) scheduled best channel per frame

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class SceneDetails:
    """Generator internals kept for diagnostics and test oracles."""

    clean: np.ndarray  # (S,) undelayed source
    segments: list[tuple[int, int, int]]  # (start_sample, end_sample, class)
    unit_noise: np.ndarray  # (N, S) standard-normal draws
    noise_std: np.ndarray  # (N, S) per-sample noise scale
    reference_power: float  # mean clean-source power used as the SNR reference


def _edge_ramp(length: int, sample_rate: int) -> np.ndarray:
    ramp_len = min(round(EDGE_RAMP_SECONDS * sample_rate), length // 2)
    env = np.ones(length)
    if ramp_len > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_len) / ramp_len)
        env[:ramp_len] = r
        env[-ramp_len:] = r[::-1]
    return env


def _clean_source(
    rng: np.random.Generator, num_samples: int, sample_rate: int, num_classes: int
) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    freqs = class_frequencies(num_classes)
    source = np.zeros(num_samples)
    segments: list[tuple[int, int, int]] = []
    pos = 0
    while pos < num_samples:
        duration = round(rng.uniform(*SEGMENT_SECONDS) * sample_rate)
        duration = min(duration, num_samples - pos)
        label = int(rng.integers(num_classes))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        n = np.arange(duration)
        sweep = 2.0 * n / max(duration - 1, 1) - 1.0  # -1 .. 1 across the segment
        inst_freq = freqs[label] * (1.0 + TONE_CHIRP * sweep)
        inst_phase = phase + 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate
        tone = TONE_AMPLITUDE * np.sin(inst_phase) * _edge_ramp(duration, sample_rate)
        source[pos : pos + duration] = tone
        segments.append((pos, pos + duration, label))
        pos += duration
    return source, segments


def _labels_from_segments(
    segments: list[tuple[int, int, int]], num_samples: int, sample_rate: int
) -> np.ndarray:
    window, hop = window_hop(sample_rate)
    frames = num_frames(num_samples, sample_rate)
    by_sample = np.zeros(num_samples, dtype=np.int64)
    for start, end, label in segments:
        by_sample[start:end] = label
    centers = np.arange(frames) * hop + window // 2
    return by_sample[centers]


def _snr_to_std(snr_db: float, reference_power: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return math.sqrt(reference_power * 10.0 ** (-snr_db / 10.0))


def generate_scene_details(config: SceneConfig) -> tuple[MultiChannelWaveform, SceneDetails]:
    """Like generate_scene but also returns the generator internals."""
    config.validate()
    fs = config.sample_rate
    window, hop = window_hop(fs)
    num_samples = round(config.utterance_seconds * fs)
    if num_samples < window:
        raise ConfigError(
            f"utterance of {num_samples} samples is shorter than one {window}-sample window"
        )

    rng = np.random.default_rng(config.seed)
    clean, segments = _clean_source(rng, num_samples, fs, config.num_classes)
    reference_power = float(np.mean(clean**2))
    unit_noise = rng.standard_normal((config.num_channels, num_samples))

    # Per-sample noise scale from the schedule; scheduled SNR per frame for the trace.
    noise_std = np.zeros((config.num_channels, num_samples))
    frames = num_frames(num_samples, fs)
    scheduled_snr = np.full((config.num_channels, frames), -np.inf)
    centers = (np.arange(frames) * hop + window // 2) / fs
    for seg in config.noise_schedule:
        lo = round(seg.start * fs)
        hi = min(round(seg.end * fs), num_samples)
        noise_std[seg.channel, lo:hi] = _snr_to_std(seg.snr_db, reference_power)
        covered = (centers >= seg.start) & (centers < seg.end)
        scheduled_snr[seg.channel, covered] = seg.snr_db
    # Frames whose center falls at the very end of the last segment belong to it.
    tail = scheduled_snr == -np.inf
    if tail.any():
        for ch in range(config.num_channels):
            last = max(
                (s for s in config.noise_schedule if s.channel == ch),
                key=lambda s: s.end,
            )
            scheduled_snr[ch, tail[ch]] = last.snr_db

    samples = np.empty((config.num_channels, num_samples))
    for ch, delay in enumerate(config.channel_delays):
        delayed = np.zeros(num_samples)
        delayed[delay:] = clean[: num_samples - delay] if delay else clean
        samples[ch] = delayed + unit_noise[ch] * noise_std[ch]

    waveform = MultiChannelWaveform(
        samples=samples,
        sample_rate=fs,
        frame_labels=_labels_from_segments(segments, num_samples, fs),
        clean_channel_trace=np.argmax(scheduled_snr, axis=0),
    )
    details = SceneDetails(
        clean=clean,
        segments=segments,
        unit_noise=unit_noise,
        noise_std=noise_std,
        reference_power=reference_power,
    )
    return waveform, details


def generate_scene(config: SceneConfig) -> MultiChannelWaveform:
    """Deterministic function of the config: same seed, same bytes."""
    waveform, _ = generate_scene_details(config)
    return waveform


def delay_and_sum(samples: np.ndarray, delays) -> np.ndarray:
    """Average the channels after advancing each by its delay, zero-padded at the tail.

    out[s] = (1/N) sum_i channel_i[s + delay_i]
    """
    if hasattr(samples, "samples"):
        samples = samples.samples
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ConfigError("expected (channels, samples) array")
    n_channels, n_samples = samples.shape
    if len(delays) != n_channels:
        raise ConfigError(f"need {n_channels} delays, got {len(delays)}")
    out = np.zeros(n_samples)
    for ch, delay in enumerate(delays):
        delay = int(delay)
        if delay < 0 or delay >= n_samples:
            raise ConfigError(f"channel {ch}: delay {delay} outside signal length")
        if delay:
            out[: n_samples - delay] += samples[ch, delay:]
        else:
            out += samples[ch]
    return out / n_channels


# --- on-disk formats: RIFF WAVE (PCM16, interleaved) + sidecar label CSV ---

PCM_SCALE = 32767.0


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    samples = np.asarray(samples)
    if samples.ndim == 1:
        samples = samples[None, :]
    ints = np.clip(np.rint(samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wavfile.open(str(path), "wb") as out:
        out.setnchannels(samples.shape[0])
        out.setsampwidth(2)
        out.setframerate(sample_rate)
        out.writeframes(ints.T.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wavfile.open(str(path), "rb") as src:
        n_channels = src.getnchannels()
        if src.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit PCM")
        rate = src.getframerate()
        raw = src.readframes(src.getnframes())
    ints = np.frombuffer(raw, dtype="<i2").reshape(-1, n_channels)
    return ints.T.astype(np.float64) / PCM_SCALE, rate


def write_labels(path, frame_labels: np.ndarray, clean_channel_trace: np.ndarray) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["frame_index", "label", "clean_channel"])
        for t, (label, chan) in enumerate(zip(frame_labels, clean_channel_trace)):
            writer.writerow([t, int(label), int(chan)])


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    labels: list[int] = []
    trace: list[int] = []
    with open(path, newline="") as src:
        for row in csv.DictReader(src):
            labels.append(int(row["label"]))
            trace.append(int(row["clean_channel"]))
    return np.array(labels, dtype=np.int64), np.array(trace, dtype=np.int64)
