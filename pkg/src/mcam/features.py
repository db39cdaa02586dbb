"""Waveform front end: STFT, log mel-filterbank energies, inter-channel phase
differences, band pooling, and candidate-window extraction.

All channels of one utterance share frame timing (25 ms window, 10 ms hop), a
512-point transform with the DC bin dropped so exactly 256 bins remain, and 40
log-filterbank dimensions.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scene import HOP_SECONDS, WINDOW_SECONDS

FFT_SIZE = 512
NUM_BINS = 256  # bins 1..256 of the 512-point transform, DC dropped
NUM_FILTERS = 40
LOG_FLOOR = 1e-10  # silence frames must not produce -inf
PHASE_MAG_FLOOR = 1e-12  # phase below this magnitude is numerically meaningless

FEATURE_CACHE_MAGIC = b"AMF1"


@dataclass
class Spectrogram:
    frames: np.ndarray  # (T, NUM_BINS) complex128
    window_length: int
    hop: int
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FeatureTensor:
    """Per-frame, per-channel log-filterbank energies, (T, N, d)."""

    values: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.values.shape[2]


@dataclass
class PhaseDiffTensor:
    """Per-frame wrapped phase differences, (T, P, F), entries in [0, pi].

    Channel pairs are lexicographic: (0,1), (0,2), ..., (N-2,N-1).
    """

    values: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_pairs(self) -> int:
        return self.values.shape[1]


@dataclass
class CandidateWindow:
    """The attention mechanism's support around one output frame.

    feats: (N, l, d) feature slab over frames t-3..t+3 (edge-replicated).
    phase: (P, l, B) pooled phase slab, or None when phase input is disabled.
    """

    feats: np.ndarray
    phase: np.ndarray | None
    center_frame: int


def channel_pairs(num_channels: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(num_channels) for j in range(i + 1, num_channels)]


def stft(samples: np.ndarray, sample_rate: int) -> Spectrogram:
    """Hann-windowed 512-point STFT keeping bins 1..256."""
    samples = np.asarray(samples, dtype=np.float64)
    window = round(WINDOW_SECONDS * sample_rate)
    hop = round(HOP_SECONDS * sample_rate)
    if window > FFT_SIZE:
        raise ConfigError(
            f"window of {window} samples exceeds the {FFT_SIZE}-point transform"
        )
    if samples.ndim != 1:
        raise ConfigError("stft expects a single channel")
    if len(samples) < window:
        raise ConfigError(f"need at least {window} samples, got {len(samples)}")
    n_frames = (len(samples) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    frames = np.fft.rfft(samples[idx] * hann, n=FFT_SIZE, axis=1)[:, 1 : NUM_BINS + 1]
    return Spectrogram(frames=frames, window_length=window, hop=hop, sample_rate=sample_rate)


def bin_frequencies(sample_rate: int) -> np.ndarray:
    """Center frequency of each retained bin (DC dropped)."""
    return np.arange(1, NUM_BINS + 1) * sample_rate / FFT_SIZE


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filter_matrix(sample_rate: int, num_filters: int = NUM_FILTERS) -> np.ndarray:
    """(NUM_BINS, num_filters) triangular mel filters over 0..Nyquist, peak 1."""
    nyquist = sample_rate / 2.0
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(nyquist), num_filters + 2))
    freqs = bin_frequencies(sample_rate)
    matrix = np.zeros((NUM_BINS, num_filters))
    for m in range(num_filters):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        matrix[:, m] = np.clip(np.minimum(rising, falling), 0.0, None)
    empty = np.flatnonzero(matrix.sum(axis=0) == 0.0)
    if empty.size:
        raise ConfigError(f"mel filters {empty.tolist()} cover no bins at {sample_rate} Hz")
    return matrix


def log_filterbank(spec: Spectrogram, num_filters: int = NUM_FILTERS) -> np.ndarray:
    """(T, num_filters) natural-log filterbank energies, floored at LOG_FLOOR."""
    power = np.abs(spec.frames) ** 2
    energies = power @ mel_filter_matrix(spec.sample_rate, num_filters)
    return np.log(np.maximum(energies, LOG_FLOOR))


def phase_difference(spec_i: Spectrogram, spec_j: Spectrogram) -> np.ndarray:
    """(T, F) wrapped absolute phase difference in [0, pi].

    The min-over-integer-r formulation reduces to wrapping the raw angle
    difference into (-pi, pi] and taking its absolute value. Bins where either
    magnitude is below PHASE_MAG_FLOOR yield 0.
    """
    if spec_i.frames.shape != spec_j.frames.shape:
        raise ConfigError(
            f"spectrogram shapes differ: {spec_i.frames.shape} vs {spec_j.frames.shape}"
        )
    raw = np.angle(spec_i.frames) - np.angle(spec_j.frames)
    wrapped = np.abs((raw + np.pi) % (2.0 * np.pi) - np.pi)
    silent = (np.abs(spec_i.frames) < PHASE_MAG_FLOOR) | (
        np.abs(spec_j.frames) < PHASE_MAG_FLOOR
    )
    wrapped[silent] = 0.0
    return wrapped


def featurize(samples: np.ndarray, sample_rate: int) -> tuple[FeatureTensor, PhaseDiffTensor]:
    """Full front end for one multi-channel utterance."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[None, :]
    specs = [stft(ch, sample_rate) for ch in samples]
    feats = np.stack([log_filterbank(s) for s in specs], axis=1)
    pairs = channel_pairs(len(specs))
    n_frames = specs[0].num_frames
    phase = np.empty((n_frames, len(pairs), NUM_BINS))
    for p, (i, j) in enumerate(pairs):
        phase[:, p, :] = phase_difference(specs[i], specs[j])
    return FeatureTensor(values=feats), PhaseDiffTensor(values=phase)


def phase_pool_matrix(num_bands: int, sample_rate: int) -> np.ndarray:
    """(NUM_BINS, num_bands) averaging matrix grouping bins into mel-uniform bands.

    num_bands == NUM_BINS keeps full resolution (identity).
    """
    if not 1 <= num_bands <= NUM_BINS:
        raise ConfigError(f"phase bands must be in 1..{NUM_BINS}, got {num_bands}")
    if num_bands == NUM_BINS:
        return np.eye(NUM_BINS)
    mel_edges = np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), num_bands + 1)
    band = np.searchsorted(mel_edges, _hz_to_mel(bin_frequencies(sample_rate)), side="right") - 1
    band = np.clip(band, 0, num_bands - 1)
    matrix = np.zeros((NUM_BINS, num_bands))
    matrix[np.arange(NUM_BINS), band] = 1.0
    counts = matrix.sum(axis=0)
    if (counts == 0).any():
        raise ConfigError(
            f"{num_bands} phase bands leave empty bands at {sample_rate} Hz; use fewer bands"
        )
    return matrix / counts


def pool_phase(phase: PhaseDiffTensor, num_bands: int, sample_rate: int) -> np.ndarray:
    """(T, P, B) mel-band averages of the (T, P, F) phase tensor."""
    return phase.values @ phase_pool_matrix(num_bands, sample_rate)


def build_candidate(
    features: FeatureTensor,
    phase: PhaseDiffTensor | None,
    t: int,
    context_frames: int = 7,
    phase_bands: int = NUM_FILTERS,
    sample_rate: int = 16000,
) -> CandidateWindow:
    """Slab over frames t-(l-1)/2 .. t+(l-1)/2, replicating edge frames."""
    n_frames = features.num_frames
    if not 0 <= t < n_frames:
        raise ConfigError(f"frame {t} outside 0..{n_frames - 1}")
    if context_frames % 2 != 1:
        raise ConfigError(f"context must be odd, got {context_frames}")
    half = (context_frames - 1) // 2
    idx = np.clip(np.arange(t - half, t + half + 1), 0, n_frames - 1)
    feats = np.ascontiguousarray(features.values[idx].transpose(1, 0, 2))
    phase_slab = None
    if phase is not None:
        pooled = pool_phase(phase, phase_bands, sample_rate)
        phase_slab = np.ascontiguousarray(pooled[idx].transpose(1, 0, 2))
    return CandidateWindow(feats=feats, phase=phase_slab, center_frame=t)


# --- feature cache: "AMF1" magic, then two blocks (filterbank, phase), each
# 3x uint32 little-endian dims followed by row-major float64 little-endian data.


def _write_block(out, values: np.ndarray) -> None:
    out.write(struct.pack("<3I", *values.shape))
    out.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def _read_block(src, path) -> np.ndarray:
    header = src.read(12)
    if len(header) != 12:
        raise ConfigError(f"{path}: truncated feature cache header")
    dims = struct.unpack("<3I", header)
    count = int(np.prod(dims))
    data = src.read(8 * count)
    if len(data) != 8 * count:
        raise ConfigError(f"{path}: truncated feature cache data for dims {dims}")
    return np.frombuffer(data, dtype="<f8").reshape(dims)


def save_feature_cache(path, features: FeatureTensor, phase: PhaseDiffTensor) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as out:
        out.write(FEATURE_CACHE_MAGIC)
        _write_block(out, features.values)
        _write_block(out, phase.values)
    os.replace(tmp, path)


def load_feature_cache(path) -> tuple[FeatureTensor, PhaseDiffTensor]:
    with open(path, "rb") as src:
        magic = src.read(4)
        if magic != FEATURE_CACHE_MAGIC:
            raise ConfigError(f"{path}: bad feature cache magic {magic!r}")
        feats = _read_block(src, path)
        phase = _read_block(src, path)
        if src.read(1):
            raise ConfigError(f"{path}: trailing bytes after feature cache blocks")
    if feats.shape[0] != phase.shape[0]:
        raise ConfigError(
            f"{path}: frame counts differ between blocks: {feats.shape[0]} vs {phase.shape[0]}"
        )
    return FeatureTensor(values=feats), PhaseDiffTensor(values=phase)
