"""Log-mel filterbank features, CMVN, length filtering and SpecAugment masking."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError, ParseError, UsageError

NUM_MEL = 80
FRAME_SIZE_MS = 25
FRAME_SHIFT_MS = 10
N_FFT = 512
LOG_FLOOR = 1e-10
MAX_FRAMES = 3000
MAX_CHARS = 512


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise InputError("sample rate must be positive")


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray  # [T, d0]
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_size_ms: int = FRAME_SIZE_MS
    cmvn_applied: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Utterance:
    """One training/evaluation example; ``text`` is already normalised."""

    utt_id: str
    features: FeatureMatrix
    text: str
    language: str = ""


# ------------------------------------------------------------------ log-mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = 16000, n_fft: int = N_FFT, n_mels: int = NUM_MEL,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_signal(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    size = sample_rate * FRAME_SIZE_MS // 1000
    shift = sample_rate * FRAME_SHIFT_MS // 1000
    if len(samples) < size:
        raise InputError(f"waveform of {len(samples)} samples is shorter than one {FRAME_SIZE_MS} ms window")
    n = 1 + (len(samples) - size) // shift
    idx = np.arange(size)[None, :] + shift * np.arange(n)[:, None]
    return samples[idx]


def power_spectrum(frames: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    window = np.hanning(frames.shape[1])
    spec = np.fft.rfft(frames * window, n=n_fft)
    return spec.real ** 2 + spec.imag ** 2


def compute_logmel(w: Waveform, n_mels: int = NUM_MEL) -> FeatureMatrix:
    """80-channel log-mel features with 25 ms Hann windows every 10 ms."""
    samples = np.asarray(w.samples, dtype=np.float64)
    frames = frame_signal(samples, w.sample_rate_hz)
    fb = mel_filterbank(w.sample_rate_hz, N_FFT, n_mels)
    energies = power_spectrum(frames) @ fb.T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    return FeatureMatrix(logmel.astype(np.float32))


# ------------------------------------------------------------------ CMVN


def _standardize(x: np.ndarray, mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    flat = sd < 1e-6
    sd = np.where(flat, 1.0, sd)
    out = (x - mu) / sd
    out[:, flat] = 0.0
    return out


def apply_cmvn(f: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-channel mean/variance normalisation.

    Channels with zero variance come out as all zeros.
    """
    if f.cmvn_applied:
        raise UsageError("CMVN has already been applied to this feature matrix")
    x = f.frames.astype(np.float64)
    out = _standardize(x, x.mean(axis=0), x.std(axis=0))
    return replace(f, frames=out.astype(np.float32), cmvn_applied=True)


def apply_corpus_cmvn(feats: Sequence[FeatureMatrix]) -> list[FeatureMatrix]:
    """Normalise with statistics pooled over the whole corpus instead of per utterance."""
    if any(f.cmvn_applied for f in feats):
        raise UsageError("CMVN has already been applied to one of the feature matrices")
    if not feats:
        return []
    allx = np.concatenate([f.frames.astype(np.float64) for f in feats])
    mu, sd = allx.mean(axis=0), allx.std(axis=0)
    return [replace(f, frames=_standardize(f.frames.astype(np.float64), mu, sd).astype(np.float32),
                    cmvn_applied=True) for f in feats]


# ------------------------------------------------------------------ length filter


@dataclass
class RemovalReport:
    removed: list[tuple[str, str]] = field(default_factory=list)  # (utt_id, reason)

    def __len__(self) -> int:
        return len(self.removed)

    @property
    def ids(self) -> list[str]:
        return [u for u, _ in self.removed]


def filter_by_length(samples: Iterable[Utterance], max_frames: int = MAX_FRAMES,
                     max_chars: int = MAX_CHARS) -> tuple[list[Utterance], RemovalReport]:
    kept, report = [], RemovalReport()
    for s in samples:
        reasons = []
        if s.features.num_frames > max_frames:
            reasons.append("frames")
        if len(s.text) > max_chars:
            reasons.append("chars")
        if reasons:
            report.removed.append((s.utt_id, "+".join(reasons)))
        else:
            kept.append(s)
    return kept, report


# ------------------------------------------------------------------ SpecAugment


@dataclass(frozen=True)
class AugmentPolicy:
    """Frequency/time masking without time warping.

    Defaults follow the LB row of the SpecAugment policy table.
    """

    num_freq_masks: int = 1
    max_freq_width: int = 27
    num_time_masks: int = 1
    max_time_width: int = 100
    time_mask_ratio_cap: float = 1.0

    def __post_init__(self):
        if min(self.num_freq_masks, self.max_freq_width, self.num_time_masks, self.max_time_width) < 0:
            raise UsageError("augment policy counts and widths must be >= 0")
        if not 0.0 < self.time_mask_ratio_cap <= 1.0:
            raise UsageError("time_mask_ratio_cap must be in (0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(0, 0, 0, 0, 1.0)


def spec_augment_masks(shape: tuple[int, int], p: AugmentPolicy,
                       rng: np.random.Generator) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Draw ``(start, width)`` bands for frequency and time masks."""
    t, d = shape
    freq, time = [], []
    fmax = min(p.max_freq_width, d)
    for _ in range(p.num_freq_masks):
        f = int(rng.integers(0, fmax + 1))
        freq.append((int(rng.integers(0, d - f + 1)), f))
    tmax = min(p.max_time_width, int(p.time_mask_ratio_cap * t))
    for _ in range(p.num_time_masks):
        w = int(rng.integers(0, tmax + 1))
        time.append((int(rng.integers(0, t - w + 1)), w))
    return freq, time


def apply_spec_augment(f: FeatureMatrix, p: AugmentPolicy, rng: np.random.Generator) -> FeatureMatrix:
    if not f.cmvn_applied:
        raise UsageError("SpecAugment expects CMVN-normalised features (mask value 0 is the mean)")
    freq, time = spec_augment_masks(f.frames.shape, p, rng)
    out = f.frames.copy()
    for start, width in freq:
        out[:, start:start + width] = 0.0
    for start, width in time:
        out[start:start + width, :] = 0.0
    return replace(f, frames=out)


# ------------------------------------------------------------------ feature cache
#
# Binary cache: a sequence of records, each
#   uint32 id_len | id (utf-8) | uint32 T | uint32 D | T*D float32 little-endian
# with a text index "<cache>.idx" of lines "utt_id<TAB>byte_offset<TAB>T<TAB>D".

_HEAD = struct.Struct("<I")
_DIMS = struct.Struct("<II")


def write_feature_cache(items: Iterable[tuple[str, FeatureMatrix]], path: str | Path) -> dict[str, int]:
    """Write records and the index; returns ``utt_id -> byte offset``."""
    path = Path(path)
    offsets = {}
    with open(path, "wb") as f, open(str(path) + ".idx", "w", encoding="utf-8", newline="\n") as idx:
        for utt_id, fm in items:
            if utt_id in offsets:
                raise InputError(f"duplicate utterance id {utt_id!r} in feature cache")
            off = f.tell()
            raw = utt_id.encode("utf-8")
            frames = np.ascontiguousarray(fm.frames, dtype="<f4")
            f.write(_HEAD.pack(len(raw)))
            f.write(raw)
            f.write(_DIMS.pack(*frames.shape))
            f.write(frames.tobytes())
            offsets[utt_id] = off
            idx.write(f"{utt_id}\t{off}\t{frames.shape[0]}\t{frames.shape[1]}\n")
    return offsets


def read_feature_record(path: str | Path, offset: int) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        f.seek(offset)
        (n,) = _HEAD.unpack(f.read(_HEAD.size))
        utt_id = f.read(n).decode("utf-8")
        t, d = _DIMS.unpack(f.read(_DIMS.size))
        data = np.frombuffer(f.read(4 * t * d), dtype="<f4")
        if data.size != t * d:
            raise ParseError(f"truncated feature record for {utt_id!r}")
    return utt_id, data.reshape(t, d).astype(np.float32)


def read_feature_cache(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(str(path) + ".idx", encoding="utf-8") as idx:
        for lineno, line in enumerate(idx, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ParseError("expected 4 fields in feature index", lineno)
            utt_id, frames = read_feature_record(path, int(parts[1]))
            if utt_id != parts[0]:
                raise ParseError(f"index id {parts[0]!r} does not match record {utt_id!r}", lineno)
            out[utt_id] = frames
    return out


def load_features(ref: str) -> np.ndarray:
    """Resolve a manifest path of the form ``cache.bin:OFFSET``."""
    path, _, off = ref.rpartition(":")
    if not path or not off.isdigit():
        raise ParseError(f"feature reference {ref!r} is not of the form path:offset")
    return read_feature_record(path, int(off))[1]
