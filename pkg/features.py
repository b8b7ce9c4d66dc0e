"""Acoustic feature conventions: spectral frames, mel-scale F0 quantization."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, List, Mapping, Union

import numpy as np

from errors import ValidationError

logger = logging.getLogger(__name__)

UNVOICED_CLASS = 0


@dataclass(frozen=True)
class FeatureConfig:
    d_mgc: int = 12
    n_f0_bins: int = 511
    f0_min: float = 50.0
    f0_max: float = 500.0
    frame_shift: float = 5.0
    window: float = 25.0

    def __post_init__(self):
        if self.d_mgc < 1:
            raise ValidationError(f'd_mgc must be >= 1, got {self.d_mgc}')
        if self.n_f0_bins < 2:
            raise ValidationError(f'n_f0_bins must be >= 2, got {self.n_f0_bins}')
        if not 0 < self.f0_min < self.f0_max:
            raise ValidationError(
                f'need 0 < f0_min < f0_max, got {self.f0_min}, {self.f0_max}')

    @property
    def n_classes(self) -> int:
        return self.n_f0_bins + 1

    @property
    def mel_min(self) -> float:
        return hz_to_mel(self.f0_min)

    @property
    def mel_max(self) -> float:
        return hz_to_mel(self.f0_max)

    @property
    def mel_bin_width(self) -> float:
        return (self.mel_max - self.mel_min) / self.n_f0_bins

    def to_mapping(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'FeatureConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f'unknown feature config keys: {sorted(unknown)}')
        return cls(**data)


@dataclass(frozen=True)
class Voiced:
    hz: float


class Unvoiced:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return 'UNVOICED'

    def __reduce__(self):
        return (Unvoiced, ())


UNVOICED = Unvoiced()
F0Value = Union[Voiced, Unvoiced]


@dataclass(frozen=True)
class AcousticFrame:
    mgc: np.ndarray
    f0: F0Value


@dataclass(frozen=True, eq=False)
class AcousticTrack:
    """A sequence of acoustic frames stored column-wise.

    ``f0`` holds Hz on voiced frames and 0 on unvoiced ones; ``voiced`` is the
    boolean mask that decides which is which.
    """
    mgc: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        mgc = np.asarray(self.mgc, dtype=np.float64)
        f0 = np.asarray(self.f0, dtype=np.float64)
        voiced = np.asarray(self.voiced, dtype=bool)
        if mgc.ndim != 2:
            raise ValidationError(f'mgc must be a (frames, dims) matrix, got shape {mgc.shape}')
        if f0.shape != (mgc.shape[0],) or voiced.shape != (mgc.shape[0],):
            raise ValidationError(
                f'f0/voicing length mismatch: mgc has {mgc.shape[0]} frames, '
                f'f0 {f0.shape}, voiced {voiced.shape}')
        object.__setattr__(self, 'mgc', mgc)
        object.__setattr__(self, 'f0', np.where(voiced, f0, 0.0))
        object.__setattr__(self, 'voiced', voiced)

    @property
    def n_frames(self) -> int:
        return self.mgc.shape[0]

    @property
    def d_mgc(self) -> int:
        return self.mgc.shape[1]

    def frame(self, t: int) -> AcousticFrame:
        f0 = Voiced(float(self.f0[t])) if self.voiced[t] else UNVOICED
        return AcousticFrame(self.mgc[t].copy(), f0)

    def frames(self) -> Iterator[AcousticFrame]:
        for t in range(self.n_frames):
            yield self.frame(t)

    def f0_values(self) -> List[F0Value]:
        return [Voiced(float(v)) if on else UNVOICED for v, on in zip(self.f0, self.voiced)]

    @classmethod
    def from_frames(cls, frames: Iterable[AcousticFrame]) -> 'AcousticTrack':
        frames = list(frames)
        if not frames:
            raise ValidationError('cannot build an acoustic track from zero frames')
        mgc = np.stack([np.asarray(f.mgc, dtype=np.float64) for f in frames])
        voiced = np.array([isinstance(f.f0, Voiced) for f in frames])
        f0 = np.array([f.f0.hz if isinstance(f.f0, Voiced) else 0.0 for f in frames])
        return cls(mgc, f0, voiced)


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValidationError('hz_to_mel: frequency must be non-negative')
    mel = 1127.0 * np.log1p(f / 700.0)
    return float(mel) if mel.ndim == 0 else mel


def mel_to_hz(mel):
    hz = 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)
    return float(hz) if hz.ndim == 0 else hz


def _classes_from_hz(hz: np.ndarray, config: FeatureConfig) -> np.ndarray:
    if not np.all(np.isfinite(hz)):
        raise ValidationError(f'voiced F0 must be finite Hz, got {hz[~np.isfinite(hz)][:5].tolist()}')
    clamped = np.clip(hz, config.f0_min, config.f0_max)
    position = (hz_to_mel(clamped) - config.mel_min) / config.mel_bin_width
    index = np.floor(position).astype(np.int64)
    return 1 + np.clip(index, 0, config.n_f0_bins - 1)


def quantize_f0(f0: F0Value, config: FeatureConfig) -> int:
    if isinstance(f0, Unvoiced):
        return UNVOICED_CLASS
    return int(_classes_from_hz(np.array([f0.hz]), config)[0])


def _check_classes(classes: np.ndarray, config: FeatureConfig):
    bad = (classes < 0) | (classes > config.n_f0_bins)
    if np.any(bad):
        raise ValidationError(
            f'F0 class out of range [0, {config.n_f0_bins}]: {classes[bad][:5].tolist()}')


def dequantize_f0(class_index: int, config: FeatureConfig) -> F0Value:
    _check_classes(np.array([class_index]), config)
    if class_index == UNVOICED_CLASS:
        return UNVOICED
    return Voiced(bin_center_hz(class_index, config))


def bin_center_hz(class_index: int, config: FeatureConfig) -> float:
    return mel_to_hz(config.mel_min + (class_index - 0.5) * config.mel_bin_width)


def bin_edges_hz(class_index: int, config: FeatureConfig):
    if not 1 <= class_index <= config.n_f0_bins:
        raise ValidationError(f'voiced class expected, got {class_index}')
    lo = config.mel_min + (class_index - 1) * config.mel_bin_width
    return mel_to_hz(lo), mel_to_hz(lo + config.mel_bin_width)


def bin_half_width_hz(class_index: int, config: FeatureConfig) -> float:
    # The mel->Hz map is convex, so the upper half of a bin is the wider one.
    lo, hi = bin_edges_hz(class_index, config)
    center = bin_center_hz(class_index, config)
    return max(hi - center, center - lo)


def quantize_f0_track(f0: np.ndarray, voiced: np.ndarray, config: FeatureConfig) -> np.ndarray:
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    classes = np.zeros(f0.shape, dtype=np.int64)
    if np.any(voiced):
        classes[voiced] = _classes_from_hz(f0[voiced], config)
    return classes


def dequantize_f0_track(classes: np.ndarray, config: FeatureConfig):
    """Return (f0_hz, voiced) arrays for a sequence of F0 classes."""
    classes = np.asarray(classes, dtype=np.int64)
    _check_classes(classes, config)
    voiced = classes != UNVOICED_CLASS
    centers = mel_to_hz(config.mel_min + (classes - 0.5) * config.mel_bin_width)
    return np.where(voiced, centers, 0.0), voiced
