"""Deterministic synthetic multi-speaker corpora with controllable imbalance.

Spectral frames are affine in the linguistic frames plus Gaussian noise. All
speakers share one spectral transform and differ by a small speaker-specific
deviation and an output bias, so pooling speakers helps the data-poor ones.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np
import yaml
from scipy.signal import lfilter
from scipy.special import expit

from corpus import SPLITS, REFERENCE_SPEAKERS, Corpus, Utterance, rank_speakers, utt_name
from errors import ValidationError
from features import AcousticTrack, FeatureConfig

logger = logging.getLogger(__name__)

# Reference training counts divided by 10 and rounded.
DESK_TRAIN_COUNTS = (74, 99, 139, 157, 175, 302, 398, 436, 552, 875)

F0_CHANNEL = 0
VOICING_CHANNEL = 1
PROFILE_STREAM = 7919
DECLINATION = 0.3


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: str
    base_f0: float
    f0_range: float
    spectral_transform: np.ndarray
    bias_vector: np.ndarray
    noise_sigma: float
    voicing_threshold: float
    f0_channel: int = F0_CHANNEL
    voicing_channel: int = VOICING_CHANNEL

    def __post_init__(self):
        if self.base_f0 <= 0:
            raise ValidationError(f'{self.speaker_id}: base_f0 must be > 0')
        if self.f0_range < 0:
            raise ValidationError(f'{self.speaker_id}: f0_range must be >= 0')
        if self.noise_sigma < 0:
            raise ValidationError(f'{self.speaker_id}: noise_sigma must be >= 0')
        if not 0 < self.voicing_threshold < 1:
            raise ValidationError(f'{self.speaker_id}: voicing_threshold must be in (0, 1)')


@dataclass(frozen=True)
class GeneratorConfig:
    n_speakers: int = 10
    per_speaker_train_counts: Tuple[int, ...] = DESK_TRAIN_COUNTS
    val_count: int = 5
    test_count: int = 10
    d_lin: int = 16
    d_mgc: int = 12
    frames_per_utterance: Tuple[int, int] = (20, 40)
    master_seed: int = 0
    noise_sigma: float = 0.05
    speaker_spread: float = 0.3
    bias_scale: float = 1.0
    smoothing: float = 0.8
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        object.__setattr__(self, 'per_speaker_train_counts',
                           tuple(int(c) for c in self.per_speaker_train_counts))
        object.__setattr__(self, 'frames_per_utterance',
                           tuple(int(c) for c in self.frames_per_utterance))
        if self.n_speakers < 1:
            raise ValidationError('n_speakers must be >= 1')
        if len(self.per_speaker_train_counts) != self.n_speakers:
            raise ValidationError(
                f'{len(self.per_speaker_train_counts)} train counts for {self.n_speakers} speakers')
        if min(self.per_speaker_train_counts) < 1 or self.val_count < 1 or self.test_count < 1:
            raise ValidationError('utterance counts must be >= 1')
        if self.d_lin < 1 or self.d_mgc < 1:
            raise ValidationError('d_lin and d_mgc must be >= 1')
        lo, hi = self.frames_per_utterance
        if lo < 1:
            raise ValidationError('zero frame count: frames_per_utterance must start at >= 1')
        if hi < lo:
            raise ValidationError(f'empty frame range {self.frames_per_utterance}')
        if self.noise_sigma < 0 or self.speaker_spread < 0 or self.bias_scale < 0:
            raise ValidationError('noise_sigma, speaker_spread and bias_scale must be >= 0')
        if not 0 <= self.smoothing < 1:
            raise ValidationError('smoothing must be in [0, 1)')
        if self.feature_config.d_mgc != self.d_mgc:
            object.__setattr__(self, 'feature_config',
                               dataclasses.replace(self.feature_config, d_mgc=self.d_mgc))

    @property
    def speaker_ids(self) -> Tuple[str, ...]:
        if self.n_speakers == len(REFERENCE_SPEAKERS):
            return REFERENCE_SPEAKERS
        return tuple(f'SPK{i:02d}' for i in range(self.n_speakers))

    @property
    def position_channel(self):
        return self.d_lin - 1 if self.d_lin >= 3 else None

    def to_mapping(self) -> dict:
        data = dataclasses.asdict(self)
        data['per_speaker_train_counts'] = list(self.per_speaker_train_counts)
        data['frames_per_utterance'] = list(self.frames_per_utterance)
        return data

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'GeneratorConfig':
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f'unknown generator config keys: {sorted(unknown)}')
        if 'feature_config' in data and not isinstance(data['feature_config'], FeatureConfig):
            data['feature_config'] = FeatureConfig.from_mapping(data['feature_config'])
        if 'per_speaker_train_counts' in data and 'n_speakers' not in data:
            data['n_speakers'] = len(data['per_speaker_train_counts'])
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: str) -> 'GeneratorConfig':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ValidationError(f'generator config not found: {path}') from None
        except yaml.YAMLError as e:
            raise ValidationError(f'{path}: {e}') from None
        return cls.from_mapping(raw.get('generator', raw))


def make_profiles(config: GeneratorConfig) -> Dict[str, SpeakerProfile]:
    rng = np.random.default_rng([config.master_seed, PROFILE_STREAM])
    scale = 1.0 / np.sqrt(config.d_lin)
    shared = rng.normal(0.0, scale, size=(config.d_mgc, config.d_lin))
    voicing_channel = min(VOICING_CHANNEL, config.d_lin - 1)
    profiles = {}
    for spk in config.speaker_ids:
        deviation = rng.normal(0.0, scale, size=shared.shape) * config.speaker_spread
        profiles[spk] = SpeakerProfile(
            speaker_id=spk,
            base_f0=float(rng.uniform(160.0, 240.0)),
            f0_range=float(rng.uniform(40.0, 120.0)),
            spectral_transform=shared + deviation,
            bias_vector=rng.normal(0.0, config.bias_scale, size=config.d_mgc),
            noise_sigma=config.noise_sigma,
            voicing_threshold=float(rng.uniform(0.3, 0.5)),
            voicing_channel=voicing_channel,
        )
    return profiles


def linguistic_trajectory(rng: np.random.Generator, n_frames: int, config: GeneratorConfig) -> np.ndarray:
    """Low-pass filtered Gaussian noise with unit stationary variance."""
    a = config.smoothing
    noise = rng.normal(size=(n_frames, config.d_lin))
    if a > 0:
        stationary_std = np.sqrt((1 - a) / (1 + a))
        start = rng.normal(0.0, stationary_std, size=(1, config.d_lin))
        smooth, _ = lfilter([1 - a], [1, -a], noise, axis=0, zi=a * start)
        frames = smooth / stationary_std
    else:
        frames = noise
    if config.position_channel is not None:
        frames[:, config.position_channel] = frame_positions(n_frames)
    return frames


def frame_positions(n_frames: int) -> np.ndarray:
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


def recompute_voicing(linguistic: np.ndarray, profile: SpeakerProfile) -> np.ndarray:
    return expit(linguistic[:, profile.voicing_channel]) > profile.voicing_threshold


def f0_contour(linguistic: np.ndarray, profile: SpeakerProfile) -> np.ndarray:
    shape = 0.5 * (1.0 + np.tanh(linguistic[:, profile.f0_channel]))
    declination = 1.0 - DECLINATION * frame_positions(linguistic.shape[0])
    return profile.base_f0 + profile.f0_range * shape * declination


def render_utterance(rng: np.random.Generator, utt_id: str, profile: SpeakerProfile,
                     config: GeneratorConfig) -> Utterance:
    lo, hi = config.frames_per_utterance
    n_frames = int(rng.integers(lo, hi + 1))
    linguistic = linguistic_trajectory(rng, n_frames, config)
    mgc = linguistic @ profile.spectral_transform.T + profile.bias_vector
    if profile.noise_sigma > 0:
        mgc = mgc + profile.noise_sigma * rng.normal(size=mgc.shape)
    voiced = recompute_voicing(linguistic, profile)
    f0 = np.where(voiced, f0_contour(linguistic, profile), 0.0)
    return Utterance(utt_id, profile.speaker_id, linguistic, AcousticTrack(mgc, f0, voiced))


def generate_corpus(config: GeneratorConfig) -> Corpus:
    profiles = make_profiles(config)
    speaker_ids = config.speaker_ids
    speakers = rank_speakers(speaker_ids, config.per_speaker_train_counts)
    splits = {split: {} for split in SPLITS}
    utterances = {}
    for spk_index, spk in enumerate(speaker_ids):
        counts = {'train': config.per_speaker_train_counts[spk_index],
                  'validation': config.val_count, 'test': config.test_count}
        for split_index, split in enumerate(SPLITS):
            ids = []
            for i in range(counts[split]):
                seed = np.random.SeedSequence([config.master_seed, spk_index, split_index, i])
                utt_id = utt_name(spk, split, i)
                utterances[utt_id] = render_utterance(np.random.default_rng(seed), utt_id,
                                                      profiles[spk], config)
                ids.append(utt_id)
            splits[split][spk] = tuple(ids)
    corpus = Corpus(speakers, splits, config.feature_config, config.d_lin,
                    utterances=utterances, provenance={'generator': config.to_mapping()})
    corpus.ground_truth = profiles
    logger.info('[synthgen] generated %d utterances for %d speakers (seed %d)',
                len(utterances), len(speaker_ids), config.master_seed)
    return corpus
