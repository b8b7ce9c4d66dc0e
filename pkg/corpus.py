"""Multi-speaker utterance corpus, its on-disk format, and training-set builders.

The builders implement the resampling strategies compared in the experiments:

* ``SD`` - one speaker's full training split.
* ``UN`` - every speaker under-sampled (without replacement) to the smallest
  speaker's size.
* ``MU`` - all training data pooled.
* ``OV`` - every speaker over-sampled to the largest speaker's size by whole
  split replication plus a without-replacement remainder.
* ``BOOTSTRAP`` - a fixed number of draws with replacement per speaker; three
  sessions with different seeds give the ensemble subsystems E1-E3.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import CorpusFormatError, ValidationError
from features import AcousticTrack, FeatureConfig

logger = logging.getLogger(__name__)

SPLITS = ('train', 'validation', 'test')

REFERENCE_SPEAKERS = ('XS01', 'XS02', 'S03', 'S04', 'S05', 'M06', 'M07', 'M08', 'L09', 'XL10')
REFERENCE_TRAIN_COUNTS = (735, 994, 1393, 1568, 1749, 3024, 3983, 4364, 5516, 8750)
REFERENCE_VALIDATION_COUNT = 50
REFERENCE_TEST_COUNT = 100

RECORD_MAGIC = b'MSUT'
RECORD_VERSION = 1
RECORD_HEADER = struct.Struct('<4sHHIII')
FLAG_LINGUISTIC = 0x1

MANIFEST_NAME = 'manifest.json'
RECORDS_DIR = 'records'
RECORD_SUFFIX = '.utt'


@dataclass(frozen=True)
class SpeakerId:
    id: str
    display_rank: int


@dataclass(frozen=True, eq=False)
class Utterance:
    utt_id: str
    speaker: str
    linguistic: np.ndarray
    acoustic: AcousticTrack

    def __post_init__(self):
        linguistic = np.asarray(self.linguistic, dtype=np.float64)
        if linguistic.ndim != 2:
            raise ValidationError(f'{self.utt_id}: linguistic frames must be a matrix')
        if linguistic.shape[0] < 1:
            raise ValidationError(f'{self.utt_id}: utterance has no frames')
        if linguistic.shape[0] != self.acoustic.n_frames:
            raise ValidationError(
                f'{self.utt_id}: {linguistic.shape[0]} linguistic frames vs '
                f'{self.acoustic.n_frames} acoustic frames')
        object.__setattr__(self, 'linguistic', linguistic)

    @property
    def n_frames(self) -> int:
        return self.linguistic.shape[0]


class Corpus:
    """Speaker table, split assignment and (possibly lazily loaded) utterances.

    ``splits`` maps split name -> speaker id -> tuple of utt ids. A corpus may
    be metadata-only (no frames at all), which is enough for every training-set
    builder.
    """

    def __init__(self, speakers: Sequence[SpeakerId], splits: Mapping[str, Mapping[str, Sequence[str]]],
                 feature_config: FeatureConfig, d_lin: int,
                 utterances: Optional[Mapping[str, Utterance]] = None,
                 record_dir: Optional[str] = None, provenance: Optional[dict] = None):
        self.speakers = tuple(sorted(speakers, key=lambda s: s.display_rank))
        self.feature_config = feature_config
        self.d_lin = int(d_lin)
        self.provenance = dict(provenance or {})
        self._record_dir = record_dir
        self._cache: Dict[str, Utterance] = dict(utterances or {})
        self.ground_truth = None
        self._fingerprint = None

        ids = [s.id for s in self.speakers]
        if len(set(ids)) != len(ids):
            raise ValidationError(f'duplicate speaker ids: {ids}')
        if sorted(s.display_rank for s in self.speakers) != list(range(len(ids))):
            raise ValidationError('display_rank must be a permutation of 0..n_speakers-1')
        if self.d_lin < 1:
            raise ValidationError(f'd_lin must be >= 1, got {self.d_lin}')

        self.splits = {}
        self._owner = {}
        self._split_of = {}
        for split in SPLITS:
            per_speaker = dict(splits.get(split, {}))
            unknown = set(per_speaker) - set(ids)
            if unknown:
                raise ValidationError(f'{split} split names unknown speakers: {sorted(unknown)}')
            self.splits[split] = {spk: tuple(per_speaker.get(spk, ())) for spk in ids}
            for spk, utt_ids in self.splits[split].items():
                for utt_id in utt_ids:
                    if utt_id in self._owner:
                        raise ValidationError(
                            f'utterance {utt_id} appears twice (in {self._split_of[utt_id]} and {split})')
                    self._owner[utt_id] = spk
                    self._split_of[utt_id] = split

    @property
    def speaker_ids(self) -> Tuple[str, ...]:
        return tuple(s.id for s in self.speakers)

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def speaker(self, speaker_id: str) -> SpeakerId:
        for s in self.speakers:
            if s.id == speaker_id:
                return s
        raise ValidationError(f'unknown speaker: {speaker_id!r}')

    def split_ids(self, split: str, speaker_id: str) -> Tuple[str, ...]:
        if split not in self.splits:
            raise ValidationError(f'unknown split: {split!r}')
        self.speaker(speaker_id)
        return self.splits[split][speaker_id]

    def train_ids(self, speaker_id: str) -> Tuple[str, ...]:
        return self.split_ids('train', speaker_id)

    def train_counts(self) -> Dict[str, int]:
        return {spk: len(ids) for spk, ids in self.splits['train'].items()}

    def owner(self, utt_id: str) -> str:
        try:
            return self._owner[utt_id]
        except KeyError:
            raise ValidationError(f'unknown utterance: {utt_id!r}') from None

    @property
    def has_frames(self) -> bool:
        return bool(self._cache) or self._record_dir is not None

    def utterance(self, utt_id: str) -> Utterance:
        cached = self._cache.get(utt_id)
        if cached is not None:
            return cached
        speaker = self.owner(utt_id)
        if self._record_dir is None:
            raise ValidationError(f'no frames for {utt_id}: corpus is metadata-only')
        linguistic, track = read_record(os.path.join(self._record_dir, utt_id + RECORD_SUFFIX))
        if linguistic is None:
            raise CorpusFormatError(f'{utt_id}: corpus record has no linguistic frames')
        utt = Utterance(utt_id, speaker, linguistic, track)
        self._cache[utt_id] = utt
        return utt

    def utterances(self, split: str, speaker_id: str) -> List[Utterance]:
        return [self.utterance(u) for u in self.split_ids(split, speaker_id)]

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is not None:
            return self._fingerprint
        payload = {
            'speakers': [[s.id, s.display_rank] for s in self.speakers],
            'splits': {split: {spk: list(ids) for spk, ids in per.items()}
                       for split, per in self.splits.items()},
        }
        blob = json.dumps(payload, sort_keys=True, separators=(',', ':')).encode()
        self._fingerprint = hashlib.sha256(blob).hexdigest()
        return self._fingerprint

    def check_training_set(self, training_set: 'TrainingSet') -> None:
        if training_set.corpus_id != self.fingerprint:
            raise ValidationError('training set was built from a different corpus')
        for speaker, utt_id in training_set.items:
            if self.owner(utt_id) != speaker or self._split_of[utt_id] != 'train':
                raise ValidationError(f'{utt_id} is not a training utterance of {speaker}')

    @classmethod
    def from_counts(cls, train_counts: Sequence[int], val_count: int = 0, test_count: int = 0,
                    speaker_ids: Optional[Sequence[str]] = None,
                    feature_config: Optional[FeatureConfig] = None, d_lin: int = 1) -> 'Corpus':
        """Build a metadata-only corpus with the given per-speaker split sizes."""
        train_counts = list(train_counts)
        if speaker_ids is None:
            if len(train_counts) == len(REFERENCE_SPEAKERS):
                speaker_ids = REFERENCE_SPEAKERS
            else:
                speaker_ids = [f'SPK{i:02d}' for i in range(len(train_counts))]
        if len(speaker_ids) != len(train_counts):
            raise ValidationError('one train count per speaker is required')
        speakers = rank_speakers(speaker_ids, train_counts)
        splits = {split: {} for split in SPLITS}
        for spk, n_train in zip(speaker_ids, train_counts):
            for split, n in (('train', n_train), ('validation', val_count), ('test', test_count)):
                splits[split][spk] = tuple(utt_name(spk, split, i) for i in range(n))
        return cls(speakers, splits, feature_config or FeatureConfig(), d_lin)


def rank_speakers(speaker_ids: Sequence[str], train_counts: Sequence[int]) -> List[SpeakerId]:
    order = sorted(range(len(speaker_ids)), key=lambda i: (train_counts[i], i))
    rank = {i: r for r, i in enumerate(order)}
    return [SpeakerId(spk, rank[i]) for i, spk in enumerate(speaker_ids)]


def utt_name(speaker_id: str, split: str, index: int) -> str:
    return f'{speaker_id}_{split[:2]}{index:05d}'


# ---------------------------------------------------------------- training sets

class Strategy(str, Enum):
    SD = 'SD'
    UN = 'UN'
    MU = 'MU'
    OV = 'OV'
    BOOTSTRAP = 'BOOTSTRAP'


@dataclass(frozen=True)
class TrainingSetRecipe:
    strategy: Strategy
    seed: int = 0
    speaker: Optional[str] = None
    draws_per_speaker: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'strategy', Strategy(self.strategy))
        if self.strategy is Strategy.SD and not self.speaker:
            raise ValidationError('SD recipe must name a speaker')
        if self.strategy is Strategy.BOOTSTRAP:
            if self.draws_per_speaker is None or self.draws_per_speaker < 1:
                raise ValidationError(
                    f'BOOTSTRAP draws_per_speaker must be >= 1, got {self.draws_per_speaker}')

    @property
    def label(self) -> str:
        if self.strategy is Strategy.SD:
            return f'SD:{self.speaker}'
        if self.strategy is Strategy.BOOTSTRAP:
            return f'BOOTSTRAP:{self.seed}x{self.draws_per_speaker}'
        return self.strategy.value

    def to_mapping(self) -> dict:
        return {'strategy': self.strategy.value, 'seed': self.seed,
                'speaker': self.speaker, 'draws_per_speaker': self.draws_per_speaker}

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'TrainingSetRecipe':
        return cls(Strategy(data['strategy']), int(data.get('seed', 0)),
                   data.get('speaker'), data.get('draws_per_speaker'))


@dataclass(frozen=True)
class TrainingSet:
    items: Tuple[Tuple[str, str], ...]
    corpus_id: str
    recipe: TrainingSetRecipe

    @property
    def size(self) -> int:
        return len(self.items)

    @property
    def speakers(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(spk for spk, _ in self.items))

    @property
    def speaker_totals(self) -> Dict[str, int]:
        return dict(Counter(spk for spk, _ in self.items))

    @property
    def unique_counts(self) -> Dict[str, int]:
        return dict(Counter(spk for spk, _ in set(self.items)))

    def multiplicities(self) -> Counter:
        return Counter(self.items)

    def to_mapping(self) -> dict:
        return {'recipe': self.recipe.to_mapping(), 'corpus_id': self.corpus_id,
                'size': self.size, 'unique_counts': self.unique_counts,
                'items': [list(item) for item in self.items]}

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'TrainingSet':
        items = tuple((str(spk), str(utt)) for spk, utt in data['items'])
        return cls(items, data['corpus_id'], TrainingSetRecipe.from_mapping(data['recipe']))


def _train_split(corpus: Corpus, speaker_id: str) -> Tuple[str, ...]:
    ids = corpus.train_ids(speaker_id)
    if not ids:
        raise ValidationError(f'empty training data for speaker {speaker_id}')
    return ids


def _require_speakers(corpus: Corpus):
    if corpus.n_speakers == 0:
        raise ValidationError('empty training data: corpus has no speakers')


def build_sd(corpus: Corpus, speaker: str) -> TrainingSet:
    corpus.speaker(speaker)
    ids = _train_split(corpus, speaker)
    items = tuple((speaker, u) for u in ids)
    return TrainingSet(items, corpus.fingerprint, TrainingSetRecipe(Strategy.SD, speaker=speaker))


def build_undersampled(corpus: Corpus, seed: int) -> TrainingSet:
    _require_speakers(corpus)
    pools = {spk: _train_split(corpus, spk) for spk in corpus.speaker_ids}
    m = min(len(ids) for ids in pools.values())
    rng = np.random.default_rng(seed)
    items = []
    for spk, ids in pools.items():
        picked = np.sort(rng.choice(len(ids), size=m, replace=False))
        items.extend((spk, ids[i]) for i in picked)
    return TrainingSet(tuple(items), corpus.fingerprint, TrainingSetRecipe(Strategy.UN, seed=seed))


def build_pooled(corpus: Corpus) -> TrainingSet:
    _require_speakers(corpus)
    items = [(spk, u) for spk in corpus.speaker_ids for u in corpus.train_ids(spk)]
    if not items:
        raise ValidationError('empty training data: no training utterances in corpus')
    return TrainingSet(tuple(items), corpus.fingerprint, TrainingSetRecipe(Strategy.MU))


def build_oversampled(corpus: Corpus, seed: int) -> TrainingSet:
    _require_speakers(corpus)
    pools = {spk: _train_split(corpus, spk) for spk in corpus.speaker_ids}
    target = max(len(ids) for ids in pools.values())
    rng = np.random.default_rng(seed)
    items = []
    for spk, ids in pools.items():
        copies, remainder = divmod(target, len(ids))
        items.extend((spk, u) for _ in range(copies) for u in ids)
        extra = np.sort(rng.choice(len(ids), size=remainder, replace=False))
        items.extend((spk, ids[i]) for i in extra)
    return TrainingSet(tuple(items), corpus.fingerprint, TrainingSetRecipe(Strategy.OV, seed=seed))


def build_bootstrap(corpus: Corpus, draws_per_speaker: int, seed: int) -> TrainingSet:
    recipe = TrainingSetRecipe(Strategy.BOOTSTRAP, seed=seed, draws_per_speaker=draws_per_speaker)
    _require_speakers(corpus)
    rng = np.random.default_rng(seed)
    items = []
    for spk in corpus.speaker_ids:
        ids = _train_split(corpus, spk)
        draws = rng.integers(0, len(ids), size=draws_per_speaker)
        items.extend((spk, ids[i]) for i in draws)
    return TrainingSet(tuple(items), corpus.fingerprint, recipe)


def build_training_set(corpus: Corpus, recipe: TrainingSetRecipe) -> TrainingSet:
    if recipe.strategy is Strategy.SD:
        return build_sd(corpus, recipe.speaker)
    if recipe.strategy is Strategy.UN:
        return build_undersampled(corpus, recipe.seed)
    if recipe.strategy is Strategy.MU:
        return build_pooled(corpus)
    if recipe.strategy is Strategy.OV:
        return build_oversampled(corpus, recipe.seed)
    return build_bootstrap(corpus, recipe.draws_per_speaker, recipe.seed)


def union_unique(sets: Sequence[TrainingSet]) -> Dict[str, int]:
    """Per-speaker count of utterances that appear in at least one of the sets."""
    if not sets:
        raise ValidationError('union_unique needs at least one training set')
    corpus_ids = {s.corpus_id for s in sets}
    if len(corpus_ids) != 1:
        raise ValidationError('training sets reference different corpora')
    union = set()
    for s in sets:
        union.update(s.items)
    return dict(Counter(spk for spk, _ in union))


def expected_unique(pool_size: int, draws: int) -> float:
    """Expected number of distinct items in ``draws`` uniform draws with replacement."""
    if pool_size < 1:
        raise ValidationError('pool size must be >= 1')
    return pool_size * (1.0 - (1.0 - 1.0 / pool_size) ** draws)


def save_training_set(training_set: TrainingSet, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(training_set.to_mapping(), f, indent=1, sort_keys=True)


def load_training_set(path: str) -> TrainingSet:
    with open(path, 'r', encoding='utf-8') as f:
        return TrainingSet.from_mapping(json.load(f))


# ------------------------------------------------------------------ file format

def encode_record(track: AcousticTrack, linguistic: Optional[np.ndarray] = None) -> bytes:
    flags = 0
    d_lin = 0
    parts = []
    if linguistic is not None:
        linguistic = np.asarray(linguistic)
        if linguistic.shape[0] != track.n_frames:
            raise ValidationError('linguistic/acoustic frame count mismatch')
        flags |= FLAG_LINGUISTIC
        d_lin = linguistic.shape[1]
        parts.append(linguistic.astype('<f4').tobytes())
    parts.append(track.mgc.astype('<f4').tobytes())
    parts.append(track.f0.astype('<f4').tobytes())
    parts.append(track.voiced.astype('<f4').tobytes())
    header = RECORD_HEADER.pack(RECORD_MAGIC, RECORD_VERSION, flags,
                                track.n_frames, d_lin, track.d_mgc)
    return header + b''.join(parts)


def decode_record(blob: bytes, name: str = '<record>'):
    if len(blob) < RECORD_HEADER.size:
        raise CorpusFormatError(f'{name}: truncated header')
    magic, version, flags, n, d_lin, d_mgc = RECORD_HEADER.unpack_from(blob)
    if magic != RECORD_MAGIC:
        raise CorpusFormatError(f'{name}: bad magic {magic!r}')
    if version != RECORD_VERSION:
        raise CorpusFormatError(f'{name}: unsupported record version {version}')
    has_ling = bool(flags & FLAG_LINGUISTIC)
    n_floats = n * ((d_lin if has_ling else 0) + d_mgc + 2)
    data = np.frombuffer(blob, dtype='<f4', offset=RECORD_HEADER.size)
    if data.size != n_floats:
        raise CorpusFormatError(f'{name}: expected {n_floats} floats, found {data.size}')
    data = data.astype(np.float64)
    pos = 0
    linguistic = None
    if has_ling:
        linguistic = data[:n * d_lin].reshape(n, d_lin)
        pos = n * d_lin
    mgc = data[pos:pos + n * d_mgc].reshape(n, d_mgc)
    pos += n * d_mgc
    f0 = data[pos:pos + n]
    voiced = data[pos + n:pos + 2 * n] > 0.5
    return linguistic, AcousticTrack(mgc, f0, voiced)


def write_record(path: str, track: AcousticTrack, linguistic: Optional[np.ndarray] = None) -> None:
    with open(path, 'wb') as f:
        f.write(encode_record(track, linguistic))


def read_record(path: str):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except FileNotFoundError:
        raise CorpusFormatError(f'missing record file: {path}') from None
    return decode_record(blob, os.path.basename(path))


def save_tracks(directory: str, tracks: Mapping[str, AcousticTrack]) -> None:
    """Write generated or combined outputs, one record per utterance."""
    os.makedirs(directory, exist_ok=True)
    for utt_id, track in tracks.items():
        write_record(os.path.join(directory, utt_id + RECORD_SUFFIX), track)


def load_tracks(directory: str) -> Dict[str, AcousticTrack]:
    if not os.path.isdir(directory):
        raise ValidationError(f'output directory not found: {directory}')
    tracks = {}
    for fname in sorted(os.listdir(directory)):
        if fname.endswith(RECORD_SUFFIX):
            _, track = read_record(os.path.join(directory, fname))
            tracks[fname[:-len(RECORD_SUFFIX)]] = track
    return tracks


def save_corpus(corpus: Corpus, directory: str) -> None:
    records = os.path.join(directory, RECORDS_DIR)
    os.makedirs(records, exist_ok=True)
    manifest = {
        'format': 'msut-corpus',
        'version': RECORD_VERSION,
        'd_lin': corpus.d_lin,
        'feature_config': corpus.feature_config.to_mapping(),
        'speakers': [{'id': s.id, 'display_rank': s.display_rank} for s in corpus.speakers],
        'splits': {split: {spk: list(ids) for spk, ids in per.items()}
                   for split, per in corpus.splits.items()},
        'provenance': corpus.provenance,
    }
    for split in SPLITS:
        for spk in corpus.speaker_ids:
            for utt in corpus.utterances(split, spk):
                write_record(os.path.join(records, utt.utt_id + RECORD_SUFFIX),
                             utt.acoustic, utt.linguistic)
    with open(os.path.join(directory, MANIFEST_NAME), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    logger.info('[corpus] wrote %d speakers to %s', corpus.n_speakers, directory)


def content_digest(directory: str) -> str:
    """SHA-256 over the manifest and every record file of a corpus directory."""
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise ValidationError(f'corpus manifest not found: {path}')
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        digest.update(f.read())
    records = os.path.join(directory, RECORDS_DIR)
    names = sorted(os.listdir(records)) if os.path.isdir(records) else []
    for name in names:
        digest.update(name.encode('utf-8') + b'\0')
        with open(os.path.join(records, name), 'rb') as f:
            digest.update(f.read())
    return digest.hexdigest()


def load_corpus(directory: str) -> Corpus:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f'corpus manifest not found: {path}') from None
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f'{path}: {e}') from None
    if manifest.get('format') != 'msut-corpus':
        raise CorpusFormatError(f'{path}: not a corpus manifest')
    speakers = [SpeakerId(s['id'], int(s['display_rank'])) for s in manifest['speakers']]
    return Corpus(speakers, manifest['splits'],
                  FeatureConfig.from_mapping(manifest['feature_config']),
                  manifest['d_lin'], record_dir=os.path.join(directory, RECORDS_DIR),
                  provenance=manifest.get('provenance'))
