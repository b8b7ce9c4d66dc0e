"""Objective metrics and preference-test statistics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

from corpus import Corpus
from errors import UndefinedMetricError, ValidationError
from features import AcousticTrack

logger = logging.getLogger(__name__)

MCD_CONSTANT = 10.0 * math.sqrt(2.0) / math.log(10.0)
SIGNIFICANCE_LEVEL = 0.05
OVERALL = 'ALL'


def _spectral_pair(predicted, reference):
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.ndim != 2 or predicted.shape != reference.shape:
        raise ValidationError(f'spectral shapes differ: {predicted.shape} vs {reference.shape}')
    if predicted.shape[0] < 1:
        raise ValidationError('MCD of an empty sequence')
    return predicted, reference


def frame_mcd(predicted: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-frame mel-cepstral distortion in dB, coefficient 0 excluded."""
    predicted, reference = _spectral_pair(predicted, reference)
    return MCD_CONSTANT * np.linalg.norm(predicted[:, 1:] - reference[:, 1:], axis=1)


def mcd(predicted: np.ndarray, reference: np.ndarray) -> float:
    return float(np.mean(frame_mcd(predicted, reference)))


def per_utterance_mcd(predicted: Mapping[str, AcousticTrack],
                      reference: Mapping[str, AcousticTrack]) -> Dict[str, float]:
    missing = sorted(set(reference) - set(predicted))
    if missing:
        raise ValidationError(f'no output for {len(missing)} utterances, e.g. {missing[0]}')
    return {utt_id: mcd(predicted[utt_id].mgc, track.mgc) for utt_id, track in reference.items()}


def f0_correlation(predicted_f0: np.ndarray, predicted_voiced: np.ndarray,
                   reference_f0: np.ndarray, reference_voiced: np.ndarray) -> float:
    """Pearson correlation over the frames voiced in both tracks."""
    arrays = [np.asarray(a) for a in (predicted_f0, predicted_voiced, reference_f0, reference_voiced)]
    if len({a.shape for a in arrays}) != 1:
        raise ValidationError('F0 tracks differ in length')
    both = arrays[1].astype(bool) & arrays[3].astype(bool)
    if both.sum() < 2:
        raise UndefinedMetricError(f'F0 correlation needs >= 2 jointly voiced frames, got {int(both.sum())}')
    a = arrays[0][both].astype(np.float64)
    b = arrays[2][both].astype(np.float64)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedMetricError('F0 correlation undefined: a track has zero variance')
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


def vuv_error_rate(predicted_voiced: np.ndarray, reference_voiced: np.ndarray) -> float:
    predicted_voiced = np.asarray(predicted_voiced, dtype=bool)
    reference_voiced = np.asarray(reference_voiced, dtype=bool)
    if predicted_voiced.shape != reference_voiced.shape:
        raise ValidationError('voicing tracks differ in length')
    if predicted_voiced.size == 0:
        raise ValidationError('V/UV error of an empty sequence')
    return float(np.mean(predicted_voiced != reference_voiced))


def exact_binomial_test(wins_a: int, wins_b: int) -> float:
    """Two-sided exact binomial p-value against p = 0.5."""
    if wins_a < 0 or wins_b < 0:
        raise ValidationError('win counts must be non-negative')
    if wins_a + wins_b < 1:
        raise ValidationError('binomial test needs at least one judgement')
    return float(binomtest(wins_a, wins_a + wins_b, 0.5, alternative='two-sided').pvalue)


@dataclass(frozen=True)
class MetricRow:
    strategy: str
    speaker: str
    mcd_db: float
    f0_corr: Optional[float]
    vuv_error_rate: float
    n_frames_scored: int

    def as_dict(self) -> dict:
        return {'strategy': self.strategy, 'speaker': self.speaker, 'mcd_db': self.mcd_db,
                'f0_corr': self.f0_corr, 'vuv_error_rate': self.vuv_error_rate,
                'n_frames_scored': self.n_frames_scored}


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)

    @property
    def strategies(self) -> List[str]:
        return list(dict.fromkeys(r.strategy for r in self.rows))

    @property
    def speakers(self) -> List[str]:
        return list(dict.fromkeys(r.speaker for r in self.rows if r.speaker != OVERALL))

    def get(self, strategy: str, speaker: str = OVERALL) -> MetricRow:
        for r in self.rows:
            if r.strategy == strategy and r.speaker == speaker:
                return r
        raise KeyError((strategy, speaker))

    def mcd_table(self) -> Dict[str, Dict[str, float]]:
        table: Dict[str, Dict[str, float]] = {}
        for r in self.rows:
            table.setdefault(r.strategy, {})[r.speaker] = r.mcd_db
        return table


@dataclass
class PreferenceTally:
    pair: Tuple[str, str]
    per_speaker: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f'{self.pair[0]}-{self.pair[1]}'

    @property
    def overall(self) -> Tuple[int, int]:
        a = sum(w[0] for w in self.per_speaker.values())
        b = sum(w[1] for w in self.per_speaker.values())
        return a, b

    def counts(self, speaker: str = OVERALL) -> Tuple[int, int]:
        return self.overall if speaker == OVERALL else self.per_speaker[speaker]

    def p_value(self, speaker: str = OVERALL) -> float:
        return exact_binomial_test(*self.counts(speaker))

    def significant(self, speaker: str = OVERALL) -> bool:
        return self.p_value(speaker) < SIGNIFICANCE_LEVEL

    def preference_a(self, speaker: str = OVERALL) -> float:
        a, b = self.counts(speaker)
        return a / (a + b)

    def rows(self) -> List[dict]:
        out = []
        for speaker in list(self.per_speaker) + [OVERALL]:
            a, b = self.counts(speaker)
            p = self.p_value(speaker)
            out.append({'pair': self.label, 'speaker': speaker, 'wins_a': a, 'wins_b': b,
                        'preference_a': a / (a + b), 'p_value': p,
                        'significant': p < SIGNIFICANCE_LEVEL})
        return out


@dataclass
class EvaluationReport:
    metrics: MetricReport
    preferences: List[PreferenceTally] = field(default_factory=list)
    checks: Dict[str, object] = field(default_factory=dict)


def coverage_gaps(corpus: Corpus, outputs: Mapping[str, Mapping[str, AcousticTrack]]) -> Dict[str, Dict[str, int]]:
    gaps: Dict[str, Dict[str, int]] = {}
    for strategy, tracks in outputs.items():
        for spk in corpus.speaker_ids:
            missing = [u for u in corpus.split_ids('test', spk) if u not in tracks]
            if missing:
                gaps.setdefault(strategy, {})[spk] = len(missing)
    return gaps


def score_tracks(strategy: str, speaker: str, predicted: Sequence[AcousticTrack],
                 reference: Sequence[AcousticTrack]) -> MetricRow:
    if not predicted or not reference:
        raise ValidationError(f'{strategy}/{speaker}: no test utterances to score')
    pred_mgc = np.concatenate([t.mgc for t in predicted])
    ref_mgc = np.concatenate([t.mgc for t in reference])
    pred_f0 = np.concatenate([t.f0 for t in predicted])
    ref_f0 = np.concatenate([t.f0 for t in reference])
    pred_v = np.concatenate([t.voiced for t in predicted])
    ref_v = np.concatenate([t.voiced for t in reference])
    try:
        corr = f0_correlation(pred_f0, pred_v, ref_f0, ref_v)
    except UndefinedMetricError as e:
        logger.warning('[evaluate] %s/%s: %s', strategy, speaker, e)
        corr = None
    return MetricRow(strategy, speaker, mcd(pred_mgc, ref_mgc), corr,
                     vuv_error_rate(pred_v, ref_v), int(pred_mgc.shape[0]))


def build_reports(corpus: Corpus, outputs: Mapping[str, Mapping[str, AcousticTrack]],
                  preferences: Sequence[PreferenceTally] = ()) -> EvaluationReport:
    """Per-speaker and pooled metric rows for every strategy's test-split outputs."""
    gaps = coverage_gaps(corpus, outputs)
    if gaps:
        detail = '; '.join(f'{s}: ' + ', '.join(f'{spk} missing {n}' for spk, n in per.items())
                           for s, per in gaps.items())
        raise ValidationError(f'outputs do not cover the test split ({detail})')
    rows = []
    for strategy, tracks in outputs.items():
        all_pred, all_ref = [], []
        for spk in corpus.speaker_ids:
            ids = corpus.split_ids('test', spk)
            predicted = [tracks[u] for u in ids]
            reference = [corpus.utterance(u).acoustic for u in ids]
            rows.append(score_tracks(strategy, spk, predicted, reference))
            all_pred += predicted
            all_ref += reference
        rows.append(score_tracks(strategy, OVERALL, all_pred, all_ref))
    return EvaluationReport(MetricReport(rows), list(preferences))
