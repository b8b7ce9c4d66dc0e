"""Non-parametric combination of subsystem outputs.

Spectra are averaged frame by frame. F0 is decided by a majority vote on
voicing (a tie counts as unvoiced); voiced frames take the mean over the
subsystems that voted voiced.

Averages are taken over values sorted along the subsystem axis and anchored
at the smallest one, so reordering subsystems never changes a bit of the
result and N copies of one output combine to exactly that output.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from errors import ValidationError
from features import UNVOICED, AcousticTrack, F0Value, Voiced


def _anchored_mean(values: np.ndarray, axis: int = 0) -> np.ndarray:
    ordered = np.sort(values, axis=axis)
    base = np.take(ordered, [0], axis=axis)
    return np.squeeze(base, axis=axis) + np.mean(ordered - base, axis=axis)


def combine_mgc(frames: Sequence[np.ndarray]) -> np.ndarray:
    if len(frames) == 0:
        raise ValidationError('combine_mgc needs at least one subsystem')
    dims = {np.shape(f) for f in frames}
    if len(dims) != 1:
        raise ValidationError(f'subsystem spectral frames differ in shape: {sorted(dims)}')
    return _anchored_mean(np.stack([np.asarray(f, dtype=np.float64) for f in frames]))


def combine_f0(values: Sequence[F0Value]) -> F0Value:
    if len(values) == 0:
        raise ValidationError('combine_f0 needs at least one subsystem')
    voiced = np.array([v.hz for v in values if isinstance(v, Voiced)])
    if 2 * len(voiced) <= len(values):
        return UNVOICED
    return Voiced(float(_anchored_mean(voiced)))


def combine_sequences(outputs: Sequence[AcousticTrack]) -> AcousticTrack:
    if len(outputs) == 0:
        raise ValidationError('nothing to combine')
    lengths = {t.n_frames for t in outputs}
    if len(lengths) != 1:
        raise ValidationError(f'subsystem outputs differ in length: {sorted(lengths)}')
    dims = {t.d_mgc for t in outputs}
    if len(dims) != 1:
        raise ValidationError(f'subsystem outputs differ in spectral dimension: {sorted(dims)}')
    n = len(outputs)
    mgc = _anchored_mean(np.stack([t.mgc for t in outputs]))
    voicing = np.stack([t.voiced for t in outputs])
    counts = voicing.sum(axis=0)
    voiced = 2 * counts > n
    # Unvoiced subsystem slots are pushed to +inf so they sort last and drop
    # out of the anchored mean over the first ``count`` entries.
    f0 = np.sort(np.where(voicing, np.stack([t.f0 for t in outputs]), np.inf), axis=0)
    combined = np.zeros(f0.shape[1])
    for t in np.flatnonzero(voiced):
        combined[t] = _anchored_mean(f0[:counts[t], t])
    return AcousticTrack(mgc, combined, voiced)


def combine_output_sets(output_sets: Sequence[Mapping[str, AcousticTrack]]) -> dict:
    """Combine per-utterance outputs of several subsystems (utt_id -> track)."""
    if not output_sets:
        raise ValidationError('nothing to combine')
    keys = set(output_sets[0])
    for other in output_sets[1:]:
        if set(other) != keys:
            missing = sorted(keys.symmetric_difference(other))
            raise ValidationError(f'subsystems cover different utterances: {missing[:5]}')
    return {utt_id: combine_sequences([s[utt_id] for s in output_sets]) for utt_id in sorted(keys)}


def spectral_contraction_gaps(outputs: Sequence[AcousticTrack], combined: AcousticTrack,
                              reference: np.ndarray) -> np.ndarray:
    """Per-frame combined spectral error minus the mean subsystem error.

    By the triangle inequality every entry is <= 0 up to rounding.
    """
    reference = np.asarray(reference, dtype=np.float64)
    combined_error = np.linalg.norm(combined.mgc[:, 1:] - reference[:, 1:], axis=1)
    errors = np.stack([np.linalg.norm(t.mgc[:, 1:] - reference[:, 1:], axis=1) for t in outputs])
    return combined_error - errors.mean(axis=0)
