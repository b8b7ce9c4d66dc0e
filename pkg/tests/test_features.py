import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import ValidationError
from features import (UNVOICED, AcousticFrame, AcousticTrack, FeatureConfig, Voiced, bin_center_hz,
                      bin_edges_hz, bin_half_width_hz, dequantize_f0, dequantize_f0_track, hz_to_mel,
                      mel_to_hz, quantize_f0, quantize_f0_track)

CONFIG = FeatureConfig()


def scan_class(hz, config):
    """Reference assignment by walking the bin edges."""
    hz = min(max(hz, config.f0_min), config.f0_max)
    for c in range(1, config.n_f0_bins + 1):
        lo, hi = bin_edges_hz(c, config)
        if lo <= hz < hi:
            return c
    return config.n_f0_bins


class TestMelScale:
    def test_values(self):
        assert hz_to_mel(0.0) == 0.0
        assert_allclose(hz_to_mel(700.0), 1127.0 * math.log(2.0))
        assert_allclose(hz_to_mel(700.0), 781.17, atol=0.01)
        assert hz_to_mel(200.0) < hz_to_mel(300.0)

    def test_inverse(self):
        hz = np.linspace(0, 8000, 17)
        assert_allclose(mel_to_hz(hz_to_mel(hz)), hz, atol=1e-9)

    def test_negative_frequency(self):
        with pytest.raises(ValidationError):
            hz_to_mel(-1.0)


class TestQuantization:
    def test_boundaries(self):
        assert quantize_f0(UNVOICED, CONFIG) == 0
        assert quantize_f0(Voiced(CONFIG.f0_min), CONFIG) == 1
        assert quantize_f0(Voiced(CONFIG.f0_max), CONFIG) == CONFIG.n_f0_bins
        assert quantize_f0(Voiced(10.0), CONFIG) == 1
        assert quantize_f0(Voiced(5000.0), CONFIG) == CONFIG.n_f0_bins

    @pytest.mark.parametrize('hz', [float('nan'), float('inf'), -float('inf')])
    def test_non_finite_voiced_f0_is_rejected(self, hz):
        with pytest.raises(ValidationError):
            quantize_f0(Voiced(hz), CONFIG)
        with pytest.raises(ValidationError):
            quantize_f0_track(np.array([200.0, hz]), np.array([True, True]), CONFIG)
        # unvoiced frames are never looked at
        assert_array_equal(quantize_f0_track(np.array([200.0, hz]), np.array([True, False]), CONFIG)[1:], [0])

    def test_matches_edge_scan(self):
        for hz in (200.0, 50.5, 123.4, 333.3, 499.9):
            assert quantize_f0(Voiced(hz), CONFIG) == scan_class(hz, CONFIG)

    def test_dequantize(self):
        assert dequantize_f0(0, CONFIG) is UNVOICED
        first = dequantize_f0(1, CONFIG)
        assert CONFIG.f0_min < first.hz < CONFIG.f0_max
        with pytest.raises(ValidationError):
            dequantize_f0(CONFIG.n_f0_bins + 1, CONFIG)
        with pytest.raises(ValidationError):
            dequantize_f0(-1, CONFIG)

    def test_round_trip_within_half_bin(self):
        rng = np.random.default_rng(0)
        for hz in rng.uniform(CONFIG.f0_min, CONFIG.f0_max, 1000):
            c = quantize_f0(Voiced(float(hz)), CONFIG)
            back = dequantize_f0(c, CONFIG)
            assert abs(back.hz - hz) <= bin_half_width_hz(c, CONFIG) + 1e-9
            assert quantize_f0(back, CONFIG) == c

    def test_monotone(self):
        hz = np.sort(np.random.default_rng(1).uniform(0, 700, 500))
        classes = quantize_f0_track(hz, np.ones(hz.size, dtype=bool), CONFIG)
        assert np.all(np.diff(classes) >= 0)

    def test_track_helpers(self):
        f0 = np.array([0.0, 120.0, 180.0, 0.0])
        voiced = np.array([False, True, True, False])
        classes = quantize_f0_track(f0, voiced, CONFIG)
        assert_array_equal(classes == 0, ~voiced)
        back, back_voiced = dequantize_f0_track(classes, CONFIG)
        assert_array_equal(back_voiced, voiced)
        assert_allclose(back[1], bin_center_hz(int(classes[1]), CONFIG))
        assert back[0] == 0.0

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            FeatureConfig(n_f0_bins=1)
        with pytest.raises(ValidationError):
            FeatureConfig(f0_min=300.0, f0_max=200.0)
        assert FeatureConfig().n_classes == 512


class TestAcousticTrack:
    def test_unvoiced_frames_carry_zero_f0(self):
        track = AcousticTrack(np.zeros((3, 2)), [100.0, 150.0, 200.0], [True, False, True])
        assert_array_equal(track.f0, [100.0, 0.0, 200.0])
        assert track.f0_values() == [Voiced(100.0), UNVOICED, Voiced(200.0)]

    def test_frames_round_trip(self):
        frames = [AcousticFrame(np.array([1.0, 2.0]), Voiced(110.0)), AcousticFrame(np.array([3.0, 4.0]), UNVOICED)]
        track = AcousticTrack.from_frames(frames)
        assert track.n_frames == 2 and track.d_mgc == 2
        again = list(track.frames())
        assert_array_equal(again[0].mgc, [1.0, 2.0])
        assert again[1].f0 is UNVOICED

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            AcousticTrack(np.zeros((3, 2)), np.zeros(2), np.zeros(3, dtype=bool))
