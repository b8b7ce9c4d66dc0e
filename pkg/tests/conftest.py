import pytest

from corpus import REFERENCE_TEST_COUNT, REFERENCE_TRAIN_COUNTS, REFERENCE_VALIDATION_COUNT, Corpus
from features import FeatureConfig
from synthgen import GeneratorConfig, generate_corpus


def tiny_generator(**overrides):
    settings = dict(n_speakers=3, per_speaker_train_counts=(6, 10, 16), val_count=2, test_count=3,
                    d_lin=6, d_mgc=4, frames_per_utterance=(6, 10),
                    feature_config=FeatureConfig(d_mgc=4, n_f0_bins=31))
    settings.update(overrides)
    return GeneratorConfig(**settings)


@pytest.fixture(scope='session')
def reference_corpus():
    """Metadata-only corpus with the reference per-speaker split sizes."""
    return Corpus.from_counts(REFERENCE_TRAIN_COUNTS, REFERENCE_VALIDATION_COUNT, REFERENCE_TEST_COUNT)


@pytest.fixture
def tiny_config():
    return tiny_generator()


@pytest.fixture
def tiny_corpus(tiny_config):
    return generate_corpus(tiny_config)
