"""
Shared Fixtures
Toy world, datasets and a trained guard reused across the test modules
"""

import numpy as np
import pytest

from concept_guard.concept_bank import build_bank
from concept_guard.numerics import Activation, Rng, init_mlp
from concept_guard.pipeline import ConceptGuard
from concept_guard.toy_world import ToyBackend, ToySpec, toy_dataset
from concept_guard.trainer import TrainConfig, classifier_features, fit_classifier, fit_projection

PROJECTION_TRAINING = TrainConfig(batch_size=64, lr=1e-2, epochs=30, temperature=0.1, seed=0)
CLASSIFIER_TRAINING = TrainConfig(batch_size=64, lr=0.5, epochs=300, seed=0)


def train_guard(records, seed: int = 0) -> ConceptGuard:
    """Train g_theta, build the bank and fit q_psi on the given records."""
    dim = records[0].raw_embedding.size
    g_init = init_mlp([dim, 2 * dim, dim], Rng(seed).substream('init', 'projection'))
    g_theta = fit_projection(records, g_init, PROJECTION_TRAINING).params
    bank = build_bank(records, g_theta)

    features = classifier_features(records, g_theta, bank)
    q_init = init_mlp([2, 8, 1], Rng(seed).substream('init', 'classifier'), Activation.TANH)
    q_psi = fit_classifier(features, [int(r.label) for r in records], q_init, CLASSIFIER_TRAINING).params
    return ConceptGuard(g_theta, q_psi, bank)


@pytest.fixture(scope='session')
def toy_spec():
    return ToySpec()


@pytest.fixture
def backend(toy_spec):
    return ToyBackend(toy_spec)


@pytest.fixture(scope='session')
def toy_records(toy_spec):
    """Two 200-sample classes with noise 0.1."""
    return toy_dataset(toy_spec, 200, noise_level=0.1, seed=0)


@pytest.fixture(scope='session')
def heldout_records(toy_spec):
    return toy_dataset(toy_spec, 50, noise_level=0.1, seed=1)


@pytest.fixture(scope='session')
def trained_guard(toy_records):
    return train_guard(toy_records)


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def gray_image():
    """Deterministic 16 x 16 single-channel image in [0, 1]."""
    values = np.linspace(0.0, 1.0, 256).reshape(16, 16)
    return values[:, :, None]
