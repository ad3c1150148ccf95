"""
Trainer Tests
Contrastive and BCE objectives, projection and classifier training loops
"""

import logging
import math

import numpy as np
import pytest

from concept_guard.concept_bank import ConceptBank, ConceptEntry, build_bank
from concept_guard.errors import DegenerateDatasetError, ParameterError
from concept_guard.numerics import Activation, Rng, cosine_similarity, init_mlp, mlp_forward
from concept_guard.trainer import (
    Label, LossMode, PromptRecord, TrainConfig, bce_loss, classifier_features,
    contrastive_batch_loss, contrastive_queue_loss, fit_classifier, fit_projection, train_classifier,
    train_projection,
)
from concept_guard.toy_world import toy_dataset
from concept_guard.utils.gradcheck import numerical_gradient, relative_error


# ============================================
# LOSSES
# ============================================

class TestContrastiveBatchLoss:

    def test_pairless_batch_is_zero(self):
        loss, grad = contrastive_batch_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], 0.1)
        assert loss == 0.0
        assert not grad.any()

    def test_identical_positives_against_orthogonal_negative(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        loss, _ = contrastive_batch_loss(z, [0, 0, 1], 1.0)
        per_sample = -math.log(math.e / (math.e + 1.0))
        assert per_sample == pytest.approx(0.313262, abs=1e-6)
        assert loss == pytest.approx(2 * per_sample / 3)

    def test_gradient_matches_finite_differences(self):
        rng = Rng(17)
        z = rng.gaussian((6, 4))
        labels = [0, 0, 1, 1, 0, 1]
        _, grad = contrastive_batch_loss(z, labels, 0.5)
        numeric = numerical_gradient(lambda p: contrastive_batch_loss(p, labels, 0.5)[0], z)
        assert relative_error(grad, numeric) < 1e-4

    def test_batch_of_one(self):
        with pytest.raises(ParameterError):
            contrastive_batch_loss(np.ones((1, 3)), [0], 0.1)

    def test_temperature(self):
        with pytest.raises(ParameterError):
            contrastive_batch_loss(np.eye(2), [0, 0], 0.0)


class TestContrastiveQueueLoss:

    def test_gradient_matches_finite_differences(self):
        rng = Rng(23)
        queue_rows = rng.gaussian((12, 3))
        queue = ConceptBank([
            ConceptEntry(row, 'benign' if i % 2 else 'unsafe') for i, row in enumerate(queue_rows)
        ])
        z = rng.gaussian((4, 3))
        labels = [0, 1, 0, 1]
        _, grad = contrastive_queue_loss(z, labels, queue, 0.5, k=3)
        numeric = numerical_gradient(lambda p: contrastive_queue_loss(p, labels, queue, 0.5, k=3)[0], z)
        assert relative_error(grad, numeric) < 1e-4

    def test_well_placed_sample_has_small_loss(self):
        queue = ConceptBank([
            ConceptEntry(np.array([1.0, 0.0]), 'nudity'),
            ConceptEntry(np.array([0.0, 1.0]), 'benign'),
        ])
        loss, _ = contrastive_queue_loss(np.array([[1.0, 0.0]]), [0], queue, 0.05, k=1)
        assert loss < 1e-6


class TestBceLoss:

    def test_half_probability(self):
        loss, grad = bce_loss(0.0, 1)
        assert loss == pytest.approx(math.log(2.0))
        assert grad == -0.5

    def test_gradient_for_negative_label(self):
        assert bce_loss(0.0, 0)[1] == 0.5

    def test_confident_logit(self):
        loss, _ = bce_loss(50.0, 1)
        assert 0.0 <= loss < 1e-20

    def test_never_infinite(self):
        loss, grad = bce_loss(-1000.0, 1)
        assert math.isfinite(loss)
        assert grad == pytest.approx(-1.0)

    def test_arrays(self):
        loss, grad = bce_loss(np.zeros(3), np.array([0, 1, 1]))
        np.testing.assert_allclose(loss, [math.log(2.0)] * 3)
        np.testing.assert_allclose(grad, [0.5, -0.5, -0.5])


# ============================================
# PROJECTION TRAINING
# ============================================

@pytest.fixture(scope='module')
def clusters(toy_spec):
    """50/50 separable prompts."""
    return toy_dataset(toy_spec, 50, noise_level=0.1, seed=3)


def _initial(dim, seed=0):
    return init_mlp([dim, 2 * dim, dim], Rng(seed).substream('init'))


class TestProjectionTraining:

    def test_zero_epochs_returns_initial(self, clusters):
        params = _initial(64)
        run = fit_projection(clusters, params, TrainConfig(epochs=0))
        assert run.params.equals(params)
        assert run.history == []

    def test_single_label_dataset(self, clusters):
        malicious = [r for r in clusters if r.label is Label.MALICIOUS]
        with pytest.raises(DegenerateDatasetError):
            train_projection(malicious, _initial(64), TrainConfig(epochs=1))

    def test_same_seed_is_bit_identical(self, clusters):
        cfg = TrainConfig(batch_size=16, lr=1e-2, epochs=2, seed=4)
        first = train_projection(clusters, _initial(64), cfg)
        second = train_projection(clusters, _initial(64), cfg)
        assert first.equals(second)

    def test_full_batch_loss_decreases(self, clusters):
        cfg = TrainConfig(batch_size=len(clusters), lr=1e-3, epochs=10, temperature=0.1)
        losses = [s.mean_loss for s in fit_projection(clusters, _initial(64), cfg).history]
        rises = sum(later > earlier for earlier, later in zip(losses, losses[1:]))
        assert rises <= 1

    def test_separates_classes(self, toy_spec, clusters):
        cfg = TrainConfig(batch_size=32, lr=1e-2, epochs=30, temperature=0.1)
        g_theta = train_projection(clusters, _initial(64), cfg)
        heldout = toy_dataset(toy_spec, 20, noise_level=0.1, seed=9)
        z = mlp_forward(g_theta, np.stack([r.raw_embedding for r in heldout]))
        labels = [int(r.label) for r in heldout]
        intra, inter = [], []
        for i in range(len(heldout)):
            for j in range(i + 1, len(heldout)):
                (intra if labels[i] == labels[j] else inter).append(cosine_similarity(z[i], z[j]))
        assert np.mean(intra) > np.mean(inter)

    def test_queue_mode_runs(self, clusters):
        cfg = TrainConfig(batch_size=32, lr=1e-2, epochs=2, loss_mode=LossMode.QUEUE, queue_k=5)
        run = fit_projection(clusters, _initial(64), cfg)
        assert len(run.history) == 2
        assert all(math.isfinite(s.mean_loss) for s in run.history)

    def test_oversized_batch_is_clamped(self, clusters):
        run = fit_projection(clusters, _initial(64), TrainConfig(batch_size=10_000, epochs=1))
        assert len(run.history) == 1

    def test_single_sample_trailing_batch_is_skipped(self, caplog, clusters):
        records = clusters[:3] + clusters[-2:]
        with caplog.at_level(logging.DEBUG, logger='concept_guard.trainer'):
            run = fit_projection(records, _initial(64), TrainConfig(batch_size=4, lr=1e-2, epochs=2))
        skipped = [r for r in caplog.records if 'skipping trailing batch of 1' in r.getMessage()]
        assert [r.levelno for r in skipped] == [logging.DEBUG, logging.DEBUG]
        assert len(run.history) == 2


# ============================================
# CLASSIFIER TRAINING
# ============================================

class TestClassifierTraining:

    def test_zero_output_first_loss_is_ln2(self):
        features = np.array([[0.9, 0.1], [0.1, 0.9]])
        q_psi = init_mlp([2, 4, 1], Rng(1), zero_output=True)
        logits = mlp_forward(q_psi, features)[:, 0]
        loss, _ = bce_loss(logits, np.array([0.0, 1.0]))
        assert float(loss.mean()) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_separable_features_reach_full_accuracy(self):
        rng = Rng(5)
        malicious = np.column_stack([rng.uniform(0.6, 1.0, 60), rng.uniform(0.0, 0.4, 60)])
        benign = np.column_stack([rng.uniform(0.0, 0.4, 60), rng.uniform(0.6, 1.0, 60)])
        features = np.vstack([malicious, benign])
        labels = [0] * 60 + [1] * 60
        q_psi = init_mlp([2, 8, 1], Rng(6), Activation.TANH)
        cfg = TrainConfig(batch_size=16, lr=0.5, epochs=100)
        trained = fit_classifier(features, labels, q_psi, cfg).params

        test_rng = Rng(7)
        test_mal = np.column_stack([test_rng.uniform(0.6, 1.0, 30), test_rng.uniform(0.0, 0.4, 30)])
        test_ben = np.column_stack([test_rng.uniform(0.0, 0.4, 30), test_rng.uniform(0.6, 1.0, 30)])
        logits = mlp_forward(trained, np.vstack([test_mal, test_ben]))[:, 0]
        predicted = (logits >= 0).astype(int)
        assert predicted.tolist() == [0] * 30 + [1] * 30

    def test_same_seed_is_identical(self):
        features = Rng(8).uniform(0, 1, (20, 2))
        labels = [i % 2 for i in range(20)]
        q_psi = init_mlp([2, 3, 1], Rng(9))
        cfg = TrainConfig(batch_size=4, lr=0.1, epochs=3, seed=2)
        first = fit_classifier(features, labels, q_psi, cfg).params
        second = fit_classifier(features, labels, q_psi, cfg).params
        assert first.equals(second)

    def test_features_exclude_self(self):
        records = [
            PromptRecord('m0', [1.0, 0.0], Label.MALICIOUS, 'nudity'),
            PromptRecord('m1', [0.8, 0.6], Label.MALICIOUS, 'nudity'),
            PromptRecord('b0', [0.0, 1.0], Label.BENIGN),
        ]
        identity = init_mlp([2, 2], Rng(0)).from_flat(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
        bank = build_bank(records, identity)
        features = classifier_features(records, identity, bank, k=1)
        np.testing.assert_allclose(features[0], [0.8, 0.0])

    def test_train_classifier_wrapper(self, clusters):
        g_theta = _initial(64)
        bank = build_bank(clusters, g_theta)
        q_psi = init_mlp([2, 4, 1], Rng(3))
        trained = train_classifier(clusters, g_theta, bank, q_psi, TrainConfig(epochs=1))
        assert trained.layer_dims == (2, 4, 1)
