"""
Numerics Tests
Vector primitives, PRNG streams, MLP forward/backward and checkpoints
"""

import math

import numpy as np
import pytest

from concept_guard.errors import ArtifactParseError, DegenerateInputError, ParameterError, ShapeError
from concept_guard.numerics import (
    Activation, MlpParams, Rng, cosine_similarity, init_mlp, load_mlp, mlp_backward, mlp_forward,
    gaussian_noise, read_checkpoint, save_mlp, sgd_step, sigmoid, softmax,
)


# ============================================
# VECTOR PRIMITIVES
# ============================================

class TestCosineSimilarity:

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_scale_invariant(self):
        assert cosine_similarity([1, 2], [2, 4]) == pytest.approx(1.0)

    def test_diagonal(self):
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2))

    def test_symmetric(self, rng):
        a, b = rng.gaussian(7), rng.gaussian(7)
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a))

    def test_zero_vector_is_an_error(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity([0, 0], [1, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_similarity([1, 0, 0], [1, 0])


class TestSoftmax:

    def test_uniform(self):
        np.testing.assert_allclose(softmax([5, 5, 5], 1.0), [1 / 3] * 3)

    def test_temperature(self):
        np.testing.assert_allclose(softmax([0.6, 0.2], 0.1), [0.982014, 0.017986], atol=1e-6)

    def test_singleton(self):
        assert softmax([3.7], 0.5).tolist() == [1.0]

    def test_large_scores_do_not_overflow(self):
        weights = softmax([1e6, 1e6 - 1], 1.0)
        assert np.all(np.isfinite(weights))
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize('temperature', [0.0, -1.0])
    def test_invalid_temperature(self, temperature):
        with pytest.raises(ParameterError):
            softmax([1.0, 2.0], temperature)


def test_sigmoid_is_stable_at_extremes():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0
    assert isinstance(sigmoid(1.0), float)


# ============================================
# PRNG
# ============================================

class TestRng:

    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(7).random_raw(5), Rng(7).random_raw(5))

    def test_substreams_are_independent_of_call_order(self):
        root = Rng(99)
        first = root.substream(3, 4).gaussian(6)
        root.substream(1, 1).gaussian(100)
        again = Rng(99).substream(3, 4).gaussian(6)
        assert np.array_equal(first, again)

    def test_distinct_keys_differ(self):
        assert not np.array_equal(Rng(1).substream(0).random_raw(4), Rng(1).substream(1).random_raw(4))

    def test_string_keys(self):
        assert np.array_equal(Rng(5).substream('init').uniform(0, 1, 3),
                              Rng(5).substream('init').uniform(0, 1, 3))

    def test_gaussian_moments(self):
        samples = Rng(2024).gaussian(20000)
        assert abs(samples.mean()) < 0.03
        assert abs(samples.std() - 1.0) < 0.03

    def test_gaussian_odd_shape(self):
        assert Rng(0).gaussian((3, 3)).shape == (3, 3)

    def test_gaussian_noise_million_draws(self):
        samples = gaussian_noise(Rng(7).substream('noise'), (1000, 1000))
        assert abs(samples.mean()) < 0.01
        assert abs(samples.var() - 1.0) < 0.01
        np.testing.assert_array_equal(gaussian_noise(Rng(7), 5), gaussian_noise(Rng(7), 5))
        assert not np.array_equal(gaussian_noise(Rng(7), 5), gaussian_noise(Rng(8), 5))

    def test_permutation_is_a_permutation(self):
        order = Rng(3).permutation(50)
        assert sorted(order.tolist()) == list(range(50))

    @pytest.mark.parametrize('seed', [-1, 2 ** 64])
    def test_seed_range(self, seed):
        with pytest.raises(ParameterError):
            Rng(seed)


# ============================================
# MLP
# ============================================

class TestMlp:

    def test_identity_network(self):
        params = MlpParams((2, 2), (np.eye(2),), (np.zeros(2),))
        assert mlp_forward(params, [3.0, -4.0]).tolist() == [3.0, -4.0]

    def test_zero_output_init(self, rng):
        params = init_mlp([4, 6, 1], rng, zero_output=True)
        assert mlp_forward(params, rng.gaussian(4)).tolist() == [0.0]

    def test_batch_matches_rows(self, rng):
        params = init_mlp([3, 5, 2], rng, Activation.TANH)
        batch = rng.gaussian((4, 3))
        out = mlp_forward(params, batch)
        for row in range(4):
            np.testing.assert_array_equal(out[row], mlp_forward(params, batch[row]))

    def test_input_width_mismatch(self, rng):
        params = init_mlp([3, 2], rng)
        with pytest.raises(ShapeError):
            mlp_forward(params, [1.0, 2.0])

    def test_bad_layout_rejected(self):
        with pytest.raises(ShapeError):
            MlpParams((2, 3), (np.zeros((2, 3)),), (np.zeros(3),))

    def test_non_finite_rejected(self):
        with pytest.raises(ParameterError):
            MlpParams((1, 1), (np.array([[np.nan]]),), (np.zeros(1),))

    def test_parameters_are_read_only(self, rng):
        params = init_mlp([2, 2], rng)
        with pytest.raises(ValueError):
            params.weights[0][0, 0] = 1.0

    def test_linear_backward_is_exact(self):
        weights = np.array([[1.0, 2.0], [3.0, 4.0]])
        params = MlpParams((2, 2), (weights,), (np.zeros(2),))
        grads, input_grad = mlp_backward(params, [1.0, -1.0], [1.0, 0.0])
        np.testing.assert_array_equal(grads.weights[0], [[1.0, -1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(grads.biases[0], [1.0, 0.0])
        np.testing.assert_array_equal(input_grad, [1.0, 2.0])

    def test_sgd_step_does_not_mutate(self, rng):
        params = init_mlp([2, 3, 1], rng)
        before = params.flat().copy()
        grads = params.zeros_like().from_flat(np.ones_like(before))
        updated = sgd_step(params, grads, 0.1)
        np.testing.assert_array_equal(params.flat(), before)
        np.testing.assert_allclose(updated.flat(), before - 0.1)

    def test_flat_round_trip(self, rng):
        params = init_mlp([3, 4, 2], rng, Activation.TANH)
        assert params.from_flat(params.flat()).equals(params)


# ============================================
# CHECKPOINTS
# ============================================

class TestCheckpoint:

    def test_save_load_is_bit_exact(self, tmp_path, rng):
        params = init_mlp([5, 7, 3], rng, Activation.TANH)
        path = tmp_path / 'net.mlp'
        save_mlp(params, path)
        assert load_mlp(path).equals(params)

    def test_feature_line(self, tmp_path, rng):
        path = tmp_path / 'cls.mlp'
        save_mlp(init_mlp([2, 1], rng), path, features=['d_mal', 'd_ben'])
        assert read_checkpoint(path).features == ('d_mal', 'd_ben')

    def test_missing_header(self, tmp_path):
        path = tmp_path / 'bad.mlp'
        path.write_text('not a checkpoint\n')
        with pytest.raises(ArtifactParseError) as exc:
            load_mlp(path)
        assert exc.value.line_number == 1

    def test_short_weight_line_names_the_line(self, tmp_path, rng):
        path = tmp_path / 'net.mlp'
        save_mlp(init_mlp([2, 2], rng), path)
        lines = path.read_text().splitlines()
        lines[3] = ' '.join(lines[3].split()[:-1])
        path.write_text('\n'.join(lines) + '\n')
        with pytest.raises(ArtifactParseError) as exc:
            load_mlp(path)
        assert exc.value.line_number == 4
