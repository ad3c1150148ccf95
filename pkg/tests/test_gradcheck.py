"""
Gradient Check Tests
"""

import numpy as np
import pytest

from concept_guard.utils.gradcheck import grad_check, numerical_gradient, relative_error


def test_numerical_gradient_of_a_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    grad = numerical_gradient(lambda v: float(v @ v), x)
    np.testing.assert_allclose(grad, 2 * x, atol=1e-6)


def test_relative_error_of_identical_arrays():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0


def test_quick_run_passes():
    report = grad_check(seed=7, trials=3)
    assert set(report.errors) == {'mlp_backward', 'contrastive', 'bce'}
    assert report.passed


@pytest.mark.slow
def test_full_run_passes():
    assert grad_check(seed=7, trials=100).passed
