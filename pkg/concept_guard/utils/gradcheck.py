"""
Gradient Check Utilities
Central finite-difference verification of every analytic gradient in the trainer
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from concept_guard.numerics import Activation, Rng, init_mlp, mlp_backward, mlp_forward
from concept_guard.trainer import bce_loss, contrastive_batch_loss

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
TOLERANCE = 1e-4


def numerical_gradient(func: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function at x (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        upper = func(x)
        flat[i] = keep - step
        lower = func(x)
        flat[i] = keep
        out[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = float(np.linalg.norm(a) + np.linalg.norm(n))
    if scale < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - n)) / scale


@dataclass
class GradCheckReport:
    """Relative errors per check, one entry per trial."""
    errors: Dict[str, List[float]] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    def add(self, name: str, error: float) -> None:
        self.errors.setdefault(name, []).append(error)

    @property
    def max_error(self) -> float:
        return max((max(v) for v in self.errors.values() if v), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> Dict[str, float]:
        return {name: max(values) for name, values in self.errors.items()}


# ============================================
# INDIVIDUAL CHECKS
# ============================================

def _random_layout(rng: Rng, input_dim: int, output_dim: int) -> List[int]:
    hidden = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 3)))]
    return [input_dim] + hidden + [output_dim]


def check_mlp_backward(rng: Rng) -> float:
    """Parameter and input gradients of <upstream, f(x)> for a random net."""
    dims = _random_layout(rng, int(rng.integers(2, 6)), int(rng.integers(1, 5)))
    params = init_mlp(dims, rng.substream('init'), Activation.TANH)
    x = rng.gaussian(dims[0])
    upstream = rng.gaussian(dims[-1])
    grads, input_grad = mlp_backward(params, x, upstream)

    def loss_of_params(flat: np.ndarray) -> float:
        return float(upstream @ mlp_forward(params.from_flat(flat), x))

    def loss_of_input(point: np.ndarray) -> float:
        return float(upstream @ mlp_forward(params, point))

    param_error = relative_error(grads.flat(), numerical_gradient(loss_of_params, params.flat()))
    input_error = relative_error(input_grad, numerical_gradient(loss_of_input, x))
    return max(param_error, input_error)


def _contrastive_batch(rng: Rng, size: int, dim: int):
    labels = np.array([0, 0, 1, 1] + [int(v) for v in rng.integers(0, 2, size - 4)])
    return rng.gaussian((size, dim)), labels


def check_contrastive(rng: Rng, temperature: float = 0.5) -> float:
    """Contrastive loss gradient, w.r.t. the batch and chained through g_theta."""
    size, in_dim, out_dim = int(rng.integers(4, 8)), 4, 3
    raw, labels = _contrastive_batch(rng, size, in_dim)
    params = init_mlp([in_dim, 5, out_dim], rng.substream('init'), Activation.TANH)

    z = mlp_forward(params, raw)
    _, grad_z = contrastive_batch_loss(z, labels, temperature)
    z_error = relative_error(
        grad_z, numerical_gradient(lambda p: contrastive_batch_loss(p, labels, temperature)[0], z)
    )

    grads, _ = mlp_backward(params, raw, grad_z)

    def loss_of_params(flat: np.ndarray) -> float:
        return contrastive_batch_loss(mlp_forward(params.from_flat(flat), raw), labels, temperature)[0]

    param_error = relative_error(grads.flat(), numerical_gradient(loss_of_params, params.flat()))
    return max(z_error, param_error)


def check_bce(rng: Rng) -> float:
    """Mean BCE of q_psi over random distance features."""
    size = int(rng.integers(2, 9))
    features = rng.uniform(-1.0, 1.0, (size, 2))
    labels = rng.integers(0, 2, size).astype(np.float64)
    params = init_mlp([2, 8, 1], rng.substream('init'), Activation.TANH)

    logits = mlp_forward(params, features)[:, 0]
    _, grad = bce_loss(logits, labels)
    grads, _ = mlp_backward(params, features, (grad / size)[:, None])

    def loss_of_params(flat: np.ndarray) -> float:
        u = mlp_forward(params.from_flat(flat), features)[:, 0]
        return float(bce_loss(u, labels)[0].mean())

    return relative_error(grads.flat(), numerical_gradient(loss_of_params, params.flat()))


CHECKS: Dict[str, Callable[[Rng], float]] = {
    'mlp_backward': check_mlp_backward,
    'contrastive': check_contrastive,
    'bce': check_bce,
}


def grad_check(seed: int = 7, trials: int = 100) -> GradCheckReport:
    """
    Run every finite-difference check ``trials`` times.

    Returns:
        GradCheckReport; ``passed`` when the worst relative error is below 1e-4
    """
    report = GradCheckReport()
    root = Rng(seed).substream('gradcheck')
    for name, check in CHECKS.items():
        for trial in range(trials):
            report.add(name, check(root.substream(name, trial)))
        logger.info(f"Gradient check {name}: max relative error {max(report.errors[name]):.3e}")
    return report
