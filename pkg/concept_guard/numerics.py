"""
Numerics Module
Vector primitives, a dense MLP with analytic backpropagation, SGD and the seeded PRNG
"""

import logging
import math
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from concept_guard.errors import (
    ArtifactParseError, DegenerateInputError, ParameterError, ShapeError
)
from storage.files import PathLike, atomic_write, read_numbered_lines

logger = logging.getLogger(__name__)

# Embeddings are plain float64 vectors; the alias documents intent.
Embedding = np.ndarray

CHECKPOINT_HEADER = 'DDIF-MLP v1'


# ============================================
# VECTOR PRIMITIVES
# ============================================

def as_embedding(values, name: str = 'embedding') -> Embedding:
    """
    Coerce values to a finite, non-empty float64 vector.

    Raises:
        ShapeError: If the input is not one-dimensional or is empty
        ParameterError: If any value is not finite
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def cosine_similarity(a, b) -> float:
    """
    Cosine of the angle between two embeddings.

    Args:
        a: First embedding
        b: Second embedding of the same dimension

    Returns:
        <a, b> / (|a| |b|), clamped to [-1, 1]

    Raises:
        ShapeError: On dimension mismatch
        DegenerateInputError: If either vector has zero norm
    """
    a = as_embedding(a, 'a')
    b = as_embedding(b, 'b')
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.size} vs {b.size}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Normalise each row to unit length; zero rows are a degenerate input."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.sqrt((matrix * matrix).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateInputError("matrix contains a zero-norm row")
    return matrix / norms[:, None]


def softmax(scores: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    """
    Temperature softmax with max-shift.

    Args:
        scores: Non-empty sequence of reals
        temperature: Positive temperature; smaller values sharpen the weights

    Returns:
        Weights summing to one

    Raises:
        ParameterError: On empty scores or non-positive temperature
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ParameterError("softmax of an empty sequence")
    z = s / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def sigmoid(u):
    """Logistic function, stable for large |u|. Scalars in, float out."""
    arr = np.asarray(u, dtype=np.float64)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if out.ndim == 0:
        return float(out)
    return out


# ============================================
# PRNG
# ============================================

def _key_part(part: Union[int, str]) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode('utf-8')) & 0xFFFFFFFF
    value = int(part)
    if value < 0:
        raise ParameterError(f"substream keys must be non-negative, got {value}")
    return value


class Rng:
    """
    Seeded pseudo-random stream.

    The bit generator is numpy's PCG64 (64-bit output) seeded through a
    SeedSequence whose spawn key identifies the substream, so
    ``Rng(seed).substream(i, j)`` is reproducible and independent of every
    other (i, j). Integer output is bit-exact across platforms. Gaussian
    samples are produced with the Box-Muller transform over the uniform stream.

    An Rng is single-owner; derive substreams for parallel work.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.key = tuple(key)
        sequence = np.random.SeedSequence(seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"

    def substream(self, *key: Union[int, str]) -> 'Rng':
        """Derive an independent stream keyed by integers or strings."""
        return Rng(self.seed, self.key + tuple(_key_part(k) for k in key))

    def random_raw(self, n: int) -> np.ndarray:
        """Raw 64-bit integers from the bit generator."""
        return self._gen.bit_generator.random_raw(n)

    def random(self, size=None):
        """Uniform doubles in [0, 1)."""
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        return self._gen.permutation(n)

    def gaussian(self, shape) -> np.ndarray:
        """Standard normal samples via Box-Muller."""
        shape = _check_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n].reshape(shape)


def _check_shape(shape) -> Tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    return shape


def gaussian_noise(rng: Rng, shape) -> np.ndarray:
    """Tensor of i.i.d. N(0, 1) samples drawn from ``rng``."""
    return rng.gaussian(shape)


# ============================================
# MLP
# ============================================

class Activation(str, Enum):
    """Hidden-layer nonlinearity; the final layer is always linear."""
    RELU = 'relu'
    TANH = 'tanh'


@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Weights of a dense MLP.

    weights[l] has shape (layer_dims[l+1], layer_dims[l]); biases[l] has
    length layer_dims[l+1]. Arrays are stored read-only.
    """
    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ShapeError(f"layer_dims must list at least two positive sizes, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("one weight matrix and one bias vector per layer required")
        weights, biases = [], []
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (dims[layer + 1], dims[layer]):
                raise ShapeError(
                    f"layer {layer} weight shape {w.shape} != {(dims[layer + 1], dims[layer])}"
                )
            if b.shape != (dims[layer + 1],):
                raise ShapeError(f"layer {layer} bias shape {b.shape} != {(dims[layer + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ParameterError(f"layer {layer} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            weights.append(w)
            biases.append(b)
        object.__setattr__(self, 'layer_dims', dims)
        object.__setattr__(self, 'weights', tuple(weights))
        object.__setattr__(self, 'biases', tuple(biases))
        object.__setattr__(self, 'activation', Activation(self.activation))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def equals(self, other: 'MlpParams') -> bool:
        """Bit-exact equality of layout and every parameter."""
        return (
            self.layer_dims == other.layer_dims
            and self.activation == other.activation
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def zeros_like(self) -> 'MlpParams':
        return MlpParams(
            self.layer_dims,
            tuple(np.zeros_like(w) for w in self.weights),
            tuple(np.zeros_like(b) for b in self.biases),
            self.activation,
        )

    def flat(self) -> np.ndarray:
        """All parameters concatenated (weights first, then biases)."""
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def from_flat(self, vector: np.ndarray) -> 'MlpParams':
        """Inverse of flat() for this layout."""
        vector = np.asarray(vector, dtype=np.float64)
        weights, biases, offset = [], [], 0
        for w in self.weights:
            weights.append(vector[offset:offset + w.size].reshape(w.shape))
            offset += w.size
        for b in self.biases:
            biases.append(vector[offset:offset + b.size].copy())
            offset += b.size
        if offset != vector.size:
            raise ShapeError(f"flat vector has {vector.size} values, layout needs {offset}")
        return MlpParams(self.layer_dims, tuple(weights), tuple(biases), self.activation)


def init_mlp(
    layer_dims: Sequence[int],
    rng: Rng,
    activation: Activation = Activation.RELU,
    zero_output: bool = False,
) -> MlpParams:
    """
    Initialise an MLP with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) entries.

    Args:
        layer_dims: Sizes from input to output
        rng: Source of randomness
        activation: Hidden nonlinearity
        zero_output: Zero the final layer so the network outputs exactly 0

    Returns:
        Fresh MlpParams
    """
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    if zero_output:
        weights[-1] = np.zeros_like(weights[-1])
        biases[-1] = np.zeros_like(biases[-1])
    return MlpParams(tuple(dims), tuple(weights), tuple(biases), Activation(activation))


def _as_batch(values, width: int, name: str) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(values, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"{name} has shape {np.shape(values)}, expected width {width}")
    return arr, single


def _activate(kind: Activation, pre: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activation_grad(kind: Activation, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


def _forward_trace(params: MlpParams, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    pre_acts, acts = [], [x]
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = acts[-1] @ w.T + b
        pre_acts.append(pre)
        if layer < params.n_layers - 1:
            acts.append(_activate(params.activation, pre))
        else:
            acts.append(pre)
    return pre_acts, acts


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """
    Evaluate the network.

    Args:
        params: Network weights
        x: One input vector or a batch with one sample per row

    Returns:
        Output vector (or batch of rows); the final layer is linear

    Raises:
        ShapeError: If the input width differs from layer_dims[0]
    """
    batch, single = _as_batch(x, params.input_dim, 'input')
    _, acts = _forward_trace(params, batch)
    return acts[-1][0] if single else acts[-1]


def mlp_backward(params: MlpParams, x, upstream_grad) -> Tuple[MlpParams, np.ndarray]:
    """
    Backpropagate an upstream gradient through the network.

    For a batch, parameter gradients are summed over rows and the input
    gradient keeps one row per sample.

    Args:
        params: Network weights
        x: Input vector or batch used in the forward pass
        upstream_grad: dLoss/dOutput with the output's shape

    Returns:
        (parameter gradients shaped like params, dLoss/dInput)
    """
    batch, single = _as_batch(x, params.input_dim, 'input')
    delta, single_grad = _as_batch(upstream_grad, params.output_dim, 'upstream_grad')
    if delta.shape[0] != batch.shape[0] or single != single_grad:
        raise ShapeError("upstream_grad batch does not match input batch")

    pre_acts, acts = _forward_trace(params, batch)
    grad_w: List[Optional[np.ndarray]] = [None] * params.n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * params.n_layers
    for layer in range(params.n_layers - 1, -1, -1):
        grad_w[layer] = delta.T @ acts[layer]
        grad_b[layer] = delta.sum(axis=0)
        grad_in = delta @ params.weights[layer]
        if layer > 0:
            delta = grad_in * _activation_grad(params.activation, pre_acts[layer - 1], acts[layer])
        else:
            delta = grad_in

    grads = MlpParams(params.layer_dims, tuple(grad_w), tuple(grad_b), params.activation)
    return grads, (delta[0] if single else delta)


def sgd_step(params: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
    """
    One plain SGD update, theta - lr * grad. The inputs are not modified.

    Raises:
        ShapeError: If the gradient layout differs from the parameters
        ParameterError: If lr is negative
    """
    if grads.layer_dims != params.layer_dims:
        raise ShapeError(f"gradient layout {grads.layer_dims} != {params.layer_dims}")
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    weights = tuple(w - lr * g for w, g in zip(params.weights, grads.weights))
    biases = tuple(b - lr * g for b, g in zip(params.biases, grads.biases))
    return MlpParams(params.layer_dims, weights, biases, params.activation)


# ============================================
# CHECKPOINTS
# ============================================

class Checkpoint(NamedTuple):
    params: MlpParams
    features: Optional[Tuple[str, ...]]


def _fmt(values: np.ndarray) -> str:
    return ' '.join(format(float(v), '.17g') for v in np.ravel(values))


def save_mlp(params: MlpParams, path: PathLike,
             features: Optional[Sequence[str]] = None) -> None:
    """
    Write a checkpoint.

    Layout: header line, layer dims, activation, one line of row-major
    weights per layer, one line of biases per layer, then optionally a
    ``features`` line naming the input features in order.
    """
    with atomic_write(path) as fh:
        fh.write(f"{CHECKPOINT_HEADER}\n")
        fh.write(' '.join(str(d) for d in params.layer_dims) + '\n')
        fh.write(f"{params.activation.value}\n")
        for w in params.weights:
            fh.write(_fmt(w) + '\n')
        for b in params.biases:
            fh.write(_fmt(b) + '\n')
        if features:
            fh.write('features ' + ' '.join(features) + '\n')
    logger.info(f"Checkpoint saved: {path} (layers={params.layer_dims})")


def _parse_floats(text: str, expected: int, path, number: int) -> np.ndarray:
    try:
        values = np.array([float(tok) for tok in text.split()], dtype=np.float64)
    except ValueError as e:
        raise ArtifactParseError(f"bad number: {e}", str(path), number) from None
    if values.size != expected:
        raise ArtifactParseError(
            f"expected {expected} values, found {values.size}", str(path), number
        )
    return values


def read_checkpoint(path: PathLike) -> Checkpoint:
    """
    Parse a checkpoint file.

    Raises:
        ArtifactParseError: With the offending line number
    """
    lines = list(read_numbered_lines(path))
    if not lines or lines[0][1] != CHECKPOINT_HEADER:
        raise ArtifactParseError(f"missing '{CHECKPOINT_HEADER}' header", str(path), 1)
    if len(lines) < 3:
        raise ArtifactParseError("truncated checkpoint", str(path), len(lines) + 1)
    try:
        dims = tuple(int(tok) for tok in lines[1][1].split())
    except ValueError:
        raise ArtifactParseError("layer dims must be integers", str(path), 2) from None
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ArtifactParseError("need at least two positive layer dims", str(path), 2)
    try:
        activation = Activation(lines[2][1].strip())
    except ValueError:
        raise ArtifactParseError(f"unknown activation '{lines[2][1]}'", str(path), 3) from None

    n_layers = len(dims) - 1
    needed = 3 + 2 * n_layers
    if len(lines) < needed:
        raise ArtifactParseError("truncated checkpoint", str(path), len(lines) + 1)
    weights, biases = [], []
    for layer in range(n_layers):
        number, text = lines[3 + layer]
        shape = (dims[layer + 1], dims[layer])
        weights.append(_parse_floats(text, shape[0] * shape[1], path, number).reshape(shape))
    for layer in range(n_layers):
        number, text = lines[3 + n_layers + layer]
        biases.append(_parse_floats(text, dims[layer + 1], path, number))

    features = None
    rest = [(n, t) for n, t in lines[needed:] if t.strip()]
    if rest:
        number, text = rest[0]
        tokens = text.split()
        if tokens[0] != 'features' or len(rest) > 1:
            raise ArtifactParseError("unexpected trailing content", str(path), number)
        features = tuple(tokens[1:])
    try:
        params = MlpParams(dims, tuple(weights), tuple(biases), activation)
    except (ShapeError, ParameterError) as e:
        raise ArtifactParseError(str(e), str(path)) from None
    return Checkpoint(params, features)


def load_mlp(path: PathLike) -> MlpParams:
    """Load only the parameters of a checkpoint."""
    return read_checkpoint(path).params
