"""
Trainer Module
Contrastive training of the projection network and BCE training of the safety classifier
"""

import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from concept_guard.concept_bank import (
    DEFAULT_GAMMA, DEFAULT_TOP_K, Aggregator, ConceptBank, ConceptEntry, Polarity,
    default_concept, distance_pair, topk_neighbors,
)
from concept_guard.errors import (
    DegenerateDatasetError, DegenerateInputError, ParameterError, ShapeError
)
from concept_guard.numerics import (
    MlpParams, Rng, as_embedding, mlp_backward, mlp_forward, sgd_step, sigmoid
)

logger = logging.getLogger(__name__)

FEATURE_ORDER = ('d_mal', 'd_ben')


class Label(IntEnum):
    """Dataset label encoding: 0 malicious, 1 benign."""
    MALICIOUS = 0
    BENIGN = 1


class LossMode(str, Enum):
    """Projection objective: in-batch contrastive (default) or queue distances."""
    IN_BATCH = 'in_batch'
    QUEUE = 'queue'


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True, eq=False)
class PromptRecord:
    """
    A labelled prompt with its pre-computed joint-space embedding.

    Attributes:
        prompt_id: Stable identifier
        raw_embedding: h = f_phi(p)
        label: Label.MALICIOUS or Label.BENIGN
        concept: Optional concept category used when building the bank
    """
    prompt_id: str
    raw_embedding: np.ndarray
    label: Label
    concept: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'raw_embedding', as_embedding(self.raw_embedding, self.prompt_id))
        object.__setattr__(self, 'label', Label(int(self.label)))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by both training phases."""
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 50
    temperature: float = 0.1
    seed: int = 0
    loss_mode: LossMode = LossMode.IN_BATCH
    queue_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr < 0:
            raise ParameterError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be non-negative, got {self.epochs}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.queue_k < 1:
            raise ParameterError(f"queue_k must be positive, got {self.queue_k}")
        object.__setattr__(self, 'loss_mode', LossMode(self.loss_mode))


@dataclass(frozen=True)
class EpochStat:
    epoch: int
    mean_loss: float


@dataclass
class TrainingRun:
    """Trained parameters plus the per-epoch loss history."""
    params: MlpParams
    history: List[EpochStat] = field(default_factory=list)

    def history_rows(self) -> List[dict]:
        return [{'epoch': s.epoch, 'mean_loss': s.mean_loss} for s in self.history]


# ============================================
# HELPERS
# ============================================

def _stack_dataset(dataset: Sequence[PromptRecord], input_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    if not dataset:
        raise DegenerateDatasetError("dataset is empty")
    raw = np.stack([r.raw_embedding for r in dataset])
    if raw.shape[1] != input_dim:
        raise ShapeError(f"dataset embeddings have dim {raw.shape[1]}, network expects {input_dim}")
    labels = np.array([int(r.label) for r in dataset], dtype=np.int64)
    return raw, labels


def _require_both_labels(labels: np.ndarray) -> None:
    present = set(np.unique(labels).tolist())
    if present != {Label.MALICIOUS.value, Label.BENIGN.value}:
        raise DegenerateDatasetError(
            f"training needs both malicious and benign records, found labels {sorted(present)}"
        )


def _effective_batch(cfg: TrainConfig, n: int) -> int:
    if cfg.batch_size > n:
        logger.warning(f"batch_size {cfg.batch_size} exceeds dataset size {n}; using {n}")
        return n
    return cfg.batch_size


def _logsumexp(values: np.ndarray) -> float:
    top = float(values.max())
    return top + float(np.log(np.exp(values - top).sum()))


def _unit_with_norms(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((z * z).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateInputError("projected embedding with zero norm")
    return z / norms[:, None], norms


def _cosine_grad_to_z(grad_u: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Chain dL/du through u = z / |z|."""
    radial = (grad_u * unit).sum(axis=1)
    return (grad_u - radial[:, None] * unit) / norms[:, None]


# ============================================
# PROJECTION LOSSES
# ============================================

def contrastive_batch_loss(
    projected: np.ndarray,
    labels: Sequence[int],
    temperature: float,
) -> Tuple[float, np.ndarray]:
    """
    In-batch contrastive loss over projected embeddings.

    For each sample with at least one same-label partner, the positive term is
    the highest same-label cosine and the negatives are all other-label
    cosines: L_i = -log(exp(s_p/t) / (exp(s_p/t) + sum_k exp(c_k/t))).
    Samples without a partner contribute 0. The loss is the mean over the
    whole batch.

    Args:
        projected: (B, d) batch of z_i
        labels: B labels in {0, 1}
        temperature: Positive temperature t

    Returns:
        (loss, dLoss/dz with shape (B, d))

    Raises:
        ParameterError: If the batch has fewer than 2 samples or t <= 0
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(projected, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"projected batch must be 2-D, got shape {z.shape}")
    size = z.shape[0]
    y = np.asarray(labels).reshape(-1)
    if y.size != size:
        raise ShapeError(f"{y.size} labels for {size} samples")
    if size < 2:
        raise ParameterError("contrastive loss needs a batch of at least 2")

    unit, norms = _unit_with_norms(z)
    cos = unit @ unit.T
    same = (y[:, None] == y[None, :]) & ~np.eye(size, dtype=bool)
    other = y[:, None] != y[None, :]

    pair_grad = np.zeros((size, size))
    total = 0.0
    for i in range(size):
        partners = np.flatnonzero(same[i])
        if partners.size == 0:
            continue
        positive = partners[int(np.argmax(cos[i, partners]))]
        negatives = np.flatnonzero(other[i])
        logits = np.concatenate(([cos[i, positive]], cos[i, negatives])) / temperature
        lse = _logsumexp(logits)
        total += lse - logits[0]
        probs = np.exp(logits - lse)
        pair_grad[i, positive] += (probs[0] - 1.0) / temperature
        pair_grad[i, negatives] += probs[1:] / temperature

    pair_grad /= size
    # cos is symmetric, so each pair term reaches both endpoints
    sym = pair_grad + pair_grad.T
    grad_u = sym @ unit
    return total / size, _cosine_grad_to_z(grad_u, unit, norms)


def contrastive_queue_loss(
    projected: np.ndarray,
    labels: Sequence[int],
    queue: ConceptBank,
    temperature: float,
    k: int = DEFAULT_TOP_K,
    self_indices: Optional[Sequence[int]] = None,
) -> Tuple[float, np.ndarray]:
    """
    Queue-based variant of the projection loss.

    Distances to each region are d = 1 - mean cosine over the top-K queue
    neighbors of that polarity. A harmful sample pays
    -log softmax(-d_mal/t, -d_ben/t)[mal]; benign samples swap the roles.
    Queue entries are constants within a step.

    Args:
        projected: (B, d) batch of z_i
        labels: B labels in {0, 1}
        queue: Bank holding the current projections of the training set
        temperature: Positive temperature t
        k: Neighbors per region
        self_indices: Queue index of each sample, excluded from its own sets

    Returns:
        (mean loss, dLoss/dz)
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(projected, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if z.ndim != 2 or y.size != z.shape[0]:
        raise ShapeError("projected batch and labels disagree")
    size = z.shape[0]
    unit, norms = _unit_with_norms(z)
    queue_unit = queue.unit_matrix

    grad_u = np.zeros_like(z)
    total = 0.0
    for i in range(size):
        exclude = () if self_indices is None else (int(self_indices[i]),)
        own, rival = ((Polarity.BENIGN, Polarity.MALICIOUS) if y[i] == Label.BENIGN
                      else (Polarity.MALICIOUS, Polarity.BENIGN))
        own_idx = [n.index for n in topk_neighbors(queue, z[i], own, k, exclude)]
        rival_idx = [n.index for n in topk_neighbors(queue, z[i], rival, k, exclude)]
        own_mean = queue_unit[own_idx].mean(axis=0)
        rival_mean = queue_unit[rival_idx].mean(axis=0)
        d_own = 1.0 - float(unit[i] @ own_mean)
        d_rival = 1.0 - float(unit[i] @ rival_mean)
        margin = (d_own - d_rival) / temperature
        total += float(np.logaddexp(0.0, margin))
        grad_u[i] = sigmoid(margin) / temperature * (rival_mean - own_mean)

    grad_u /= size
    return total / size, _cosine_grad_to_z(grad_u, unit, norms)


def _queue_snapshot(raw: np.ndarray, labels: np.ndarray, params: MlpParams) -> ConceptBank:
    projected = mlp_forward(params, raw)
    entries = [ConceptEntry(projected[i], default_concept(labels[i])) for i in range(len(labels))]
    return ConceptBank(entries, params.output_dim)


# ============================================
# PROJECTION TRAINING
# ============================================

def fit_projection(dataset: Sequence[PromptRecord], params: MlpParams,
                   cfg: TrainConfig) -> TrainingRun:
    """
    Train g_theta with minibatch SGD on the contrastive objective.

    Each epoch shuffles the data with a Fisher-Yates permutation drawn from
    the seeded stream, then walks the batches in order. A trailing batch
    with a single sample carries no pair; it is skipped and logged at DEBUG,
    so that sample sits out the epoch.

    Args:
        dataset: Labelled records with both labels present
        params: Initial projection weights
        cfg: Training hyperparameters

    Returns:
        TrainingRun with the trained weights and per-epoch mean losses

    Raises:
        DegenerateDatasetError: If only one label is present
    """
    raw, labels = _stack_dataset(dataset, params.input_dim)
    _require_both_labels(labels)
    run = TrainingRun(params)
    if cfg.epochs == 0:
        return run

    n = len(labels)
    batch = _effective_batch(cfg, n)
    stream = Rng(cfg.seed).substream('projection')
    logger.info(
        f"Training projection: n={n}, layers={params.layer_dims}, B={batch}, "
        f"lr={cfg.lr}, E={cfg.epochs}, tau={cfg.temperature}, mode={cfg.loss_mode.value}"
    )

    for epoch in range(1, cfg.epochs + 1):
        order = stream.substream(epoch).permutation(n)
        queue = _queue_snapshot(raw, labels, params) if cfg.loss_mode is LossMode.QUEUE else None
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if idx.size < 2:
                logger.debug(f"Epoch {epoch}: skipping trailing batch of {idx.size}")
                continue
            z = mlp_forward(params, raw[idx])
            if queue is None:
                loss, grad_z = contrastive_batch_loss(z, labels[idx], cfg.temperature)
            else:
                loss, grad_z = contrastive_queue_loss(
                    z, labels[idx], queue, cfg.temperature, cfg.queue_k, self_indices=idx
                )
            grads, _ = mlp_backward(params, raw[idx], grad_z)
            params = sgd_step(params, grads, cfg.lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        run.history.append(EpochStat(epoch, mean_loss))
        logger.info(f"Projection epoch {epoch}/{cfg.epochs}: mean loss {mean_loss:.6f}")

    run.params = params
    return run


def train_projection(dataset: Sequence[PromptRecord], params: MlpParams,
                     cfg: TrainConfig) -> MlpParams:
    """Train g_theta and return only the weights."""
    return fit_projection(dataset, params, cfg).params


# ============================================
# CLASSIFIER TRAINING
# ============================================

def bce_loss(logit, label):
    """
    Binary cross-entropy on the logit, log-sigmoid form.

    loss = softplus(u) - y*u, which equals -(y log s + (1-y) log(1-s)) for
    s = sigmoid(u) without ever taking log(0).

    Returns:
        (loss, dLoss/dLogit = s - y); scalars in, floats out
    """
    u = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = np.logaddexp(0.0, u) - y * u
    grad = sigmoid(u) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def classifier_features(
    dataset: Sequence[PromptRecord],
    g_theta: MlpParams,
    bank: ConceptBank,
    k: int = DEFAULT_TOP_K,
    aggregator: Aggregator = Aggregator.MEAN,
    gamma: float = DEFAULT_GAMMA,
    exclude_self: bool = True,
) -> np.ndarray:
    """
    [d_mal, d_ben] feature rows for every record.

    When a record's own entry sits in the bank it is removed from its
    neighbor sets. Entries are matched by their joint-space source when the
    bank keeps sources, otherwise by exact refined embedding.

    Returns:
        (n, 2) feature matrix in FEATURE_ORDER
    """
    bank.ensure_scorable()
    raw, _ = _stack_dataset(dataset, g_theta.input_dim)
    projected = mlp_forward(g_theta, raw)

    lookup = {}
    if exclude_self:
        keys = bank.source_matrix() if bank.has_sources else bank.matrix
        for index, row in enumerate(keys):
            lookup.setdefault(row.tobytes(), []).append(index)

    features = np.empty((len(dataset), 2))
    for row in range(len(dataset)):
        exclude = ()
        if exclude_self:
            key = raw[row] if bank.has_sources else projected[row]
            exclude = lookup.get(np.ascontiguousarray(key).tobytes(), ())
        pair, _, _ = distance_pair(bank, projected[row], k, aggregator, gamma, exclude)
        features[row] = pair.as_features()
    return features


def fit_classifier(features: np.ndarray, labels: Sequence[int], q_psi: MlpParams,
                   cfg: TrainConfig) -> TrainingRun:
    """
    Minibatch SGD on the BCE loss over precomputed distance features.

    Args:
        features: (n, 2) rows of [d_mal, d_ben]
        labels: n labels, 1 for benign
        q_psi: Initial classifier weights (2 inputs, 1 output)
        cfg: Training hyperparameters

    Returns:
        TrainingRun with the trained classifier
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != q_psi.input_dim or x.shape[0] != y.size:
        raise ShapeError(f"features {x.shape} do not fit classifier input {q_psi.input_dim}")
    if q_psi.output_dim != 1:
        raise ShapeError(f"classifier must emit one logit, layout is {q_psi.layer_dims}")
    run = TrainingRun(q_psi)
    if cfg.epochs == 0:
        return run

    n = y.size
    batch = _effective_batch(cfg, n)
    stream = Rng(cfg.seed).substream('classifier')
    for epoch in range(1, cfg.epochs + 1):
        order = stream.substream(epoch).permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            logits = mlp_forward(q_psi, x[idx])[:, 0]
            loss, grad = bce_loss(logits, y[idx])
            grads, _ = mlp_backward(q_psi, x[idx], (grad / idx.size)[:, None])
            q_psi = sgd_step(q_psi, grads, cfg.lr)
            losses.append(float(loss.mean()))
        mean_loss = float(np.mean(losses))
        run.history.append(EpochStat(epoch, mean_loss))
        logger.info(f"Classifier epoch {epoch}/{cfg.epochs}: mean loss {mean_loss:.6f}")

    run.params = q_psi
    return run


def train_classifier(
    dataset: Sequence[PromptRecord],
    g_theta: MlpParams,
    bank: ConceptBank,
    q_psi: MlpParams,
    cfg: TrainConfig,
    k: int = DEFAULT_TOP_K,
    aggregator: Aggregator = Aggregator.MEAN,
    gamma: float = DEFAULT_GAMMA,
) -> MlpParams:
    """
    Train q_psi on retrieval features of a frozen g_theta.

    Raises:
        BankUnderpopulatedError: If the bank lacks a polarity
    """
    features = classifier_features(dataset, g_theta, bank, k, aggregator, gamma)
    labels = [int(r.label) for r in dataset]
    return fit_classifier(features, labels, q_psi, cfg).params
