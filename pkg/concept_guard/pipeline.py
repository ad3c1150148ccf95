"""
Safety Pipeline Module
Stage-one scoring and routing of prompt embeddings, plus the pairwise baseline filter
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Tuple

from concept_guard.concept_bank import (
    DEFAULT_GAMMA, DEFAULT_TOP_K, Aggregator, ConceptBank, DistancePair, Neighbor, distance_pair
)
from concept_guard.errors import ArtifactParseError, ParameterError, ShapeError
from concept_guard.numerics import (
    MlpParams, as_embedding, cosine_similarity, mlp_forward, read_checkpoint, save_mlp, sigmoid
)
from concept_guard.trainer import FEATURE_ORDER
from storage.files import PathLike

logger = logging.getLogger(__name__)

DEFAULT_TAU_SAFE = 0.05


class Route(str, Enum):
    BENIGN_PATH = 'benign_path'
    UNSAFE_PATH = 'unsafe_path'


class FilterDecision(str, Enum):
    ALLOW = 'allow'
    DISCARD = 'discard'


@dataclass(frozen=True)
class PipelineConfig:
    """Routing threshold and retrieval settings for stage one."""
    tau_safe: float = DEFAULT_TAU_SAFE
    k: int = DEFAULT_TOP_K
    aggregator: Aggregator = Aggregator.MEAN
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.0 <= self.tau_safe <= 1.0:
            raise ParameterError(f"tau_safe must lie in [0, 1], got {self.tau_safe}")
        if self.k < 1:
            raise ParameterError(f"k must be positive, got {self.k}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, 'aggregator', Aggregator(self.aggregator))


@dataclass(frozen=True, eq=False)
class SafetyDecision:
    """
    Outcome of scoring one prompt.

    Attributes:
        score: s = sigmoid(logit), higher is safer
        logit: Classifier output u
        distances: (d_mal, d_ben)
        route: benign_path iff score >= tau_safe
        malicious_neighbors: Retrieved malicious entries, kept for localization
    """
    score: float
    logit: float
    distances: DistancePair
    route: Route
    malicious_neighbors: Tuple[Neighbor, ...] = field(default=())

    @property
    def neighbor_ids(self) -> Tuple[int, ...]:
        return tuple(n.index for n in self.malicious_neighbors)

    @property
    def flagged(self) -> bool:
        return self.route is Route.UNSAFE_PATH


def route_for(score: float, tau_safe: float) -> Route:
    """Benign when the score reaches the threshold; the boundary is benign."""
    return Route.BENIGN_PATH if score >= tau_safe else Route.UNSAFE_PATH


def safety_score(
    h,
    g_theta: MlpParams,
    q_psi: MlpParams,
    bank: ConceptBank,
    cfg: PipelineConfig = PipelineConfig(),
) -> SafetyDecision:
    """
    Score a prompt embedding and decide its route.

    z = g_theta(h); d_mal and d_ben from the top-K neighbor sets;
    u = q_psi([d_mal, d_ben]); s = sigmoid(u).

    Raises:
        ShapeError: If h does not fit g_theta or the bank
        BankUnderpopulatedError: If the bank lacks a polarity
    """
    h = as_embedding(h, 'prompt embedding')
    if h.size != g_theta.input_dim:
        raise ShapeError(f"prompt embedding dim {h.size} != projection input {g_theta.input_dim}")
    bank.ensure_scorable()
    z = mlp_forward(g_theta, h)
    pair, mal, _ = distance_pair(bank, z, cfg.k, cfg.aggregator, cfg.gamma)
    logit = float(mlp_forward(q_psi, pair.as_features())[0])
    score = sigmoid(logit)
    route = route_for(score, cfg.tau_safe)
    logger.debug(
        f"Scored prompt: s={score:.6f} d_mal={pair.d_mal:.6f} d_ben={pair.d_ben:.6f} -> {route.value}"
    )
    return SafetyDecision(score, logit, pair, route, tuple(mal))


def pairwise_filter(h, concepts: Sequence, tau: float) -> FilterDecision:
    """
    Baseline filter: discard when any listed concept is at least tau similar.

    Raises:
        ParameterError: On an empty concept list
    """
    if len(concepts) == 0:
        raise ParameterError("pairwise filter needs at least one concept")
    best = max(cosine_similarity(h, c) for c in concepts)
    return FilterDecision.DISCARD if best >= tau else FilterDecision.ALLOW


# ============================================
# GUARD BUNDLE
# ============================================

@dataclass(frozen=True, eq=False)
class ConceptGuard:
    """Immutable snapshot of trained artifacts used for scoring."""
    g_theta: MlpParams
    q_psi: MlpParams
    bank: ConceptBank

    def __post_init__(self):
        if self.bank.dim != self.g_theta.output_dim:
            raise ShapeError(f"bank dim {self.bank.dim} != projection output {self.g_theta.output_dim}")
        if self.q_psi.input_dim != len(FEATURE_ORDER) or self.q_psi.output_dim != 1:
            raise ShapeError(f"classifier layout {self.q_psi.layer_dims} must map 2 features to 1 logit")

    def score(self, h, cfg: PipelineConfig = PipelineConfig()) -> SafetyDecision:
        return safety_score(h, self.g_theta, self.q_psi, self.bank, cfg)


def save_classifier(q_psi: MlpParams, path: PathLike) -> None:
    """Checkpoint the classifier together with its feature order."""
    save_mlp(q_psi, path, features=FEATURE_ORDER)


def load_classifier(path: PathLike) -> MlpParams:
    """
    Load a classifier checkpoint and verify its feature order.

    Raises:
        ArtifactParseError: If the stored feature order differs
    """
    checkpoint = read_checkpoint(path)
    if checkpoint.features is None:
        logger.warning(f"Classifier {path} has no feature order; assuming {' '.join(FEATURE_ORDER)}")
    elif tuple(checkpoint.features) != FEATURE_ORDER:
        raise ArtifactParseError(
            f"classifier features {' '.join(checkpoint.features)} != expected {' '.join(FEATURE_ORDER)}",
            str(path),
        )
    return checkpoint.params
