"""
Schemas Module
Pydantic models for run configuration and the JSON records the CLI emits
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from concept_guard.concept_bank import Aggregator
from concept_guard.harness import PipelineSettings, ProbeConfig, ProbeTarget, SweepParameter
from concept_guard.localization import LocalizationConfig
from concept_guard.numerics import Activation
from concept_guard.pipeline import PipelineConfig, SafetyDecision
from concept_guard.redaction import BlurConfig
from concept_guard.toy_world import ToySpec
from concept_guard.trainer import LossMode, TrainConfig


# ============================================
# BASE SCHEMAS
# ============================================

class BaseSchema(BaseModel):
    """Base schema with common configuration."""
    model_config = ConfigDict(extra='forbid', use_enum_values=False)


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return value


# ============================================
# RUN CONFIGURATION
# ============================================

class RunConfig(BaseSchema):
    """
    Flat run configuration; every key of a config file maps to one field.

    Unknown keys are rejected.
    """
    # Paths
    dataset: Optional[str] = None
    concepts: Optional[str] = None
    bank: Optional[str] = None
    projection: Optional[str] = None
    classifier: Optional[str] = None
    out_dir: Optional[str] = None

    # Stage one
    tau_safe: float = Field(default=0.05, ge=0.0, le=1.0)
    k: int = Field(default=11, ge=1)
    aggregator: Aggregator = Aggregator.MEAN
    gamma: float = Field(default=0.1, gt=0.0)

    # Localization
    grid_size: int = Field(default=8, ge=2)
    beta: float = Field(default=1.0, ge=0.0)
    hist_levels: int = Field(default=256, ge=2)
    use_source_reference: bool = True

    # Blur (unset means width / 32 and ceil(3 sigma))
    blur_sigma: Optional[float] = Field(default=None, gt=0.0)
    blur_radius: Optional[int] = Field(default=None, ge=1)

    # Projection training
    hidden_dims: List[int] = Field(default_factory=list)
    activation: Activation = Activation.RELU
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, ge=0.0)
    epochs: int = Field(default=50, ge=0)
    temperature: float = Field(default=0.1, gt=0.0)
    loss_mode: LossMode = LossMode.IN_BATCH
    queue_k: int = Field(default=11, ge=1)

    # Classifier training
    cls_hidden_dims: List[int] = Field(default_factory=lambda: [8])
    cls_activation: Activation = Activation.TANH
    cls_batch_size: int = Field(default=64, ge=1)
    cls_lr: float = Field(default=1e-3, ge=0.0)
    cls_epochs: int = Field(default=50, ge=0)

    # Toy world
    embed_dim: int = Field(default=64, ge=2)
    image_size: int = Field(default=64, ge=2)
    latent_downsample: int = Field(default=4, ge=1)
    n_per_class: int = Field(default=200, ge=1)
    noise_level: float = Field(default=0.1, ge=0.0)
    world_seed: int = Field(default=0, ge=0, lt=2 ** 64)

    # Sweeps
    parameter: SweepParameter = SweepParameter.TAU_SAFE
    values: List[float] = Field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20, 0.25])

    # Probing attacker
    budget: int = Field(default=50, ge=1)
    probe_target: Optional[ProbeTarget] = None
    harmful_concept: str = 'nudity'
    probe_step: float = Field(default=0.25, gt=0.0)
    filter_tau: float = Field(default=0.8, ge=-1.0, le=1.0)
    probe_runs: int = Field(default=50, ge=1)

    # Gradient checks
    trials: int = Field(default=100, ge=1)

    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @field_validator('hidden_dims', 'cls_hidden_dims', 'values', mode='before')
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @field_validator('probe_target', mode='before')
    @classmethod
    def resolve_target_alias(cls, value):
        return ProbeTarget(value) if isinstance(value, str) and value else value

    @field_validator('hidden_dims', 'cls_hidden_dims')
    @classmethod
    def positive_dims(cls, value: List[int]) -> List[int]:
        if any(d < 1 for d in value):
            raise ValueError('layer sizes must be positive')
        return value

    @field_validator('values')
    @classmethod
    def non_empty_values(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError('at least one sweep value is required')
        return value

    # ---- section accessors ----

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(self.tau_safe, self.k, self.aggregator, self.gamma)

    def localization_config(self) -> LocalizationConfig:
        return LocalizationConfig(self.grid_size, self.beta, self.hist_levels, self.seed)

    def blur_config(self) -> BlurConfig:
        return BlurConfig(self.blur_sigma, self.blur_radius)

    def pipeline_settings(self) -> PipelineSettings:
        return PipelineSettings(
            self.pipeline_config(), self.localization_config(), self.blur_config(),
            self.use_source_reference,
        )

    def projection_dims(self, input_dim: int) -> List[int]:
        hidden = self.hidden_dims or [2 * input_dim]
        return [input_dim] + list(hidden) + [input_dim]

    def classifier_dims(self) -> List[int]:
        return [2] + list(self.cls_hidden_dims) + [1]

    def projection_train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.lr, self.epochs, self.temperature, self.seed,
                           self.loss_mode, self.queue_k)

    def classifier_train_config(self) -> TrainConfig:
        return TrainConfig(self.cls_batch_size, self.cls_lr, self.cls_epochs, self.temperature,
                           self.seed)

    def toy_spec(self) -> ToySpec:
        return ToySpec(embed_dim=self.embed_dim, image_size=self.image_size,
                       latent_downsample=self.latent_downsample, seed=self.world_seed)

    def probe_config(self, target: ProbeTarget) -> ProbeConfig:
        return ProbeConfig(budget=self.budget, target=target, harmful_concept=self.harmful_concept,
                           step=self.probe_step, filter_tau=self.filter_tau, seed=self.seed)


# ============================================
# OUTPUT RECORDS
# ============================================

class ScoreRecord(BaseSchema):
    """One JSON-lines row of the score command."""
    prompt_id: str
    s: float
    d_mal: float
    d_ben: float
    route: str

    @classmethod
    def from_decision(cls, prompt_id: str, decision: SafetyDecision) -> 'ScoreRecord':
        return cls(
            prompt_id=prompt_id,
            s=decision.score,
            d_mal=decision.distances.d_mal,
            d_ben=decision.distances.d_ben,
            route=decision.route.value,
        )


class DecisionRecord(ScoreRecord):
    """Per-prompt decision written next to each sanitized image."""
    logit: float
    neighbor_ids: List[int]
    image: str
    mask: Optional[str] = None
    sensitivity: Optional[str] = None
    t_star: Optional[int] = None
    masked_pixels: int = 0
