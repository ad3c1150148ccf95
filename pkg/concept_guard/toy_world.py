"""
Toy World Module
Deterministic stand-in for the text encoder, image encoder, latent codec and generator

The image encoder does not look at shape. Every concept owns an intensity
level, and a pixel responds to it with a triangle: 1 at the level, falling
linearly to 0 at RESPONSE_WIDTH away. The mean response per concept weights
that concept's axis, plus a small neutral component. Blurring a blob into
the background pulls its pixels off the level and its response toward 0.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from concept_guard.concept_bank import BENIGN_CONCEPT, Polarity, polarity_of
from concept_guard.errors import DegenerateInputError, ParameterError, ShapeError
from concept_guard.numerics import Rng, as_embedding
from concept_guard.trainer import Label, PromptRecord
from storage.files import PathLike, atomic_write

logger = logging.getLogger(__name__)

NEUTRAL_AXIS = 'neutral'

# width of the triangular intensity response around a concept's level
RESPONSE_WIDTH = 0.1
NEUTRAL_WEIGHT = 0.05


# ============================================
# SPEC
# ============================================

@dataclass(frozen=True)
class ToySpec:
    """
    Parameters of the synthetic world.

    Each concept owns an orthonormal embedding axis and a signature blob of
    flat intensity. An extra neutral axis anchors image embeddings so they
    never vanish.
    """
    embed_dim: int = 64
    concepts: Tuple[str, ...] = (BENIGN_CONCEPT, 'nudity', 'violence')
    concept_levels: Tuple[float, ...] = (0.35, 0.9, 0.65)
    image_size: int = 64
    latent_downsample: int = 4
    blob_threshold: float = 0.15
    blob_radius: int = 12
    placement_grid: int = 8
    background: float = 0.1
    texture_amplitude: float = 0.03
    seed: int = 0
    axes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'concepts', tuple(self.concepts))
        object.__setattr__(self, 'concept_levels', tuple(float(v) for v in self.concept_levels))
        if len(self.concepts) != len(self.concept_levels):
            raise ParameterError("one intensity level per concept required")
        if len(set(self.concepts)) != len(self.concepts) or NEUTRAL_AXIS in self.concepts:
            raise ParameterError(f"concept labels must be unique and not {NEUTRAL_AXIS!r}")
        if self.embed_dim < len(self.concepts) + 1:
            raise ParameterError("embed_dim too small for one axis per concept plus the neutral axis")
        if self.image_size % self.latent_downsample:
            raise ShapeError(
                f"image size {self.image_size} not divisible by downsample {self.latent_downsample}"
            )
        if self.image_size % self.placement_grid:
            raise ShapeError("image size must be divisible by the placement grid")
        for level in self.concept_levels:
            if abs(level - self.background) <= RESPONSE_WIDTH + self.texture_amplitude:
                raise ParameterError(f"concept level {level} overlaps the background band")
        object.__setattr__(self, 'axes', _build_axes(self.embed_dim, len(self.concepts) + 1, self.seed))

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_downsample

    def axis(self, concept: str) -> np.ndarray:
        if concept == NEUTRAL_AXIS:
            return self.axes[-1]
        try:
            return self.axes[self.concepts.index(concept)]
        except ValueError:
            raise ParameterError(f"unknown concept {concept!r}") from None

    def level(self, concept: str) -> float:
        return self.concept_levels[self.concepts.index(concept)]

    @property
    def harmful_concepts(self) -> Tuple[str, ...]:
        return tuple(c for c in self.concepts if polarity_of(c) is Polarity.MALICIOUS)


def _build_axes(dim: int, count: int, seed: int) -> np.ndarray:
    """Orthonormal rows from a seeded Gaussian matrix (Gram-Schmidt via QR)."""
    gaussian = Rng(seed).substream('axes').gaussian((dim, count))
    q, r = np.linalg.qr(gaussian)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    axes = (q * signs).T.copy()
    axes.setflags(write=False)
    return axes


# ============================================
# TEXT ENCODER
# ============================================

def toy_text_encode(
    concept_mix: Mapping[str, float],
    spec: ToySpec,
    noise_level: float = 0.0,
    rng: Optional[Rng] = None,
) -> np.ndarray:
    """
    Embed a concept mix as a unit vector.

    The weighted sum of concept axes is normalised, perturbed with Gaussian
    noise of expected norm ``noise_level`` and normalised again.

    Raises:
        ParameterError: On unknown concepts or non-finite weights
        DegenerateInputError: If every weight is zero
    """
    vector = np.zeros(spec.embed_dim)
    for concept, weight in concept_mix.items():
        if not math.isfinite(weight):
            raise ParameterError(f"weight for {concept!r} is not finite")
        vector = vector + float(weight) * spec.axis(concept)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise DegenerateInputError("concept mix has no nonzero weight")
    vector = vector / norm
    if noise_level:
        if rng is None:
            raise ParameterError("noise requires an rng")
        vector = vector + noise_level * rng.gaussian(spec.embed_dim) / math.sqrt(spec.embed_dim)
        vector = vector / float(np.linalg.norm(vector))
    return vector


# ============================================
# SCENES
# ============================================

@dataclass(frozen=True)
class Blob:
    """A concept's signature disk in image pixel coordinates."""
    concept: str
    center_u: float
    center_v: float
    radius: float
    intensity: float

    @property
    def polarity(self) -> Polarity:
        return polarity_of(self.concept)


@dataclass(frozen=True, eq=False)
class PlantedScene:
    """
    Ground truth for a generated image.

    ``label_map`` holds, per pixel, the index into ``blobs`` of the blob that
    painted it, or -1 for background.
    """
    blobs: Tuple[Blob, ...]
    label_map: np.ndarray

    def blob_mask(self, index: int) -> np.ndarray:
        return self.label_map == index

    @property
    def harmful_indices(self) -> List[int]:
        return [i for i, b in enumerate(self.blobs) if b.polarity is Polarity.MALICIOUS]

    @property
    def harmful_mask(self) -> np.ndarray:
        mask = np.zeros(self.label_map.shape, dtype=bool)
        for index in self.harmful_indices:
            mask |= self.blob_mask(index)
        return mask

    def to_dict(self) -> dict:
        blobs = []
        for index, blob in enumerate(self.blobs):
            rows, cols = np.nonzero(self.blob_mask(index))
            record = {
                'concept': blob.concept,
                'polarity': blob.polarity.value,
                'center_u': blob.center_u,
                'center_v': blob.center_v,
                'radius': blob.radius,
                'intensity': blob.intensity,
                'pixel_count': int(rows.size),
            }
            if rows.size:
                record['bbox'] = [int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())]
            blobs.append(record)
        harmful = self.harmful_mask
        rows, cols = np.nonzero(harmful)
        return {
            'height': int(self.label_map.shape[0]),
            'width': int(self.label_map.shape[1]),
            'blobs': blobs,
            'harmful_pixel_count': int(harmful.sum()),
            'harmful_bboxes': [b['bbox'] for b in blobs if b['polarity'] == 'malicious' and 'bbox' in b],
            'harmful_bbox': (
                [int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())] if rows.size else None
            ),
        }


def export_scene(scene: PlantedScene, path: PathLike) -> None:
    """Write the scene oracle as JSON."""
    with atomic_write(path) as fh:
        json.dump(scene.to_dict(), fh, indent=2)
        fh.write('\n')


def _upsample(plane: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(plane, factor, axis=0), factor, axis=1)


def _place_blobs(concepts: Sequence[str], spec: ToySpec, rng: Rng) -> List[Tuple[str, float, float]]:
    cell = spec.image_size // spec.placement_grid
    # interior cells keep the disk inside the frame
    span = range(1, spec.placement_grid - 1)
    cells = [(a, b) for a in span for b in span]
    placed: List[Tuple[str, float, float]] = []
    for concept in concepts:
        order = rng.substream('place', concept).permutation(len(cells))
        for pick in order:
            a, b = cells[int(pick)]
            u, v = a * cell + cell / 2.0, b * cell + cell / 2.0
            if all(math.hypot(u - pu, v - pv) > 2 * spec.blob_radius for _, pu, pv in placed):
                placed.append((concept, u, v))
                break
        else:
            logger.warning(f"No free placement for concept {concept!r}; blob omitted")
    return placed


def toy_generate(prompt_embedding, spec: ToySpec, rng: Rng) -> Tuple[np.ndarray, PlantedScene]:
    """
    Render the image a prompt embedding asks for.

    Every concept whose axis projection exceeds ``blob_threshold`` gets its
    signature disk. Rendering happens at latent resolution and is block
    replicated, so the image survives an encode/decode round trip exactly.

    Returns:
        (H x W x 1 image in [0, 1], scene oracle)
    """
    h = as_embedding(prompt_embedding, 'prompt embedding')
    if h.size != spec.embed_dim:
        raise ShapeError(f"prompt embedding dim {h.size} != toy dim {spec.embed_dim}")
    factor = spec.latent_downsample
    size = spec.latent_size

    texture = rng.substream('texture').uniform(-spec.texture_amplitude, spec.texture_amplitude,
                                               (size, size))
    plane = spec.background + texture
    labels = np.full((size, size), -1, dtype=np.int64)

    active = [c for c in spec.concepts if float(h @ spec.axis(c)) > spec.blob_threshold]
    centres = (np.arange(size) + 0.5) * factor
    blobs = []
    for index, (concept, u, v) in enumerate(_place_blobs(active, spec, rng)):
        inside = np.hypot(centres[:, None] - u, centres[None, :] - v) <= spec.blob_radius
        plane = np.where(inside, spec.level(concept), plane)
        labels = np.where(inside, index, labels)
        blobs.append(Blob(concept, u, v, float(spec.blob_radius), spec.level(concept)))

    image = _upsample(np.clip(plane, 0.0, 1.0), factor)[:, :, None]
    scene = PlantedScene(tuple(blobs), _upsample(labels, factor))
    return image, scene


# ============================================
# LATENT CODEC AND IMAGE ENCODER
# ============================================

def _block_mean(values: np.ndarray, factor: int, axis: int) -> np.ndarray:
    if factor & (factor - 1) == 0:
        # pairwise halving keeps averages of equal values exact
        while factor > 1:
            head = np.take(values, np.arange(0, values.shape[axis], 2), axis=axis)
            tail = np.take(values, np.arange(1, values.shape[axis], 2), axis=axis)
            values = (head + tail) / 2.0
            factor //= 2
        return values
    shape = list(values.shape)
    shape[axis:axis + 1] = [shape[axis] // factor, factor]
    return values.reshape(shape).mean(axis=axis + 1)


def toy_encode(image, spec: ToySpec) -> np.ndarray:
    """Block-average an H x W x C image into a C x H/f x W/f latent."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[:2] != (spec.image_size, spec.image_size):
        raise ShapeError(f"image {img.shape[:2]} does not match toy size {spec.image_size}")
    factor = spec.latent_downsample
    planes = np.moveaxis(img, 2, 0)
    planes = _block_mean(planes, factor, axis=1)
    return _block_mean(planes, factor, axis=2)


def toy_decode(latent, spec: ToySpec) -> np.ndarray:
    """Block-replicate a latent back to pixels, clipped to [0, 1]."""
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim != 3 or z.shape[1:] != (spec.latent_size, spec.latent_size):
        raise ShapeError(f"latent shape {z.shape} does not match toy latent size {spec.latent_size}")
    factor = spec.latent_downsample
    pixels = np.repeat(np.repeat(z, factor, axis=1), factor, axis=2)
    return np.clip(np.moveaxis(pixels, 0, 2), 0.0, 1.0)


def concept_responses(image, spec: ToySpec) -> Dict[str, float]:
    """Mean triangular response of the image intensities to each concept level."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    return {
        concept: float(np.maximum(0.0, 1.0 - np.abs(gray - level) / RESPONSE_WIDTH).mean())
        for concept, level in zip(spec.concepts, spec.concept_levels)
    }


def toy_image_embed(image, spec: ToySpec) -> np.ndarray:
    """
    Image embedding: concept responses mapped onto the concept axes.

    A small neutral component keeps background-only images well defined.
    """
    vector = NEUTRAL_WEIGHT * spec.axis(NEUTRAL_AXIS)
    for concept, response in concept_responses(image, spec).items():
        vector = vector + response * spec.axis(concept)
    return vector / float(np.linalg.norm(vector))


# ============================================
# BACKEND
# ============================================

class ToyBackend:
    """
    GeneratorBackend over the toy world.

    ``decode_calls`` counts every decode so callers can verify cost bounds.
    """

    def __init__(self, spec: Optional[ToySpec] = None):
        self.spec = spec or ToySpec()
        self.decode_calls = 0

    def __repr__(self) -> str:
        return f"ToyBackend(dim={self.spec.embed_dim}, size={self.spec.image_size})"

    def reset_counter(self) -> None:
        self.decode_calls = 0

    def render(self, prompt_embedding, seed: int) -> Tuple[np.ndarray, PlantedScene]:
        return toy_generate(prompt_embedding, self.spec, Rng(seed).substream('generate'))

    def generate(self, prompt_embedding, seed: int) -> np.ndarray:
        return self.render(prompt_embedding, seed)[0]

    def encode(self, image) -> np.ndarray:
        return toy_encode(image, self.spec)

    def decode(self, latent) -> np.ndarray:
        self.decode_calls += 1
        return toy_decode(latent, self.spec)

    def image_embed(self, image) -> np.ndarray:
        return toy_image_embed(image, self.spec)

    def text_encode(self, concept_mix: Mapping[str, float], noise_level: float = 0.0,
                    rng: Optional[Rng] = None) -> np.ndarray:
        return toy_text_encode(concept_mix, self.spec, noise_level, rng)


# ============================================
# DATASETS
# ============================================

def toy_dataset(
    spec: ToySpec,
    n_per_class: int,
    noise_level: float = 0.1,
    seed: int = 0,
    benign_context: float = 0.5,
    harmful_leak: float = 0.1,
) -> List[PromptRecord]:
    """
    Labelled synthetic prompts, malicious first then benign.

    Malicious prompts pair one harmful concept (cycled in ToySpec order) with
    up to ``benign_context`` of benign context; benign prompts carry up to
    ``harmful_leak`` of a harmful concept, below the blob threshold.

    Returns:
        PromptRecords with prompt ids ``mal-0000`` / ``ben-0000`` and concepts set
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be positive, got {n_per_class}")
    harmful = spec.harmful_concepts
    if not harmful or BENIGN_CONCEPT not in spec.concepts:
        raise ParameterError("toy dataset needs the benign concept and at least one harmful concept")
    root = Rng(seed).substream('dataset')
    records: List[PromptRecord] = []
    for i in range(n_per_class):
        rng = root.substream('malicious', i)
        concept = harmful[i % len(harmful)]
        mix = {concept: 1.0, BENIGN_CONCEPT: float(rng.uniform(0.0, benign_context))}
        h = toy_text_encode(mix, spec, noise_level, rng.substream('noise'))
        records.append(PromptRecord(f"mal-{i:04d}", h, Label.MALICIOUS, concept))
    for i in range(n_per_class):
        rng = root.substream('benign', i)
        leak = harmful[int(rng.integers(0, len(harmful)))]
        mix = {BENIGN_CONCEPT: 1.0, leak: float(rng.uniform(0.0, harmful_leak))}
        h = toy_text_encode(mix, spec, noise_level, rng.substream('noise'))
        records.append(PromptRecord(f"ben-{i:04d}", h, Label.BENIGN, BENIGN_CONCEPT))
    logger.info(f"Toy dataset: {len(records)} records, noise={noise_level}, seed={seed}")
    return records
