"""
Localization Module
Re-encoding localization: latent patch perturbation, sensitivity maps and Otsu binarization
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Protocol, Tuple

import numpy as np
import pandas as pd

from concept_guard.errors import DegenerateInputError, ParameterError, ShapeError
from concept_guard.numerics import Rng, as_embedding, cosine_similarity
from concept_guard.utils.netpbm import write_netpbm
from storage.files import PathLike, atomic_write

logger = logging.getLogger(__name__)


class GeneratorBackend(Protocol):
    """
    Contract a text-to-image backend offers the pipeline.

    Images are H x W x C arrays in [0, 1]; latents are C_L x H_L x W_L.
    """

    def generate(self, prompt_embedding: np.ndarray, seed: int) -> np.ndarray:
        ...

    def encode(self, image: np.ndarray) -> np.ndarray:
        ...

    def decode(self, latent: np.ndarray) -> np.ndarray:
        ...

    def image_embed(self, image: np.ndarray) -> np.ndarray:
        ...


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True)
class LocalizationConfig:
    """
    Attributes:
        grid_size: Patches per side N
        beta: Perturbation strength
        hist_levels: Otsu histogram levels K
        seed: Root seed for the per-patch noise substreams
    """
    grid_size: int = 8
    beta: float = 1.0
    hist_levels: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 2:
            raise ParameterError(f"grid_size must be at least 2, got {self.grid_size}")
        if self.beta < 0:
            raise ParameterError(f"beta must be non-negative, got {self.beta}")
        if self.hist_levels < 2:
            raise ParameterError(f"hist_levels must be at least 2, got {self.hist_levels}")


@dataclass(frozen=True, eq=False)
class SensitivityMap:
    """N x N grid of non-negative similarity drops."""
    grid: np.ndarray

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ShapeError(f"sensitivity grid must be square, got {grid.shape}")
        if not np.all(np.isfinite(grid)) or grid.min() < 0.0:
            raise ParameterError("sensitivity values must be finite and non-negative")
        grid.setflags(write=False)
        object.__setattr__(self, 'grid', grid)

    @property
    def grid_size(self) -> int:
        return self.grid.shape[0]

    def argmax(self) -> Tuple[int, int]:
        flat = int(np.argmax(self.grid))
        return divmod(flat, self.grid_size)


@dataclass(frozen=True, eq=False)
class Localization:
    """Everything stage two produces for one flagged image."""
    sensitivity: SensitivityMap
    t_star: int
    grid_mask: np.ndarray
    pixel_mask: np.ndarray


# ============================================
# SENSITIVITY
# ============================================

def _check_latent(latent, grid_size: int) -> np.ndarray:
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"latent must be C x H x W, got shape {z.shape}")
    _, height, width = z.shape
    if height % grid_size or width % grid_size:
        raise ShapeError(f"latent {height}x{width} is not divisible by grid size {grid_size}")
    return z


def _reference(reference) -> np.ndarray:
    r = as_embedding(reference, 'reference')
    if not np.any(r):
        raise DegenerateInputError("reference embedding is all zero")
    return r


def patch_sensitivity(
    latent0,
    baseline_score: float,
    reference,
    backend: GeneratorBackend,
    cfg: LocalizationConfig,
    rng: Rng,
    i: int,
    j: int,
) -> float:
    """
    Similarity drop when patch (i, j) of the latent is noised and decoded.

    The noise comes from ``rng.substream(i, j)``, so the value does not
    depend on which other patches were evaluated or in what order.

    Returns:
        max(0, baseline_score - S(f_I(decode(z0 + beta * M_ij * eps)), r))
    """
    z0 = _check_latent(latent0, cfg.grid_size)
    channels, height, width = z0.shape
    ph, pw = height // cfg.grid_size, width // cfg.grid_size
    noise = rng.substream(i, j).gaussian((channels, ph, pw))
    perturbed = z0.copy()
    perturbed[:, i * ph:(i + 1) * ph, j * pw:(j + 1) * pw] += cfg.beta * noise
    decoded = backend.decode(perturbed)
    score = cosine_similarity(backend.image_embed(decoded), reference)
    return max(0.0, baseline_score - score)


def sensitivity_map(
    latent0,
    baseline_image,
    reference,
    backend: GeneratorBackend,
    cfg: LocalizationConfig = LocalizationConfig(),
    rng: Optional[Rng] = None,
) -> SensitivityMap:
    """
    Build the N x N sensitivity map of a latent.

    The baseline term is the similarity of the whole unperturbed image to r
    and is shared by every patch. Exactly N*N decode calls are made.

    Args:
        latent0: Encoded provisional image z0
        baseline_image: The provisional image x0
        reference: Unsafe reference embedding r
        backend: Generator backend providing decode and image_embed
        cfg: Grid size, beta and seed
        rng: Noise stream; defaults to Rng(cfg.seed)

    Raises:
        ShapeError: If the latent is not divisible by the grid
        DegenerateInputError: On a zero reference or zero image embedding
    """
    z0 = _check_latent(latent0, cfg.grid_size)
    r = _reference(reference)
    rng = rng if rng is not None else Rng(cfg.seed)
    baseline_score = cosine_similarity(backend.image_embed(baseline_image), r)
    n = cfg.grid_size
    grid = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            grid[i, j] = patch_sensitivity(z0, baseline_score, r, backend, cfg, rng, i, j)
    logger.debug(f"Sensitivity map {n}x{n}: max delta {grid.max():.6f}, baseline {baseline_score:.6f}")
    return SensitivityMap(grid)


# ============================================
# OTSU
# ============================================

def quantize_levels(values, hist_levels: int) -> np.ndarray:
    """
    Min-max normalise and map to integer levels 1..K (round half up).

    A constant input maps every cell to level 1.
    """
    if hist_levels < 2:
        raise ParameterError(f"hist_levels must be at least 2, got {hist_levels}")
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ParameterError("map values must be finite")
    low, high = float(v.min()), float(v.max())
    if high == low:
        return np.ones(v.shape, dtype=np.int64)
    norm = (v - low) / (high - low)
    return 1 + np.floor(norm * (hist_levels - 1) + 0.5).astype(np.int64)


def _class_sums(levels: np.ndarray, hist_levels: int) -> Tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(levels.ravel(), minlength=hist_levels + 1)[1:hist_levels + 1]
    weighted = counts * np.arange(1, hist_levels + 1)
    return counts, weighted


def between_class_variance(levels, hist_levels: int) -> np.ndarray:
    """
    sigma_b^2(t) for t = 1..K-1, where class 0 holds levels <= t.

    An empty class gives 0. Values are computed from exact integer class
    sums, so equal variances compare equal.
    """
    lv = np.asarray(levels, dtype=np.int64)
    if lv.size == 0 or lv.min() < 1 or lv.max() > hist_levels:
        raise ParameterError(f"levels must lie in 1..{hist_levels}")
    return np.array([float(v) for v in _exact_variances(lv, hist_levels)])


def _exact_variances(levels: np.ndarray, hist_levels: int):
    counts, weighted = _class_sums(levels, hist_levels)
    total = int(counts.sum())
    total_sum = int(weighted.sum())
    w0 = s0 = 0
    for t in range(1, hist_levels):
        w0 += int(counts[t - 1])
        s0 += int(weighted[t - 1])
        w1, s1 = total - w0, total_sum - s0
        if w0 == 0 or w1 == 0:
            yield Fraction(0)
            continue
        # a0 a1 (mu0 - mu1)^2 with a = w / n and mu = s / w
        yield Fraction((w1 * s0 - w0 * s1) ** 2, w0 * w1 * total * total)


def otsu_levels(levels, hist_levels: int) -> Tuple[int, np.ndarray]:
    """
    Otsu threshold over pre-quantised levels 1..K.

    Args:
        levels: Integer level per cell
        hist_levels: K

    Returns:
        (t_star, mask) where mask marks levels > t_star. The smallest
        maximiser wins ties. When the variance is zero for every t the
        result is (K, all-zero mask).
    """
    lv = np.asarray(levels, dtype=np.int64)
    if lv.size == 0 or lv.min() < 1 or lv.max() > hist_levels:
        raise ParameterError(f"levels must lie in 1..{hist_levels}")
    best_t, best = hist_levels, Fraction(0)
    for t, variance in enumerate(_exact_variances(lv, hist_levels), start=1):
        if variance > best:
            best_t, best = t, variance
    if best == 0:
        return hist_levels, np.zeros(lv.shape, dtype=bool)
    return best_t, lv > best_t


def otsu_threshold(map_values, hist_levels: int = 256) -> Tuple[int, np.ndarray]:
    """
    Quantise a real-valued map into K levels and binarise it with Otsu.

    Returns:
        (t_star, binary mask of the upper class)
    """
    return otsu_levels(quantize_levels(map_values, hist_levels), hist_levels)


def upsample_mask(grid_mask, target: Tuple[int, int]) -> np.ndarray:
    """
    Nearest-neighbour block replication of an N x N mask to H x W.

    Pixel (u, v) takes cell (floor(u N / H), floor(v N / W)).

    Raises:
        ParameterError: If the target is smaller than the grid
    """
    grid = np.asarray(grid_mask, dtype=bool)
    if grid.ndim != 2:
        raise ShapeError(f"grid mask must be 2-D, got {grid.shape}")
    height, width = (int(t) for t in target)
    rows_n, cols_n = grid.shape
    if height < rows_n or width < cols_n:
        raise ParameterError(f"target {height}x{width} is smaller than grid {rows_n}x{cols_n}")
    rows = (np.arange(height) * rows_n) // height
    cols = (np.arange(width) * cols_n) // width
    return grid[rows[:, None], cols[None, :]]


def localize(
    image,
    reference,
    backend: GeneratorBackend,
    cfg: LocalizationConfig = LocalizationConfig(),
    rng: Optional[Rng] = None,
) -> Localization:
    """Encode, build the sensitivity map, binarise it and lift it to pixels."""
    img = np.asarray(image, dtype=np.float64)
    latent = backend.encode(img)
    smap = sensitivity_map(latent, img, reference, backend, cfg, rng)
    t_star, grid_mask = otsu_threshold(smap.grid, cfg.hist_levels)
    pixel_mask = upsample_mask(grid_mask, img.shape[:2])
    logger.debug(f"Otsu t*={t_star}, {int(grid_mask.sum())} of {grid_mask.size} cells flagged")
    return Localization(smap, t_star, grid_mask, pixel_mask)


# ============================================
# EXPORTS
# ============================================

def export_sensitivity(smap: SensitivityMap, pgm_path: PathLike, csv_path: PathLike) -> None:
    """Write the map as a min-max normalised P5 image and its raw values as CSV."""
    grid = smap.grid
    span = float(grid.max() - grid.min())
    scaled = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
    write_netpbm(pgm_path, scaled)
    rows, cols = np.indices(grid.shape)
    frame = pd.DataFrame({'row': rows.ravel(), 'col': cols.ravel(), 'delta': grid.ravel()})
    with atomic_write(csv_path) as fh:
        frame.to_csv(fh, index=False, float_format='%.17g', lineterminator='\n')


def export_mask(mask, path: PathLike) -> None:
    """Write a binary mask as P5 with values {0, 255}."""
    write_netpbm(path, np.asarray(mask, dtype=bool).astype(np.float64))
