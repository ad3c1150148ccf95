"""
Redaction Module
Separable Gaussian blur and mask-guided compositing of generated images
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from concept_guard.errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)


class BorderMode(str, Enum):
    REFLECT = 'reflect'


@dataclass(frozen=True)
class BlurConfig:
    """
    Gaussian blur settings.

    Attributes:
        sigma: Standard deviation in pixels; None means image width / 32
        radius: Kernel half-width; None means ceil(3 * sigma)
        border: Padding rule at the image edge
    """
    sigma: Optional[float] = None
    radius: Optional[int] = None
    border: BorderMode = BorderMode.REFLECT

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.radius is not None and self.radius < 1:
            raise ParameterError(f"radius must be at least 1, got {self.radius}")
        object.__setattr__(self, 'border', BorderMode(self.border))

    def resolve(self, width: int) -> Tuple[float, int]:
        """Concrete (sigma, radius) for an image of the given width."""
        sigma = self.sigma if self.sigma is not None else width / 32.0
        radius = self.radius if self.radius is not None else max(1, math.ceil(3.0 * sigma))
        return float(sigma), int(radius)


def as_image(pixels) -> np.ndarray:
    """
    Validate an image buffer and return it as an H x W x C float array.

    A 2-D array is treated as a single-channel image.

    Raises:
        ShapeError: If the layout is not H x W x {1, 3}
        ParameterError: If any pixel is outside [0, 1] or not finite
    """
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"image must be H x W x C with C in (1, 3), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError("image pixels must be finite and within [0, 1]")
    return arr


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """
    Normalised 1-D Gaussian taps for offsets -radius..radius.

    Args:
        sigma: Standard deviation, > 0
        radius: Half-width, >= 1

    Returns:
        Symmetric kernel of length 2*radius + 1 summing to 1
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if int(radius) < 1:
        raise ParameterError(f"radius must be at least 1, got {radius}")
    offsets = np.arange(-int(radius), int(radius) + 1, dtype=np.float64)
    taps = np.exp(-(offsets * offsets) / (2.0 * sigma * sigma))
    taps /= taps.sum()
    # mirror so k[i] == k[-i] holds bit-exactly
    return 0.5 * (taps + taps[::-1])


def _convolve_axis(plane: np.ndarray, kernel: np.ndarray, axis: int, border: BorderMode) -> np.ndarray:
    radius = kernel.size // 2
    pad = [(0, 0)] * plane.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(plane, pad, mode=border.value)
    length = plane.shape[axis]
    out = np.zeros_like(plane)
    for tap, weight in enumerate(kernel):
        window = np.take(padded, np.arange(tap, tap + length), axis=axis)
        out += weight * window
    return out


def blur(image, cfg: BlurConfig = BlurConfig()) -> np.ndarray:
    """
    Separable Gaussian blur: horizontal pass, then vertical, per channel.

    Returns:
        Blurred image clipped to [0, 1]
    """
    img = as_image(image)
    sigma, radius = cfg.resolve(img.shape[1])
    kernel = gaussian_kernel(sigma, radius)
    horizontal = _convolve_axis(img, kernel, axis=1, border=cfg.border)
    vertical = _convolve_axis(horizontal, kernel, axis=0, border=cfg.border)
    return np.clip(vertical, 0.0, 1.0)


def _as_mask(mask, height: int, width: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != (height, width):
        raise ShapeError(f"mask shape {m.shape} != image plane {(height, width)}")
    return m.astype(bool)


def redact(original, mask, cfg: BlurConfig = BlurConfig()) -> np.ndarray:
    """
    Composite the blurred image over the original where the mask is set.

    Pixels outside the mask are copied from the original bit-for-bit.

    Args:
        original: Provisional image x0
        mask: H x W binary mask
        cfg: Blur settings

    Returns:
        Redacted image
    """
    img = as_image(original)
    m = _as_mask(mask, img.shape[0], img.shape[1])
    if not m.any():
        return img.copy()
    blurred = blur(img, cfg)
    logger.debug(f"Redacting {int(m.sum())} of {m.size} pixels")
    return np.where(m[:, :, None], blurred, img)


def coverage(mask, pixels) -> float:
    """
    Fraction of a pixel set that the mask covers.

    Raises:
        ParameterError: If the pixel set is empty
    """
    target = np.asarray(pixels, dtype=bool)
    m = _as_mask(mask, *target.shape)
    total = int(target.sum())
    if total == 0:
        raise ParameterError("coverage of an empty pixel set")
    return int((m & target).sum()) / total
