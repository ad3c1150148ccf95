"""
Netpbm Codec
Binary PGM (P5) and PPM (P6) reading and writing for [0, 1] image buffers
"""

import logging
from typing import List, Tuple

import numpy as np

from concept_guard.errors import ArtifactParseError, ShapeError
from storage.files import PathLike, atomic_write

logger = logging.getLogger(__name__)

MAXVAL = 255


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] reals to 0..255 with round-half-up."""
    values = np.floor(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * MAXVAL + 0.5)
    return values.astype(np.uint8)


def encode_netpbm(image: np.ndarray) -> bytes:
    """
    Encode an H x W (x 1) buffer as P5 or an H x W x 3 buffer as P6.

    Raises:
        ShapeError: On any other layout
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b'P5'
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b'P6'
    else:
        raise ShapeError(f"cannot encode image of shape {arr.shape} as netpbm")
    height, width = arr.shape[:2]
    header = magic + b'\n' + f"{width} {height}\n{MAXVAL}\n".encode('ascii')
    return header + quantize(arr).tobytes()


def write_netpbm(path: PathLike, image: np.ndarray) -> None:
    with atomic_write(path, 'wb') as fh:
        fh.write(encode_netpbm(image))
    logger.debug(f"Image written: {path}")


def _header_tokens(data: bytes, count: int, path: str) -> Tuple[List[bytes], int]:
    """Read whitespace-separated header tokens, skipping '#' comments."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ArtifactParseError("truncated netpbm header", path)
        if data[pos:pos + 1] == b'#':
            end = data.find(b'\n', pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_netpbm(data: bytes, path: str = '<bytes>') -> np.ndarray:
    """
    Decode P5/P6 bytes into an H x W x C float array in [0, 1].

    Raises:
        ArtifactParseError: On an unknown magic, bad header or short raster
    """
    tokens, offset = _header_tokens(data, 4, path)
    magic = tokens[0]
    if magic not in (b'P5', b'P6'):
        raise ArtifactParseError(f"unsupported netpbm magic {magic!r}", path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ArtifactParseError("non-integer netpbm header field", path) from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise ArtifactParseError(f"unsupported dimensions or maxval ({width}x{height}, {maxval})", path)
    channels = 1 if magic == b'P5' else 3
    expected = width * height * channels
    if offset >= len(data):
        raise ArtifactParseError("missing raster", path)
    raster = np.frombuffer(data, dtype=np.uint8, count=-1, offset=offset)
    if raster.size < expected:
        raise ArtifactParseError(f"raster has {raster.size} bytes, expected {expected}", path)
    return raster[:expected].reshape(height, width, channels).astype(np.float64) / maxval


def read_netpbm(path: PathLike) -> np.ndarray:
    with open(path, 'rb') as fh:
        return decode_netpbm(fh.read(), str(path))
