"""
Netpbm Codec Tests
"""

import numpy as np
import pytest

from concept_guard.errors import ArtifactParseError, ShapeError
from concept_guard.utils.netpbm import decode_netpbm, encode_netpbm, quantize, read_netpbm, write_netpbm


def test_quantize_rounds_half_up():
    assert quantize(np.array([0.0, 0.5, 1.0, 1.7, -0.2])).tolist() == [0, 128, 255, 255, 0]


def test_gray_header_and_raster():
    image = np.array([[0.0, 1.0], [1.0, 0.0]])
    data = encode_netpbm(image)
    assert data.startswith(b'P5\n2 2\n255\n')
    assert data[-4:] == bytes([0, 255, 255, 0])


def test_color_image_is_p6(tmp_path):
    image = np.zeros((3, 2, 3))
    image[:, :, 2] = 1.0
    path = tmp_path / 'blue.ppm'
    write_netpbm(path, image)
    assert path.read_bytes()[:2] == b'P6'
    np.testing.assert_array_equal(read_netpbm(path), image)


def test_quantized_values_survive_a_reload(tmp_path):
    levels = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
    path = tmp_path / 'ramp.pgm'
    write_netpbm(path, levels[:, :, None])
    np.testing.assert_array_equal(read_netpbm(path)[:, :, 0], levels)


def test_header_comments_are_skipped():
    data = b'P5\n# made by hand\n1 1\n255\n' + bytes([51])
    assert decode_netpbm(data)[0, 0, 0] == pytest.approx(0.2)


@pytest.mark.parametrize('data,message', [
    (b'P2\n1 1\n255\n0', 'magic'),
    (b'P5\n1 1\n', 'truncated'),
    (b'P5\n2 2\n255\n\x00', 'raster'),
    (b'P5\nx 1\n255\n\x00', 'non-integer'),
    (b'P5\n1 1\n255', 'missing raster'),
])
def test_malformed_inputs(data, message):
    with pytest.raises(ArtifactParseError, match=message):
        decode_netpbm(data)


def test_unsupported_layout():
    with pytest.raises(ShapeError):
        encode_netpbm(np.zeros((2, 2, 2)))
