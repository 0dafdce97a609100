import numpy as np
import pytest

from freefix.errors import SceneFormatError, ShapeMismatchError
from freefix.images import AttributeImage, read_pfm, read_png, to_uint8, write_heatmap, write_pfm, write_png


def test_attribute_image_rejects_non_finite():
    with pytest.raises(ShapeMismatchError):
        AttributeImage(np.array([[[np.inf]]]))


def test_two_dimensional_input_gains_a_channel():
    img = AttributeImage(np.zeros((4, 5)))
    assert img.shape == (4, 5, 1)
    assert (img.height, img.width, img.channels) == (4, 5, 1)


def test_pfm_preserves_row_order_and_float32_values(tmp_path):
    data = np.arange(2 * 3 * 3, dtype=np.float64).reshape(2, 3, 3) / 7.0
    path = write_pfm(AttributeImage(data), tmp_path / "x.pfm")
    raw = path.read_bytes()
    assert raw.startswith(b"PF\n3 2\n-1.0\n")
    loaded = read_pfm(path)
    assert np.array_equal(loaded.data, data.astype(np.float32).astype(np.float64))


def test_pfm_single_channel_tag(tmp_path):
    path = write_pfm(AttributeImage(np.ones((2, 2, 1))), tmp_path / "m.pfm")
    assert path.read_bytes().startswith(b"Pf\n")


def test_pfm_truncated_payload(tmp_path):
    path = tmp_path / "short.pfm"
    path.write_bytes(b"PF\n4 4\n-1.0\n" + b"\x00" * 10)
    with pytest.raises(SceneFormatError):
        read_pfm(path)


def test_pfm_rejects_two_channels(tmp_path):
    with pytest.raises(ShapeMismatchError):
        write_pfm(AttributeImage(np.zeros((2, 2, 2))), tmp_path / "bad.pfm")


def test_png_round_trip_is_8_bit(tmp_path):
    data = np.random.default_rng(0).uniform(0.0, 1.0, (8, 8, 3))
    loaded = read_png(write_png(AttributeImage(data), tmp_path / "x.png"))
    assert np.allclose(loaded.data, to_uint8(data) / 255.0)


def test_heatmap_writes_rgb_png(tmp_path):
    path = write_heatmap(AttributeImage(np.linspace(0, 1, 64).reshape(8, 8)), tmp_path / "h.png")
    assert read_png(path).shape == (8, 8, 3)


def test_clamped_and_shape_checks():
    a = AttributeImage(np.array([[[-0.5, 0.5, 1.5]]]))
    assert np.allclose(a.clamped().data, [[[0.0, 0.5, 1.0]]])
    with pytest.raises(ShapeMismatchError):
        a.require_same_shape(AttributeImage.zeros(1, 2, 3))
