import numpy as np
import pytest

from src.core.errors import GeometryError
from src.core.geometry import BBox, Canvas, QuantizedBox, dequantize, iou, quantize


def _pixel_mask(box, size):
    mask = np.zeros((size, size), dtype=bool)
    mask[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = True
    return mask


def _random_box(rng, size):
    x1, x2 = sorted(rng.integers(0, size + 1, size=2))
    y1, y2 = sorted(rng.integers(0, size + 1, size=2))
    return BBox(int(x1), int(y1), int(x2), int(y2))


def test_quantize_endpoints_and_midpoint():
    canvas = Canvas(640, 480)
    assert quantize(BBox(0, 0, 640, 480), canvas).as_tuple() == (0, 0, 1000, 1000)
    assert quantize(BBox(320, 240, 320, 240), canvas).as_tuple() == (500, 500, 500, 500)


def test_quantize_reproduces_reference_coordinates():
    qbox = quantize(BBox(78.1, 175.7, 251.5, 431.0), Canvas(640, 480))
    assert qbox.as_tuple() == (122, 366, 393, 898)


def test_quantize_is_scale_invariant():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        size = int(rng.integers(1, 200))
        box = _random_box(rng, size)
        scale = int(rng.integers(2, 9))
        scaled = BBox(box.x1 * scale, box.y1 * scale, box.x2 * scale, box.y2 * scale)
        assert quantize(scaled, Canvas(size * scale, size * scale)) == quantize(box, Canvas(size, size))
    box = BBox(78.1, 175.7, 251.5, 431.0)
    doubled = BBox(156.2, 351.4, 503.0, 862.0)
    assert quantize(doubled, Canvas(1280, 960)) == quantize(box, Canvas(640, 480))


def test_dequantize_endpoints():
    canvas = Canvas(640, 480)
    assert dequantize(QuantizedBox(0, 0, 1000, 1000), canvas).as_tuple() == (0, 0, 640, 480)
    assert dequantize(QuantizedBox(500, 500, 500, 500), canvas).as_tuple() == (320, 240, 320, 240)


def test_round_trip_within_half_bin():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        w, h = int(rng.integers(1, 2000)), int(rng.integers(1, 2000))
        xs = np.sort(rng.uniform(0, w, size=2))
        ys = np.sort(rng.uniform(0, h, size=2))
        box = BBox(xs[0], ys[0], xs[1], ys[1])
        back = dequantize(quantize(box, Canvas(w, h)), Canvas(w, h))
        for orig, rec, extent in zip(box.as_tuple(), back.as_tuple(), (w, h, w, h)):
            assert abs(orig - rec) <= extent / 2000 + 1e-9


def test_iou_examples():
    box = BBox(3, 4, 20, 30)
    assert iou(box, box) == 1.0
    assert iou(BBox(0, 0, 5, 5), BBox(6, 6, 9, 9)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_iou_matches_pixel_rasterisation():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        size = int(rng.integers(2, 65))
        a, b = _random_box(rng, size), _random_box(rng, size)
        ma, mb = _pixel_mask(a, size), _pixel_mask(b, size)
        union = np.logical_or(ma, mb).sum()
        expected = np.logical_and(ma, mb).sum() / union if union else 0.0
        assert abs(iou(a, b) - expected) < 1e-9


def test_iou_is_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a, b = _random_box(rng, 50), _random_box(rng, 50)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


def test_invalid_boxes_raise():
    with pytest.raises(GeometryError):
        BBox(10, 0, 5, 5)
    with pytest.raises(GeometryError):
        BBox(0, 0, float("nan"), 5)
    with pytest.raises(GeometryError):
        quantize(BBox(0, 0, 700, 10), Canvas(640, 480))
    with pytest.raises(GeometryError):
        QuantizedBox(0, 0, 1001, 10)
    with pytest.raises(GeometryError):
        Canvas(0, 10)
