import numpy as np
import pytest

from src.config.schema import SceneConfig
from src.core.errors import ExpressionParseError, SceneGenerationError
from src.core.geometry import BBox, Canvas, iou
from src.data.scenegen import (
    BACKGROUND_RGB, Color, Scene, SceneObject, Shape, Size, classify_size, generate_expression,
    generate_grounded_scene, generate_scene, match_expression, object_mask, parse_expression, render,
)


def _scene(*objects):
    return Scene(Canvas(64, 64), tuple(objects), seed=0)


def test_generation_is_deterministic():
    config = SceneConfig()
    assert generate_scene(42, config) == generate_scene(42, config)
    assert generate_grounded_scene(42, config) == generate_grounded_scene(42, config)


def test_max_objects_one_gives_single_object():
    config = SceneConfig(max_objects=1)
    for seed in range(20):
        assert len(generate_scene(seed, config).objects) == 1


def test_objects_respect_canvas_overlap_and_size_bands():
    config = SceneConfig()
    for seed in range(100):
        scene = generate_scene(seed, config)
        boxes = [o.box for o in scene.objects]
        assert all(b.fits(scene.canvas) for b in boxes)
        for obj in scene.objects:
            assert classify_size(obj.box, scene.canvas) == obj.size
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert iou(boxes[i], boxes[j]) <= config.overlap_cap


def test_every_shape_and_color_appears():
    config = SceneConfig()
    shapes, colors = set(), set()
    for seed in range(1000):
        for obj in generate_scene(seed, config).objects:
            shapes.add(obj.shape)
            colors.add(obj.color)
    assert shapes == set(Shape)
    assert colors == set(Color)


def test_over_dense_config_raises():
    config = SceneConfig(width=32, height=32, min_objects=8, max_objects=8, overlap_cap=0.0, placement_retries=1)
    with pytest.raises(SceneGenerationError):
        for seed in range(10):
            generate_scene(seed, config)


def test_render_background_and_determinism():
    scene, _ = generate_grounded_scene(3, SceneConfig())
    image = render(scene)
    assert image.shape == (64, 64, 3)
    assert image.min() >= 0.0 and image.max() <= 1.0
    np.testing.assert_array_equal(image, render(scene))
    painted = np.zeros((64, 64), dtype=bool)
    for obj in scene.objects:
        painted |= object_mask(obj, scene.canvas)
    background = np.array(BACKGROUND_RGB, dtype=np.float32) / 255.0
    np.testing.assert_allclose(image[~painted], np.broadcast_to(background, image[~painted].shape))


def test_painted_pixels_stay_inside_annotated_box():
    config = SceneConfig()
    for seed in range(50):
        scene = generate_scene(seed, config)
        for obj in scene.objects:
            ys, xs = np.nonzero(object_mask(obj, scene.canvas))
            assert xs.size > 0
            assert xs.min() >= obj.box.x1 - 1 and xs.max() <= obj.box.x2
            assert ys.min() >= obj.box.y1 - 1 and ys.max() <= obj.box.y2


def test_single_object_gets_bare_expression():
    obj = SceneObject(Shape.CIRCLE, Color.RED, Size.SMALL, BBox(5, 5, 15, 15))
    assert generate_expression(_scene(obj), 0).text == "the red circle"


def test_two_red_circles_use_left_qualifier():
    left = SceneObject(Shape.CIRCLE, Color.RED, Size.SMALL, BBox(2, 2, 12, 12))
    right = SceneObject(Shape.CIRCLE, Color.RED, Size.SMALL, BBox(40, 2, 50, 12))
    scene = _scene(right, left)
    assert generate_expression(scene, 1).text == "the left red circle"
    assert match_expression(scene, "the left red circle") == {1}
    assert match_expression(scene, "the circle") == {0, 1}


def test_unique_color_needs_no_qualifier():
    red = SceneObject(Shape.CIRCLE, Color.RED, Size.SMALL, BBox(2, 2, 12, 12))
    blue = SceneObject(Shape.CIRCLE, Color.BLUE, Size.SMALL, BBox(40, 2, 50, 12))
    assert generate_expression(_scene(red, blue), 1).text == "the blue circle"


def test_largest_square_is_area_argmax():
    small = SceneObject(Shape.SQUARE, Color.RED, Size.SMALL, BBox(0, 0, 10, 10))
    large = SceneObject(Shape.SQUARE, Color.GREEN, Size.LARGE, BBox(20, 20, 50, 50))
    circle = SceneObject(Shape.CIRCLE, Color.RED, Size.LARGE, BBox(0, 30, 30, 60))
    assert match_expression(_scene(small, large, circle), "the largest square") == {1}


def test_generated_expressions_resolve_to_their_target():
    config = SceneConfig()
    for seed in range(300):
        scene, expressions = generate_grounded_scene(seed, config)
        assert len(expressions) == len(scene.objects)
        for expr in expressions:
            assert match_expression(scene, expr.text) == {expr.target_index}


def test_out_of_grammar_text_raises():
    with pytest.raises(ExpressionParseError):
        parse_expression("red circle")
    with pytest.raises(ExpressionParseError):
        parse_expression("the red banana")
    assert parse_expression("the left small red circle.").qualifier == "left"
