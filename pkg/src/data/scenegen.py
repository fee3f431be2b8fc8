"""
Synthetic Scene Generator
Seeded scenes of coloured shapes, their raster rendering, and template
referring expressions with an exact uniqueness oracle.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Set, Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..config.defaults import SIZE_BANDS
from ..config.schema import SceneConfig
from ..core.errors import ExpressionParseError, SceneGenerationError
from ..core.geometry import BBox, Canvas, iou
from ..core.textio import Vocabulary, split_words


class Shape(str, Enum):
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"


class Color(str, Enum):
    RED = "red"
    GREEN = "green"
    BLUE = "blue"
    YELLOW = "yellow"
    PURPLE = "purple"


class Size(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


QUALIFIERS = ("left", "right", "top", "bottom", "largest", "smallest", "middle")
GENERIC_NOUN = "object"
GRAMMAR_WORDS = (
    ("a", GENERIC_NOUN)
    + tuple(s.value for s in Shape)
    + tuple(c.value for c in Color)
    + tuple(s.value for s in Size)
    + QUALIFIERS
)

BACKGROUND_RGB = (24, 24, 24)
COLOR_RGB = {
    Color.RED: (220, 50, 50),
    Color.GREEN: (50, 180, 70),
    Color.BLUE: (50, 90, 220),
    Color.YELLOW: (230, 210, 40),
    Color.PURPLE: (150, 60, 190),
}


def default_vocabulary() -> Vocabulary:
    """Closed vocabulary covering every template, expression and coordinate."""
    return Vocabulary.build(GRAMMAR_WORDS)


@dataclass(frozen=True)
class SceneObject:
    shape: Shape
    color: Color
    size: Size
    box: BBox

    @property
    def class_name(self) -> str:
        return f"{self.color.value} {self.shape.value}"


@dataclass(frozen=True)
class Scene:
    canvas: Canvas
    objects: Tuple[SceneObject, ...]
    seed: int
    attempt: int = 0

    def __post_init__(self):
        if not self.objects:
            raise SceneGenerationError("a scene needs at least one object")


@dataclass(frozen=True)
class RefExpression:
    text: str
    target_index: int

    @property
    def qualifier(self) -> Optional[str]:
        return parse_expression(self.text).qualifier


def side_band(size: Size, canvas: Canvas) -> Tuple[int, int]:
    """Integer side-length range for a size class; bands never overlap."""
    lo, hi = SIZE_BANDS[size.value]
    extent = min(canvas.width, canvas.height)
    return math.ceil(lo * extent), math.floor(hi * extent)


def classify_size(box: BBox, canvas: Canvas) -> Optional[Size]:
    """Size class whose area band contains the box area, if any."""
    for size in Size:
        lo, hi = side_band(size, canvas)
        if lo * lo <= box.area <= hi * hi:
            return size
    return None


def generate_scene(seed: int, config: SceneConfig, attempt: int = 0) -> Scene:
    """
    Place 1..max_objects random shapes with pairwise IoU <= overlap_cap.

    Deterministic in (seed, config, attempt). Raises SceneGenerationError when
    an object cannot be placed within ``placement_retries`` tries.
    """
    rng = np.random.default_rng([seed, attempt])
    canvas = Canvas(config.width, config.height)
    shapes, colors, sizes = list(Shape), list(Color), list(Size)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    placed: List[SceneObject] = []
    for _ in range(count):
        shape = shapes[int(rng.integers(len(shapes)))]
        color = colors[int(rng.integers(len(colors)))]
        size = sizes[int(rng.integers(len(sizes)))]
        lo, hi = side_band(size, canvas)
        side = int(rng.integers(lo, hi + 1))
        for _ in range(config.placement_retries):
            x1 = int(rng.integers(0, canvas.width - side + 1))
            y1 = int(rng.integers(0, canvas.height - side + 1))
            box = BBox(x1, y1, x1 + side, y1 + side)
            if all(iou(box, other.box) <= config.overlap_cap for other in placed):
                placed.append(SceneObject(shape, color, size, box))
                break
        else:
            raise SceneGenerationError(
                f"could not place object {len(placed) + 1}/{count} for seed {seed} "
                f"within overlap_cap={config.overlap_cap}; config is too dense"
            )
    return Scene(canvas, tuple(placed), seed, attempt)


# --- Rendering ---

def _pixel_bounds(box: BBox) -> Tuple[int, int, int, int]:
    # inclusive pixel range covered by the half-open box
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    x2, y2 = int(round(box.x2)) - 1, int(round(box.y2)) - 1
    return x1, y1, max(x1, x2), max(y1, y2)


def object_mask(obj: SceneObject, canvas: Canvas) -> np.ndarray:
    """Boolean H x W mask of the pixels painted for one object."""
    img = Image.new("L", (canvas.width, canvas.height), 0)
    draw = ImageDraw.Draw(img)
    x1, y1, x2, y2 = _pixel_bounds(obj.box)
    if obj.shape == Shape.CIRCLE:
        draw.ellipse([x1, y1, x2, y2], fill=255)
    elif obj.shape == Shape.SQUARE:
        draw.rectangle([x1, y1, x2, y2], fill=255)
    else:
        draw.polygon([(x1, y2), ((x1 + x2) / 2, y1), (x2, y2)], fill=255)
    return np.asarray(img) > 0


def render(scene: Scene) -> np.ndarray:
    """Rasterise a scene to an H x W x 3 float32 array in [0, 1]."""
    canvas = scene.canvas
    pixels = np.empty((canvas.height, canvas.width, 3), dtype=np.uint8)
    pixels[:] = BACKGROUND_RGB
    for obj in scene.objects:
        pixels[object_mask(obj, canvas)] = COLOR_RGB[obj.color]
    return pixels.astype(np.float32) / 255.0


# --- Expression grammar ---

@dataclass(frozen=True)
class ExpressionQuery:
    """Parsed form of ``the [qualifier] [size] [color] <shape|object>``."""
    qualifier: Optional[str] = None
    size: Optional[Size] = None
    color: Optional[Color] = None
    shape: Optional[Shape] = None

    def text(self) -> str:
        words = ["the"]
        if self.qualifier:
            words.append(self.qualifier)
        if self.size:
            words.append(self.size.value)
        if self.color:
            words.append(self.color.value)
        words.append(self.shape.value if self.shape else GENERIC_NOUN)
        return " ".join(words)


def parse_expression(text: str) -> ExpressionQuery:
    """Parse an expression; raises ExpressionParseError on out-of-grammar text."""
    words = split_words(text)
    if words and words[-1] == ".":
        words = words[:-1]
    if len(words) < 2 or words[0] not in ("the", "a"):
        raise ExpressionParseError(f"expression must start with an article: {text!r}")
    rest = words[1:]
    qualifier = size = color = None
    if rest and rest[0] in QUALIFIERS:
        qualifier = rest.pop(0)
    if rest and rest[0] in Size._value2member_map_:
        size = Size(rest.pop(0))
    if rest and rest[0] in Color._value2member_map_:
        color = Color(rest.pop(0))
    if len(rest) != 1:
        raise ExpressionParseError(f"expected a single noun at the end of {text!r}")
    noun = rest[0]
    if noun == GENERIC_NOUN:
        shape = None
    elif noun in Shape._value2member_map_:
        shape = Shape(noun)
    else:
        raise ExpressionParseError(f"unknown noun {noun!r} in {text!r}")
    return ExpressionQuery(qualifier, size, color, shape)


def _attribute_matches(scene: Scene, query: ExpressionQuery) -> List[int]:
    return [
        i for i, obj in enumerate(scene.objects)
        if (query.shape is None or obj.shape == query.shape)
        and (query.color is None or obj.color == query.color)
        and (query.size is None or obj.size == query.size)
    ]


def _extreme(scene: Scene, candidates: List[int], key, pick) -> Set[int]:
    values = {i: key(scene.objects[i]) for i in candidates}
    best = pick(values.values())
    return {i for i, v in values.items() if v == best}


def apply_qualifier(scene: Scene, candidates: List[int], qualifier: str) -> Set[int]:
    """Objects among ``candidates`` selected by a spatial or size qualifier (ties kept)."""
    if not candidates:
        return set()
    x_center = lambda o: o.box.center[0]
    y_center = lambda o: o.box.center[1]
    area = lambda o: o.box.area
    if qualifier == "left":
        return _extreme(scene, candidates, x_center, min)
    if qualifier == "right":
        return _extreme(scene, candidates, x_center, max)
    if qualifier == "top":
        return _extreme(scene, candidates, y_center, min)
    if qualifier == "bottom":
        return _extreme(scene, candidates, y_center, max)
    if qualifier == "largest":
        return _extreme(scene, candidates, area, max)
    if qualifier == "smallest":
        return _extreme(scene, candidates, area, min)
    if qualifier == "middle":
        # median x-center of an odd group of at least three
        if len(candidates) < 3 or len(candidates) % 2 == 0:
            return set()
        xs = sorted(x_center(scene.objects[i]) for i in candidates)
        median = xs[len(xs) // 2]
        return {i for i in candidates if x_center(scene.objects[i]) == median}
    raise ExpressionParseError(f"unknown qualifier {qualifier!r}")


def match_query(scene: Scene, query: ExpressionQuery) -> Set[int]:
    candidates = _attribute_matches(scene, query)
    if query.qualifier is None:
        return set(candidates)
    return apply_qualifier(scene, candidates, query.qualifier)


def match_expression(scene: Scene, text: str) -> Set[int]:
    """All object indices consistent with the expression."""
    return match_query(scene, parse_expression(text))


def _candidate_queries(obj: SceneObject) -> Iterator[ExpressionQuery]:
    # shortest first; intrinsic attributes before spatial qualifiers
    yield ExpressionQuery(None, None, obj.color, obj.shape)
    yield ExpressionQuery(None, obj.size, obj.color, obj.shape)
    for qualifier in QUALIFIERS:
        yield ExpressionQuery(qualifier, None, obj.color, obj.shape)
    for qualifier in QUALIFIERS:
        yield ExpressionQuery(qualifier, obj.size, obj.color, obj.shape)


def generate_expression(scene: Scene, target_index: int) -> RefExpression:
    """Shortest template expression that the matcher resolves to exactly the target."""
    if not 0 <= target_index < len(scene.objects):
        raise IndexError(f"target {target_index} out of range for {len(scene.objects)} objects")
    for query in _candidate_queries(scene.objects[target_index]):
        if match_query(scene, query) == {target_index}:
            return RefExpression(query.text(), target_index)
    raise SceneGenerationError(
        f"no template disambiguates object {target_index} in scene seed {scene.seed}"
    )


def generate_grounded_scene(seed: int, config: SceneConfig) -> Tuple[Scene, List[RefExpression]]:
    """
    Scene plus one unique expression per object.

    Resamples (attempt = 0, 1, ...) while placement fails or some object
    cannot be disambiguated.
    """
    last_error: Optional[SceneGenerationError] = None
    for attempt in range(config.scene_resamples):
        try:
            scene = generate_scene(seed, config, attempt)
            expressions = [generate_expression(scene, i) for i in range(len(scene.objects))]
            return scene, expressions
        except SceneGenerationError as e:
            last_error = e
    raise SceneGenerationError(
        f"seed {seed}: no valid scene after {config.scene_resamples} resamples ({last_error})"
    )
