"""Synthetic detection scenes: anti-aliased shapes over a smooth textured background."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..detector.targets import Annotation
from ..seeding import derive_seed

SHAPES = ("square", "circle", "triangle", "diamond")
SUPERSAMPLE = 4
MAX_PLACEMENT_TRIES = 100
MAX_SCENE_ATTEMPTS = 20


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int] = (64, 64)
    classes: Tuple[str, ...] = ("square", "circle", "triangle")
    n_min: int = 1
    n_max: int = 2
    size_min: float = 20.0
    size_max: float = 36.0
    texture_amplitude: float = 0.05
    texture_cells: int = 6
    min_contrast: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ValueError("class catalog must not be empty")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}; available: {SHAPES}")
        if self.n_min < 0 or self.n_max < self.n_min:
            raise ValueError("need 0 <= n_min <= n_max")
        if not 2 <= self.size_min <= self.size_max <= min(self.image_size):
            raise ValueError("object sizes must satisfy 2 <= size_min <= size_max <= image side")

    @property
    def num_classes(self):
        return len(self.classes)


def _background(spec, rng):
    height, width = spec.image_size
    base = rng.uniform(-0.6, 0.6, size=3)
    cells = spec.texture_cells
    coarse = rng.uniform(-1, 1, size=(3, cells, cells)).astype(np.float32)
    texture = np.stack([
        np.asarray(Image.fromarray(c, mode="F").resize((width, height), Image.BILINEAR)) for c in coarse
    ])
    return (base[:, None, None] + spec.texture_amplitude * texture).astype(np.float32), base


def _shape_polygon(kind, top, left, size):
    """Vertices (x, y) of the shape in supersampled pixel coordinates."""
    s = SUPERSAMPLE
    # PIL fills the closing edge, so the far sides sit one sample inside
    y0, x0, y1, x1 = top * s, left * s, (top + size) * s - 1, (left + size) * s - 1
    if kind == "square":
        return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    if kind == "triangle":
        return [((x0 + x1) / 2, y0), (x1, y1), (x0, y1)]
    if kind == "diamond":
        return [((x0 + x1) / 2, y0), (x1, (y0 + y1) / 2), ((x0 + x1) / 2, y1), (x0, (y0 + y1) / 2)]
    return None


def _coverage(kind, top, left, size, image_size):
    height, width = image_size
    canvas = Image.new("L", (width * SUPERSAMPLE, height * SUPERSAMPLE), 0)
    draw = ImageDraw.Draw(canvas)
    s = SUPERSAMPLE
    if kind == "circle":
        draw.ellipse([left * s, top * s, (left + size) * s - 1, (top + size) * s - 1], fill=255)
    else:
        draw.polygon(_shape_polygon(kind, top, left, size), fill=255)
    small = canvas.resize((width, height), Image.BOX)
    return np.asarray(small, dtype=np.float32) / 255.0


def _overlaps(box, placed, margin=1.0):
    for other in placed:
        if not (box[2] + margin <= other[0] or other[2] + margin <= box[0]
                or box[3] + margin <= other[1] or other[3] + margin <= box[1]):
            return True
    return False


def _try_scene(spec, seed):
    rng = np.random.default_rng(seed)
    height, width = spec.image_size
    image, base = _background(spec, rng)
    n_objects = int(rng.integers(spec.n_min, spec.n_max + 1))
    boxes, classes = [], []
    for _ in range(n_objects):
        class_id = int(rng.integers(spec.num_classes))
        for _ in range(MAX_PLACEMENT_TRIES):
            # sizes and positions on the supersampling grid keep the boxes exact
            size = round(rng.uniform(spec.size_min, spec.size_max) * SUPERSAMPLE) / SUPERSAMPLE
            top = round(rng.uniform(0, height - size) * SUPERSAMPLE) / SUPERSAMPLE
            left = round(rng.uniform(0, width - size) * SUPERSAMPLE) / SUPERSAMPLE
            box = (top, left, top + size, left + size)
            if not _overlaps(box, boxes):
                break
        else:
            return None
        while True:
            color = rng.uniform(-1, 1, size=3)
            if np.max(np.abs(color - base)) >= spec.min_contrast:
                break
        alpha = _coverage(spec.classes[class_id], top, left, size, spec.image_size)
        image = image * (1 - alpha) + color[:, None, None].astype(np.float32) * alpha
        boxes.append(box)
        classes.append(class_id)
    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    return image, Annotation(boxes, classes)


def generate_scene(spec, rng_seed):
    """Render one scene as a ``3 x H x W`` float32 image in [-1, 1].

    Returns ``(image, annotation, info)``. If some object cannot be placed
    without overlap, the scene is redrawn from a derived seed and the number
    of redraws is reported in ``info["regenerated"]``.
    """
    for attempt in range(MAX_SCENE_ATTEMPTS):
        seed = rng_seed if attempt == 0 else derive_seed(rng_seed, "scene-retry", attempt)
        result = _try_scene(spec, seed)
        if result is not None:
            image, ann = result
            return image, ann, {"regenerated": attempt}
    raise RuntimeError(f"could not place objects after {MAX_SCENE_ATTEMPTS} scene attempts")
