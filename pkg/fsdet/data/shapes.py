# Copyright (c) 2024, The FSDet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Synthetic shapes detection dataset.

Classes are geometry x fill pattern, so two classes may share a geometry or a
fill and instances of one class vary in size, aspect, rotation and hue.
"""

import colorsys
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ConfigurationError
from .catalog import Annotation, ImageSample

GEOMETRIES = ["circle", "square", "triangle", "diamond"]
FILLS = ["solid", "striped", "hollow"]

# geometry index -> base hue; three hues for four geometries so color alone never identifies a class
GEOMETRY_HUES = [0.0, 0.33, 0.62, 0.0]

MIN_SHAPE_CLASSES = 6

logger = logging.getLogger(__name__)


def shape_class_names(n_classes: int = 12) -> List[str]:
    """The first `n_classes` names, geometry-major: circle_solid, circle_striped, ..."""
    names = [f"{g}_{f}" for g in GEOMETRIES for f in FILLS]
    if not MIN_SHAPE_CLASSES <= n_classes <= len(names):
        raise ConfigurationError(
            f"the shapes generator supports {MIN_SHAPE_CLASSES}..{len(names)} classes, got {n_classes}"
        )
    return names[:n_classes]


def default_novel_class_ids(n_classes: int = 12) -> List[int]:
    """One novel class per geometry, each with a fill also seen in base classes."""
    ids = []
    for g in range(len(GEOMETRIES)):
        class_id = g * len(FILLS) + g % len(FILLS)
        if class_id < n_classes:
            ids.append(class_id)
    return ids


@dataclass
class ShapeDatasetSpec:
    n_images: int
    image_size: int = 128
    classes: Union[int, Sequence[str]] = 12
    objects_per_image_range: Tuple[int, int] = (1, 3)
    noise_level: float = 0.1
    seed: int = 0
    min_object_size: int = 16
    max_object_size: int = 48

    @classmethod
    def from_args(cls, args, n_images, seed):
        return cls(
            n_images=n_images,
            image_size=args.image_size,
            classes=list(args.class_names),
            objects_per_image_range=tuple(args.objects_per_image),
            noise_level=args.noise_level,
            seed=seed,
            min_object_size=args.min_object_size,
            max_object_size=args.max_object_size,
        )

    @property
    def class_names(self) -> List[str]:
        if isinstance(self.classes, int):
            return shape_class_names(self.classes)
        return list(self.classes)

    def validate(self):
        names = self.class_names
        known = shape_class_names(len(GEOMETRIES) * len(FILLS))
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigurationError(f"unknown shape classes: {unknown}")
        if len(set(names)) < MIN_SHAPE_CLASSES:
            raise ConfigurationError(
                f"at least {MIN_SHAPE_CLASSES} distinct shape classes are required, got {len(set(names))}"
            )
        if self.n_images < 1:
            raise ConfigurationError(f"n_images must be >= 1, got {self.n_images}")
        if self.image_size < 8:
            raise ConfigurationError(f"image_size must be >= 8, got {self.image_size}")
        lo, hi = self.objects_per_image_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid objects_per_image_range ({lo}, {hi})")
        if not 0 < self.min_object_size <= self.max_object_size < self.image_size:
            raise ConfigurationError(
                f"object sizes [{self.min_object_size}, {self.max_object_size}] do not fit a {self.image_size} image"
            )
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigurationError(f"noise_level must be in [0, 1], got {self.noise_level}")


def _outline(name, width, height, n_circle_points=48):
    if name == "circle":
        return [
            (0.5 * width * math.cos(t), 0.5 * height * math.sin(t))
            for t in np.linspace(0.0, 2.0 * math.pi, n_circle_points, endpoint=False)
        ]
    if name == "square":
        return [
            (-0.5 * width, -0.5 * height),
            (0.5 * width, -0.5 * height),
            (0.5 * width, 0.5 * height),
            (-0.5 * width, 0.5 * height),
        ]
    if name == "triangle":
        return [(0.0, -0.5 * height), (0.5 * width, 0.5 * height), (-0.5 * width, 0.5 * height)]
    if name == "diamond":
        return [(0.0, -0.5 * height), (0.5 * width, 0.0), (0.0, 0.5 * height), (-0.5 * width, 0.0)]
    raise ValueError(f"geometry {name} not recognized")


def _rotate(points, angle):
    c, s = math.cos(angle), math.sin(angle)
    return [(x * c - y * s, x * s + y * c) for x, y in points]


def _paint_mask(points, fill, size, angle, canvas_size):
    """Boolean mask of the pixels an object paints."""
    shape = Image.new("L", (canvas_size, canvas_size), 0)
    draw = ImageDraw.Draw(shape)
    closed = points + [points[0]]
    if fill == "hollow":
        draw.line(closed, fill=255, width=max(2, int(round(size / 10))), joint="curve")
        return np.asarray(shape) > 0
    draw.polygon(points, fill=255)
    mask = np.asarray(shape) > 0
    if fill == "solid":
        return mask
    # striped: bands perpendicular to the rotated x axis, plus a thin outline
    stripe_width = max(2.0, size / 8.0)
    yy, xx = np.mgrid[0:canvas_size, 0:canvas_size]
    band = np.floor((xx * math.cos(angle) + yy * math.sin(angle)) / stripe_width)
    outline = Image.new("L", (canvas_size, canvas_size), 0)
    ImageDraw.Draw(outline).line(closed, fill=255, width=1)
    return (mask & (band % 2 == 0)) | (np.asarray(outline) > 0)


def _overlaps(box, boxes, margin=2.0):
    x1, y1, x2, y2 = box
    for b in boxes:
        if x1 < b[2] + margin and b[0] < x2 + margin and y1 < b[3] + margin and b[1] < y2 + margin:
            return True
    return False


def _draw_object(rng, canvas, class_name, class_index, spec, placed_boxes, max_tries=20):
    geometry, fill = class_name.split("_")
    size = rng.uniform(spec.min_object_size, spec.max_object_size)
    aspect = rng.uniform(0.75, 1.25)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    points = _rotate(_outline(geometry, size, size * aspect), angle)
    xs, ys = [p[0] for p in points], [p[1] for p in points]
    s = spec.image_size

    for _ in range(max_tries):
        cx = rng.uniform(-min(xs), s - max(xs))
        cy = rng.uniform(-min(ys), s - max(ys))
        approx = (cx + min(xs), cy + min(ys), cx + max(xs), cy + max(ys))
        if not _overlaps(approx, placed_boxes):
            break

    shifted = [(x + cx, y + cy) for x, y in points]
    paint = _paint_mask(shifted, fill, size, angle, s)
    rows, cols = np.nonzero(paint)
    if len(rows) == 0:
        return None

    hue = (GEOMETRY_HUES[GEOMETRIES.index(geometry)] + rng.uniform(-0.5, 0.5) * spec.noise_level) % 1.0
    saturation = np.clip(0.7 + rng.uniform(-0.2, 0.2) * spec.noise_level, 0.0, 1.0)
    value = np.clip(0.55 + rng.uniform(-0.2, 0.2) * spec.noise_level, 0.0, 1.0)
    color = np.asarray(colorsys.hsv_to_rgb(hue, saturation, value), dtype=np.float32)
    canvas[paint] = color

    box = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
    return Annotation(class_index, box)


def generate_shapes_dataset(spec: ShapeDatasetSpec) -> List[ImageSample]:
    """Deterministic in `spec`; images are uint8 H x W x 3 with tight box annotations."""
    spec.validate()
    names = spec.class_names
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.objects_per_image_range
    s = spec.image_size
    samples = []
    for i in range(spec.n_images):
        background = rng.uniform(0.75, 0.95) + rng.uniform(-0.05, 0.05, size=3)
        canvas = np.empty((s, s, 3), dtype=np.float32)
        canvas[:] = np.clip(background, 0.0, 1.0)
        annotations = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            class_index = int(rng.integers(len(names)))
            annotation = _draw_object(
                rng, canvas, names[class_index], class_index, spec,
                [a.box for a in annotations],
            )
            if annotation is not None:
                annotations.append(annotation)
        if spec.noise_level > 0:
            canvas += rng.normal(0.0, 0.15 * spec.noise_level, size=canvas.shape).astype(np.float32)
        image = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
        samples.append(ImageSample(image, annotations, f"{spec.seed}_{i:06d}"))
    return samples


def generate_with_coverage(spec: ShapeDatasetSpec, max_attempts: int = 10):
    """
    Generates until every class appears at least once.

    Returns (samples, accepted_seed). Seeds are tried in order spec.seed, spec.seed + 1, ...
    """
    n_classes = len(spec.class_names)
    for attempt in range(max_attempts):
        seed = spec.seed + attempt
        candidate = ShapeDatasetSpec(**{**spec.__dict__, "seed": seed})
        samples = generate_shapes_dataset(candidate)
        present = {a.class_id for sample in samples for a in sample.annotations}
        missing = sorted(set(range(n_classes)) - present)
        if not missing:
            if attempt > 0:
                logger.warning(f"shapes dataset regenerated, accepted seed {seed}")
            return samples, seed
        logger.warning(
            f"shapes dataset with seed {seed} misses classes {missing}, regenerating"
        )
    raise ConfigurationError(
        f"no seed in [{spec.seed}, {spec.seed + max_attempts}) covers all {n_classes} classes"
    )
