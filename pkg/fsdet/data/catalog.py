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

"""Class catalog, annotated images, support examples and episodes."""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, SamplingError

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class names split into base and novel index sets."""

    class_names: Tuple[str, ...]
    base_ids: FrozenSet[int]
    novel_ids: FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "base_ids", frozenset(int(i) for i in self.base_ids))
        object.__setattr__(self, "novel_ids", frozenset(int(i) for i in self.novel_ids))
        all_ids = set(range(len(self.class_names)))
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigurationError("class names must be unique")
        if self.base_ids & self.novel_ids:
            raise ConfigurationError(
                f"classes {sorted(self.base_ids & self.novel_ids)} are both base and novel"
            )
        if (self.base_ids | self.novel_ids) != all_ids:
            raise ConfigurationError(
                "base and novel classes must cover every class index 0..N-1 exactly"
            )

    @classmethod
    def from_args(cls, args):
        novel = set(args.novel_class_ids)
        base = [i for i in range(len(args.class_names)) if i not in novel]
        return cls(tuple(args.class_names), frozenset(base), frozenset(novel))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def all_ids(self) -> List[int]:
        return list(range(self.n_classes))

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"class '{name}' is not in the catalog")

    def name(self, class_id: int) -> str:
        return self.class_names[class_id]

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "base_ids": sorted(self.base_ids),
            "novel_ids": sorted(self.novel_ids),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["class_names"]), frozenset(d["base_ids"]), frozenset(d["novel_ids"]))


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: Box


@dataclass
class ImageSample:
    """An image with its box annotations.

    `image` is H x W x 3. The generators and loaders store uint8 codes, the
    canonical form of intensities in [0, 1] quantized to 1/255; float arrays
    in [0, 1] are accepted too. `float_image()` always returns floats in [0, 1].
    """

    image: np.ndarray
    annotations: List[Annotation]
    image_id: str

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def float_image(self) -> np.ndarray:
        if self.image.dtype == np.uint8:
            return self.image.astype(np.float32) / 255.0
        return self.image.astype(np.float32, copy=False)

    def boxes(self) -> np.ndarray:
        if not self.annotations:
            return np.zeros((0, 4), dtype=np.float32)
        return np.asarray([a.box for a in self.annotations], dtype=np.float32)

    def class_ids(self) -> np.ndarray:
        return np.asarray([a.class_id for a in self.annotations], dtype=np.int64)

    def validate(self, catalog: ClassCatalog = None):
        for a in self.annotations:
            x1, y1, x2, y2 = a.box
            if not (0 <= x1 < x2 <= self.width and 0 <= y1 < y2 <= self.height):
                raise ValueError(
                    f"box {a.box} of image {self.image_id} is outside the {self.width}x{self.height} image"
                )
            if catalog is not None and not 0 <= a.class_id < catalog.n_classes:
                raise ValueError(
                    f"class id {a.class_id} of image {self.image_id} is not a catalog index"
                )

    def restricted_to(self, annotations: Sequence[Annotation]) -> "ImageSample":
        """Same pixels, only the given annotations."""
        return ImageSample(self.image, list(annotations), self.image_id)


@dataclass(frozen=True)
class Instance:
    """One annotated object, referenced through its image."""

    sample: ImageSample = field(compare=False, hash=False)
    class_id: int
    box: Box
    image_id: str


def box_mask(height: int, width: int, box: Box) -> np.ndarray:
    """Binary mask, 1 on every pixel the box covers."""
    x1, y1, x2, y2 = box
    mask = np.zeros((height, width), dtype=np.float32)
    c0, c1 = int(np.floor(x1)), int(np.ceil(x2))
    r0, r1 = int(np.floor(y1)), int(np.ceil(y2))
    mask[max(r0, 0) : min(r1, height), max(c0, 0) : min(c1, width)] = 1.0
    return mask


@dataclass
class SupportExample:
    image: np.ndarray
    mask: np.ndarray
    class_id: int
    image_id: str = None
    box: Box = None

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image shape {self.image.shape[:2]}"
            )
        if not np.any(self.mask):
            raise SamplingError(
                f"support example of class {self.class_id} has an empty mask"
            )

    @classmethod
    def from_instance(cls, instance: Instance) -> "SupportExample":
        sample = instance.sample
        return cls(
            image=sample.float_image(),
            mask=box_mask(sample.height, sample.width, instance.box),
            class_id=instance.class_id,
            image_id=instance.image_id,
            box=instance.box,
        )


@dataclass
class Episode:
    """One query image and one support example per training class."""

    query: ImageSample
    supports: List[SupportExample]

    def __post_init__(self):
        class_ids = [s.class_id for s in self.supports]
        if len(set(class_ids)) != len(class_ids):
            raise SamplingError(f"episode supports repeat a class: {class_ids}")

    @property
    def class_ids(self) -> List[int]:
        return [s.class_id for s in self.supports]


def instances_by_class(dataset: Sequence[ImageSample]) -> Dict[int, List[Instance]]:
    """Every annotated object of the dataset, grouped by class, in dataset order."""
    result = dict()
    for sample in dataset:
        for a in sample.annotations:
            result.setdefault(a.class_id, []).append(
                Instance(sample, a.class_id, tuple(float(v) for v in a.box), sample.image_id)
            )
    return result
