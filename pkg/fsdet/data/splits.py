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

"""Base / novel K-shot splits and the pools episodes are drawn from."""

import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np

from ..errors import SplitError, SplitImageError
from .catalog import Annotation, ClassCatalog, ImageSample, Instance, instances_by_class


@dataclass
class FewShotSplit:
    K: int
    shots: Dict[int, List[Instance]]
    seed: int

    @property
    def class_ids(self) -> List[int]:
        return sorted(self.shots)

    def instances(self) -> List[Instance]:
        return [inst for c in self.class_ids for inst in self.shots[c]]

    def to_dict(self, catalog: ClassCatalog) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "shots": {
                catalog.name(c): [
                    {"image_id": inst.image_id, "box": list(inst.box)}
                    for inst in self.shots[c]
                ]
                for c in self.class_ids
            },
        }

    def save(self, path, catalog: ClassCatalog):
        with open(path, "w") as f:
            json.dump(self.to_dict(catalog), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d, catalog: ClassCatalog, dataset: Sequence[ImageSample]):
        """Rebinds the stored (image_id, box) pairs to the images of `dataset`."""
        by_id = {sample.image_id: sample for sample in dataset}
        shots = dict()
        for class_name, entries in d["shots"].items():
            class_id = catalog.index(class_name)
            shots[class_id] = []
            for entry in entries:
                if entry["image_id"] not in by_id:
                    raise SplitImageError(class_name, entry["image_id"])
                shots[class_id].append(
                    Instance(
                        by_id[entry["image_id"]],
                        class_id,
                        tuple(float(v) for v in entry["box"]),
                        entry["image_id"],
                    )
                )
        return cls(K=int(d["K"]), shots=shots, seed=int(d["seed"]))

    @classmethod
    def load(cls, path, catalog, dataset):
        with open(path) as f:
            return cls.from_dict(json.load(f), catalog, dataset)


def build_kshot_split(
    dataset: Sequence[ImageSample],
    catalog: ClassCatalog,
    K: int,
    seed: int,
    class_ids: Iterable[int] = None,
) -> FewShotSplit:
    """
    Samples exactly K annotated instances per class without replacement.

    Each class draws from its own generator seeded with (seed, class_id), so adding a
    class to the split leaves the shots of the other classes unchanged.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    class_ids = catalog.all_ids if class_ids is None else sorted(class_ids)
    pool = instances_by_class(dataset)
    shots = dict()
    for class_id in class_ids:
        candidates = pool.get(class_id, [])
        if len(candidates) < K:
            raise SplitError(catalog.name(class_id), len(candidates), K)
        rng = np.random.default_rng([seed, class_id])
        chosen = rng.choice(len(candidates), size=K, replace=False)
        shots[class_id] = [candidates[i] for i in chosen]
    return FewShotSplit(K=K, shots=shots, seed=seed)


def split_query_pool(split: FewShotSplit) -> List[ImageSample]:
    """
    Images holding split instances, annotated with those instances only.

    The fine-tuning query set equals its support set, so other objects in these
    images stay unlabeled.
    """
    grouped = OrderedDict()
    for inst in split.instances():
        entry = grouped.setdefault(inst.image_id, (inst.sample, []))
        entry[1].append(Annotation(inst.class_id, inst.box))
    return [sample.restricted_to(annotations) for sample, annotations in grouped.values()]


def split_support_pool(split: FewShotSplit) -> Dict[int, List[Instance]]:
    return {c: list(split.shots[c]) for c in split.class_ids}


def base_query_pool(
    dataset: Sequence[ImageSample], catalog: ClassCatalog
) -> List[ImageSample]:
    """Base-training images; an image showing any novel object is dropped entirely."""
    return [
        sample
        for sample in dataset
        if sample.annotations
        and all(a.class_id in catalog.base_ids for a in sample.annotations)
    ]


def balanced_support_pool(
    dataset: Sequence[ImageSample], class_ids: Iterable[int], seed: int
) -> Dict[int, List[Instance]]:
    """
    Class-balanced resample of the annotated instances of `class_ids`.

    Every class is resampled (with replacement) to the size of the largest class.
    """
    pool = instances_by_class(dataset)
    class_ids = sorted(class_ids)
    target = max((len(pool.get(c, [])) for c in class_ids), default=0)
    rng = np.random.default_rng(seed)
    result = dict()
    for class_id in class_ids:
        candidates = pool.get(class_id, [])
        if not candidates:
            result[class_id] = []
            continue
        chosen = rng.choice(len(candidates), size=target, replace=True)
        result[class_id] = [candidates[i] for i in chosen]
    return result
