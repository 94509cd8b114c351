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

from collections import Counter
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch

from fsdet import print_rank_0
from .catalog import ClassCatalog, ImageSample, SupportExample
from .shapes import ShapeDatasetSpec, generate_with_coverage
from .voc import load_voc_annotations


@dataclass
class DetectionData:
    """Train / test images of one run together with their catalog."""

    catalog: ClassCatalog
    train: List[ImageSample]
    test: List[ImageSample]
    accepted_seeds: dict = field(default_factory=dict)


def print_dataset_stats(name, samples: List[ImageSample], catalog: ClassCatalog):
    counts = Counter(a.class_id for s in samples for a in s.annotations)
    print_rank_0("    {}:".format(name))
    print_rank_0("     no. of images: {}".format(len(samples)))
    print_rank_0(
        "     instances per class: "
        + ", ".join(f"{catalog.name(c)}={counts.get(c, 0)}" for c in catalog.all_ids)
    )


def build_datasets(args) -> DetectionData:
    """
    Build train and test datasets.

    The synthetic test set is drawn with data_seed + 1 so it never repeats a
    training image.
    """
    catalog = ClassCatalog.from_args(args)
    print_rank_0(" > building {} datasets ...".format(args.dataset))
    accepted_seeds = dict()
    if args.dataset == "shapes":
        train, accepted_seeds["train"] = generate_with_coverage(
            ShapeDatasetSpec.from_args(args, args.n_train_images, args.data_seed)
        )
        test, accepted_seeds["test"] = generate_with_coverage(
            ShapeDatasetSpec.from_args(args, args.n_test_images, args.data_seed + 1)
        )
    else:
        train = load_voc_annotations(args.voc_root, args.voc_train_split, catalog)
        test = load_voc_annotations(args.voc_root, args.voc_test_split, catalog)

    print_dataset_stats("train", train, catalog)
    print_dataset_stats("test", test, catalog)
    return DetectionData(catalog, train, test, accepted_seeds)


def image_to_tensor(image: np.ndarray, device="cpu") -> torch.Tensor:
    """H x W x 3 array (uint8 or float in [0, 1]) -> 3 x H x W float tensor."""
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(
        2, 0, 1
    ).to(device)


def support_to_tensors(support: SupportExample, device="cpu"):
    """Returns (3 x H x W image, 1 x H x W mask)."""
    mask = torch.from_numpy(np.asarray(support.mask, dtype=np.float32))[None]
    return image_to_tensor(support.image, device), mask.to(device)
