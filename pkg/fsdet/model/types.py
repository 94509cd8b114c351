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

"""Value types passed between the detector stages."""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import torch

from ..errors import ConfigurationError

BACKGROUND = -1

# reparameterization modes
TRAIN = "train"
EVAL = "eval"

# how a variational feature was produced
SAMPLED = "sampled"
DETERMINISTIC = "deterministic"

LINEAR = "linear"
COSINE = "cosine"


@dataclass
class BackboneFeatures:
    """Feature map of one batch, N x C x h x w, with h = ceil(H / stride)."""

    feature_map: torch.Tensor
    stride: int
    image_size: Tuple[int, int]

    @property
    def spatial_size(self) -> Tuple[int, int]:
        return tuple(self.feature_map.shape[-2:])


@dataclass
class Proposal:
    box: Tuple[float, float, float, float]
    objectness: float
    assigned_class: int = BACKGROUND
    assigned_gt_box: Optional[Tuple[float, float, float, float]] = None


@dataclass
class ProposalSet:
    """
    Proposals of one image kept as tensors.

    labels hold training class positions (BACKGROUND for negatives) and are None
    for inference proposals; matched_gt_boxes are zeros for background rows.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    labels: Optional[torch.Tensor] = None
    matched_gt_boxes: Optional[torch.Tensor] = None

    def __len__(self):
        return int(self.boxes.shape[0])

    @property
    def foreground(self) -> torch.Tensor:
        return self.labels != BACKGROUND

    def to_proposals(self, class_ids: List[int] = None) -> List[Proposal]:
        """Per-proposal records; positions are mapped through `class_ids` when given."""
        result = []
        for i in range(len(self)):
            label, gt_box = BACKGROUND, None
            if self.labels is not None and int(self.labels[i]) != BACKGROUND:
                label = int(self.labels[i])
                if class_ids is not None:
                    label = class_ids[label]
                gt_box = tuple(float(v) for v in self.matched_gt_boxes[i])
            result.append(
                Proposal(
                    box=tuple(float(v) for v in self.boxes[i]),
                    objectness=float(self.objectness[i]),
                    assigned_class=label,
                    assigned_gt_box=gt_box,
                )
            )
        return result


@dataclass
class RoIFeature:
    vector: torch.Tensor
    proposal: Proposal
    m: int


@dataclass
class SupportFeature:
    vector: torch.Tensor
    class_id: int


@dataclass
class ClassDistribution:
    """
    Diagonal Gaussian q(z|S) stored as (mu, log sigma^2).

    mu and log_var may carry leading batch dimensions, one row per support.
    """

    mu: torch.Tensor
    log_var: torch.Tensor
    class_id: Union[int, torch.Tensor]

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def to_dict(self) -> dict:
        class_id = self.class_id
        if isinstance(class_id, torch.Tensor):
            class_id = class_id.tolist()
        return {
            "class_id": class_id,
            "mu": self.mu.detach().cpu().tolist(),
            "log_var": self.log_var.detach().cpu().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mu=torch.tensor(d["mu"], dtype=torch.float32),
            log_var=torch.tensor(d["log_var"], dtype=torch.float32),
            class_id=d["class_id"],
        )


@dataclass
class VariationalFeature:
    vector: torch.Tensor
    source_class: Union[int, torch.Tensor]
    mode: str
    epsilon: Optional[torch.Tensor] = None


@dataclass
class AggregatedFeature:
    vector: torch.Tensor
    query_class: int
    support_class: int


@dataclass
class DetectionHeadConfig:
    classifier_kind: str
    cosine_scale: float
    decouple: bool
    n_classes: int
    feature_dim: int

    def __post_init__(self):
        if self.classifier_kind not in (LINEAR, COSINE):
            raise ConfigurationError(
                f"classifier_kind {self.classifier_kind} not recognized"
            )
        if self.classifier_kind == COSINE and self.cosine_scale <= 0:
            raise ConfigurationError(
                f"cosine_scale must be > 0 for a cosine classifier, got {self.cosine_scale}"
            )
        if self.n_classes < 1 or self.feature_dim < 1:
            raise ConfigurationError("n_classes and feature_dim must be positive")

    @classmethod
    def from_args(cls, args, n_classes):
        return cls(
            classifier_kind=args.classifier_kind,
            cosine_scale=args.cosine_scale,
            decouple=args.decouple,
            n_classes=n_classes,
            feature_dim=args.feature_dim,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Detection:
    class_id: int
    box: Tuple[float, float, float, float]
    score: float


@dataclass
class DetectionOutput:
    """
    scores: R x (n_classes + 1) probabilities, background last
    deltas: R x 4, or R x n_classes x 4 when each class pass regresses separately
    """

    scores: torch.Tensor
    deltas: torch.Tensor
    proposals: Optional[torch.Tensor] = None
    decoded: List[Detection] = field(default_factory=list)
