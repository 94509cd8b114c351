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

"""Detection head with linear or cosine classification and optional
classification-regression decoupling."""

from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torchvision.ops import batched_nms

from ..errors import ConfigurationError
from .box_utils import HEAD_BOX_WEIGHTS, clip_boxes, decode_boxes
from .init_functions import init_method_normal, kaiming_init_method, normal_init
from .types import COSINE, LINEAR, Detection, DetectionHeadConfig, DetectionOutput

COPY_BASE = "copy_base"
RANDOM = "random"


class CosineClassifier(torch.nn.Module):
    """scale * cos(x, w_c) for every class row w_c."""

    def __init__(self, in_features, out_features, scale=20.0, init_method=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.scale = scale
        self.weight = torch.nn.Parameter(torch.empty(out_features, in_features))
        (init_method or init_method_normal(0.01))(self.weight)

    def forward(self, x):
        x = F.normalize(x, p=2, dim=-1, eps=1e-12)
        weight = F.normalize(self.weight, p=2, dim=-1, eps=1e-12)
        return self.scale * F.linear(x, weight)

    def extra_repr(self):
        return f"in_features={self.in_features}, out_features={self.out_features}, scale={self.scale}"


def get_classifier(kind, in_features, out_features, cosine_scale=20.0, init_method_std=0.01):
    init_method = init_method_normal(init_method_std)
    if kind == COSINE:
        return CosineClassifier(in_features, out_features, cosine_scale, init_method)
    elif kind == LINEAR:
        return normal_init(torch.nn.Linear(in_features, out_features), init_method)
    else:
        raise ValueError(f"classifier {kind} not recognized")


def _shared_extractor(dim):
    return torch.nn.Sequential(
        normal_init(torch.nn.Linear(dim, dim), kaiming_init_method()),
        torch.nn.ReLU(inplace=True),
    )


def copy_classifier_rows(
    old: torch.nn.Module, new: torch.nn.Module, old_rows: Sequence[int], new_rows: Sequence[int]
):
    """new.weight[new_rows[i]] = old.weight[old_rows[i]] (and bias, if any)."""
    with torch.no_grad():
        for src, dst in zip(old_rows, new_rows):
            new.weight[dst].copy_(old.weight[src])
            if getattr(old, "bias", None) is not None and getattr(new, "bias", None) is not None:
                new.bias[dst].copy_(old.bias[src])


class DetectionHead(torch.nn.Module):
    """
    Classifier over class_ids plus background (last row) and a class-agnostic
    4-d box regressor.

    decouple=False: both branches read F_share(aggregated).
    decouple=True: classification reads F_share_cls(aggregated), regression
    reads F_share_reg(original).
    """

    def __init__(self, config: DetectionHeadConfig, class_ids: List[int], init_method_std=0.01):
        super().__init__()
        if len(class_ids) != config.n_classes:
            raise ConfigurationError(
                f"head configured for {config.n_classes} classes, {len(class_ids)} class ids given"
            )
        self.config = config
        self.class_ids = list(class_ids)
        self.init_method_std = init_method_std
        dim = config.feature_dim
        if config.decouple:
            self.share_cls = _shared_extractor(dim)
            self.share_reg = _shared_extractor(dim)
        else:
            self.share = _shared_extractor(dim)
        self.cls = get_classifier(
            config.classifier_kind, dim, config.n_classes + 1, config.cosine_scale, init_method_std
        )
        self.reg = normal_init(torch.nn.Linear(dim, 4), init_method_normal(0.001))

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def background_index(self) -> int:
        return self.config.n_classes

    def extractors(self) -> List[torch.nn.Module]:
        if self.config.decouple:
            return [self.share_cls, self.share_reg]
        return [self.share]

    def last_layers(self) -> List[torch.nn.Module]:
        return [self.cls, self.reg]

    def _check_dim(self, x, name):
        if x.shape[-1] != self.config.feature_dim:
            raise ConfigurationError(
                f"{name} feature has dimension {x.shape[-1]}, the head expects {self.config.feature_dim}"
            )

    def classify(self, aggregated: torch.Tensor) -> torch.Tensor:
        self._check_dim(aggregated, "aggregated")
        shared = self.share_cls if self.config.decouple else self.share
        return self.cls(shared(aggregated))

    def regress(self, aggregated: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
        if self.config.decouple:
            self._check_dim(original, "original")
            return self.reg(self.share_reg(original))
        self._check_dim(aggregated, "aggregated")
        return self.reg(self.share(aggregated))

    def forward(self, aggregated: torch.Tensor, original: torch.Tensor = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits R x (n_classes + 1), deltas R x 4)."""
        if aggregated is None:
            aggregated = original
        if aggregated is None or (self.config.decouple and original is None):
            raise ConfigurationError(
                "the decoupled head needs both the aggregated and the original RoI feature"
            )
        if aggregated.shape[:-1] != (original if original is not None else aggregated).shape[:-1]:
            raise ConfigurationError("aggregated and original features are not aligned")
        return self.classify(aggregated), self.regress(aggregated, original)

    def extend_classes(self, new_class_ids: List[int], init: str = COPY_BASE):
        """
        Rebuilds the classifier over `new_class_ids` (which must contain every
        current class). COPY_BASE keeps the rows of current classes and the
        background row; RANDOM initializes every row afresh.
        """
        new_class_ids = sorted(new_class_ids)
        missing = sorted(set(self.class_ids) - set(new_class_ids))
        if missing:
            raise ConfigurationError(f"extended class set drops classes {missing}")
        if init not in (COPY_BASE, RANDOM):
            raise ValueError(f"classifier init {init} not recognized")
        old = self.cls
        new = get_classifier(
            self.config.classifier_kind,
            self.config.feature_dim,
            len(new_class_ids) + 1,
            self.config.cosine_scale,
            self.init_method_std,
        ).to(old.weight)
        if init == COPY_BASE:
            old_rows = list(range(len(self.class_ids))) + [self.background_index]
            new_rows = [new_class_ids.index(c) for c in self.class_ids] + [len(new_class_ids)]
            copy_classifier_rows(old, new, old_rows, new_rows)
        self.cls = new
        self.class_ids = new_class_ids
        self.config = DetectionHeadConfig(
            classifier_kind=self.config.classifier_kind,
            cosine_scale=self.config.cosine_scale,
            decouple=self.config.decouple,
            n_classes=len(new_class_ids),
            feature_dim=self.config.feature_dim,
        )


def head_forward(head: DetectionHead, aggregated, original) -> DetectionOutput:
    """One head pass turned into probabilities; `aggregated` may be None for identity aggregation."""
    logits, deltas = head(aggregated, original)
    return DetectionOutput(scores=F.softmax(logits, dim=-1), deltas=deltas)


def head_losses(
    logits: torch.Tensor, deltas: torch.Tensor, targets: torch.Tensor, box_targets: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (l_cls, l_reg) of one head pass. `targets` holds class positions with the
    background index for negatives; `box_targets` are encoded offsets for the
    foreground rows, in order. Regression is summed and divided by the RoI count.
    """
    l_cls = F.cross_entropy(logits, targets)
    foreground = targets != logits.shape[-1] - 1
    if not foreground.any():
        return l_cls, deltas.sum() * 0.0
    if box_targets.shape[0] != int(foreground.sum()):
        raise ValueError(
            f"{box_targets.shape[0]} box targets for {int(foreground.sum())} foreground RoIs"
        )
    l_reg = F.smooth_l1_loss(deltas[foreground], box_targets, beta=1.0 / 9, reduction="sum")
    return l_cls, l_reg / logits.shape[0]


def decode_detections(
    outputs: DetectionOutput,
    proposals: torch.Tensor,
    class_ids: Sequence[int],
    image_size,
    score_thresh=0.05,
    nms_iou=0.5,
    detections_per_image=100,
) -> List[Detection]:
    """
    Applies the box deltas to the proposals, clips to the image and runs
    per-class NMS. The background column is never emitted.
    """
    scores = outputs.scores.detach()
    deltas = outputs.deltas.detach()
    n_classes = len(class_ids)
    height, width = image_size
    if proposals.numel() == 0:
        return []
    boxes = decode_boxes(proposals.to(deltas), deltas, HEAD_BOX_WEIGHTS)
    boxes = clip_boxes(boxes, height, width)
    if boxes.dim() == 2:
        boxes = boxes[:, None, :].expand(-1, n_classes, -1)

    class_scores = scores[:, :n_classes]
    keep_mask = class_scores > score_thresh
    rows, cols = torch.where(keep_mask)
    if rows.numel() == 0:
        return []
    cand_boxes = boxes[rows, cols]
    cand_scores = class_scores[rows, cols]
    # drop boxes that collapsed at the image border
    valid = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])
    cand_boxes, cand_scores, cols = cand_boxes[valid], cand_scores[valid], cols[valid]
    keep = batched_nms(cand_boxes, cand_scores, cols, nms_iou)[:detections_per_image]
    return [
        Detection(
            class_id=int(class_ids[int(cols[i])]),
            box=tuple(float(v) for v in cand_boxes[i]),
            score=float(cand_scores[i]),
        )
        for i in keep
    ]
