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

"""Single-scale region proposal network and proposal target sampling."""

from typing import Dict, Sequence, Tuple

import torch
import torch.nn.functional as F
from torchvision.ops import box_iou, nms

from .box_utils import (
    RPN_BOX_WEIGHTS,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    enumerate_shifted_anchors,
    generate_anchor_base,
)
from .init_functions import init_method_normal, normal_init
from .types import BACKGROUND, EVAL, TRAIN, BackboneFeatures, ProposalSet

# proposals narrower than this (pixels) are dropped before NMS
MIN_PROPOSAL_SIZE = 1.0
PRE_NMS_TOP_K = 2000


def _random_subset(indices: torch.Tensor, n: int, generator=None) -> torch.Tensor:
    if indices.numel() <= n:
        return indices
    perm = torch.randperm(indices.numel(), generator=generator)[:n]
    return indices[perm.to(indices.device)]


class AnchorTargetCreator:
    """
    Labels anchors for the objectness loss: 1 positive, 0 negative, -1 ignored.

    An anchor is positive if its IoU with some ground truth is >= pos_iou_thresh
    or if it is (one of) the best anchors of a ground truth box, negative below
    neg_iou_thresh. At most n_sample anchors are kept, half of them positive.
    """

    def __init__(self, n_sample=256, pos_iou_thresh=0.7, neg_iou_thresh=0.3, pos_ratio=0.5):
        self.n_sample = n_sample
        self.pos_iou_thresh = pos_iou_thresh
        self.neg_iou_thresh = neg_iou_thresh
        self.pos_ratio = pos_ratio

    def __call__(self, anchors: torch.Tensor, gt_boxes: torch.Tensor, generator=None):
        labels = torch.full((anchors.shape[0],), -1, dtype=torch.int64, device=anchors.device)
        matched = torch.zeros_like(anchors)
        if gt_boxes.numel() == 0:
            labels[:] = 0
        else:
            ious = box_iou(anchors, gt_boxes)
            max_ious, argmax_ious = ious.max(dim=1)
            matched = gt_boxes[argmax_ious]
            labels[max_ious < self.neg_iou_thresh] = 0
            gt_max_ious = ious.max(dim=0).values
            best_for_gt = ((ious == gt_max_ious[None, :]) & (gt_max_ious[None, :] > 0)).any(dim=1)
            labels[best_for_gt] = 1
            labels[max_ious >= self.pos_iou_thresh] = 1

        n_pos = int(self.pos_ratio * self.n_sample)
        pos_index = torch.where(labels == 1)[0]
        if pos_index.numel() > n_pos:
            keep = _random_subset(pos_index, n_pos, generator)
            labels[pos_index] = -1
            labels[keep] = 1

        n_neg = self.n_sample - int((labels == 1).sum())
        neg_index = torch.where(labels == 0)[0]
        if neg_index.numel() > n_neg:
            keep = _random_subset(neg_index, n_neg, generator)
            labels[neg_index] = -1
            labels[keep] = 0
        return labels, matched


class ProposalTargetSampler:
    """
    Samples a fixed-size batch of proposals for the detection head.

    Proposals with IoU >= fg_iou_thresh take the class of their best ground
    truth, IoU < bg_iou_thresh become BACKGROUND and the rest are discarded.
    Ground-truth boxes are added to the candidates so every object is covered.
    """

    def __init__(self, batch_size=64, positive_fraction=0.25, fg_iou_thresh=0.5, bg_iou_thresh=0.3):
        self.batch_size = batch_size
        self.positive_fraction = positive_fraction
        self.fg_iou_thresh = fg_iou_thresh
        self.bg_iou_thresh = bg_iou_thresh

    def __call__(
        self,
        boxes: torch.Tensor,
        objectness: torch.Tensor,
        gt_boxes: torch.Tensor,
        gt_labels: torch.Tensor,
        generator=None,
    ) -> ProposalSet:
        device = boxes.device
        if gt_boxes.numel() > 0:
            boxes = torch.cat([boxes, gt_boxes.to(boxes)], dim=0)
            objectness = torch.cat([objectness, torch.ones(gt_boxes.shape[0], device=device)])
            ious = box_iou(boxes, gt_boxes.to(boxes))
            max_ious, argmax_ious = ious.max(dim=1)
        else:
            max_ious = torch.zeros(boxes.shape[0], device=device)
            argmax_ious = torch.zeros(boxes.shape[0], dtype=torch.int64, device=device)

        fg_index = torch.where(max_ious >= self.fg_iou_thresh)[0]
        bg_index = torch.where(max_ious < self.bg_iou_thresh)[0]
        n_fg = min(int(round(self.batch_size * self.positive_fraction)), fg_index.numel())
        fg_index = _random_subset(fg_index, n_fg, generator)
        n_bg = min(self.batch_size - fg_index.numel(), bg_index.numel())
        bg_index = _random_subset(bg_index, n_bg, generator)
        keep = torch.cat([fg_index, bg_index])

        labels = torch.full((keep.numel(),), BACKGROUND, dtype=torch.int64, device=device)
        matched = torch.zeros((keep.numel(), 4), dtype=boxes.dtype, device=device)
        n_fg = fg_index.numel()
        if n_fg > 0:
            labels[:n_fg] = gt_labels.to(device)[argmax_ious[fg_index]]
            matched[:n_fg] = gt_boxes.to(boxes)[argmax_ious[fg_index]]
        return ProposalSet(
            boxes=boxes[keep],
            objectness=objectness[keep],
            labels=labels,
            matched_gt_boxes=matched,
        )


class RegionProposalNetwork(torch.nn.Module):
    """
    One anchor size, several aspect ratios.

    forward returns (boxes, objectness probabilities, losses); proposals carry
    no gradient, losses are empty when no targets are given.
    """

    def __init__(
        self,
        in_channels: int,
        stride: int,
        anchor_size: float = 32.0,
        anchor_ratios: Sequence[float] = (0.5, 1.0, 2.0),
        batch_size: int = 256,
        nms_iou: float = 0.7,
        train_top_k: int = 300,
        test_top_k: int = 100,
        init_method_std: float = 0.01,
    ):
        super().__init__()
        self.stride = stride
        self.register_buffer(
            "anchor_base", generate_anchor_base(anchor_size, anchor_ratios), persistent=False
        )
        self.n_anchors = len(anchor_ratios)
        self.nms_iou = nms_iou
        self.train_top_k = train_top_k
        self.test_top_k = test_top_k
        self.anchor_target = AnchorTargetCreator(n_sample=batch_size)

        init_method = init_method_normal(init_method_std)
        self.conv = normal_init(torch.nn.Conv2d(in_channels, in_channels, 3, padding=1), init_method)
        self.objectness = normal_init(torch.nn.Conv2d(in_channels, self.n_anchors, 1), init_method)
        self.deltas = normal_init(torch.nn.Conv2d(in_channels, 4 * self.n_anchors, 1), init_method)

    def anchors(self, height, width) -> torch.Tensor:
        return enumerate_shifted_anchors(self.anchor_base, self.stride, height, width)

    def forward(
        self,
        features: BackboneFeatures,
        gt_boxes: torch.Tensor = None,
        top_k: int = None,
        generator=None,
    ) -> Tuple[torch.Tensor, torch.Tensor, Dict[str, torch.Tensor]]:
        feature_map = features.feature_map
        assert feature_map.shape[0] == 1, "the region proposal network runs one image at a time"
        h, w = feature_map.shape[-2:]
        x = F.relu(self.conv(feature_map))
        # (1, A, h, w) -> (h * w * A), same order as the anchors
        logits = self.objectness(x).permute(0, 2, 3, 1).reshape(-1)
        deltas = self.deltas(x).permute(0, 2, 3, 1).reshape(-1, 4)
        anchors = self.anchors(h, w).to(feature_map)

        losses = dict()
        if gt_boxes is not None:
            labels, matched = self.anchor_target(anchors, gt_boxes.to(anchors), generator)
            sampled = labels >= 0
            n_sampled = max(int(sampled.sum()), 1)
            losses["rpn_cls"] = F.binary_cross_entropy_with_logits(
                logits[sampled], labels[sampled].to(logits.dtype), reduction="sum"
            ) / n_sampled
            positive = labels == 1
            if positive.any():
                targets = encode_boxes(anchors[positive], matched[positive], RPN_BOX_WEIGHTS)
                losses["rpn_reg"] = F.smooth_l1_loss(
                    deltas[positive], targets, beta=1.0 / 9, reduction="sum"
                ) / n_sampled
            else:
                losses["rpn_reg"] = deltas.sum() * 0.0

        with torch.no_grad():
            height, width = features.image_size
            boxes = clip_boxes(decode_boxes(anchors, deltas.detach(), RPN_BOX_WEIGHTS), height, width)
            scores = torch.sigmoid(logits.detach())
            widths, heights = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
            valid = (widths >= MIN_PROPOSAL_SIZE) & (heights >= MIN_PROPOSAL_SIZE)
            boxes, scores = boxes[valid], scores[valid]
            order = scores.argsort(descending=True)[:PRE_NMS_TOP_K]
            boxes, scores = boxes[order], scores[order]
            keep = nms(boxes, scores, self.nms_iou)
            top_k = self.train_top_k if top_k is None else top_k
            keep = keep[:top_k]
        return boxes[keep], scores[keep], losses


def propose(
    rpn: RegionProposalNetwork,
    features: BackboneFeatures,
    gt_boxes: torch.Tensor = None,
    mode: str = EVAL,
    gt_labels: torch.Tensor = None,
    sampler: ProposalTargetSampler = None,
    generator=None,
) -> Tuple[ProposalSet, Dict[str, torch.Tensor]]:
    """
    TRAIN: a sampled proposal batch labelled against the ground truth, plus the
    RPN losses. EVAL: at most rpn.test_top_k proposals after NMS, no labels.
    """
    if mode == TRAIN:
        device = features.feature_map.device
        if gt_boxes is None:
            gt_boxes = torch.zeros((0, 4), device=device)
            gt_labels = torch.zeros((0,), dtype=torch.int64, device=device)
        sampler = sampler or ProposalTargetSampler()
        boxes, scores, losses = rpn(features, gt_boxes, rpn.train_top_k, generator)
        return sampler(boxes, scores, gt_boxes, gt_labels, generator), losses
    if mode != EVAL:
        raise ValueError(f"mode {mode} not recognized")
    boxes, scores, _ = rpn(features, None, rpn.test_top_k, generator)
    return ProposalSet(boxes=boxes, objectness=scores), dict()
