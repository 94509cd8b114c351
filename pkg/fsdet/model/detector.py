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

"""Meta-learning two-stage detector: query path, support path, aggregation and head."""

from typing import Dict, List, Mapping, Sequence

import torch
import torch.nn.functional as F

from ..data.catalog import Episode, ImageSample, SupportExample
from ..data.data_utils import image_to_tensor, support_to_tensors
from ..errors import SamplingError
from .aggregation import CAA, CSA, VFA, SupportEncoder, channel_modulate, select_support_indices
from .backbone import Backbone, extract_backbone
from .box_utils import HEAD_BOX_WEIGHTS, encode_boxes
from .head import COPY_BASE, DetectionHead, copy_classifier_rows, decode_detections, head_losses
from .init_functions import init_method_normal, normal_init
from .roi import RoIFeatureExtractor
from .rpn import ProposalTargetSampler, RegionProposalNetwork, propose
from .types import (
    EVAL,
    TRAIN,
    ClassDistribution,
    DetectionHeadConfig,
    DetectionOutput,
    SupportFeature,
)
from .vae import (
    FeatureVAE,
    consistency_loss,
    kl_loss,
    rec_loss,
    reparameterize,
    test_time_class_distribution,
)

LOSS_KEYS = ("l_rpn", "l_reg", "l_cls", "l_cons", "l_rec", "l_kl")

FREEZE_GROUPS = ("backbone", "rpn", "head_extractors", "vae", "last_layers")


class MetaDetector(torch.nn.Module):
    """
    Detector over `class_ids` (catalog indices, sorted). Classifier row i
    belongs to class_ids[i], the last row to background.
    """

    def __init__(self, args, class_ids: Sequence[int]):
        super().__init__()
        self.class_ids = sorted(int(c) for c in class_ids)
        self.aggregation_mode = args.aggregation_mode
        self.vfa_feature = args.vfa_feature
        self.consistency_placement = args.consistency_loss
        self.score_thresh = args.score_thresh
        self.nms_iou = args.nms_iou
        self.detections_per_image = args.detections_per_image
        self.init_method_std = args.init_method_std
        feature_dim = args.feature_dim

        self.backbone = Backbone(args.backbone_channels, args.norm)
        channels, stride = self.backbone.out_channels, self.backbone.stride
        self.support_encoder = SupportEncoder(channels, feature_dim, args.init_method_std)
        self.rpn = RegionProposalNetwork(
            channels,
            stride,
            anchor_size=args.anchor_size,
            anchor_ratios=args.anchor_ratios,
            batch_size=args.rpn_batch_size,
            nms_iou=args.rpn_nms_iou,
            train_top_k=args.rpn_train_top_k,
            test_top_k=args.rpn_test_top_k,
            init_method_std=args.init_method_std,
        )
        self.proposal_sampler = ProposalTargetSampler(
            batch_size=args.roi_batch_size,
            positive_fraction=args.roi_positive_fraction,
            fg_iou_thresh=args.fg_iou_thresh,
            bg_iou_thresh=args.bg_iou_thresh,
        )
        self.roi_extractor = RoIFeatureExtractor(
            channels, stride, args.roi_output_size, feature_dim
        )
        self.head = DetectionHead(
            DetectionHeadConfig.from_args(args, len(self.class_ids)),
            self.class_ids,
            args.init_method_std,
        )
        self.vae = None
        self.consistency_classifier = None
        if self.aggregation_mode == VFA:
            self.vae = FeatureVAE.from_args(args)
            if self.consistency_placement != "none":
                self.consistency_classifier = self._new_consistency_classifier(
                    feature_dim, len(self.class_ids)
                )
        self.frozen_modules: List[torch.nn.Module] = []

    def _new_consistency_classifier(self, feature_dim, n_classes):
        return normal_init(
            torch.nn.Linear(feature_dim, n_classes), init_method_normal(self.init_method_std)
        )

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def device(self):
        return next(self.parameters()).device

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen parts keep their normalization statistics
        for module in self.frozen_modules:
            module.eval()
        return self

    def module_groups(self) -> Dict[str, List[torch.nn.Module]]:
        """Parameter groups a FreezePolicy switches on and off."""
        groups = {
            "backbone": [self.backbone, self.support_encoder],
            "rpn": [self.rpn],
            "head_extractors": [self.roi_extractor] + self.head.extractors(),
            "vae": [m for m in (self.vae, self.consistency_classifier) if m is not None],
            "last_layers": self.head.last_layers(),
        }
        return groups

    def extend_classes(self, new_class_ids: Sequence[int], init: str = COPY_BASE):
        """Widens the detection and consistency classifiers to `new_class_ids`."""
        new_class_ids = sorted(int(c) for c in new_class_ids)
        old_class_ids = list(self.class_ids)
        self.head.extend_classes(new_class_ids, init)
        if self.consistency_classifier is not None:
            old = self.consistency_classifier
            new = self._new_consistency_classifier(old.in_features, len(new_class_ids)).to(old.weight)
            if init == COPY_BASE:
                copy_classifier_rows(
                    old,
                    new,
                    list(range(len(old_class_ids))),
                    [new_class_ids.index(c) for c in old_class_ids],
                )
            self.consistency_classifier = new
        self.class_ids = new_class_ids

    ############################################################################################################################
    # support path

    def encode_supports(self, supports: Sequence[SupportExample]) -> torch.Tensor:
        """n x D support features S."""
        tensors = [support_to_tensors(s, self.device) for s in supports]
        images = torch.stack([t[0] for t in tensors])
        masks = torch.stack([t[1] for t in tensors])
        return self.support_encoder(self.backbone, images, masks)

    def support_features(
        self, supports_by_class: Mapping[int, Sequence[SupportExample]]
    ) -> Dict[int, torch.Tensor]:
        missing = [c for c in self.class_ids if not supports_by_class.get(c)]
        if missing:
            raise SamplingError(f"no support examples for classes {missing}")
        return {c: self.encode_supports(supports_by_class[c]) for c in self.class_ids}

    def class_distributions(
        self, features_by_class: Mapping[int, torch.Tensor]
    ) -> Dict[int, ClassDistribution]:
        assert self.vae is not None, "class distributions need the variational aggregation"
        return {
            c: test_time_class_distribution(
                [SupportFeature(v, c) for v in features_by_class[c]], self.vae
            )
            for c in self.class_ids
        }

    def signals_from_features(
        self, features_by_class: Mapping[int, torch.Tensor], generator=None
    ) -> torch.Tensor:
        """
        N x D test-time signal, one row per class: the mean support feature for
        CSA / CAA, the configured variational feature for VFA.
        """
        if self.aggregation_mode != VFA:
            return torch.stack([features_by_class[c].mean(dim=0) for c in self.class_ids])
        rows = []
        for c, dist in self.class_distributions(features_by_class).items():
            if self.vfa_feature == "z":
                rows.append(reparameterize(dist, EVAL).vector)
            elif self.vfa_feature == "z_sampled":
                rows.append(reparameterize(dist, TRAIN, generator).vector)
            elif self.vfa_feature == "mu":
                rows.append(dist.mu)
            elif self.vfa_feature == "sigma":
                rows.append(dist.sigma)
            elif self.vfa_feature == "support":
                rows.append(features_by_class[c].mean(dim=0))
            elif self.vfa_feature == "reconstructed":
                rows.append(self.vae.decode(reparameterize(dist, EVAL).vector))
            else:
                raise ValueError(f"vfa_feature {self.vfa_feature} not recognized")
        return torch.stack(rows)

    def class_signals(
        self, supports_by_class: Mapping[int, Sequence[SupportExample]], generator=None
    ) -> torch.Tensor:
        return self.signals_from_features(self.support_features(supports_by_class), generator)

    def _training_signals(self, support: torch.Tensor, generator=None):
        """Signals paired with RoIs during training, plus the variational losses."""
        zero = support.sum() * 0.0
        losses = {"l_cons": zero, "l_rec": zero, "l_kl": zero}
        if self.aggregation_mode != VFA:
            return support, losses

        positions = torch.arange(support.shape[0], device=support.device)
        dist = self.vae.encode(support, positions)
        z = reparameterize(dist, TRAIN, generator).vector
        reconstructed = self.vae.decode(z)
        losses["l_rec"] = rec_loss(support, reconstructed)
        losses["l_kl"] = kl_loss(dist)
        if self.consistency_classifier is not None:
            target = support if self.consistency_placement == "support" else reconstructed
            losses["l_cons"] = consistency_loss(target, positions, self.consistency_classifier)

        signal = {
            "z": z,
            "z_sampled": z,
            "mu": dist.mu,
            "sigma": dist.sigma,
            "support": support,
            "reconstructed": reconstructed,
        }[self.vfa_feature]
        return signal, losses

    ############################################################################################################################
    # query path

    def _targets(self, sample: ImageSample):
        positions = {c: i for i, c in enumerate(self.class_ids)}
        unknown = sorted({a.class_id for a in sample.annotations} - set(positions))
        if unknown:
            raise SamplingError(
                f"query {sample.image_id} is annotated with classes {unknown} outside the training class set"
            )
        gt_boxes = torch.from_numpy(sample.boxes()).to(self.device)
        gt_labels = torch.tensor(
            [positions[a.class_id] for a in sample.annotations], dtype=torch.int64, device=self.device
        )
        return gt_boxes, gt_labels

    def forward_train(self, episode: Episode, generator=None) -> Dict[str, torch.Tensor]:
        """Unweighted loss terms of one episode, keyed by LOSS_KEYS."""
        if episode.class_ids != self.class_ids:
            raise SamplingError(
                f"episode supports classes {episode.class_ids}, the detector trains {self.class_ids}"
            )
        features = extract_backbone(self.backbone, image_to_tensor(episode.query.image, self.device))
        gt_boxes, gt_labels = self._targets(episode.query)
        proposals, rpn_losses = propose(
            self.rpn,
            features,
            gt_boxes,
            TRAIN,
            gt_labels=gt_labels,
            sampler=self.proposal_sampler,
            generator=generator,
        )

        support = self.encode_supports(episode.supports)
        signal, losses = self._training_signals(support, generator)
        losses["l_rpn"] = rpn_losses["rpn_cls"] + rpn_losses["rpn_reg"]

        if len(proposals) == 0:
            zero = support.sum() * 0.0
            losses["l_cls"], losses["l_reg"] = zero, zero
            return losses

        query = self.roi_extractor(features.feature_map, proposals.boxes)
        foreground = proposals.foreground
        index = select_support_indices(len(proposals), support.shape[0], generator).to(self.device)
        if self.aggregation_mode == CSA:
            index = torch.where(foreground, proposals.labels, index)
        elif self.aggregation_mode not in (CAA, VFA):
            raise ValueError(f"aggregation mode {self.aggregation_mode} not recognized")
        aggregated = channel_modulate(query, signal[index])

        logits, deltas = self.head(aggregated, query)
        targets = torch.where(
            foreground, proposals.labels, torch.full_like(proposals.labels, self.head.background_index)
        )
        box_targets = encode_boxes(
            proposals.boxes[foreground], proposals.matched_gt_boxes[foreground], HEAD_BOX_WEIGHTS
        )
        losses["l_cls"], losses["l_reg"] = head_losses(logits, deltas, targets, box_targets)
        return losses

    def predict(self, image, signals: torch.Tensor) -> DetectionOutput:
        """
        Runs every RoI once per class with that class's signal and keeps the
        class's own score from each pass; background is the minimum over the
        passes and rows are renormalized to sum to one.
        """
        if signals.shape[0] != self.n_classes:
            raise ValueError(f"{signals.shape[0]} class signals for {self.n_classes} classes")
        if isinstance(image, ImageSample):
            image = image.image
        if not isinstance(image, torch.Tensor):
            image = image_to_tensor(image, self.device)
        features = extract_backbone(self.backbone, image)
        proposals, _ = propose(self.rpn, features, mode=EVAL)
        query = self.roi_extractor(features.feature_map, proposals.boxes)

        n = self.n_classes
        scores = query.new_zeros((len(proposals), n + 1))
        background = query.new_full((len(proposals),), float("inf"))
        per_class_deltas = []
        for j in range(n):
            logits, deltas = self.head(channel_modulate(query, signals[j].expand_as(query)), query)
            probs = F.softmax(logits, dim=-1)
            scores[:, j] = probs[:, j]
            background = torch.minimum(background, probs[:, n])
            per_class_deltas.append(deltas)
        scores[:, n] = background
        scores = scores / scores.sum(dim=-1, keepdim=True).clamp(min=1e-12)

        if self.head.config.decouple or n == 0:
            deltas = per_class_deltas[0] if per_class_deltas else query.new_zeros((len(proposals), 4))
        else:
            deltas = torch.stack(per_class_deltas, dim=1)
        output = DetectionOutput(scores=scores, deltas=deltas, proposals=proposals.boxes)
        output.decoded = decode_detections(
            output,
            proposals.boxes,
            self.class_ids,
            features.image_size,
            score_thresh=self.score_thresh,
            nms_iou=self.nms_iou,
            detections_per_image=self.detections_per_image,
        )
        return output
