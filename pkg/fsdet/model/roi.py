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

import logging

import torch
import torch.nn.functional as F
from torchvision.ops import roi_align

from .init_functions import kaiming_init_method, normal_init
from .types import BackboneFeatures, Proposal, RoIFeature

logger = logging.getLogger(__name__)


class RoIFeatureExtractor(torch.nn.Module):
    """
    Bilinear crop-and-resize to an output_size x output_size grid, then a
    projection to feature_dim.
    """

    def __init__(self, in_channels, stride, output_size=7, feature_dim=2048):
        super().__init__()
        self.stride = stride
        self.output_size = output_size
        self.feature_dim = feature_dim
        self.proj = normal_init(
            torch.nn.Linear(in_channels * output_size * output_size, feature_dim),
            kaiming_init_method(),
        )

    def fix_degenerate(self, boxes: torch.Tensor) -> torch.Tensor:
        """Zero-area boxes become one feature cell around their center."""
        widths = boxes[:, 2] - boxes[:, 0]
        heights = boxes[:, 3] - boxes[:, 1]
        degenerate = (widths <= 0) | (heights <= 0)
        if not degenerate.any():
            return boxes
        logger.warning(
            f"{int(degenerate.sum())} degenerate RoI box(es) expanded to one feature cell"
        )
        center_x = 0.5 * (boxes[:, 0] + boxes[:, 2])
        center_y = 0.5 * (boxes[:, 1] + boxes[:, 3])
        half = 0.5 * self.stride
        expanded = torch.stack(
            (center_x - half, center_y - half, center_x + half, center_y + half), dim=1
        )
        return torch.where(degenerate[:, None], expanded, boxes)

    def pool(self, feature_map: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """R x C x output_size x output_size grid of the first image in the batch."""
        boxes = self.fix_degenerate(boxes.to(feature_map))
        return roi_align(
            feature_map,
            [boxes],
            output_size=self.output_size,
            spatial_scale=1.0 / self.stride,
            sampling_ratio=1,
            aligned=True,
        )

    def forward(self, feature_map: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        pooled = self.pool(feature_map, boxes)
        return F.relu(self.proj(pooled.flatten(start_dim=1)))


def extract_roi(
    extractor: RoIFeatureExtractor, features: BackboneFeatures, proposal: Proposal, m: int = 0
) -> RoIFeature:
    box = torch.tensor([proposal.box], dtype=features.feature_map.dtype)
    vector = extractor(features.feature_map, box)[0]
    return RoIFeature(vector=vector, proposal=proposal, m=m)
