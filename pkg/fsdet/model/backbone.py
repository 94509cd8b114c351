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

"""Small convolutional backbone shared by the query and support paths."""

from typing import List

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import NumericError
from .init_functions import kaiming_init_method
from .norms import get_norm
from .types import BackboneFeatures

STAGE_STRIDES = (2, 2, 2, 1)


class Backbone(torch.nn.Module):
    """
    Four conv stages with total stride 8.

    The first convolution carries an extra zero-initialized weight slice for the
    support mask; query images are run without it, supports with the mask as a
    fourth input channel.
    """

    stride = int(np.prod(STAGE_STRIDES))

    def __init__(self, channels: List[int], norm="groupnorm", in_channels=3):
        super().__init__()
        assert len(channels) == len(STAGE_STRIDES)
        norm_fn = get_norm(norm)
        init_method = kaiming_init_method()
        self.out_channels = channels[-1]

        self.stem_weight = torch.nn.Parameter(torch.empty(channels[0], in_channels, 3, 3))
        self.mask_weight = torch.nn.Parameter(torch.zeros(channels[0], 1, 3, 3))
        self.stem_bias = torch.nn.Parameter(torch.zeros(channels[0]))
        init_method(self.stem_weight)
        self.stem_norm = norm_fn(channels[0])

        layers = []
        previous = channels[0]
        for i, (c, s) in enumerate(zip(channels, STAGE_STRIDES)):
            # the stem already downsampled stage 0
            if i > 0:
                layers += [
                    torch.nn.Conv2d(previous, c, 3, stride=s, padding=1),
                    norm_fn(c),
                    torch.nn.ReLU(inplace=True),
                ]
            layers += [
                torch.nn.Conv2d(c, c, 3, stride=1, padding=1),
                norm_fn(c),
                torch.nn.ReLU(inplace=True),
            ]
            previous = c
        self.stages = torch.nn.Sequential(*layers)
        for module in self.stages.modules():
            if isinstance(module, torch.nn.Conv2d):
                init_method(module.weight)
                torch.nn.init.zeros_(module.bias)

    def forward(self, images: torch.Tensor, masks: torch.Tensor = None) -> torch.Tensor:
        if masks is None:
            x = F.conv2d(images, self.stem_weight, self.stem_bias, stride=STAGE_STRIDES[0], padding=1)
        else:
            weight = torch.cat([self.stem_weight, self.mask_weight], dim=1)
            x = F.conv2d(
                torch.cat([images, masks], dim=1),
                weight,
                self.stem_bias,
                stride=STAGE_STRIDES[0],
                padding=1,
            )
        x = F.relu(self.stem_norm(x))
        return self.stages(x)


def extract_backbone(backbone: Backbone, image) -> BackboneFeatures:
    """Runs one H x W x 3 image (array or tensor) or an N x 3 x H x W batch."""
    if isinstance(image, np.ndarray):
        if image.dtype == np.uint8:
            image = image.astype(np.float32) / 255.0
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if not torch.isfinite(image).all():
        raise NumericError("backbone input contains non-finite values")
    param = next(backbone.parameters())
    image = image.to(device=param.device, dtype=param.dtype)
    return BackboneFeatures(
        feature_map=backbone(image),
        stride=backbone.stride,
        image_size=tuple(image.shape[-2:]),
    )
