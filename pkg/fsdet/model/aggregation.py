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

"""Support encoding and query / support feature aggregation.

All modes modulate the query channel-wise with sigmoid(signal); they differ
only in which support signal a RoI is paired with.
"""

from typing import Sequence

import numpy as np
import torch

from ..data.catalog import SupportExample
from ..data.data_utils import support_to_tensors
from ..errors import SamplingError
from .backbone import Backbone
from .init_functions import init_method_normal, normal_init
from .types import AggregatedFeature, RoIFeature, SupportFeature, VariationalFeature

CSA = "csa"
CAA = "caa"
VFA = "vfa"


def channel_modulate(query: torch.Tensor, signal: torch.Tensor) -> torch.Tensor:
    """query * sigmoid(signal), elementwise."""
    if query.shape[-1] != signal.shape[-1]:
        raise ValueError(
            f"query dimension {query.shape[-1]} does not match support dimension {signal.shape[-1]}"
        )
    return query * torch.sigmoid(signal)


def _query_class(q: RoIFeature) -> int:
    return q.proposal.assigned_class if q.proposal is not None else -1


def aggregate_csa(q: RoIFeature, s: SupportFeature) -> AggregatedFeature:
    return AggregatedFeature(
        vector=channel_modulate(q.vector, s.vector),
        query_class=_query_class(q),
        support_class=s.class_id,
    )


def aggregate_vfa(q: RoIFeature, z: VariationalFeature) -> AggregatedFeature:
    return AggregatedFeature(
        vector=channel_modulate(q.vector, z.vector),
        query_class=_query_class(q),
        support_class=int(z.source_class),
    )


def select_support_caa(
    query_class: int, supports: Sequence[SupportFeature], rng: np.random.Generator
) -> SupportFeature:
    """Uniform choice over every support of the episode, whatever the query class."""
    if len(supports) == 0:
        raise SamplingError("no support features to choose from")
    return supports[int(rng.integers(len(supports)))]


def select_support_indices(n_rois: int, n_supports: int, generator=None) -> torch.Tensor:
    """Batched select_support_caa: one uniform support index per RoI."""
    if n_supports < 1:
        raise SamplingError("no support features to choose from")
    return torch.randint(n_supports, (n_rois,), generator=generator)


class SupportEncoder(torch.nn.Module):
    """Global average pool of the masked backbone output, projected to feature_dim."""

    def __init__(self, in_channels, feature_dim, init_method_std=0.01):
        super().__init__()
        self.proj = normal_init(
            torch.nn.Linear(in_channels, feature_dim), init_method_normal(init_method_std)
        )

    def forward(self, backbone: Backbone, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        feature_map = backbone(images, masks)
        return self.proj(feature_map.mean(dim=(-2, -1)))


def encode_support(
    example: SupportExample, backbone: Backbone, encoder: SupportEncoder
) -> SupportFeature:
    if not np.any(example.mask):
        raise SamplingError(f"support example of class {example.class_id} has an empty mask")
    param = next(backbone.parameters())
    image, mask = support_to_tensors(example, device=param.device)
    vector = encoder(backbone, image[None].to(param.dtype), mask[None].to(param.dtype))[0]
    return SupportFeature(vector=vector, class_id=example.class_id)
