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

import math

import torch

NORM_TYPES = (torch.nn.GroupNorm, torch.nn.BatchNorm2d)


def get_norm(norm_name, max_groups=32):
    """Returns a factory channels -> normalization module."""
    if norm_name == "groupnorm":
        return lambda channels: torch.nn.GroupNorm(
            math.gcd(max_groups, channels), channels
        )
    elif norm_name == "batchnorm":
        return lambda channels: torch.nn.BatchNorm2d(channels)
    elif norm_name == "none":
        return lambda channels: torch.nn.Identity()
    else:
        raise ValueError(f"norm {norm_name} not recognized")
