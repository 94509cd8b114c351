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

import torch


def init_method_normal(sigma):
    """Init method based on N(0, sigma)."""

    def init_(tensor):
        return torch.nn.init.normal_(tensor, mean=0.0, std=sigma)

    return init_


def kaiming_init_method(nonlinearity="relu"):
    """He initialization for convolutions followed by `nonlinearity`."""

    def init_(tensor):
        return torch.nn.init.kaiming_normal_(
            tensor, mode="fan_out", nonlinearity=nonlinearity
        )

    return init_


def normal_init(module, init_method, bias=0.0):
    """Apply `init_method` to module.weight and fill module.bias with `bias`."""
    init_method(module.weight)
    if getattr(module, "bias", None) is not None:
        torch.nn.init.constant_(module.bias, bias)
    return module
