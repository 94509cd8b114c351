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

"""Utilities for models."""

import torch

from .norms import NORM_TYPES


def get_params_for_weight_decay_optimization(module, weight_decay):
    """Divide params into with-weight-decay and without-weight-decay groups.
    Norms and biases will have no weight decay but the rest will.
    Parameters with requires_grad=False are left out.
    """
    weight_decay_params = {"params": []}
    no_weight_decay_params = {"params": [], "weight_decay": 0.0}
    seen = set()

    def add(group, p):
        if p is None or not p.requires_grad or id(p) in seen:
            return
        seen.add(id(p))
        group["params"].append(p)

    for module_ in module.modules():
        if isinstance(module_, NORM_TYPES) or weight_decay == 0.0:
            for p in module_._parameters.values():
                add(no_weight_decay_params, p)
        else:
            for n, p in module_._parameters.items():
                add(no_weight_decay_params if n.endswith("bias") else weight_decay_params, p)
    if weight_decay == 0.0:
        # only return a single param group
        return [no_weight_decay_params]
    return [weight_decay_params, no_weight_decay_params]


def count_parameters(module: torch.nn.Module, trainable_only=False) -> int:
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )
