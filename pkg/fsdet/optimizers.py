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

"""Parameter freezing and optimizer construction."""

from dataclasses import dataclass

import torch

from fsdet import print_rank_0
from .model.utils import count_parameters, get_params_for_weight_decay_optimization

STAGE1 = "stage1"
STAGE2 = "stage2"


@dataclass(frozen=True)
class FreezePolicy:
    freeze_backbone: bool = False
    freeze_rpn: bool = False
    freeze_head_extractors: bool = False
    train_vae: bool = True
    train_last_layers: bool = True

    @classmethod
    def train_all(cls):
        return cls()

    @classmethod
    def from_args(cls, args, stage):
        """Base training updates everything; fine-tuning follows the stage2_* flags."""
        if stage == STAGE1:
            return cls.train_all()
        return cls(
            freeze_backbone=args.stage2_freeze_backbone,
            freeze_rpn=args.stage2_freeze_rpn,
            freeze_head_extractors=args.stage2_freeze_head_extractors,
            train_vae=args.stage2_train_vae,
            train_last_layers=args.stage2_train_last_layers,
        )

    def trainable_groups(self):
        return {
            "backbone": not self.freeze_backbone,
            "rpn": not self.freeze_rpn,
            "head_extractors": not self.freeze_head_extractors,
            "vae": self.train_vae,
            "last_layers": self.train_last_layers,
        }


def apply_freeze_policy(model, policy: FreezePolicy):
    """Sets requires_grad per module group; frozen modules stay in eval mode."""
    frozen = []
    for group, trainable in policy.trainable_groups().items():
        for module in model.module_groups()[group]:
            for p in module.parameters():
                p.requires_grad_(trainable)
            if not trainable:
                frozen.append(module)
    model.frozen_modules = frozen
    model.train(model.training)
    print_rank_0(
        " > {} of {} parameters trainable".format(
            count_parameters(model, trainable_only=True), count_parameters(model)
        )
    )
    return frozen


def build_optimizer(model, lr, args):
    """SGD with momentum over the trainable parameters; norms and biases get no weight decay."""
    param_groups = get_params_for_weight_decay_optimization(model, args.weight_decay)
    for g in param_groups:
        g["name"] = "no_weight_decay" if "weight_decay" in g else "weight_decay"
    param_groups = [g for g in param_groups if g["params"]]
    if not param_groups:
        # a fully frozen model still gets an optimizer, its steps are no-ops
        param_groups = [{"params": [], "name": "empty"}]
    return torch.optim.SGD(
        param_groups, lr=lr, momentum=args.momentum, weight_decay=args.weight_decay
    )
