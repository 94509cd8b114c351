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

"""
learning rate schedules, parameter freezing and optimizer construction
"""
import math

import pytest
import torch

from ..common import model_setup


def _scheduler(style, total_iters=10, **kwargs):
    from fsdet.learning_rates import AnnealingLR

    optimizer = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=0.0)
    return optimizer, AnnealingLR(optimizer, 1.0, total_iters, decay_style=style, **kwargs)


@pytest.mark.cpu
@pytest.mark.parametrize(
    "style,expected",
    [
        ("constant", [1.0, 1.0, 1.0]),
        ("linear", [1.0, 0.5, 0.0]),
        ("cosine", [1.0, 0.5, 0.0]),
        ("exponential", [1.0, math.exp(-0.693 * 0.5), math.exp(-0.693)]),
    ],
)
def test_annealing_styles(style, expected):
    """
    verify the learning rate at the start, middle and end of a schedule
    """
    optimizer, scheduler = _scheduler(style)
    values = []
    for step in (0, 5, 10):
        scheduler.step(step)
        values.append(optimizer.param_groups[0]["lr"])
    assert values == pytest.approx(expected, abs=1e-9)


@pytest.mark.cpu
def test_annealing_step_and_min_lr():
    """
    verify step decay multiplies by gamma at each milestone and never falls below min_lr
    """
    optimizer, scheduler = _scheduler("step", step_iters=[6, 3], step_gamma=0.1, min_lr=0.005)
    values = []
    for step in (0, 2, 3, 5, 6, 9):
        scheduler.step(step)
        values.append(optimizer.param_groups[0]["lr"])
    assert values == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01, 0.01])
    _, scheduler = _scheduler("linear", min_lr=0.25)
    scheduler.step(10)
    assert scheduler.get_lr() == 0.25


@pytest.mark.cpu
def test_annealing_state_dict():
    """
    verify a scheduler resumes from its state dict
    """
    optimizer, scheduler = _scheduler("cosine")
    for _ in range(4):
        scheduler.step()
    other_optimizer, other = _scheduler("cosine")
    other.load_state_dict(scheduler.state_dict())
    assert other.num_iters == 4
    assert other_optimizer.param_groups[0]["lr"] == optimizer.param_groups[0]["lr"]


@pytest.mark.cpu
def test_annealing_unknown_style():
    """
    verify an unknown decay style raises ValueError
    """
    with pytest.raises(ValueError):
        _scheduler("warmup")


@pytest.mark.cpu
def test_stage_learning_rates():
    """
    verify each stage starts from its own configured learning rate
    """
    from fsdet.learning_rates import get_learning_rate_scheduler
    from fsdet.optimizers import STAGE2

    _, optimizer, lr_scheduler, args = model_setup(param_dict={"stage1_lr": 0.3, "stage2_lr": 0.02})
    assert optimizer.param_groups[0]["lr"] == 0.3
    get_learning_rate_scheduler(optimizer, args, STAGE2, 10)
    assert optimizer.param_groups[0]["lr"] == 0.02


@pytest.mark.cpu
def test_weight_decay_groups():
    """
    verify norms and biases are excluded from weight decay
    """
    _, optimizer, _, args = model_setup()
    groups = {g["name"]: g for g in optimizer.param_groups}
    assert set(groups) == {"weight_decay", "no_weight_decay"}
    assert groups["no_weight_decay"]["weight_decay"] == 0.0
    assert groups["weight_decay"]["weight_decay"] == args.weight_decay


@pytest.mark.cpu
def test_freeze_policy_stage2():
    """
    verify the default fine-tuning policy trains only the VAE and the last layers
    """
    from fsdet.model.utils import count_parameters
    from fsdet.optimizers import STAGE1, STAGE2, FreezePolicy, apply_freeze_policy, build_optimizer

    model, _, _, args = model_setup()
    assert FreezePolicy.from_args(args, STAGE1) == FreezePolicy.train_all()
    policy = FreezePolicy.from_args(args, STAGE2)
    apply_freeze_policy(model, policy)
    groups = model.module_groups()
    trainable = {
        name
        for name, modules in groups.items()
        if any(p.requires_grad for m in modules for p in m.parameters())
    }
    assert trainable == {"vae", "last_layers"}

    optimizer = build_optimizer(model, args.stage2_lr, args)
    optimized = {id(p) for g in optimizer.param_groups for p in g["params"]}
    assert optimized == {id(p) for p in model.parameters() if p.requires_grad}
    assert len(optimized) and count_parameters(model, trainable_only=True) < count_parameters(model)

    model.train()
    assert not model.backbone.training
    assert model.head.cls.training


@pytest.mark.cpu
def test_fully_frozen_optimizer():
    """
    verify a model without trainable parameters still gets an optimizer
    """
    from fsdet.optimizers import FreezePolicy, apply_freeze_policy, build_optimizer

    model, _, _, args = model_setup()
    apply_freeze_policy(
        model,
        FreezePolicy(
            freeze_backbone=True,
            freeze_rpn=True,
            freeze_head_extractors=True,
            train_vae=False,
            train_last_layers=False,
        ),
    )
    optimizer = build_optimizer(model, 0.1, args)
    assert sum(len(g["params"]) for g in optimizer.param_groups) == 0
