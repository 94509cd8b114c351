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

"""Learning rate decay functions."""

import math

from fsdet import print_rank_0


class AnnealingLR(object):
    """Anneals the learning rate. Iterations count optimizer updates."""

    def __init__(
        self,
        optimizer,
        start_lr,
        total_iters,
        decay_style="constant",
        last_iter=0,
        min_lr=0.0,
        step_iters=(),
        step_gamma=0.1,
    ):

        # Class values.
        self.optimizer = optimizer
        self.start_lr = start_lr
        self.min_lr = min_lr
        self.num_iters = last_iter
        self.end_iter = max(1, total_iters)
        self.decay_style = decay_style
        self.step_iters = sorted(step_iters)
        self.step_gamma = step_gamma
        # Set the learning rate
        self.step(self.num_iters)

        print_rank_0("> learning rate decay style: {}".format(self.decay_style))

    def get_lr(self):
        num_iters_ = self.num_iters
        if self.decay_style == "linear":
            lr = self.start_lr * (self.end_iter - num_iters_) / self.end_iter
        elif self.decay_style == "cosine":
            lr = self.min_lr + (
                (self.start_lr - self.min_lr)
                / 2.0
                * (math.cos(math.pi * num_iters_ / self.end_iter) + 1)
            )
        elif self.decay_style == "exponential":
            # exp(-0.693) = 1/2
            lr = self.start_lr * math.exp(-0.693 * num_iters_ / self.end_iter)
        elif self.decay_style == "step":
            n_steps = sum(1 for s in self.step_iters if num_iters_ >= s)
            lr = self.start_lr * self.step_gamma ** n_steps
        elif self.decay_style == "constant":
            lr = self.start_lr
        else:
            raise ValueError(f"lr decay style {self.decay_style} not recognized")
        return max(lr, self.min_lr)

    def step(self, step_num=None):
        """Set lr for all parameters groups."""
        if step_num is None:
            step_num = self.num_iters + 1
        self.num_iters = step_num
        new_lr = self.get_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = new_lr

    def state_dict(self):
        state_dict = {
            "start_lr": self.start_lr,
            "num_iters": self.num_iters,
            "decay_style": self.decay_style,
            "end_iter": self.end_iter,
            "min_lr": self.min_lr,
            "step_iters": list(self.step_iters),
            "step_gamma": self.step_gamma,
        }
        return state_dict

    def load_state_dict(self, sd):
        for name in ("start_lr", "min_lr", "end_iter", "decay_style", "step_gamma"):
            if getattr(self, name) != sd[name]:
                print_rank_0(" > using checkpoint value {} for {}".format(sd[name], name))
            setattr(self, name, sd[name])
        self.step_iters = sorted(sd.get("step_iters", []))
        self.num_iters = sd["num_iters"]
        self.step(self.num_iters)


def get_learning_rate_scheduler(optimizer, args, stage, total_iters):
    """Build the learning rate scheduler of a stage."""
    return AnnealingLR(
        optimizer,
        start_lr=args.stage1_lr if stage == "stage1" else args.stage2_lr,
        total_iters=total_iters,
        decay_style=args.lr_decay_style,
        last_iter=0,
        min_lr=args.min_lr,
        step_iters=args.lr_step_iters,
        step_gamma=args.lr_step_gamma,
    )
