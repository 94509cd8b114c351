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

"""Base training and few-shot fine-tuning."""

import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import List

import torch

from fsdet import print_rank_0
from .checkpointing import load_model_from_checkpoint, save_checkpoint
from .data.samplers import EpisodeSampler
from .data.splits import (
    FewShotSplit,
    balanced_support_pool,
    base_query_pool,
    split_query_pool,
)
from .errors import TrainingAbort
from .learning_rates import get_learning_rate_scheduler
from .logging import LossLog, training_log
from .model import MetaDetector
from .model.detector import LOSS_KEYS
from .optimizers import STAGE1, STAGE2, FreezePolicy, apply_freeze_policy, build_optimizer
from .utils import Timers, set_seeds, write_json_atomic


@dataclass
class LossReport:
    l_rpn: float
    l_reg: float
    l_cls: float
    l_cons: float
    l_rec: float
    l_kl: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_losses(cls, losses, alpha):
        values = {k: float(losses[k]) for k in LOSS_KEYS}
        return cls(total=float(compose_total(values, alpha)), **values)

    @classmethod
    def mean(cls, reports: List["LossReport"]) -> "LossReport":
        n = len(reports)
        return cls(
            **{
                k: sum(getattr(r, k) for r in reports) / n
                for k in LOSS_KEYS + ("total",)
            }
        )


def compose_total(losses, alpha):
    """l_rpn + l_reg + l_cls + l_cons + l_rec + alpha * l_kl"""
    return (
        losses["l_rpn"]
        + losses["l_reg"]
        + losses["l_cls"]
        + losses["l_cons"]
        + losses["l_rec"]
        + alpha * losses["l_kl"]
    )


def stage2_name(k, seed):
    return f"{STAGE2}_K{k}_seed{seed}"


def write_abort_snapshot(log_dir, stage, iteration, episode, losses, learning_rate, model):
    """Dumps what is needed to investigate a non-finite loss; returns the path."""
    if log_dir is None:
        return None
    non_finite_params = [
        name
        for name, p in model.named_parameters()
        if not torch.isfinite(p).all()
        or (p.grad is not None and not torch.isfinite(p.grad).all())
    ]
    snapshot = {
        "stage": stage,
        "iteration": iteration,
        "learning_rate": learning_rate,
        "losses": {k: float(v) for k, v in losses.items()},
        "query_image_id": episode.query.image_id,
        "support_class_ids": episode.class_ids,
        "non_finite_parameters": non_finite_params,
    }
    path = os.path.join(log_dir, f"abort_{stage}_iter{iteration}.json")
    try:
        write_json_atomic(path, snapshot)
    except OSError as e:
        logging.error(f"unable to write abort snapshot {path}: {e}")
        return None
    return path


def train_step(
    args,
    timers,
    model,
    sampler,
    optimizer,
    lr_scheduler,
    generator=None,
    stage=STAGE1,
    iteration=0,
    log_dir=None,
) -> LossReport:
    """
    One optimizer update over gradient_accumulation_steps episodes.
    A non-finite loss aborts before any gradient reaches the parameters.
    """
    optimizer.zero_grad(set_to_none=True)
    reports = []
    steps = args.gradient_accumulation_steps
    for _ in range(steps):
        timers("episode sampler").start()
        episode = sampler.sample()
        timers("episode sampler").stop()

        timers("forward").start()
        losses = model.forward_train(episode, generator)
        loss = compose_total(losses, args.alpha)
        timers("forward").stop()

        if not torch.isfinite(loss).item():
            snapshot = write_abort_snapshot(
                log_dir,
                stage,
                iteration + 1,
                episode,
                dict(losses, total=loss),
                optimizer.param_groups[0]["lr"],
                model,
            )
            message = (
                f"non-finite loss in {stage} at iteration {iteration + 1}: "
                + ", ".join(f"{k}={float(v):.4g}" for k, v in losses.items())
            )
            logging.error(message)
            raise TrainingAbort(
                message,
                stage=stage,
                iteration=iteration + 1,
                losses={k: float(v) for k, v in losses.items()},
                snapshot=snapshot,
            )

        timers("backward").start()
        (loss / steps).backward()
        timers("backward").stop()
        reports.append(LossReport.from_losses(losses, args.alpha))

    timers("optimizer").start()
    optimizer.step()
    lr_scheduler.step()
    timers("optimizer").stop()

    return LossReport.mean(reports)


def train(
    args,
    timers,
    model,
    sampler,
    optimizer,
    lr_scheduler,
    train_iters,
    stage,
    loss_log=None,
    generator=None,
    log_dir=None,
    save_fn=None,
) -> List[LossReport]:
    """Train the model function; returns one LossReport per iteration."""

    # Turn on training mode which enables dropout.
    model.train()

    # Tracking loss.
    total_loss_dict = {}
    reports = []

    # Iterations.
    iteration = 0

    timers("interval time").start()
    while iteration < train_iters:
        learning_rate = optimizer.param_groups[0]["lr"]
        report = train_step(
            args=args,
            timers=timers,
            model=model,
            sampler=sampler,
            optimizer=optimizer,
            lr_scheduler=lr_scheduler,
            generator=generator,
            stage=stage,
            iteration=iteration,
            log_dir=log_dir,
        )
        iteration += 1
        reports.append(report)

        if loss_log is not None:
            loss_log.write(iteration, report, learning_rate)
        training_log(
            args=args,
            timers=timers,
            loss_dict=report.as_dict(),
            total_loss_dict=total_loss_dict,
            learning_rate=learning_rate,
            iteration=iteration,
            total_iters=train_iters,
            stage=stage,
        )

        # Checkpointing
        if (
            save_fn is not None
            and args.save_interval
            and iteration % args.save_interval == 0
            and iteration < train_iters
        ):
            save_fn(iteration, lr_scheduler)

    timers("interval time").stop()
    return reports


def _stage_generator(seed):
    return torch.Generator().manual_seed(int(seed) % (2**63))


def _loss_log_path(log_dir, stage):
    if log_dir is None:
        return None
    os.makedirs(log_dir, exist_ok=True)
    return os.path.join(log_dir, f"{stage}_loss.ndjson")


def _run(args, model, sampler, lr, train_iters, stage, seed, save_dir, log_dir, catalog, timers):
    timers = timers or Timers(args.tensorboard_writer)
    optimizer = build_optimizer(model, lr, args)
    lr_scheduler = get_learning_rate_scheduler(optimizer, args, STAGE1 if stage == STAGE1 else STAGE2, train_iters)

    def save_fn(iteration, scheduler):
        return save_checkpoint(args, save_dir, stage, iteration, model, scheduler, catalog)

    loss_log_path = _loss_log_path(log_dir, stage)
    loss_log = LossLog(loss_log_path, stage) if loss_log_path else None
    try:
        reports = train(
            args,
            timers,
            model,
            sampler,
            optimizer,
            lr_scheduler,
            train_iters,
            stage,
            loss_log=loss_log,
            generator=_stage_generator(seed),
            log_dir=log_dir,
            save_fn=save_fn if save_dir else None,
        )
    finally:
        if loss_log is not None:
            loss_log.close()

    checkpoint_dir = save_fn(train_iters, lr_scheduler) if save_dir else None
    return reports, checkpoint_dir


def run_stage1(args, data, save_dir=None, log_dir=None, timers=None):
    """
    Trains every parameter on episodes over the base classes. Queries come from
    images without any novel object and supports are drawn from the same images.

    Returns (model, checkpoint directory, loss reports).
    """
    catalog = data.catalog
    base_ids = catalog.base_ids
    set_seeds(args.seed)

    query_pool = base_query_pool(data.train, catalog)
    support_pool = balanced_support_pool(query_pool, base_ids, args.seed)
    sampler = EpisodeSampler(query_pool, support_pool, base_ids, seed=args.seed)
    print_rank_0(
        f" > {STAGE1}: {len(query_pool)} query images over {len(base_ids)} base classes, {args.stage1_iters} iterations"
    )

    model = MetaDetector(args, base_ids).to(args.device)
    apply_freeze_policy(model, FreezePolicy.from_args(args, STAGE1))
    reports, checkpoint_dir = _run(
        args,
        model,
        sampler,
        args.stage1_lr,
        args.stage1_iters,
        STAGE1,
        args.seed,
        save_dir,
        log_dir,
        catalog,
        timers,
    )
    return model, checkpoint_dir, reports


def prepare_stage2_model(args, stage1_checkpoint, catalog):
    """Stage-I detector widened to every class of the catalog and frozen per policy."""
    model, _ = load_model_from_checkpoint(args, stage1_checkpoint, stage=STAGE1, device=args.device)
    model.extend_classes(catalog.all_ids, args.classifier_init)
    model.to(args.device)
    apply_freeze_policy(model, FreezePolicy.from_args(args, STAGE2))
    return model


def run_stage2(args, data, stage1_checkpoint, split: FewShotSplit, save_dir=None, log_dir=None, timers=None):
    """
    Fine-tunes a stage-I checkpoint on the K-shot split over base and novel classes.

    Returns (model, checkpoint directory, loss reports).
    """
    catalog = data.catalog
    seed = split.seed
    stage = stage2_name(split.K, seed)
    set_seeds(seed)

    model = prepare_stage2_model(args, stage1_checkpoint, catalog)
    query_pool = split_query_pool(split)
    sampler = EpisodeSampler(query_pool, split, split.class_ids, seed=seed)
    train_iters = args.stage2_iterations(split.K)
    print_rank_0(
        f" > {stage}: {len(query_pool)} query images over {len(split.class_ids)} classes, {train_iters} iterations"
    )

    reports, checkpoint_dir = _run(
        args,
        model,
        sampler,
        args.stage2_lr,
        train_iters,
        stage,
        seed,
        save_dir,
        log_dir,
        catalog,
        timers,
    )
    return model, checkpoint_dir, reports


def loss_decreased(reports: List[LossReport], window=5) -> bool:
    """Mean total loss over the last `window` iterations below that of the first `window`."""
    if len(reports) < 2:
        return False
    window = max(1, min(window, len(reports) // 2))
    head = sum(r.total for r in reports[:window]) / window
    tail = sum(r.total for r in reports[-window:]) / window
    return math.isfinite(tail) and tail < head
