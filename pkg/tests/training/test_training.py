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
training loop, loss composition and the two training stages
"""
import json
import math
import os

import pytest
import torch

from ..common import make_args, model_setup, parameters_equal, snapshot_parameters, tiny_data


def _base_sampler(args, class_ids, seed=0):
    from fsdet.data.samplers import EpisodeSampler
    from fsdet.data.splits import balanced_support_pool, base_query_pool

    data = tiny_data(args)
    pool = base_query_pool(data.train, data.catalog)
    return EpisodeSampler(pool, balanced_support_pool(pool, class_ids, seed), class_ids, seed=seed)


def _losses(**values):
    from fsdet.model.detector import LOSS_KEYS

    losses = {k: torch.tensor(0.0) for k in LOSS_KEYS}
    losses.update({k: torch.tensor(v) for k, v in values.items()})
    return losses


@pytest.mark.cpu
def test_compose_total():
    """
    verify the total loss adds every term and scales only the KL term by alpha
    """
    from fsdet.training import LossReport, compose_total

    losses = _losses(l_rpn=1.0, l_reg=2.0, l_cls=3.0, l_cons=4.0, l_rec=5.0, l_kl=100.0)
    assert float(compose_total(losses, 0.5)) == pytest.approx(65.0)
    assert float(compose_total(losses, 0.0)) == pytest.approx(15.0)

    report = LossReport.from_losses(losses, 0.01)
    assert report.total == pytest.approx(
        report.l_rpn + report.l_reg + report.l_cls + report.l_cons + report.l_rec + 0.01 * report.l_kl
    )
    mean = LossReport.mean([report, LossReport.from_losses(_losses(), 0.01)])
    assert mean.total == pytest.approx(report.total / 2)
    assert mean.l_kl == pytest.approx(50.0)


@pytest.mark.cpu
def test_loss_decreased():
    """
    verify the comparison of the first and last loss windows
    """
    from fsdet.training import LossReport, loss_decreased

    def reports(totals):
        return [LossReport(0.0, 0.0, t, 0.0, 0.0, 0.0, t) for t in totals]

    assert loss_decreased(reports([5, 4, 3, 2, 1, 0.5]), window=2)
    assert not loss_decreased(reports([1, 2, 3, 4]), window=2)
    assert not loss_decreased(reports([1.0]))
    assert not loss_decreased(reports([2.0, float("nan")]))


@pytest.mark.cpu
def test_loss_log(tmp_path):
    """
    verify the loss log holds one record per iteration with every loss term
    """
    from fsdet.logging import LossLog
    from fsdet.training import LossReport

    path = str(tmp_path / "loss.ndjson")
    with LossLog(path, "stage1") as log:
        for i in range(3):
            log.write(i + 1, LossReport.from_losses(_losses(l_cls=float(i)), 1.0), 0.1)
    records = LossLog.read(path)
    assert [r["iteration"] for r in records] == [1, 2, 3]
    assert [r["l_cls"] for r in records] == [0.0, 1.0, 2.0]
    assert all(r["stage"] == "stage1" and r["lr"] == 0.1 for r in records)


@pytest.mark.cpu
def test_train_step_zero_lr():
    """
    verify an update with a zero learning rate leaves every parameter unchanged
    """
    from fsdet.learning_rates import AnnealingLR
    from fsdet.optimizers import build_optimizer
    from fsdet.training import train_step
    from fsdet.utils import Timers

    model, _, _, args = model_setup()
    optimizer = build_optimizer(model, 0.0, args)
    lr_scheduler = AnnealingLR(optimizer, 0.0, 1)
    before = snapshot_parameters(model)
    model.train()
    report = train_step(args, Timers(), model, _base_sampler(args, model.class_ids), optimizer, lr_scheduler)
    assert math.isfinite(report.total)
    assert parameters_equal(before, model)


@pytest.mark.cpu
def test_train_step_respects_freezing():
    """
    verify frozen groups stay fixed while the last layers are updated
    """
    from fsdet.learning_rates import AnnealingLR
    from fsdet.optimizers import STAGE2, FreezePolicy, apply_freeze_policy, build_optimizer
    from fsdet.training import train_step
    from fsdet.utils import Timers

    model, _, _, args = model_setup()
    apply_freeze_policy(model, FreezePolicy.from_args(args, STAGE2))
    optimizer = build_optimizer(model, 0.1, args)
    backbone = snapshot_parameters(model.backbone)
    rpn = snapshot_parameters(model.rpn)
    cls = model.head.cls.weight.detach().clone()

    model.train()
    train_step(
        args,
        Timers(),
        model,
        _base_sampler(args, model.class_ids),
        optimizer,
        AnnealingLR(optimizer, 0.1, 1),
        stage=STAGE2,
    )
    assert parameters_equal(backbone, model.backbone)
    assert parameters_equal(rpn, model.rpn)
    assert not torch.equal(cls, model.head.cls.weight.detach())


@pytest.mark.cpu
def test_non_finite_loss_aborts(tmp_path, monkeypatch):
    """
    verify a non-finite loss raises TrainingAbort, writes a snapshot and leaves parameters untouched
    """
    from fsdet.errors import TrainingAbort
    from fsdet.model.detector import MetaDetector
    from fsdet.training import train
    from fsdet.utils import Timers

    def nan_forward(self, episode, generator=None):
        losses = _losses(l_cls=float("nan"))
        losses["l_rpn"] = sum(p.sum() for p in self.parameters()) * 0.0
        return losses

    model, optimizer, lr_scheduler, args = model_setup()
    monkeypatch.setattr(MetaDetector, "forward_train", nan_forward)
    before = snapshot_parameters(model)
    with pytest.raises(TrainingAbort) as excinfo:
        train(
            args,
            Timers(),
            model,
            _base_sampler(args, model.class_ids),
            optimizer,
            lr_scheduler,
            train_iters=3,
            stage="stage1",
            log_dir=str(tmp_path),
        )
    abort = excinfo.value
    assert abort.stage == "stage1"
    assert abort.iteration == 1
    assert math.isnan(abort.losses["l_cls"])
    assert abort.snapshot == os.path.join(str(tmp_path), "abort_stage1_iter1.json")
    with open(abort.snapshot) as f:
        snapshot = json.load(f)
    assert snapshot["iteration"] == 1
    assert snapshot["support_class_ids"] == list(model.class_ids)
    assert parameters_equal(before, model)


@pytest.fixture(scope="module")
def stage1_run(tmp_path_factory):
    from fsdet.training import run_stage1

    out = tmp_path_factory.mktemp("stage1_run")
    args = make_args()
    data = tiny_data(args)
    model, checkpoint_dir, reports = run_stage1(
        args, data, save_dir=str(out / "stage1"), log_dir=str(out / "logs")
    )
    return args, data, model, checkpoint_dir, reports, out


@pytest.mark.cpu
def test_run_stage1(stage1_run):
    """
    verify base training runs the configured number of updates and saves a final checkpoint
    """
    from fsdet.checkpointing import find_latest_checkpoint
    from fsdet.logging import LossLog

    args, data, model, checkpoint_dir, reports, out = stage1_run
    assert len(reports) == args.stage1_iters
    assert all(math.isfinite(r.total) for r in reports)
    assert list(model.class_ids) == list(data.catalog.base_ids)
    assert checkpoint_dir.endswith(f"global_step{args.stage1_iters}")
    assert find_latest_checkpoint(str(out / "stage1")) == checkpoint_dir
    records = LossLog.read(str(out / "logs" / "stage1_loss.ndjson"))
    assert len(records) == args.stage1_iters


@pytest.mark.cpu
def test_stage1_loss_decreases():
    """
    verify the total loss of a 50 iteration base training ends below where it starts for most of 3 seeds
    """
    from fsdet.training import loss_decreased, run_stage1

    decreased = []
    for seed in range(3):
        args = make_args(seed=seed, stage1_iters=50, log_interval=25)
        _, checkpoint_dir, reports = run_stage1(args, tiny_data(args))
        assert checkpoint_dir is None
        assert len(reports) == 50
        decreased.append(loss_decreased(reports))
    assert sum(decreased) >= 2


@pytest.mark.cpu
def test_prepare_stage2_model(stage1_run):
    """
    verify fine-tuning starts from the base detector with copied base rows and frozen features
    """
    from fsdet.training import prepare_stage2_model

    args, data, model, checkpoint_dir, _, _ = stage1_run
    stage2 = prepare_stage2_model(args, checkpoint_dir, data.catalog)
    assert list(stage2.class_ids) == list(data.catalog.all_ids)
    assert stage2.head.cls.weight.shape[0] == len(data.catalog.all_ids) + 1
    for i, c in enumerate(model.class_ids):
        assert torch.equal(stage2.head.cls.weight[c], model.head.cls.weight[i])
    assert not any(p.requires_grad for p in stage2.backbone.parameters())
    assert all(p.requires_grad for p in stage2.head.cls.parameters())


@pytest.mark.cpu
@pytest.mark.parametrize("train_vae", [True, False])
def test_run_stage2(stage1_run, train_vae):
    """
    verify fine-tuning covers every class and updates the VAE only when configured to
    """
    from fsdet.data.splits import build_kshot_split
    from fsdet.training import run_stage2, stage2_name

    args, data, model, checkpoint_dir, _, out = stage1_run
    args = args.copy(stage2_train_vae=train_vae)
    split = build_kshot_split(data.train, data.catalog, K=1, seed=0)
    stage2, stage2_dir, reports = run_stage2(
        args,
        data,
        checkpoint_dir,
        split,
        save_dir=str(out / f"stage2_{train_vae}"),
        log_dir=str(out / f"logs_{train_vae}"),
    )
    assert stage2_name(1, 0) == "stage2_K1_seed0"
    assert len(reports) == args.stage2_iterations(1)
    assert list(stage2.class_ids) == list(data.catalog.all_ids)
    assert os.path.isfile(os.path.join(stage2_dir, "meta.json"))
    assert parameters_equal(snapshot_parameters(model.backbone), stage2.backbone)
    assert parameters_equal(snapshot_parameters(model.vae), stage2.vae) != train_vae
