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
end to end runs through the command line entry point
"""
import json
import os
from glob import glob

import pandas as pd
import pytest
import torch

from .common import get_test_configs_with_path, make_args

TEST_CONFIG = get_test_configs_with_path(["test_base.yml"])[0]


def _run_dir(out):
    records = glob(os.path.join(str(out), "*", "run_record.json"))
    assert len(records) == 1, records
    return os.path.dirname(records[0])


def _load(path):
    with open(path) as f:
        return json.load(f)


@pytest.mark.cpu
@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--config", "does_not_exist.yml"],
        ["run", "--config", TEST_CONFIG, "--set", "nokey"],
        ["run", "--config", TEST_CONFIG, "--set", "train.bogus_key=1"],
        ["run", "--config", TEST_CONFIG, "--set", "feature_dim=-4"],
        ["ablate", "--config", TEST_CONFIG, "--axis", "bogus"],
    ],
    ids=["missing_config", "bad_override", "unknown_key", "invalid_value", "unknown_axis"],
)
def test_configuration_errors(argv, tmp_path):
    """
    verify configuration problems exit with code 2 before any training
    """
    from fsdet.cli import EXIT_CONFIG, main

    assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG
    assert not glob(os.path.join(str(tmp_path), "*", "checkpoints"))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    from fsdet.cli import main

    out = tmp_path_factory.mktemp("cli_run")
    code = main(["run", "--config", TEST_CONFIG, "--out", str(out), "--set", "eval_stage1=true"])
    return code, out


@pytest.mark.cpu
def test_run(finished_run):
    """
    verify a run trains both stages and writes the record, metrics and checkpoints
    """
    from fsdet.experiments import COMPLETED, RunPaths

    code, out = finished_run
    assert code == 0
    paths = RunPaths(_run_dir(out))
    record = _load(paths.record)
    assert record["status"] == COMPLETED
    assert record["config_hash"] == os.path.basename(paths.root)
    assert sorted(record["cells"]) == ["K1_seed0"]
    assert "ap_result" in record["stage1"]
    assert os.path.isfile(paths.config)
    assert os.path.isfile(os.path.join(paths.configs, "test_base.yml"))

    ap = _load(paths.metric("ap_K1_seed0.json"))
    assert set(ap) >= {"per_class_ap", "bAP", "nAP", "recall_per_class"}
    assert len(ap["per_class_ap"]) == 6
    summary = pd.read_csv(paths.metric("summary.csv"))
    assert list(summary["K"]) == [1]
    assert {"bAP_median", "nAP_median", "recall_median"} <= set(summary.columns)
    if ap["nAP"] is not None:
        assert summary["nAP_median"][0] == pytest.approx(ap["nAP"])
    assert os.path.isfile(paths.metric("split_K1_seed0.json"))
    assert os.path.isfile(paths.metric("distributions_K1_seed0.json"))
    assert os.path.isfile(paths.plot("stage1_loss.png"))
    assert os.path.isdir(record["cells"]["K1_seed0"]["checkpoint"])


@pytest.mark.cpu
def test_run_is_resumable(finished_run):
    """
    verify running the same configuration again reuses the finished stages and cells
    """
    from fsdet.cli import main
    from fsdet.experiments import RunPaths

    code, out = finished_run
    paths = RunPaths(_run_dir(out))
    before = _load(paths.record)
    assert main(["run", "--config", TEST_CONFIG, "--out", str(out), "--set", "eval_stage1=true"]) == 0
    after = _load(paths.record)
    assert after["cells"] == before["cells"]
    assert after["stage1"]["checkpoint"] == before["stage1"]["checkpoint"]


@pytest.mark.cpu
def test_eval_and_analyze(finished_run):
    """
    verify re-evaluation reproduces the stored AP and every analysis writes its artifacts
    """
    from fsdet.cli import main
    from fsdet.experiments import RunPaths

    code, out = finished_run
    run_dir = _run_dir(out)
    paths = RunPaths(run_dir)
    assert main(["eval", run_dir]) == 0
    evaluated = _load(paths.metric("eval_K1_seed0.json"))
    stored = _load(paths.metric("ap_K1_seed0.json"))
    assert evaluated["per_class_ap"] == stored["per_class_ap"]

    for analysis in ("similarity", "proto_dist", "recall"):
        assert main(["analyze", run_dir, "--analysis", analysis]) == 0
    record = _load(paths.record)
    assert sorted(record["analyses"]) == ["proto_dist", "recall", "similarity"]
    for artifacts in record["analyses"].values():
        assert all(os.path.isfile(a) for a in artifacts)
    curves = _load(paths.metric("prototype_distance.json"))
    assert set(curves) == {"mean", "variational", "comparison"}
    assert curves["mean"]["normalized"]["2"] == pytest.approx(1.0)
    assert set(curves["comparison"]["increase"]) == {"mean", "variational"}
    assert curves["comparison"]["increase"]["mean"] == pytest.approx(
        curves["mean"]["normalized_increase"]
    )
    assert isinstance(curves["comparison"]["variational_more_robust"], bool)


@pytest.mark.cpu
def test_run_deterministic(finished_run, tmp_path):
    """
    verify the same configuration gives identical results in another output directory
    """
    from fsdet.cli import main
    from fsdet.experiments import RunPaths

    _, out = finished_run
    assert main(["run", "--config", TEST_CONFIG, "--out", str(tmp_path), "--set", "eval_stage1=true"]) == 0
    first = RunPaths(_run_dir(out))
    second = RunPaths(_run_dir(tmp_path))
    assert os.path.basename(first.root) == os.path.basename(second.root)
    assert _load(first.metric("ap_K1_seed0.json")) == _load(second.metric("ap_K1_seed0.json"))


@pytest.mark.cpu
def test_analyze_missing_run(tmp_path):
    """
    verify analyzing a directory that holds no run fails with a configuration error
    """
    from fsdet.cli import EXIT_CONFIG, main

    assert main(["analyze", str(tmp_path), "--analysis", "similarity"]) == EXIT_CONFIG


@pytest.mark.cpu
def test_non_finite_loss_exit_code(tmp_path, monkeypatch):
    """
    verify a non-finite loss stops the run with exit code 3 and leaves it unfinished
    """
    from fsdet.cli import EXIT_ABORT, main
    from fsdet.experiments import RUNNING, RunPaths
    from fsdet.model.detector import LOSS_KEYS, MetaDetector

    def nan_forward(self, episode, generator=None):
        return {k: torch.tensor(float("nan")) for k in LOSS_KEYS}

    monkeypatch.setattr(MetaDetector, "forward_train", nan_forward)
    assert main(["run", "--config", TEST_CONFIG, "--out", str(tmp_path)]) == EXIT_ABORT
    paths = RunPaths(_run_dir(tmp_path))
    assert _load(paths.record)["status"] == RUNNING
    assert glob(os.path.join(paths.logs, "abort_stage1_iter1.json"))


@pytest.mark.cpu
@pytest.mark.parametrize("axis", ["AGGREGATION", "CRD", "INIT", "FREEZE_VAE", "CONS_LOSS", "FEATURE", "CLASSIFIER", "FREEZE", "VAE_DESIGN"])
def test_ablation_variants(axis):
    """
    verify every variant of every ablation axis is a valid configuration with its own hash
    """
    from fsdet.experiments import ABLATION_AXES, ablation_variants

    assert axis in ABLATION_AXES
    args = make_args()
    variants = ablation_variants(axis, args)
    assert len(variants) >= 2
    hashes = set()
    for label, overrides in variants.items():
        variant = args.copy(**overrides)
        for key, value in overrides.items():
            assert getattr(variant, key) == value, (label, key)
        hashes.add(variant.config_hash)
    assert len(hashes) == len(variants)


@pytest.mark.cpu
def test_ablate(tmp_path):
    """
    verify an ablation runs each variant and writes the comparison table and recall comparison
    """
    from fsdet.cli import main

    assert main(["ablate", "--config", TEST_CONFIG, "--out", str(tmp_path), "--axis", "crd"]) == 0
    out = tmp_path / "ablate_crd"
    table = pd.read_csv(out / "crd.csv")
    assert sorted(table["variant"]) == ["coupled", "decoupled"]
    assert list(table["K"]) == [1, 1]
    assert table["run"].nunique() == 2
    assert {"bAP_median", "nAP_median", "recall_median"} <= set(table.columns)
    assert "inter_class_similarity" not in table.columns
    assert (out / "crd.txt").is_file()
    recall = _load(str(out / "recall.json"))
    assert sorted(recall) == ["coupled", "decoupled"]
    assert (out / "recall.png").is_file()


@pytest.mark.cpu
def test_inter_class_similarity(finished_run):
    """
    verify the per-K inter-class similarity of a run is the median over its cells
    """
    from fsdet.data.splits import FewShotSplit
    from fsdet.evaluation import support_similarity_matrix
    from fsdet.experiments import (
        RunPaths,
        _cell_model,
        args_from_run_dir,
        build_datasets,
        inter_class_similarity,
        load_run_record,
    )

    _, out = finished_run
    run_dir = _run_dir(out)
    args = args_from_run_dir(run_dir)
    data = build_datasets(args)
    record = load_run_record(RunPaths(run_dir))
    similarity = inter_class_similarity(args, data, record)
    assert list(similarity) == [1]

    cell = record.cells["K1_seed0"]
    split = FewShotSplit.load(cell["split"], data.catalog, data.train)
    expected = support_similarity_matrix(_cell_model(args, cell), split).inter_class_mean()
    assert similarity[1] == pytest.approx(expected)
    assert -1.0 <= similarity[1] <= 1.0
