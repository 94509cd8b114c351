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
End-to-end runs, ablations, analyses and re-evaluation over a hashed run directory:

    <out>/<config hash>/
        config.json  configs/  checkpoints/  logs/  metrics/  plots/  run_record.json
"""

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from glob import glob
from typing import Dict, List

import numpy as np
import pandas as pd

from fsdet import print_rank_0
from .arguments import FSDetArgs
from .checkpointing import (
    find_latest_checkpoint,
    load_checkpoint_meta,
    load_model_from_checkpoint,
    multiprocessing_starmap,
)
from .data.data_utils import build_datasets
from .data.splits import (
    FewShotSplit,
    base_query_pool,
    build_kshot_split,
    split_support_pool,
)
from .errors import CheckpointError, ConfigurationError
from .evaluation import (
    MEAN,
    VARIATIONAL,
    APResult,
    class_distributions_to_json,
    compare_prototype_robustness,
    evaluate,
    novel_pool_features,
    prototype_distance_curve,
    save_json,
    support_examples,
    support_similarity_matrix,
)
from .logging import LossLog
from .model.aggregation import VFA
from .optimizers import STAGE1
from .plotting import (
    plot_loss_curves,
    plot_prototype_distance,
    plot_recall,
    plot_similarity_matrix,
)
from .training import run_stage1, run_stage2, stage2_name
from .utils import (
    canonical_json_bytes,
    get_git_commit_hash,
    get_worker_count,
    write_json_atomic,
)

RUNNING = "running"
COMPLETED = "completed"

SIMILARITY = "similarity"
PROTO_DIST = "proto_dist"
RECALL = "recall"
ANALYSES = (SIMILARITY, PROTO_DIST, RECALL)


def _now():
    return datetime.now(timezone.utc).isoformat()


def cell_key(k, seed):
    return f"K{k}_seed{seed}"


class RunPaths:
    """Locations inside one hashed run directory."""

    def __init__(self, root):
        self.root = root
        self.config = os.path.join(root, "config.json")
        self.configs = os.path.join(root, "configs")
        self.checkpoints = os.path.join(root, "checkpoints")
        self.logs = os.path.join(root, "logs")
        self.metrics = os.path.join(root, "metrics")
        self.plots = os.path.join(root, "plots")
        self.record = os.path.join(root, "run_record.json")

    @classmethod
    def for_args(cls, args):
        return cls(os.path.join(args.out, args.config_hash))

    def stage_checkpoints(self, stage):
        return os.path.join(self.checkpoints, stage)

    def metric(self, name):
        return os.path.join(self.metrics, name)

    def plot(self, name):
        return os.path.join(self.plots, name)

    def makedirs(self):
        for d in (self.root, self.configs, self.checkpoints, self.logs, self.metrics, self.plots):
            os.makedirs(d, exist_ok=True)


@dataclass
class RunRecord:
    config_hash: str
    stage1_hash: str
    git_hash: str = None
    started_at: str = None
    updated_at: str = None
    status: str = RUNNING
    stage1: dict = field(default_factory=dict)
    cells: Dict[str, dict] = field(default_factory=dict)
    analyses: Dict[str, List[str]] = field(default_factory=dict)

    @classmethod
    def new(cls, args):
        return cls(
            config_hash=args.config_hash,
            stage1_hash=args.stage1_hash,
            git_hash=get_git_commit_hash(),
            started_at=_now(),
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        self.updated_at = _now()
        write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_run_record(paths: RunPaths) -> RunRecord:
    if not os.path.isfile(paths.record):
        raise CheckpointError(f"no run record in {paths.root}")
    return RunRecord.load(paths.record)


def prepare_run_dir(args) -> RunPaths:
    """Creates the run directory and stores the hashed config next to the original files."""
    paths = RunPaths.for_args(args)
    paths.makedirs()
    data = canonical_json_bytes(args.experiment_dict())
    with open(paths.config, "wb") as f:
        f.write(data)
    for filename, content in (args.config_files or {}).items():
        with open(os.path.join(paths.configs, filename), "w") as f:
            f.write(content if isinstance(content, str) else json.dumps(content))
    return paths


def args_from_run_dir(run_dir, **overwrite_values) -> FSDetArgs:
    """Arguments of a run, rebuilt from its config.json."""
    path = RunPaths(run_dir).config
    if not os.path.isfile(path):
        raise ConfigurationError(f"no config.json in run directory {run_dir}")
    with open(path) as f:
        config = json.load(f)
    config.update(overwrite_values)
    config.setdefault("out", os.path.dirname(os.path.abspath(run_dir)))
    return FSDetArgs.from_dict(config)


############################################################################################################################
# stage I


def _completed_checkpoint(save_dir, iterations):
    checkpoint = find_latest_checkpoint(save_dir)
    if checkpoint is None:
        return None
    if load_checkpoint_meta(checkpoint)["iteration"] != iterations:
        return None
    return checkpoint


def _shared_stage1_checkpoint(args, paths: RunPaths):
    """A finished stage-I checkpoint of another run under `out` trained with the same arguments."""
    for record_path in sorted(glob(os.path.join(args.out, "*", "run_record.json"))):
        other = os.path.dirname(record_path)
        if os.path.abspath(other) == os.path.abspath(paths.root):
            continue
        try:
            record = RunRecord.load(record_path)
        except (OSError, ValueError, TypeError):
            continue
        if record.stage1_hash != args.stage1_hash:
            continue
        checkpoint = _completed_checkpoint(RunPaths(other).stage_checkpoints(STAGE1), args.stage1_iters)
        if checkpoint is not None:
            return checkpoint
    return None


def stage1_eval_split(args, data) -> FewShotSplit:
    """Supports of the stage-I evaluation: the largest K over the base-only images."""
    return build_kshot_split(
        base_query_pool(data.train, data.catalog),
        data.catalog,
        max(args.stage2_k),
        args.seed,
        class_ids=data.catalog.base_ids,
    )


def ensure_stage1(args, data, paths: RunPaths, record: RunRecord):
    """Returns the stage-I checkpoint directory, training it unless a finished one exists."""
    save_dir = paths.stage_checkpoints(STAGE1)
    checkpoint = _completed_checkpoint(save_dir, args.stage1_iters)
    model = None
    if checkpoint is None:
        shared = _shared_stage1_checkpoint(args, paths)
        if shared is not None:
            print_rank_0(f" > reusing stage-I checkpoint {shared}")
            checkpoint = os.path.join(save_dir, os.path.basename(shared))
            if os.path.isdir(checkpoint):
                shutil.rmtree(checkpoint)
            shutil.copytree(shared, checkpoint)
        else:
            model, checkpoint, _ = run_stage1(args, data, save_dir=save_dir, log_dir=paths.logs)
            loss_log = os.path.join(paths.logs, f"{STAGE1}_loss.ndjson")
            plot_loss_curves(LossLog.read(loss_log), paths.plot(f"{STAGE1}_loss.png"))
            record.stage1["loss_log"] = loss_log
    else:
        print_rank_0(f" > found finished stage-I checkpoint {checkpoint}")
    record.stage1["checkpoint"] = checkpoint
    record.stage1["iterations"] = args.stage1_iters

    if args.eval_stage1 and "ap_result" not in record.stage1:
        if model is None:
            model, _ = load_model_from_checkpoint(args, checkpoint, stage=STAGE1, device=args.device)
        split = stage1_eval_split(args, data)
        result = evaluate(
            model,
            data.test,
            data.catalog,
            support_examples(split_support_pool(split)),
            args.eval_iou_thresh,
            args.recall_score_thresh,
            seed=args.seed,
        )
        result.save(paths.metric(f"{STAGE1}_ap.json"), paths.metric(f"{STAGE1}_ap.csv"))
        record.stage1["ap_result"] = result.to_dict()
    record.save(paths.record)
    return checkpoint


############################################################################################################################
# stage II cells


def run_cell(args, data, paths: RunPaths, stage1_checkpoint, k, seed) -> dict:
    """Fine-tunes and evaluates one (K, seed) cell; returns its record entry."""
    key = cell_key(k, seed)
    split = build_kshot_split(data.train, data.catalog, k, seed)
    split_path = paths.metric(f"split_{key}.json")
    split.save(split_path, data.catalog)

    model, checkpoint, _ = run_stage2(
        args,
        data,
        stage1_checkpoint,
        split,
        save_dir=paths.stage_checkpoints(stage2_name(k, seed)),
        log_dir=paths.logs,
    )
    supports = support_examples(split_support_pool(split))
    result = evaluate(
        model,
        data.test,
        data.catalog,
        supports,
        args.eval_iou_thresh,
        args.recall_score_thresh,
        seed=seed,
    )
    result.save(paths.metric(f"ap_{key}.json"), paths.metric(f"ap_{key}.csv"))
    cell = {
        "K": k,
        "seed": seed,
        "ap_result": result.to_dict(),
        "checkpoint": checkpoint,
        "split": split_path,
        "loss_log": os.path.join(paths.logs, f"{stage2_name(k, seed)}_loss.ndjson"),
        "completed_at": _now(),
    }
    if args.aggregation_mode == VFA:
        distributions_path = paths.metric(f"distributions_{key}.json")
        class_distributions_to_json(model, supports, distributions_path)
        cell["distributions"] = distributions_path
    return cell


def _run_cell_worker(config, run_dir, stage1_checkpoint, k, seed):
    """Entry point of a spawned worker; rebuilds arguments and data from plain values."""
    logging.basicConfig(level=os.environ.get("LOGLEVEL", "INFO"))
    args = FSDetArgs.from_dict(config)
    data = build_datasets(args)
    return run_cell(args, data, RunPaths(run_dir), stage1_checkpoint, k, seed)


SUMMARY_COLUMNS = [
    "K",
    "bAP",
    "bAP_std",
    "bAP_median",
    "nAP",
    "nAP_std",
    "nAP_median",
    "recall_median",
    "seeds",
]


def _cell_recall(cell) -> float:
    """Mean of the defined per-class recalls of one cell."""
    values = [r for r in cell["ap_result"]["recall_per_class"].values() if r is not None]
    return float(np.mean(values)) if values else float("nan")


def summarize(record: RunRecord) -> pd.DataFrame:
    """
    Mean, standard deviation and median of bAP / nAP over seeds, and the median
    over seeds of the mean per-class recall, one row per K.
    """
    rows = [
        {
            "K": cell["K"],
            "seed": cell["seed"],
            "bAP": cell["ap_result"]["bAP"],
            "nAP": cell["ap_result"]["nAP"],
            "recall": _cell_recall(cell),
        }
        for cell in record.cells.values()
    ]
    if not rows:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    df = pd.DataFrame(rows).astype({"bAP": float, "nAP": float, "recall": float})
    summary = df.groupby("K").agg(
        bAP=("bAP", "mean"),
        bAP_std=("bAP", "std"),
        bAP_median=("bAP", "median"),
        nAP=("nAP", "mean"),
        nAP_std=("nAP", "std"),
        nAP_median=("nAP", "median"),
        recall_median=("recall", "median"),
        seeds=("seed", "count"),
    )
    return summary.reset_index()[SUMMARY_COLUMNS]


def cmd_run(args) -> RunRecord:
    """
    Stage I once, then stage II and evaluation for every (K, seed). Finished
    stages and cells of an existing record in the same directory are skipped.
    """
    paths = prepare_run_dir(args)
    print_rank_0(f" > run directory {paths.root}")
    record = RunRecord.load(paths.record) if os.path.isfile(paths.record) else RunRecord.new(args)
    record.status = RUNNING
    record.save(paths.record)

    data = build_datasets(args)
    stage1_checkpoint = ensure_stage1(args, data, paths, record)

    todo = [
        (k, seed)
        for k in args.stage2_k
        for seed in args.seeds
        if cell_key(k, seed) not in record.cells
    ]
    workers = get_worker_count()
    if workers > 1 and len(todo) > 1:
        print_rank_0(f" > running {len(todo)} cells in {workers} worker processes")
        config = args.all_config
        config.update(log_dir=None, tensorboard_dir=None)
        cells = multiprocessing_starmap(
            _run_cell_worker,
            [(config, paths.root, stage1_checkpoint, k, seed) for k, seed in todo],
            num_processes=workers,
        )
        for cell in cells:
            record.cells[cell_key(cell["K"], cell["seed"])] = cell
        record.save(paths.record)
    else:
        for k, seed in todo:
            record.cells[cell_key(k, seed)] = run_cell(args, data, paths, stage1_checkpoint, k, seed)
            record.save(paths.record)

    summary = summarize(record)
    summary.to_csv(paths.metric("summary.csv"), index=False)
    print_rank_0(summary.to_string(index=False))
    record.status = COMPLETED
    record.save(paths.record)
    return record


############################################################################################################################
# ablations


def _freeze_overrides(frozen):
    return dict(
        stage2_freeze_backbone=frozen,
        stage2_freeze_rpn=frozen,
        stage2_freeze_head_extractors=frozen,
        stage2_train_vae=True,
        stage2_train_last_layers=True,
    )


def ablation_variants(axis, args) -> Dict[str, dict]:
    """variant label -> argument overrides of one ablation axis."""
    axis = axis.upper()
    vfa = {"aggregation_mode": VFA}
    d = args.feature_dim
    if axis == "AGGREGATION":
        return {m: {"aggregation_mode": m} for m in ("csa", "caa", "vfa")}
    if axis == "CRD":
        return {"coupled": {"decouple": False}, "decoupled": {"decouple": True}}
    if axis == "INIT":
        return {i: {"classifier_init": i} for i in ("random", "copy_base")}
    if axis == "FREEZE_VAE":
        return {
            "vae_fine_tuned": dict(vfa, stage2_train_vae=True),
            "vae_frozen": dict(vfa, stage2_train_vae=False),
        }
    if axis == "CONS_LOSS":
        return {
            "without": dict(vfa, consistency_loss="none"),
            "on_support": dict(vfa, consistency_loss="support"),
            "on_reconstructed": dict(vfa, consistency_loss="reconstructed"),
        }
    if axis == "FEATURE":
        return {
            f: dict(vfa, vfa_feature=f)
            for f in ("z", "z_sampled", "mu", "sigma", "support", "reconstructed")
        }
    if axis == "CLASSIFIER":
        return {c: {"classifier_kind": c} for c in ("linear", "cosine")}
    if axis == "FREEZE":
        return {"freeze_all_but_last": _freeze_overrides(True), "nothing_frozen": _freeze_overrides(False)}
    if axis == "VAE_DESIGN":
        return {
            f"layers{n}_dim{h}": dict(vfa, vae_hidden_layers=n, vae_hidden_dim=h)
            for n in (1, 2)
            for h in (max(1, d // 2), d)
        }
    error_message = f"ablation axis '{axis}' not recognized"
    logging.error(error_message)
    raise ConfigurationError(error_message)


ABLATION_AXES = (
    "AGGREGATION",
    "CRD",
    "INIT",
    "FREEZE_VAE",
    "CONS_LOSS",
    "FEATURE",
    "CLASSIFIER",
    "FREEZE",
    "VAE_DESIGN",
)


def cmd_ablate(args, axis) -> pd.DataFrame:
    """
    Runs every variant of `axis` with the seeds and data of `args` and writes a
    side-by-side bAP / nAP table (csv with means and medians over seeds, text
    with the medians). AGGREGATION adds the median inter-class support
    similarity of each variant, CRD a per-class recall comparison.
    """
    axis = axis.upper()
    out = os.path.join(args.out, f"ablate_{axis.lower()}")
    columns = ["variant"] + SUMMARY_COLUMNS + ["run"]
    if axis == "AGGREGATION":
        columns.insert(-1, "inter_class_similarity")
    rows, run_dirs = [], dict()
    for label, overrides in ablation_variants(axis, args).items():
        print_rank_0(f" > ablation {axis}: variant {label}")
        variant_args = args.copy(out=out, **overrides)
        record = cmd_run(variant_args)
        run_dirs[label] = RunPaths.for_args(variant_args).root
        similarity = dict()
        if axis == "AGGREGATION":
            similarity = inter_class_similarity(variant_args, build_datasets(variant_args), record)
        for _, row in summarize(record).iterrows():
            k = int(row["K"])
            rows.append(
                dict(
                    row.to_dict(),
                    variant=label,
                    K=k,
                    seeds=int(row["seeds"]),
                    run=record.config_hash,
                    inter_class_similarity=similarity.get(k),
                )
            )
    table = pd.DataFrame(rows, columns=columns)
    os.makedirs(out, exist_ok=True)
    table.to_csv(os.path.join(out, f"{axis.lower()}.csv"), index=False)
    text = "(no finished cells)"
    if len(table):
        pivot = table.pivot_table(
            index="variant", columns="K", values=["bAP_median", "nAP_median"], sort=False
        )
        text = pivot.to_string(float_format=lambda v: f"{100 * v:.1f}")
    with open(os.path.join(out, f"{axis.lower()}.txt"), "w") as f:
        f.write(text + "\n")
    print_rank_0(text)

    if axis == "CRD":
        analyze_recall(run_dirs, os.path.join(out, "recall"))
    return table


############################################################################################################################
# analyses


def _cell_model(args, cell):
    stage = stage2_name(cell["K"], cell["seed"])
    checkpoint = cell.get("checkpoint")
    if not checkpoint or not os.path.isdir(checkpoint):
        raise CheckpointError(f"missing {stage} checkpoint")
    model, _ = load_model_from_checkpoint(args, checkpoint, stage=stage, device=args.device)
    return model


def analyze_similarity(args, data, paths: RunPaths, record: RunRecord) -> List[str]:
    artifacts = []
    for key, cell in sorted(record.cells.items()):
        model = _cell_model(args, cell)
        split = FewShotSplit.load(cell["split"], data.catalog, data.train)
        similarity = support_similarity_matrix(model, split)
        json_path = paths.metric(f"similarity_{key}.json")
        save_json(json_path, similarity)
        artifacts += [
            json_path,
            plot_similarity_matrix(similarity, data.catalog.class_names, paths.plot(f"similarity_{key}.png")),
        ]
    return artifacts


def inter_class_similarity(args, data, record: RunRecord) -> Dict[int, float]:
    """K -> median over seeds of the mean inter-class support similarity."""
    values = dict()
    for cell in record.cells.values():
        model = _cell_model(args, cell)
        split = FewShotSplit.load(cell["split"], data.catalog, data.train)
        values.setdefault(int(cell["K"]), []).append(
            support_similarity_matrix(model, split).inter_class_mean()
        )
    return {k: float(np.median(v)) for k, v in sorted(values.items())}


def analyze_prototype_distance(args, data, paths: RunPaths, record: RunRecord) -> List[str]:
    """Curves of both estimators from the model of the largest K (first seed)."""
    if not record.cells:
        raise CheckpointError(f"missing {stage2_name(max(args.stage2_k), args.seeds[0])} checkpoint")
    cell = max(record.cells.values(), key=lambda c: (c["K"], -c["seed"]))
    model = _cell_model(args, cell)
    pool = novel_pool_features(model, data.train, data.catalog)
    seeds = list(range(args.proto_resamples))
    curves = [
        prototype_distance_curve(model, MEAN, pool, args.analysis_k_values, seeds, args.proto_reference_k)
    ]
    if model.vae is not None:
        curves.append(
            prototype_distance_curve(
                model, VARIATIONAL, pool, args.analysis_k_values, seeds, args.proto_reference_k
            )
        )
    json_path = paths.metric("prototype_distance.json")
    summary = {c.estimator: c.to_dict() for c in curves}
    summary["comparison"] = compare_prototype_robustness(curves)
    write_json_atomic(json_path, summary)
    return [json_path, plot_prototype_distance(curves, paths.plot("prototype_distance.png"))]


def _median_recall(record: RunRecord) -> Dict[int, float]:
    values = dict()
    for cell in record.cells.values():
        for c, r in cell["ap_result"]["recall_per_class"].items():
            if r is not None:
                values.setdefault(int(c), []).append(r)
    return {c: float(np.median(v)) for c, v in values.items()}


def analyze_recall(run_dirs: Dict[str, str], out_prefix) -> List[str]:
    """
    Per-class recall, the median over the cells of each run; `run_dirs` maps a
    label (e.g. decouple on / off) to a run directory.
    """
    recalls, class_names = dict(), None
    for label, run_dir in run_dirs.items():
        record = load_run_record(RunPaths(run_dir))
        recalls[label] = _median_recall(record)
        if class_names is None:
            class_names = args_from_run_dir(run_dir).class_names
    json_path = out_prefix + ".json"
    write_json_atomic(
        json_path, {label: {str(c): r for c, r in sorted(v.items())} for label, v in recalls.items()}
    )
    return [json_path, plot_recall(recalls, class_names, out_prefix + ".png")]


def cmd_analyze(run_dir, analysis, compare=None) -> List[str]:
    """
    Writes json data and a plot of `analysis` for a finished run directory;
    RECALL optionally compares with the runs in `compare`.
    """
    analysis = analysis.lower()
    if analysis not in ANALYSES:
        raise ConfigurationError(f"analysis '{analysis}' not recognized, choose from {ANALYSES}")
    args = args_from_run_dir(run_dir)
    paths = RunPaths(run_dir)
    record = load_run_record(paths)

    if analysis == RECALL:
        run_dirs = {f"decouple={args.decouple}": run_dir}
        for other in compare or []:
            other_args = args_from_run_dir(other)
            run_dirs[f"decouple={other_args.decouple} ({other_args.config_hash})"] = other
        artifacts = analyze_recall(run_dirs, os.path.join(paths.metrics, "recall"))
    else:
        data = build_datasets(args)
        if analysis == SIMILARITY:
            artifacts = analyze_similarity(args, data, paths, record)
        else:
            artifacts = analyze_prototype_distance(args, data, paths, record)

    record.analyses[analysis] = artifacts
    record.save(paths.record)
    for a in artifacts:
        print_rank_0(f" > wrote {a}")
    return artifacts


def cmd_eval(run_dir) -> Dict[str, APResult]:
    """Re-evaluates every stored stage-II checkpoint of a run directory."""
    args = args_from_run_dir(run_dir)
    paths = RunPaths(run_dir)
    record = load_run_record(paths)
    data = build_datasets(args)
    results = dict()
    for key, cell in sorted(record.cells.items()):
        model = _cell_model(args, cell)
        split = FewShotSplit.load(cell["split"], data.catalog, data.train)
        result = evaluate(
            model,
            data.test,
            data.catalog,
            support_examples(split_support_pool(split)),
            args.eval_iou_thresh,
            args.recall_score_thresh,
            seed=cell["seed"],
        )
        result.save(paths.metric(f"eval_{key}.json"))
        results[key] = result
    return results
