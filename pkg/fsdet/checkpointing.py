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

"""Input/output checkpointing."""

import json
import logging
import multiprocessing
import os
import re
import shutil
from glob import glob

import torch
from safetensors.torch import load_model, save_model

from fsdet import print_rank_0
from .errors import CheckpointError
from .utils import get_git_commit_hash, natural_sort, write_json_atomic

MODEL_FILENAME = "model.safetensors"
META_FILENAME = "meta.json"
VALIDATION_SEED = 1234


def check_checkpoint_args(args, checkpoint_args):
    """Ensure fixed arguments for a model are the same for the input
    arguments and the one retrieved from checkpoint."""

    if not isinstance(checkpoint_args, dict):
        raise CheckpointError("args stored in checkpoint are not a dict")
    for checkpoint_arg_name, checkpoint_arg_value in checkpoint_args.items():
        args_value = getattr(args, checkpoint_arg_name)
        if isinstance(args_value, tuple):
            args_value = list(args_value)
        if checkpoint_arg_value != args_value:
            error_message = "{} value from checkpoint ({}) is not equal to the currently set argument value ({}).".format(
                checkpoint_arg_name, checkpoint_arg_value, args_value
            )
            logging.error(error_message)
            raise CheckpointError(error_message)


def do_forward_pass(args, model):
    """Class scores of a fixed pseudo-random image and fixed class signals."""

    # set to eval mode
    model_was_in_train = model.training
    model.eval()

    generator = torch.Generator().manual_seed(VALIDATION_SEED)
    image = torch.rand((3, args.image_size, args.image_size), generator=generator)
    signals = torch.rand((model.n_classes, args.feature_dim), generator=generator)
    with torch.no_grad():
        output = model.predict(image.to(model.device), signals.to(model.device))

    # reset to train mode, if model was in training before
    if model_was_in_train:
        model.train()

    return output.scores.detach().cpu()


def check_forward_pass(args, model, checkpoint_scores):
    # do forward pass with loaded checkpoint
    scores = do_forward_pass(args=args, model=model)
    checkpoint_scores = torch.as_tensor(checkpoint_scores, dtype=scores.dtype)

    # check
    if checkpoint_scores.numel() != scores.numel():
        raise CheckpointError(
            "validate_checkpoint_forward() forward after load of checkpoint yields a different number of proposals"
        )
    checkpoint_scores = checkpoint_scores.reshape(scores.shape)
    if not (scores == checkpoint_scores).all().item():
        print_rank_0(
            " > WARNING: validate_checkpoint_forward() forward after load of checkpoint does not yield exactly same result"
        )
        if not torch.isclose(scores, checkpoint_scores, atol=1e-6).all().item():
            raise CheckpointError(
                "validate_checkpoint_forward() forward after load of checkpoint does not yield a close result"
            )


def ensure_directory_exists(filename):
    """Build filename's path if it does not already exists."""
    dirname = os.path.dirname(filename)
    if dirname and not os.path.exists(dirname):
        os.makedirs(dirname)


def get_checkpoint_tag(iteration: int) -> str:
    return f"global_step{iteration}"


def get_checkpoint_name(save_dir, iteration):
    """A unified checkpoint name."""
    return os.path.join(save_dir, get_checkpoint_tag(iteration), MODEL_FILENAME)


def list_checkpoints(save_dir):
    ckpt_dir_regex = r"global_step[\d]+$"
    return natural_sort(
        [
            i
            for i in glob(os.path.join(save_dir, "*"))
            if os.path.isdir(i)
            and re.search(ckpt_dir_regex, i)
            and os.path.isfile(os.path.join(i, META_FILENAME))
        ]
    )


def find_latest_checkpoint(save_dir):
    """Directory of the newest complete checkpoint in `save_dir`, or None."""
    if not os.path.isdir(save_dir):
        return None
    checkpoints = list_checkpoints(save_dir)
    return checkpoints[-1] if checkpoints else None


def delete_old_checkpoints(save_dir, n_to_keep):
    all_ckpts = list_checkpoints(save_dir.rstrip("/"))
    n_to_delete = len(all_ckpts) - n_to_keep
    if n_to_delete > 0:
        to_delete = all_ckpts[:n_to_delete]
        print_rank_0(f"WARNING: Deleting old checkpoints: \n\t{', '.join(to_delete)}")
        for ckpt in to_delete:
            try:
                shutil.rmtree(ckpt)
            except FileNotFoundError:
                pass


def multiprocessing_starmap(func, args, num_processes=None):
    """Wrapper to allow for re-usable multiprocessing pools with `spawn` context handling
    Args:
        func (Callable): Function to call
        args (Iterable): Iterable of arguments to pass to `func`
        num_processes (int, optional): Number of processes to spawn. Defaults to `multiprocessing.cpu_count() - 1`
    Returns:
        list of results in the order of `args`
    """
    num_processes = num_processes or max(1, multiprocessing.cpu_count() - 1)
    with multiprocessing.get_context("spawn").Pool(processes=num_processes) as process_pool:
        results = process_pool.starmap(func, args)
        process_pool.close()
        process_pool.join()
    return results


def save_checkpoint(args, save_dir, stage, iteration, model, lr_scheduler=None, catalog=None):
    """Save a model checkpoint into `save_dir/global_step<iteration>`; returns its directory."""
    tag = get_checkpoint_tag(iteration)
    checkpoint_dir = os.path.join(save_dir, tag)
    model_path = get_checkpoint_name(save_dir, iteration)
    ensure_directory_exists(model_path)

    meta = {
        "stage": stage,
        "iteration": iteration,
        "args": args.architecture_dict(),
        "head_config": model.head.config.to_dict(),
        "class_ids": list(model.class_ids),
        "git_hash": get_git_commit_hash(),
    }
    if catalog is not None:
        meta["catalog"] = catalog.to_dict()
    if lr_scheduler is not None:
        meta["lr_scheduler"] = lr_scheduler.state_dict()
    if args.checkpoint_validation_with_forward_pass:
        meta["checkpoint_validation_scores"] = do_forward_pass(args=args, model=model).tolist()

    save_model(model, model_path, metadata={"stage": stage, "iteration": str(iteration)})

    # save config files
    if args.config_files is not None:
        configs_directory = os.path.join(checkpoint_dir, "configs")
        os.makedirs(configs_directory, exist_ok=True)
        for config_filename, config_data in args.config_files.items():
            with open(os.path.join(configs_directory, config_filename), "w") as f:
                if isinstance(config_data, str):
                    f.write(config_data)
                else:
                    json.dump(config_data, f)

    # meta.json last: a directory without it is an incomplete checkpoint
    write_json_atomic(os.path.join(checkpoint_dir, META_FILENAME), meta)
    print_rank_0(f" > saved {stage} checkpoint at iteration {iteration} to {checkpoint_dir}")

    if args.keep_last_n_checkpoints is not None:
        delete_old_checkpoints(save_dir, args.keep_last_n_checkpoints)
    return checkpoint_dir


def load_checkpoint_meta(checkpoint_dir, stage=None):
    meta_path = os.path.join(checkpoint_dir, META_FILENAME)
    if not os.path.isfile(meta_path):
        raise CheckpointError(
            f"no {stage or 'model'} checkpoint found at {checkpoint_dir}"
        )
    with open(meta_path) as f:
        return json.load(f)


def load_checkpoint(args, model, checkpoint_dir, lr_scheduler=None, stage=None):
    """Load a model checkpoint into `model` and return its meta data."""
    meta = load_checkpoint_meta(checkpoint_dir, stage)

    # Check arguments.
    check_checkpoint_args(args=args, checkpoint_args=meta["args"])
    print_rank_0(" > validated currently set args with arguments in the checkpoint ...")
    if list(meta["class_ids"]) != list(model.class_ids):
        raise CheckpointError(
            f"checkpoint classes {meta['class_ids']} differ from model classes {model.class_ids}"
        )

    try:
        load_model(model, os.path.join(checkpoint_dir, MODEL_FILENAME), strict=True)
    except (RuntimeError, FileNotFoundError) as e:
        raise CheckpointError(f"unable to load {stage or 'model'} checkpoint {checkpoint_dir}: {e}")

    if lr_scheduler is not None and "lr_scheduler" in meta:
        lr_scheduler.load_state_dict(meta["lr_scheduler"])

    # Check loaded checkpoint with forward pass
    if args.checkpoint_validation_with_forward_pass:
        if "checkpoint_validation_scores" in meta:
            check_forward_pass(args, model, meta["checkpoint_validation_scores"])
            print_rank_0(" > validated loaded checkpoint with forward pass ...")
        else:
            print_rank_0(
                " > WARNING: checkpoint_validation_with_forward_pass is configured but no checkpoint validation data available in checkpoint {}".format(
                    checkpoint_dir
                )
            )

    print_rank_0("  successfully loaded {}".format(checkpoint_dir))
    return meta


def load_model_from_checkpoint(args, checkpoint_dir, stage=None, device=None):
    """Builds a detector over the stored class set and loads its weights."""
    from .model import MetaDetector

    meta = load_checkpoint_meta(checkpoint_dir, stage)
    check_checkpoint_args(args=args, checkpoint_args=meta["args"])
    model = MetaDetector(args, meta["class_ids"])
    if device is not None:
        model.to(device)
    load_checkpoint(args, model, checkpoint_dir, stage=stage)
    return model, meta
