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

import os
import shutil
import itertools
from copy import deepcopy
from pathlib import Path

import random

import numpy as np
import torch
from yaml import load

try:
    from yaml import CLoader as Loader
except ImportError:
    from yaml import Loader

TEST_OUT_DIR = "test_runs"
TEST_LOG_DIR = "test_logs"
TEST_TENSORBOARD_DIR = "test_tensorboard"


def get_root_directory():
    return Path(__file__).parents[1]


def get_config_directory():
    return get_root_directory() / "configs"


def get_configs_with_path(configs):
    return [str(get_config_directory() / cfg) for cfg in configs]


def get_test_configs_with_path(configs: list):
    test_config_dir = Path(__file__).parent / "test_configs"
    return [str((test_config_dir / cfg).absolute()) for cfg in configs]


def clear_test_dirs():
    for name in (TEST_OUT_DIR, TEST_LOG_DIR, TEST_TENSORBOARD_DIR):
        directory = os.path.join(get_root_directory(), name)
        if os.path.isdir(directory):
            shutil.rmtree(directory)


def make_args(param_dict=None, **overwrite_values):
    """FSDetArgs of the tiny test config, updated with `param_dict` and keyword values."""
    from fsdet.arguments import FSDetArgs

    config = deepcopy(BASE_CONFIG)
    config.update(param_dict or {})
    config.update(overwrite_values)
    return FSDetArgs.from_dict(config)


_DATA_CACHE = {}


def tiny_data(args):
    """Datasets of `args`, built once per data configuration."""
    from fsdet.data.data_utils import build_datasets

    key = (
        args.data_seed,
        args.n_train_images,
        args.n_test_images,
        args.image_size,
        tuple(args.class_names),
        tuple(args.novel_class_ids),
    )
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = build_datasets(args)
    return _DATA_CACHE[key]


def model_setup(yaml_list=None, param_dict=None, clear_data=True, class_ids=None):
    """
    Builds args, a detector over the base classes (or `class_ids`), its optimizer
    and learning rate scheduler the way the training entry points do.
    """
    from fsdet.arguments import FSDetArgs
    from fsdet.learning_rates import get_learning_rate_scheduler
    from fsdet.model import MetaDetector
    from fsdet.optimizers import STAGE1, build_optimizer
    from fsdet.utils import set_seeds

    if clear_data:
        clear_test_dirs()

    overwrite_values = {"out": TEST_OUT_DIR}

    # initially load config from files as would be the case in launch.py
    if yaml_list is not None:
        args_loaded = FSDetArgs.from_files(yaml_list, overwrite_values=overwrite_values)
    else:
        p_dict = deepcopy(BASE_CONFIG)
        p_dict.update(param_dict or {})
        p_dict.update(overwrite_values)
        args_loaded = FSDetArgs.from_dict(p_dict)

    set_seeds(args_loaded.seed)
    class_ids = args_loaded.base_class_ids if class_ids is None else class_ids
    model = MetaDetector(args_loaded, class_ids)
    optimizer = build_optimizer(model, args_loaded.stage1_lr, args_loaded)
    lr_scheduler = get_learning_rate_scheduler(
        optimizer, args_loaded, STAGE1, args_loaded.stage1_iters
    )
    return model, optimizer, lr_scheduler, args_loaded


def random_image(size=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((size, size, 3), dtype=np.float32)


def snapshot_parameters(module):
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def parameters_equal(before, module):
    return all(torch.equal(before[name], p.detach()) for name, p in module.named_parameters())


def bounded_product(sequence, n=None, seed=None):
    """
    Returns a shuffled, bounded cartesian product of the input sequence.
    Designed to cover as wide a range of permutations as possible with a limited number of iterations.
    Will manifest the whole list in memory, so not suitable for super large sequences.

    :param sequence: iterable
    :param n: length of returned list
    :param seed: random seed for reproducibility
    :return: list
    """
    p = list(itertools.product(*sequence))
    if seed is not None:
        random.seed(seed)
    random.shuffle(p)
    return p if n is None else p[:n]


def parametrize(
    params_to_test: dict, max_tests: int = 50, seed: int = None, with_names=True
):
    """
    Generates a random sample of max_tests length of all possible combinations of values in
    `params_to_test`.

    Two keys separated by a comma are varied in tandem, i.e.
        "aggregation_mode,consistency_loss": [["vfa", "support"], ["csa", "none"]]

    :param params_to_test: dict of fsdet args
    :param max_tests: maximum number of tests to run
    :param seed: random seed
    :return: a list of param dicts (the test config updated) to pass to a parametrized unit test
    """
    keys, values = zip(*params_to_test.items())
    ret = []
    if with_names:
        experiments = []
    for p in bounded_product(values, n=max_tests, seed=seed):
        experiment = dict(zip(keys, p))
        to_pop = []
        to_add = {}
        for k, v in experiment.items():
            if "," in k:
                keys_split = [i.strip() for i in k.split(",")]
                values_separated = experiment[k]
                to_pop.append(k)
                assert len(values_separated) == len(keys_split)
                to_add.update(dict(zip(keys_split, values_separated)))
        experiment.update(to_add)
        for k in to_pop:
            experiment.pop(k)
        base = deepcopy(BASE_CONFIG)
        base.update(experiment)
        ret.append(base)
        if with_names:
            experiments.append(experiment)
    if with_names:
        return ret, [dict_repr(d) for d in experiments]
    return ret


def dict_repr(d):
    return " ".join([f"{str(k)} : {str(v)}" for k, v in d.items()])


binary = [True, False]

with open(get_test_configs_with_path(["test_base.yml"])[0], "r") as f:
    BASE_CONFIG = {k.replace("-", "_"): v for k, v in load(f, Loader=Loader).items()}
