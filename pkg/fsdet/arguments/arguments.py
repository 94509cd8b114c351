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

import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List

import yaml

try:
    import tomllib
except ImportError:
    import tomli as tomllib

try:
    from typing import Literal, Union
except ImportError:
    from typing_extensions import Literal, Union

from ..data.shapes import default_novel_class_ids, shape_class_names
from ..errors import ConfigurationError
from ..logging import Tee
from ..utils import canonical_json_bytes, sha256_hex
from .fsdet_args import (
    FSDetArgsAggregation,
    FSDetArgsData,
    FSDetArgsEvaluation,
    FSDetArgsLogging,
    FSDetArgsModel,
    FSDetArgsTraining,
)

BASE_CLASSES = [
    FSDetArgsData,
    FSDetArgsModel,
    FSDetArgsAggregation,
    FSDetArgsTraining,
    FSDetArgsEvaluation,
    FSDetArgsLogging,
]

# where a run writes to, not what it computes; left out of the config hash
HASH_EXCLUDED_KEYS = ("config_files", "out", "log_dir", "tensorboard_dir", "log_interval")

# keys that only influence fine-tuning, evaluation or analysis
STAGE1_EXCLUDED_KEYS = HASH_EXCLUDED_KEYS + (
    "seeds",
    "stage2_k",
    "stage2_iters",
    "stage2_lr",
    "classifier_init",
    "stage2_freeze_backbone",
    "stage2_freeze_rpn",
    "stage2_freeze_head_extractors",
    "stage2_train_vae",
    "stage2_train_last_layers",
    "eval_iou_thresh",
    "recall_score_thresh",
    "analysis_k_values",
    "proto_reference_k",
    "proto_resamples",
    "score_thresh",
    "nms_iou",
    "detections_per_image",
    "rpn_test_top_k",
)

# stored with every checkpoint and compared on load
ARCHITECTURE_KEYS = (
    "image_size",
    "backbone_channels",
    "norm",
    "feature_dim",
    "roi_output_size",
    "anchor_size",
    "anchor_ratios",
    "classifier_kind",
    "cosine_scale",
    "decouple",
    "aggregation_mode",
    "vae_latent_dim",
    "vae_hidden_dim",
    "vae_hidden_layers",
    "consistency_loss",
)

DEFAULT_STAGE2_ITERS = {1: 200, 3: 400, 5: 600, 10: 1000}


@dataclass
class FSDetArgs(*BASE_CLASSES):
    """
    data class containing all configurations

    FSDetArgs inherits from a number of small configuration classes
    """

    ############################################################################################################################
    # start of instantiation

    def __post_init__(self):
        """
        after initialization of default or loaded values
        a number of functions are performed in order to
        calculate values, assert consistency and do typechecking.
        """
        if not FSDetArgs.validate_keys():
            raise ConfigurationError(
                self.__class__.__name__
                + ".__post_init__() FSDetArgs keys cannot be validated"
            )

        self.enable_logging()

        self.calculate_derived()

        if not self.validate_types():
            raise ConfigurationError(
                self.__class__.__name__
                + ".__post_init__() FSDetArgs types cannot be validated"
            )

        self.validate_values()

    def initialize_tensorboard_writer(self):
        if self.tensorboard_dir:
            try:
                from torch.utils.tensorboard import SummaryWriter

                print("> setting tensorboard ...")
                self.tensorboard_writer = SummaryWriter(log_dir=self.tensorboard_dir)
            except (ModuleNotFoundError, ImportError):
                print(
                    "WARNING: TensorBoard writing requested but is not "
                    "available (do you have tensorboard installed?), "
                    "no TensorBoard logs will be written.",
                    flush=True,
                )

    ############################################################################################################################
    # start of loading

    @staticmethod
    def load_config_file(path) -> dict:
        """
        reads one yml / json / toml file into a dictionary
        """
        if str(path).endswith(".toml"):
            with open(path, "rb") as conf_file:
                conf = tomllib.load(conf_file)
        else:
            # json is valid yaml
            with open(path) as conf_file:
                conf = yaml.load(conf_file, Loader=yaml.FullLoader)
        if conf is None:
            conf = dict()
        if not isinstance(conf, dict):
            raise ConfigurationError(
                f"Conf file {path} must contain a mapping at the top level"
            )
        return conf

    @classmethod
    def resolve_key(cls, key: str) -> str:
        """
        maps a plain or dotted key (e.g. `train.stage2.K`) onto an argument name.

        Leading path segments are treated as group names and dropped until the rest,
        joined with "_", names an argument.
        """
        parts = [p for p in key.replace("-", "_").split(".") if p]
        for i in range(len(parts)):
            candidate = "_".join(parts[i:])
            for name in (candidate, candidate.lower()):
                if name in cls.__dataclass_fields__:
                    return name
        error_message = (
            cls.__name__ + f".resolve_key() unknown configuration key '{key}'"
        )
        logging.error(error_message)
        raise ConfigurationError(error_message)

    @classmethod
    def flatten_config(cls, conf: dict, prefix=()) -> Dict:
        """
        flattens nested tables into {argument name: value}
        """
        result = dict()
        for key, value in conf.items():
            path = prefix + (str(key),)
            if isinstance(value, dict):
                try:
                    name = cls.resolve_key(".".join(path))
                except ConfigurationError:
                    name = None
                if name is None or cls.__dataclass_fields__[name].type is not dict:
                    for k, v in cls.flatten_config(value, path).items():
                        if k in result:
                            raise ConfigurationError(
                                f"configuration key {k} is given more than once"
                            )
                        result[k] = v
                    continue
            name = cls.resolve_key(".".join(path))
            if name in result:
                raise ConfigurationError(
                    f"configuration key {name} is given more than once"
                )
            result[name] = cls.coerce_value(name, value)
        return result

    @classmethod
    def coerce_value(cls, key: str, value):
        """
        a scalar given for a list argument becomes a one element list
        """
        field_def = cls.__dataclass_fields__[key]
        if field_def.type is list and value is not None and not isinstance(value, list):
            return [value]
        return value

    @classmethod
    def parse_overrides(cls, overrides: List[str]) -> Dict:
        """
        parses `key=value` strings from the command line. Values follow yaml scalar rules.
        """
        result = dict()
        for item in overrides or []:
            if "=" not in item:
                error_message = (
                    cls.__name__
                    + f".parse_overrides() override '{item}' is not of the form key=value"
                )
                logging.error(error_message)
                raise ConfigurationError(error_message)
            key, raw_value = item.split("=", 1)
            name = cls.resolve_key(key.strip())
            try:
                value = yaml.safe_load(raw_value)
            except yaml.YAMLError:
                value = raw_value
            result[name] = cls.coerce_value(name, value)
        return result

    @classmethod
    def from_files(cls, paths_to_config_files: List[str], overwrite_values: Dict = None):
        """
        instantiates FSDetArgs while reading values from yml, json or toml files

        paths_to_config_files: list of paths to config files

        overwrite_values: If provided, overwrite any values in the files with these values
        """

        print(cls.__name__ + ".from_files() " + str(paths_to_config_files), flush=True)

        # initialize an empty config dictionary to be filled by the files
        config = dict()
        config_files = dict()
        for conf_file_name in paths_to_config_files:
            conf = cls.flatten_config(cls.load_config_file(conf_file_name))

            # check for key duplicates and load values
            for conf_key, conf_value in conf.items():
                if conf_key in config:
                    raise ConfigurationError(
                        f"Conf file {conf_file_name} has the following duplicate keys with previously loaded file: {conf_key}"
                    )
                config[conf_key] = conf_value

            # the original file is saved unchanged with checkpoints and keeps its comments
            filename = os.path.basename(conf_file_name)
            if filename in config_files:
                raise ConfigurationError(
                    "At least two config files have the same filename. Please use unique names for configs."
                )
            with open(conf_file_name) as conf_file:
                config_files[filename] = conf_file.read()

        config["config_files"] = config_files

        params_not_in_config = sorted(
            list(set(cls.__dataclass_fields__.keys()) - set(config.keys()))
        )
        if len(params_not_in_config) > 0:
            logging.debug(
                cls.__name__
                + ".from_files() Configuration parameters not specified (using defaults): "
                + ", ".join(params_not_in_config)
            )

        if overwrite_values is not None:
            for k, v in overwrite_values.items():
                config[k] = v

        return cls(**config)

    @classmethod
    def from_dict(cls, args_dict: Dict):
        """
        instantiates FSDetArgs while reading values from input dict
        """
        unknown = sorted(set(args_dict) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(
                cls.__name__ + ".from_dict() unknown configuration keys: " + ", ".join(unknown)
            )
        return cls(**args_dict)

    ############################################################################################################################
    # start of serialization

    @property
    def all_config(self) -> dict:
        """
        returns variables of all args
        """
        return self.get_parent_class_value_dict(*BASE_CLASSES)

    def get_parent_class_value_dict(
        self, *parent_classes, only_non_defaults=False
    ) -> dict:
        """
        takes a sequence of parent classes and returns corresponding values (with defaults set)
        """
        result = dict()
        for parent in parent_classes:
            for key, default_value in parent().defaults():
                if only_non_defaults:
                    value = getattr(self, key)
                    if value == default_value:
                        continue
                result[key] = getattr(self, key)
        return result

    def experiment_dict(self, exclude=HASH_EXCLUDED_KEYS) -> dict:
        return {k: v for k, v in self.all_config.items() if k not in exclude}

    def to_json(self) -> str:
        """
        canonical json of every argument that influences results
        """
        return canonical_json_bytes(self.experiment_dict()).decode("utf-8")

    @property
    def config_hash(self) -> str:
        return sha256_hex(self.to_json().encode("utf-8"), length=12)

    @property
    def stage1_hash(self) -> str:
        """
        hash of the arguments that determine the stage-I checkpoint
        """
        return sha256_hex(
            canonical_json_bytes(self.experiment_dict(exclude=STAGE1_EXCLUDED_KEYS)),
            length=12,
        )

    def architecture_dict(self) -> dict:
        return {k: getattr(self, k) for k in ARCHITECTURE_KEYS}

    def copy(self, **overwrite_values):
        """
        new instance with the same values, optionally overwritten
        """
        d = self.all_config
        d.update(overwrite_values)
        return self.__class__.from_dict(d)

    ############################################################################################################################
    # start of logging and output

    def enable_logging(self):
        """
        enable Tee logs based on the configured logdir
        """
        if self.log_dir:
            os.makedirs(self.log_dir, exist_ok=True)
            time = datetime.now().strftime("%m-%d-%Y-%H-%M-%S")
            file_prefix = os.path.join(self.log_dir, time)
            for err, suffix in ((False, "_stdout.txt"), (True, "_stderr.txt")):
                # one Tee per stream and log directory for the whole process
                if not Tee.active(self.log_dir, err=err):
                    Tee(file_prefix + suffix, err=err)

    def print(self):
        """Print arguments."""
        print("-------------------- arguments --------------------", flush=True)
        str_list = []
        for arg in vars(self):
            if arg in ["config_files", "tensorboard_writer"]:
                continue
            # add arg + value
            dots = "." * (32 - len(arg))
            value = getattr(self, arg)
            print_str = "  {} {} {}".format(arg, dots, value)

            # add info 'default or updated'
            field_def = self.__dataclass_fields__.get(arg)
            if field_def is not None:
                default_info = "default" if value == field_def.default else "updated"
            else:
                default_info = ""
            dots = "." * (64 - len(print_str))
            print_str += dots
            str_list.append({"print_str": print_str, "default_info": default_info})

        for arg in sorted(
            sorted(str_list, key=lambda x: x["print_str"].lower()),
            key=lambda x: x["default_info"],
            reverse=True,
        ):
            print(arg["print_str"] + arg["default_info"], flush=True)
        print("---------------- end of arguments ----------------", flush=True)

    ############################################################################################################################
    # start of calculations and derived values

    def calculate_derived(self):
        """
        Derives additional configuration values from the current config
        """
        # choices are case insensitive
        for field_name, field_def in self.__dataclass_fields__.items():
            value = getattr(self, field_name)
            if getattr(field_def.type, "__origin__", None) == Literal and isinstance(
                value, str
            ):
                self.update_value(field_name, value.lower())

        if self.objects_per_image is None:
            self.update_value("objects_per_image", [1, 3])
        if self.dataset == "shapes":
            if self.class_names is None:
                self.update_value(
                    "class_names", shape_class_names(self.n_shape_classes)
                )
            if self.novel_class_ids is None:
                self.update_value(
                    "novel_class_ids", default_novel_class_ids(self.n_shape_classes)
                )
        if self.backbone_channels is None:
            self.update_value("backbone_channels", [32, 64, 128, 256])
        if self.anchor_ratios is None:
            self.update_value("anchor_ratios", [0.5, 1.0, 2.0])
        if self.vae_latent_dim is None:
            self.update_value("vae_latent_dim", self.feature_dim)
        if self.vae_hidden_dim is None:
            self.update_value("vae_hidden_dim", self.feature_dim)
        if self.seeds is None:
            self.update_value("seeds", [self.seed])
        if self.stage2_k is None:
            self.update_value("stage2_k", [1, 3, 5])
        if self.stage2_iters is None:
            self.update_value("stage2_iters", dict(DEFAULT_STAGE2_ITERS))
        elif isinstance(self.stage2_iters, dict):
            # json and toml tables only have string keys
            try:
                self.update_value(
                    "stage2_iters", {int(k): v for k, v in self.stage2_iters.items()}
                )
            except ValueError:
                error_message = (
                    self.__class__.__name__
                    + ".calculate_derived() stage2_iters keys must be shot counts"
                )
                logging.error(error_message)
                raise ConfigurationError(error_message)
        if self.lr_step_iters is None:
            self.update_value("lr_step_iters", [])
        if self.analysis_k_values is None:
            self.update_value("analysis_k_values", [1, 2, 3, 5, 10])
        if self.novel_class_ids is not None:
            self.update_value("novel_class_ids", sorted(self.novel_class_ids))

    @property
    def base_class_ids(self) -> List[int]:
        novel = set(self.novel_class_ids)
        return [i for i in range(len(self.class_names)) if i not in novel]

    def stage2_iterations(self, k: int) -> int:
        if k not in self.stage2_iters:
            error_message = (
                self.__class__.__name__
                + f".stage2_iterations() no fine-tuning schedule for K={k} in stage2_iters"
            )
            logging.error(error_message)
            raise ConfigurationError(error_message)
        return self.stage2_iters[k]

    ############################################################################################################################
    # start of validation functions

    @classmethod
    def validate_keys(cls):
        """
        test that there are no duplicate arguments
        """
        source_classes = list(cls.__bases__)
        defined_properties = dict()

        for source_class in source_classes:
            source_vars = list(source_class.__dataclass_fields__)
            for item in source_vars:
                if item in defined_properties.keys():
                    logging.error(
                        f"({cls.__name__}) duplicate of item: {item}, in class {source_class.__name__} and {defined_properties[item]}"
                    )
                    return False
                else:
                    defined_properties[item] = source_class.__name__
        return True

    def _value_error(self, message):
        error_message = self.__class__.__name__ + ".validate_values() " + message
        logging.error(error_message)
        raise ConfigurationError(error_message)

    def validate_values(self):
        # dataset
        if self.dataset == "shapes" and not 6 <= self.n_shape_classes <= 12:
            self._value_error(
                f"n_shape_classes must be between 6 and 12, got {self.n_shape_classes}"
            )
        if self.dataset == "voc":
            if self.voc_root is None:
                self._value_error("voc_root is required when dataset == 'voc'")
            if self.class_names is None or self.novel_class_ids is None:
                self._value_error(
                    "class_names and novel_class_ids are required when dataset == 'voc'"
                )
        if self.image_size <= 0:
            self._value_error(f"image_size must be positive, got {self.image_size}")
        if len(self.objects_per_image) != 2:
            self._value_error("objects_per_image must be [min, max]")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            self._value_error(f"objects_per_image range [{lo}, {hi}] is invalid")
        if not 0 < self.min_object_size <= self.max_object_size < self.image_size:
            self._value_error(
                "object sizes must satisfy 0 < min_object_size <= max_object_size < image_size"
            )
        if not 0.0 <= self.noise_level <= 1.0:
            self._value_error(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.n_train_images < 1 or self.n_test_images < 1:
            self._value_error("n_train_images and n_test_images must be >= 1")

        # catalog
        n_classes = len(self.class_names)
        if len(set(self.class_names)) != n_classes:
            self._value_error("class_names must be unique")
        novel = set(self.novel_class_ids)
        if not novel or not novel.issubset(range(n_classes)):
            self._value_error(
                f"novel_class_ids {self.novel_class_ids} must be a nonempty subset of 0..{n_classes - 1}"
            )
        if len(novel) >= n_classes:
            self._value_error("at least one base class is required")

        # model
        if len(self.backbone_channels) != 4 or min(self.backbone_channels) <= 0:
            self._value_error("backbone_channels must hold four positive channel counts")
        if self.feature_dim <= 0 or self.vae_hidden_dim <= 0 or self.vae_hidden_layers < 1:
            self._value_error("feature, hidden dims and hidden layer count must be positive")
        if self.vae_latent_dim != self.feature_dim:
            self._value_error(
                f"vae_latent_dim ({self.vae_latent_dim}) must equal feature_dim ({self.feature_dim}), "
                "the latent feature is multiplied channel-wise onto RoI features"
            )
        if self.classifier_kind == "cosine" and self.cosine_scale <= 0:
            self._value_error(f"cosine_scale must be > 0, got {self.cosine_scale}")
        if self.fg_iou_thresh < self.bg_iou_thresh:
            self._value_error("fg_iou_thresh must be >= bg_iou_thresh")
        if not 0.0 < self.roi_positive_fraction <= 1.0:
            self._value_error("roi_positive_fraction must be in (0, 1]")

        # training
        for name in ["stage1_lr", "stage2_lr"]:
            if getattr(self, name) <= 0:
                self._value_error(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.alpha < 0:
            self._value_error("momentum, weight_decay and alpha must be >= 0")
        if self.gradient_accumulation_steps < 1:
            self._value_error("gradient_accumulation_steps must be >= 1")
        if self.stage1_iters < 0:
            self._value_error("stage1_iters must be >= 0")
        if not self.seeds:
            self._value_error("seeds must not be empty")
        for k in self.stage2_k:
            if not isinstance(k, int) or k < 1:
                self._value_error(f"shot counts must be positive integers, got {k}")
            if k not in self.stage2_iters:
                self._value_error(f"stage2_iters has no entry for K={k}")

        # evaluation
        if self.proto_reference_k not in self.analysis_k_values:
            self._value_error(
                f"proto_reference_k ({self.proto_reference_k}) must be one of analysis_k_values"
            )
        return True

    def validate_types(self):
        """
        At runtime, checks types are actually the type specified.
        """
        for field_name, field_def in self.__dataclass_fields__.items():
            actual_value = getattr(self, field_name)
            if actual_value is None:
                continue  # we allow for some values not to be configured

            actual_type = type(actual_value)
            if actual_type != field_def.type:
                if (
                    actual_type == int and field_def.type == float
                ):  # floats should be able to be configured as ints
                    continue
                # for typing.Literal (i.e a list of choices) - checks that actual value is in accepted values
                elif getattr(field_def.type, "__origin__", None) == Literal:
                    accepted_values = field_def.type.__args__
                    if actual_value in accepted_values:
                        continue
                    elif type(actual_value) == str:
                        # case insensitive checking
                        lowercase_accepted_values = [
                            i.lower() for i in accepted_values if isinstance(i, str)
                        ]
                        if actual_value.lower() in lowercase_accepted_values:
                            self.update_value(field_name, actual_value.lower())
                            continue
                    logging.error(
                        self.__class__.__name__
                        + ".validate_types() "
                        + f"{field_name}: '{actual_value}' Not in accepted values: '{accepted_values}'"
                    )
                    return False
                elif getattr(field_def.type, "__origin__", None) == Union:
                    accepted_types = field_def.type.__args__
                    if actual_type in accepted_types:
                        continue
                    else:
                        logging.error(
                            self.__class__.__name__
                            + ".validate_types() "
                            + f"{field_name}: '{actual_type}' not in {accepted_types}"
                        )
                        return False

                logging.error(
                    self.__class__.__name__
                    + ".validate_types() "
                    + f"{field_name}: '{actual_type}' instead of '{field_def.type}'"
                )
                return False

        return True

    def save_config(self, path):
        """
        writes the canonical json used for the config hash
        """
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load_config(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))
