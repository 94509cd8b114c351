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

"""Exception types raised across fsdet.

Each error derives from the builtin family a caller would already expect, so
``except ValueError`` keeps working for configuration and parsing problems.
"""


class ConfigurationError(ValueError):
    """Invalid run configuration, dataset spec or model dimensions."""


class AnnotationParseError(ValueError):
    """A VOC annotation file could not be parsed."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"could not parse annotation file {self.path}: {reason}")


class SplitError(ValueError):
    """A few-shot split cannot be drawn from the dataset."""

    def __init__(self, class_name, available, requested):
        self.class_name = class_name
        self.available = available
        self.requested = requested
        super().__init__(
            f"class '{class_name}' has {available} annotated instances, {requested} requested"
        )


class SplitImageError(ValueError):
    """A stored split names an image that the dataset does not contain."""

    def __init__(self, class_name, image_id):
        self.class_name = class_name
        self.image_id = image_id
        super().__init__(
            f"split shot of class '{class_name}' refers to image '{image_id}', which is not in the dataset"
        )


class SamplingError(RuntimeError):
    """An episode cannot be sampled from the given pools."""


class CheckpointError(RuntimeError):
    """A checkpoint is missing or incompatible with the current arguments."""


class NumericError(ArithmeticError):
    """Non-finite values reached a place where they must not appear."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss.

    ``snapshot`` is the path of the diagnostic file written before aborting
    (None if it could not be written).
    """

    def __init__(self, message, stage=None, iteration=None, losses=None, snapshot=None):
        self.stage = stage
        self.iteration = iteration
        self.losses = losses or {}
        self.snapshot = snapshot
        super().__init__(message)
