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

import logging
from dataclasses import dataclass, fields

from ..errors import ConfigurationError


@dataclass
class FSDetArgsTemplate:
    """Base of the argument groups; values may only be set on declared fields."""

    def defaults(self):
        """(name, default) of every declared field."""
        for f in fields(self):
            yield f.name, f.default

    def update_value(self, key: str, value):
        if key not in self.__dataclass_fields__:
            error_message = (
                f"{self.__class__.__name__}.update_value() '{key}' is not a configuration field"
            )
            logging.error(error_message)
            raise ConfigurationError(error_message)
        setattr(self, key, value)
