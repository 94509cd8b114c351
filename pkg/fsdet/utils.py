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

"""General utilities."""

import hashlib
import json
import os
import random
import re
import subprocess
import time

import numpy as np
import torch

WORKERS_ENV_VAR = "FSDET_WORKERS"


def natural_sort(l):
    convert = lambda text: int(text) if text.isdigit() else text.lower()
    alphanum_key = lambda key: [convert(c) for c in re.split("([0-9]+)", key)]
    return sorted(l, key=alphanum_key)


def get_git_commit_hash():
    """Gets the git commit hash of your current repo (if it exists)"""
    try:
        git_hash = subprocess.check_output(
            ["git", "describe", "--always"], stderr=subprocess.DEVNULL
        ).strip()
        git_hash = git_hash.decode()
    except (subprocess.CalledProcessError, FileNotFoundError):
        git_hash = None
    return git_hash


def set_seeds(seed):
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def get_worker_count():
    """Number of processes used for independent stage-II cells."""
    value = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        workers = int(value)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV_VAR} must be an integer, got '{value}'")
    return max(1, workers)


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode("utf-8")


def sha256_hex(data: bytes, length: int = None) -> str:
    digest = hashlib.sha256(data).hexdigest()
    return digest if length is None else digest[:length]


def write_json_atomic(path, obj, indent=2):
    """Write json next to `path` and move it into place in one rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = os.path.join(
        directory, f".{os.path.basename(path)}.{os.getpid()}.tmp"
    )
    with open(tmp_path, "w") as f:
        json.dump(obj, f, indent=indent, sort_keys=True)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)


class Timer:
    """Accumulates wall-clock seconds over start/stop intervals."""

    def __init__(self, name):
        self.name = name
        self.total = 0.0
        self._started_at = None

    @property
    def running(self) -> bool:
        return self._started_at is not None

    @staticmethod
    def _now():
        # queued cuda kernels count towards the interval they were launched in
        if torch.cuda.is_available() and torch.cuda.is_initialized():
            torch.cuda.synchronize()
        return time.perf_counter()

    def start(self):
        assert not self.running, f"timer '{self.name}' has already been started"
        self._started_at = self._now()

    def stop(self):
        assert self.running, f"timer '{self.name}' is not started"
        self.total += self._now() - self._started_at
        self._started_at = None

    def reset(self):
        self.total = 0.0
        self._started_at = None

    def elapsed(self, reset=True):
        """Seconds accumulated so far; a running interval is included and keeps running."""
        was_running = self.running
        if was_running:
            self.stop()
        seconds = self.total
        if reset:
            self.reset()
        if was_running:
            self.start()
        return seconds


class Timers:
    """Named timers of one process; `timers("forward").start()` creates on first use."""

    def __init__(self, tensorboard_writer=None):
        self.timers = {}
        self.tensorboard_writer = tensorboard_writer

    def __call__(self, name) -> Timer:
        return self.timers.setdefault(name, Timer(name))

    def write(self, names, iteration, normalizer=1.0, reset=False):
        """Timer values as tensorboard scalars under timers/<name>."""
        assert normalizer > 0.0
        if not self.tensorboard_writer:
            return
        for name in names:
            seconds = self.timers[name].elapsed(reset=reset)
            self.tensorboard_writer.add_scalar(f"timers/{name}", seconds / normalizer, iteration)

    def log(self, names, normalizer=1.0, reset=True):
        """Prints `time (ms) | name: value | ...` for the known timers among `names`."""
        assert normalizer > 0.0
        fields = [
            "{}: {:.2f}".format(name, self.timers[name].elapsed(reset=reset) * 1000.0 / normalizer)
            for name in names
            if name in self.timers
        ]
        print(" | ".join(["time (ms)"] + fields), flush=True)
