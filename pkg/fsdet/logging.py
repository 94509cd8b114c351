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
import sys

import jsonlines
import torch

from fsdet import print_rank_0


class Tee:
    """Replaces sys.stdout (or sys.stderr with err=True) and copies every write into `file`."""

    def __init__(self, file, err: bool = False) -> None:
        self.stream_name = "stderr" if err else "stdout"
        self.log_dir = os.path.dirname(os.path.abspath(file))
        self.file = open(file, "a")
        self.std = getattr(sys, self.stream_name)
        setattr(sys, self.stream_name, self)

    @staticmethod
    def active(log_dir, err: bool = False) -> bool:
        """True if the current stdout (stderr) is already copied into `log_dir`."""
        stream = getattr(sys, "stderr" if err else "stdout")
        log_dir = os.path.abspath(log_dir)
        while isinstance(stream, Tee):
            if stream.log_dir == log_dir:
                return True
            stream = stream.std
        return False

    def __del__(self) -> None:
        if getattr(sys, self.stream_name) is self:
            setattr(sys, self.stream_name, self.std)
        self.file.close()

    def write(self, data) -> None:
        for stream in (self.file, self.std):
            try:
                stream.write(data)
            except OSError:
                pass

    def flush(self) -> None:
        for stream in (self.file, self.std):
            try:
                stream.flush()
            except OSError:
                pass


class LossLog:
    """Appends one json object per iteration to a newline-delimited json file."""

    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        self._fp = open(path, "a")
        self._writer = jsonlines.Writer(self._fp, flush=True, sort_keys=True)

    def write(self, iteration, loss_report, learning_rate=None):
        record = {"stage": self.stage, "iteration": iteration}
        record.update(loss_report.as_dict())
        if learning_rate is not None:
            record["lr"] = learning_rate
        self._writer.write(record)

    def close(self):
        self._writer.close()
        self._fp.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path):
        with jsonlines.open(path) as reader:
            return list(reader)


def training_log(
    args,
    timers,
    loss_dict,
    total_loss_dict,
    learning_rate,
    iteration,
    total_iters,
    stage,
):
    """Log training information such as losses, timing, etc."""

    # Update losses.
    got_nan_key = "got nan"
    got_nan = False
    for key, value in loss_dict.items():
        value = float(value)
        is_nan = value == float("inf") or value == -float("inf") or value != value
        got_nan = got_nan or is_nan
        total_loss_dict[key] = total_loss_dict.get(key, 0.0) + value
    total_loss_dict[got_nan_key] = total_loss_dict.get(got_nan_key, 0) + int(got_nan)

    # Logging.
    timers_to_log = []

    def add_to_logging(name):
        if name in timers.timers:
            timers_to_log.append(name)

    add_to_logging("forward")
    add_to_logging("backward")
    add_to_logging("optimizer")
    add_to_logging("episode sampler")

    normalizer = iteration % args.log_interval
    if normalizer == 0:
        normalizer = args.log_interval
    timers.write(names=timers_to_log, iteration=iteration, normalizer=normalizer)

    # write losses, lr, etc. every step
    tb_log(f"{stage}/learning_rate", learning_rate, iteration, args.tensorboard_writer)
    for key in loss_dict:
        tb_log(
            f'{stage}/{key.replace(" ", "_")}',
            loss_dict[key],
            iteration,
            args.tensorboard_writer,
        )

    if iteration % args.log_interval == 0 or iteration == total_iters:
        # log other stuff every args.log_interval iters
        elapsed_time = timers("interval time").elapsed()
        num_iterations = normalizer
        log_string = " {} |".format(stage)
        log_string += " iteration {:8d}/{:8d} |".format(iteration, total_iters)
        log_string += " elapsed time per iteration (ms): {:.1f} |".format(
            elapsed_time * 1000.0 / num_iterations
        )
        log_string += " learning rate: {:.3E} |".format(learning_rate)
        for key in list(total_loss_dict):
            if key == got_nan_key:
                continue
            avg = total_loss_dict[key] / float(num_iterations)
            log_string += " {}: {:.6E} |".format(key, avg)
            total_loss_dict[key] = 0.0
        log_string += " number of nan iterations: {:3d} |".format(
            total_loss_dict[got_nan_key]
        )
        total_loss_dict[got_nan_key] = 0
        print_rank_0(log_string)

        timers.log(timers_to_log, normalizer=num_iterations)


def tb_log(key: str, value, iteration_no: int, tensorboard_writer=None):
    if tensorboard_writer is None or value is None:
        return
    try:
        if isinstance(value, torch.Tensor) and value.numel() > 1:
            tensorboard_writer.add_histogram(key, value, iteration_no)
        else:
            tensorboard_writer.add_scalar(key, float(value), iteration_no)
    except Exception as e:
        print(f"tensorboard logging error ({e})! {key=}, {value=}", flush=True)
