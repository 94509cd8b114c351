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

"""Episode samplers for meta-training."""

from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import SamplingError
from .catalog import Episode, ImageSample, Instance, SupportExample
from .splits import FewShotSplit, split_support_pool


def sample_episode(
    query_pool: Sequence[ImageSample],
    support_source,
    class_set: Iterable[int],
    rng: np.random.Generator,
) -> Episode:
    """
    Draws one query image and one masked support example per class of `class_set`.

    support_source is either a FewShotSplit or a mapping class_id -> instances.
    Supports are ordered by class id.
    """
    class_set = sorted(set(class_set))
    if not class_set:
        raise SamplingError("class_set must not be empty")
    if not query_pool:
        raise SamplingError("query_pool must not be empty")
    if isinstance(support_source, FewShotSplit):
        support_source = split_support_pool(support_source)

    query = query_pool[int(rng.integers(len(query_pool)))]
    supports = []
    for class_id in class_set:
        candidates = support_source.get(class_id) or []
        if not candidates:
            raise SamplingError(f"no support instance for class {class_id}")
        instance = candidates[int(rng.integers(len(candidates)))]
        supports.append(SupportExample.from_instance(instance))
    return Episode(query=query, supports=supports)


class EpisodeSampler:
    """
    Iterates over episodes drawn with a private generator.

    Arguments:
        query_pool: images a query is drawn from
        support_pool: class_id -> annotated instances (or a FewShotSplit)
        class_set: classes every episode carries a support for
        seed: seed of the private generator
        num_episodes: length of one iteration, None iterates forever
    """

    def __init__(
        self,
        query_pool: Sequence[ImageSample],
        support_pool: Mapping[int, Sequence[Instance]],
        class_set: Iterable[int],
        seed: int,
        num_episodes: int = None,
    ):
        self.query_pool = list(query_pool)
        if isinstance(support_pool, FewShotSplit):
            support_pool = split_support_pool(support_pool)
        self.support_pool = {c: list(v) for c, v in support_pool.items()}
        self.class_set = sorted(set(class_set))
        self.num_episodes = num_episodes
        self.rng = np.random.default_rng(seed)

        if num_episodes is not None and (
            not isinstance(num_episodes, int) or num_episodes <= 0
        ):
            raise ValueError(
                "num_episodes should be a positive integer "
                "value, but got num_episodes={}".format(num_episodes)
            )
        missing = [c for c in self.class_set if not self.support_pool.get(c)]
        if missing:
            raise SamplingError(f"no support instances for classes {missing}")

    def sample(self) -> Episode:
        return sample_episode(self.query_pool, self.support_pool, self.class_set, self.rng)

    def __iter__(self):
        count = 0
        while self.num_episodes is None or count < self.num_episodes:
            yield self.sample()
            count += 1

    def __len__(self):
        if self.num_episodes is None:
            raise TypeError("an unbounded EpisodeSampler has no length")
        return self.num_episodes
