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

"""Static figures of the analyses."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_similarity_matrix(similarity, class_names, path, title=None):
    n = len(similarity.class_order)
    fig, ax = plt.subplots(figsize=(1.0 + 0.5 * n, 0.8 + 0.5 * n))
    im = ax.imshow(similarity.matrix, vmin=-1.0, vmax=1.0, cmap="coolwarm")
    labels = [class_names[c] for c in similarity.class_order]
    ax.set_xticks(range(n))
    ax.set_xticklabels(labels, rotation=90)
    ax.set_yticks(range(n))
    ax.set_yticklabels(labels)
    fig.colorbar(im, ax=ax, label="cosine similarity")
    ax.set_title(title or f"support similarity, K={similarity.shot_count}")
    return _save(fig, path)


def plot_prototype_distance(curves, path):
    """One normalized distance curve per estimator."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for curve in curves:
        ks = sorted(curve.normalized)
        ax.plot(ks, [curve.normalized[k] for k in ks], marker="o", label=curve.estimator)
    ax.set_xlabel("shots (K)")
    ax.set_ylabel(f"distance / distance at K={curves[0].reference_K}")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_recall(recalls, class_names, path):
    """Grouped per-class recall bars; `recalls` maps a variant label to {class_id: recall}."""
    labels = list(recalls)
    class_ids = sorted({c for r in recalls.values() for c in r})
    width = 0.8 / max(1, len(labels))
    x = np.arange(len(class_ids))
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(class_ids), 3.5))
    for i, label in enumerate(labels):
        values = [recalls[label].get(c) for c in class_ids]
        ax.bar(x + i * width, [np.nan if v is None else v for v in values], width, label=label)
    ax.set_xticks(x + width * (len(labels) - 1) / 2)
    ax.set_xticklabels([class_names[c] for c in class_ids], rotation=45, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("recall @ IoU 0.5")
    ax.legend()
    return _save(fig, path)


def plot_loss_curves(records, path, keys=("total", "l_cls", "l_reg", "l_rpn")):
    """Curves of a LossLog read back as a list of dicts."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    iterations = [r["iteration"] for r in records]
    for key in keys:
        if records and key in records[0]:
            ax.plot(iterations, [r[key] for r in records], label=key)
    ax.set_xlabel("iteration")
    ax.legend()
    return _save(fig, path)
