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

"""Detection metrics and support-feature analyses."""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from fsdet import print_rank_0
from .data.catalog import (
    ClassCatalog,
    ImageSample,
    Instance,
    SupportExample,
    instances_by_class,
)
from .utils import write_json_atomic

MEAN = "mean"
VARIATIONAL = "variational"


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes; degenerate boxes give 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        logging.warning(f"iou() degenerate box in {tuple(box_a)}, {tuple(box_b)}")
        return 0.0
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, len(a) x len(b); rows or columns of degenerate boxes are 0."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    lt = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (union > 0)
    return np.where(valid, inter / np.where(union > 0, union, 1.0), 0.0)


def voc_ap(rec, prec):
    """All-points VOC AP: area under the precision envelope."""
    # first append sentinel values at the end
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))

    # compute the precision envelope
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = np.maximum(mpre[i - 1], mpre[i])

    # to calculate area under PR curve, look for points
    # where X axis (recall) changes value
    i = np.where(mrec[1:] != mrec[:-1])[0]

    # and sum (\Delta recall) * prec
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _class_detections(detections, class_id):
    """Flattens {image_id: [Detection]} into (image_ids, boxes, scores) of one class, best score first."""
    image_ids, boxes, scores = [], [], []
    for image_id, dets in detections.items():
        for d in dets:
            if d.class_id == class_id:
                image_ids.append(image_id)
                boxes.append(d.box)
                scores.append(d.score)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    return (
        [image_ids[i] for i in order],
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[order],
        np.asarray(scores, dtype=np.float64)[order],
    )


def _class_ground_truth(ground_truth, class_id):
    return {
        image_id: np.asarray(
            [a.box for a in annotations if a.class_id == class_id], dtype=np.float64
        ).reshape(-1, 4)
        for image_id, annotations in ground_truth.items()
    }


def match_detections(detections, ground_truth, class_id, iou_thresh=0.5):
    """
    Greedy matching in descending score order: each detection takes the still
    unmatched ground truth box of its image with the highest IoU >= iou_thresh.

    Returns (tp flags, scores, number of ground truth boxes).
    """
    image_ids, boxes, scores = _class_detections(detections, class_id)
    gt = _class_ground_truth(ground_truth, class_id)
    n_gt = sum(len(b) for b in gt.values())
    matched = {image_id: np.zeros(len(b), dtype=bool) for image_id, b in gt.items()}
    tp = np.zeros(len(image_ids), dtype=bool)
    for d, image_id in enumerate(image_ids):
        gt_boxes = gt.get(image_id)
        if gt_boxes is None or len(gt_boxes) == 0:
            continue
        overlaps = iou_matrix(boxes[d : d + 1], gt_boxes)[0]
        overlaps[matched[image_id]] = -1.0
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_thresh:
            tp[d] = True
            matched[image_id][j] = True
    return tp, scores, n_gt


def compute_ap50(detections, ground_truth, class_id, iou_thresh=0.5) -> Optional[float]:
    """
    AP at IoU 0.5 of one class.

    detections: image_id -> list of Detection
    ground_truth: image_id -> list of Annotation
    Returns None (with a warning) when the class has no ground truth box.
    """
    tp, _, n_gt = match_detections(detections, ground_truth, class_id, iou_thresh)
    if n_gt == 0:
        logging.warning(f"compute_ap50() no ground truth for class {class_id}, AP undefined")
        return None
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp).astype(np.float64)
    fp_cum = np.cumsum(~tp).astype(np.float64)
    rec = tp_cum / float(n_gt)
    prec = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return voc_ap(rec, prec)


def recall_at(detections, ground_truth, class_id, score_thresh=0.05, iou_thresh=0.5) -> Optional[float]:
    """Fraction of ground truth boxes matched by detections scoring at least score_thresh."""
    kept = {
        image_id: [d for d in dets if d.score >= score_thresh]
        for image_id, dets in detections.items()
    }
    tp, _, n_gt = match_detections(kept, ground_truth, class_id, iou_thresh)
    if n_gt == 0:
        return None
    return float(tp.sum()) / n_gt


def _mean_defined(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class APResult:
    per_class_ap: Dict[int, Optional[float]]
    bAP: Optional[float]
    nAP: Optional[float]
    recall_per_class: Dict[int, Optional[float]]
    catalog: ClassCatalog = None

    @classmethod
    def from_per_class(cls, per_class_ap, recall_per_class, catalog: ClassCatalog):
        return cls(
            per_class_ap=dict(per_class_ap),
            bAP=_mean_defined(per_class_ap[c] for c in per_class_ap if c in catalog.base_ids),
            nAP=_mean_defined(per_class_ap[c] for c in per_class_ap if c in catalog.novel_ids),
            recall_per_class=dict(recall_per_class),
            catalog=catalog,
        )

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in sorted(d.items())}

        result = {
            "per_class_ap": keyed(self.per_class_ap),
            "bAP": self.bAP,
            "nAP": self.nAP,
            "recall_per_class": keyed(self.recall_per_class),
        }
        if self.catalog is not None:
            result["class_names"] = {str(c): self.catalog.name(c) for c in sorted(self.per_class_ap)}
        return result

    @classmethod
    def from_dict(cls, d, catalog: ClassCatalog = None):
        return cls(
            per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
            bAP=d["bAP"],
            nAP=d["nAP"],
            recall_per_class={int(k): v for k, v in d["recall_per_class"].items()},
            catalog=catalog,
        )

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for c in sorted(self.per_class_ap):
            role = None
            if self.catalog is not None:
                role = "base" if c in self.catalog.base_ids else "novel"
            rows.append(
                {
                    "class_id": c,
                    "class_name": self.catalog.name(c) if self.catalog is not None else str(c),
                    "role": role,
                    "ap50": self.per_class_ap[c],
                    "recall": self.recall_per_class.get(c),
                }
            )
        return pd.DataFrame(rows, columns=["class_id", "class_name", "role", "ap50", "recall"])

    def save(self, json_path, csv_path=None):
        write_json_atomic(json_path, self.to_dict())
        if csv_path is not None:
            self.to_frame().to_csv(csv_path, index=False)


def support_examples(pool: Mapping[int, Sequence[Instance]]) -> Dict[int, List[SupportExample]]:
    return {c: [SupportExample.from_instance(i) for i in instances] for c, instances in pool.items()}


def detect(model, test_set: Sequence[ImageSample], signals: torch.Tensor, timers=None):
    """image_id -> decoded detections."""
    detections = dict()
    for sample in test_set:
        if timers is not None:
            timers("evaluation").start()
        detections[sample.image_id] = model.predict(sample, signals).decoded
        if timers is not None:
            timers("evaluation").stop()
    return detections


def evaluate(
    model,
    test_set: Sequence[ImageSample],
    catalog: ClassCatalog,
    supports_by_class: Mapping[int, Sequence[SupportExample]],
    iou_thresh=0.5,
    recall_score_thresh=0.05,
    seed=0,
    timers=None,
) -> APResult:
    """
    Detects every class of the model on every test image, using one signal per
    class built from `supports_by_class`, and reduces the detections to AP and recall.
    """
    if len(test_set) == 0:
        error_message = "evaluate() the test set is empty"
        logging.error(error_message)
        raise ValueError(error_message)

    model_was_in_train = model.training
    model.eval()
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        signals = model.class_signals(supports_by_class, generator)
        detections = detect(model, test_set, signals, timers)
    if model_was_in_train:
        model.train()

    ground_truth = {sample.image_id: sample.annotations for sample in test_set}
    per_class_ap, recall_per_class = dict(), dict()
    for c in model.class_ids:
        per_class_ap[c] = compute_ap50(detections, ground_truth, c, iou_thresh)
        recall_per_class[c] = recall_at(detections, ground_truth, c, recall_score_thresh, iou_thresh)
    result = APResult.from_per_class(per_class_ap, recall_per_class, catalog)
    print_rank_0(
        " > evaluated {} images: bAP {} | nAP {}".format(
            len(test_set), _fmt(result.bAP), _fmt(result.nAP)
        )
    )
    return result


def _fmt(value):
    return "n/a" if value is None else "{:.4f}".format(value)


############################################################################################################################
# support-feature similarity


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray
    class_order: List[int]
    shot_count: int

    def inter_class_mean(self) -> float:
        n = len(self.class_order)
        if n < 2:
            return float("nan")
        off_diagonal = ~np.eye(n, dtype=bool)
        return float(self.matrix[off_diagonal].mean())

    def intra_class_mean(self) -> float:
        return float(np.diag(self.matrix).mean())

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "class_order": list(self.class_order),
            "shot_count": self.shot_count,
            "inter_class_mean": self.inter_class_mean(),
            "intra_class_mean": self.intra_class_mean(),
        }


def similarity_matrix_from_features(features_by_class: Mapping[int, np.ndarray], class_order=None) -> SimilarityMatrix:
    """
    Entry (i, j) is the mean cosine similarity between the support features of
    class i and class j. The diagonal leaves out self-pairs; a single shot
    compares only with itself and gives 1.
    """
    class_order = sorted(features_by_class) if class_order is None else list(class_order)
    normed = dict()
    for c in class_order:
        f = np.asarray(features_by_class[c], dtype=np.float64)
        f = f.reshape(-1, f.shape[-1])
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        normed[c] = f / np.maximum(norms, 1e-12)
    shots = {len(normed[c]) for c in class_order}
    n = len(class_order)
    matrix = np.zeros((n, n), dtype=np.float64)
    for i, ci in enumerate(class_order):
        for j in range(i, n):
            cos = normed[ci] @ normed[class_order[j]].T
            if i == j:
                k = cos.shape[0]
                value = 1.0 if k == 1 else (cos.sum() - np.trace(cos)) / (k * (k - 1))
            else:
                value = cos.mean()
            matrix[i, j] = matrix[j, i] = np.clip(value, -1.0, 1.0)
    return SimilarityMatrix(matrix=matrix, class_order=class_order, shot_count=max(shots) if shots else 0)


def encode_pool(model, pool: Mapping[int, Sequence[Instance]]) -> Dict[int, np.ndarray]:
    """class_id -> n x D support features of the given instances."""
    model_was_in_train = model.training
    model.eval()
    with torch.no_grad():
        features = {
            c: model.encode_supports([SupportExample.from_instance(i) for i in instances]).cpu().numpy()
            for c, instances in sorted(pool.items())
        }
    if model_was_in_train:
        model.train()
    return features


def support_similarity_matrix(model, split, K=None) -> SimilarityMatrix:
    """Similarity of the support features of a few-shot split (its first K shots per class)."""
    K = split.K if K is None else K
    pool = {c: split.shots[c][:K] for c in split.class_ids}
    return similarity_matrix_from_features(encode_pool(model, pool))


############################################################################################################################
# prototype distance


@dataclass
class PrototypeDistanceCurve:
    per_K_distance: Dict[int, float]
    reference_K: int
    estimator: str = MEAN
    per_class_distance: Dict[int, Dict[int, float]] = field(default_factory=dict)
    per_seed_distance: Dict[int, List[float]] = field(default_factory=dict)

    @property
    def normalized(self) -> Dict[int, float]:
        reference = self.per_K_distance[self.reference_K]
        if reference == 0:
            return {k: (0.0 if v == 0 else float("inf")) for k, v in self.per_K_distance.items()}
        return {k: v / reference for k, v in self.per_K_distance.items()}

    def normalized_increase(self, low_K=None) -> float:
        """
        Median over resampling seeds of d(low_K) / d(reference_K) - 1; low_K
        defaults to the smallest K of the curve.
        """
        low_K = min(self.per_K_distance) if low_K is None else low_K
        low = self.per_seed_distance.get(low_K) or [self.per_K_distance[low_K]]
        reference = self.per_seed_distance.get(self.reference_K) or [self.per_K_distance[self.reference_K]]
        ratios = [
            d_low / d_ref - 1.0 if d_ref > 0 else (0.0 if d_low == 0 else float("inf"))
            for d_low, d_ref in zip(low, reference)
        ]
        return float(np.median(ratios))

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "reference_K": self.reference_K,
            "per_K_distance": {str(k): v for k, v in sorted(self.per_K_distance.items())},
            "normalized": {str(k): v for k, v in sorted(self.normalized.items())},
            "normalized_increase": self.normalized_increase(),
            "per_seed_distance": {str(k): list(v) for k, v in sorted(self.per_seed_distance.items())},
            "per_class_distance": {
                str(k): {str(c): v for c, v in sorted(d.items())}
                for k, d in sorted(self.per_class_distance.items())
            },
        }


def _vae_of(model):
    vae = getattr(model, "vae", model)
    if vae is None or not hasattr(vae, "encode"):
        raise ValueError("the variational estimator needs a model with a feature VAE")
    return vae


def _variational_prototype(vae, features: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        param = next(vae.parameters())
        mean = torch.as_tensor(features.mean(axis=0), dtype=param.dtype, device=param.device)
        dist = vae.encode(mean)
        z = dist.mu + dist.sigma
    if z.shape[-1] != features.shape[-1]:
        raise ValueError(
            f"latent dimension {z.shape[-1]} differs from feature dimension {features.shape[-1]}"
        )
    return z.cpu().numpy().astype(np.float64)


def prototype_distance_curve(
    model,
    estimator: str,
    full_novel_pool: Mapping[int, np.ndarray],
    K_values: Sequence[int],
    seeds: Sequence[int],
    reference_K: int = 10,
) -> PrototypeDistanceCurve:
    """
    Euclidean distance between a prototype estimated from K sampled supports and
    the real class center (the mean feature of the whole pool), averaged over
    classes and seeds.

    MEAN estimates with the mean of the K features, VARIATIONAL with mu + sigma of
    the distribution the model's VAE assigns to that mean.
    """
    if estimator not in (MEAN, VARIATIONAL):
        raise ValueError(f"estimator {estimator} not recognized")
    if reference_K not in K_values:
        raise ValueError(f"reference K={reference_K} is not one of {list(K_values)}")
    vae = _vae_of(model) if estimator == VARIATIONAL else None

    pool = {c: np.asarray(f, dtype=np.float64).reshape(-1, np.shape(f)[-1]) for c, f in full_novel_pool.items()}
    for k in K_values:
        for c, features in pool.items():
            if k > len(features):
                raise ValueError(f"K={k} exceeds the {len(features)} pooled features of class {c}")

    per_K, per_class, per_seed = dict(), dict(), dict()
    for k in K_values:
        # distances[seed index, class index]
        distances = np.zeros((len(seeds), len(pool)))
        for j, (c, features) in enumerate(sorted(pool.items())):
            center = features.mean(axis=0)
            for i, seed in enumerate(seeds):
                rng = np.random.default_rng([int(seed), int(c), int(k)])
                chosen = features[rng.choice(len(features), size=k, replace=False)]
                if estimator == MEAN:
                    prototype = chosen.mean(axis=0)
                else:
                    prototype = _variational_prototype(vae, chosen)
                distances[i, j] = np.linalg.norm(prototype - center)
        per_class[k] = {c: float(v) for c, v in zip(sorted(pool), distances.mean(axis=0))}
        per_seed[k] = [float(v) for v in distances.mean(axis=1)]
        per_K[k] = float(distances.mean())
    return PrototypeDistanceCurve(
        per_K_distance=per_K,
        reference_K=reference_K,
        estimator=estimator,
        per_class_distance=per_class,
        per_seed_distance=per_seed,
    )


def compare_prototype_robustness(curves: Sequence[PrototypeDistanceCurve], low_K=None) -> dict:
    """
    Normalized distance increase from the reference K down to `low_K` per
    estimator; the variational estimator is the more robust one when its
    increase is smaller (None unless both estimators are present).
    """
    increase = {c.estimator: c.normalized_increase(low_K) for c in curves}
    more_robust = None
    if MEAN in increase and VARIATIONAL in increase:
        more_robust = bool(increase[VARIATIONAL] < increase[MEAN])
    return {"increase": increase, "variational_more_robust": more_robust}


def novel_pool_features(model, dataset: Sequence[ImageSample], catalog: ClassCatalog):
    """Support features of every novel instance of `dataset`."""
    pool = instances_by_class(dataset)
    return encode_pool(model, {c: pool.get(c, []) for c in sorted(catalog.novel_ids)})


def class_distributions_to_json(model, supports_by_class, path):
    """Writes {class_id, mu, log_var} per class of a variational model."""
    model_was_in_train = model.training
    model.eval()
    with torch.no_grad():
        features = model.support_features(supports_by_class)
        distributions = model.class_distributions(features)
    if model_was_in_train:
        model.train()
    write_json_atomic(path, [distributions[c].to_dict() for c in sorted(distributions)])


def save_json(path, obj):
    write_json_atomic(path, obj.to_dict() if hasattr(obj, "to_dict") else obj)


def load_json(path):
    with open(path) as f:
        return json.load(f)
