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

"""
support-feature similarity and prototype distance analyses
"""
import json

import numpy as np
import pytest
import torch

from ..common import make_args, model_setup, tiny_data


@pytest.mark.cpu
def test_similarity_identical_features():
    """
    verify identical features give a matrix of ones
    """
    from fsdet.evaluation import similarity_matrix_from_features

    f = np.ones((3, 5))
    result = similarity_matrix_from_features({0: f, 1: 2 * f, 2: f})
    np.testing.assert_allclose(result.matrix, np.ones((3, 3)))
    assert result.shot_count == 3
    assert result.inter_class_mean() == pytest.approx(1.0)


@pytest.mark.cpu
def test_similarity_orthogonal_features():
    """
    verify orthogonal classes have zero similarity off the diagonal
    """
    from fsdet.evaluation import similarity_matrix_from_features

    eye = np.eye(4)
    features = {c: np.stack([eye[c], 3 * eye[c]]) for c in range(4)}
    result = similarity_matrix_from_features(features)
    np.testing.assert_allclose(result.matrix, np.eye(4), atol=1e-12)
    assert result.intra_class_mean() == pytest.approx(1.0)
    assert result.inter_class_mean() == pytest.approx(0.0)


@pytest.mark.cpu
@pytest.mark.parametrize("shots", [1, 4])
def test_similarity_random_features(shots):
    """
    verify the matrix is symmetric, bounded, and a single shot has unit self-similarity
    """
    from fsdet.evaluation import similarity_matrix_from_features

    rng = np.random.default_rng(shots)
    features = {c: rng.normal(size=(shots, 8)) for c in (4, 1, 2)}
    result = similarity_matrix_from_features(features)
    assert result.class_order == [1, 2, 4]
    np.testing.assert_allclose(result.matrix, result.matrix.T)
    assert np.all(np.abs(result.matrix) <= 1.0)
    if shots == 1:
        np.testing.assert_allclose(np.diag(result.matrix), 1.0)
    d = result.to_dict()
    assert d["shot_count"] == shots
    json.dumps(d)


@pytest.mark.cpu
def test_support_similarity_of_split():
    """
    verify the similarity matrix of a split covers every class of the detector
    """
    from fsdet.data.splits import build_kshot_split
    from fsdet.evaluation import support_similarity_matrix

    args = make_args()
    data = tiny_data(args)
    model, _, _, _ = model_setup(class_ids=data.catalog.all_ids)
    split = build_kshot_split(data.train, data.catalog, K=2, seed=0)
    result = support_similarity_matrix(model, split)
    assert result.class_order == list(data.catalog.all_ids)
    assert result.shot_count == 2
    assert support_similarity_matrix(model, split, K=1).shot_count == 1
    assert model.training


def _pool(seed=0, n=6, dim=4):
    rng = np.random.default_rng(seed)
    return {c: rng.normal(loc=c, size=(n, dim)) for c in (0, 3)}


@pytest.mark.cpu
def test_prototype_distance_mean():
    """
    verify the mean estimator vanishes when K covers the pool and normalizes to the reference K
    """
    from fsdet.evaluation import MEAN, prototype_distance_curve

    curve = prototype_distance_curve(None, MEAN, _pool(), K_values=[1, 2, 6], seeds=[0, 1, 2], reference_K=2)
    assert curve.per_K_distance[6] == pytest.approx(0.0, abs=1e-12)
    assert curve.per_K_distance[1] > 0.0
    assert curve.normalized[2] == pytest.approx(1.0)
    assert sorted(curve.per_class_distance[1]) == [0, 3]
    again = prototype_distance_curve(None, MEAN, _pool(), K_values=[1, 2, 6], seeds=[0, 1, 2], reference_K=2)
    assert again.per_K_distance == curve.per_K_distance
    assert set(curve.to_dict()["normalized"]) == {"1", "2", "6"}


@pytest.mark.cpu
def test_prototype_distance_normalized_increase():
    """
    verify the normalized increase is the seed median of d(K_min) / d(K_ref) - 1 and the robustness comparison
    """
    from fsdet.evaluation import (
        MEAN,
        VARIATIONAL,
        PrototypeDistanceCurve,
        compare_prototype_robustness,
        prototype_distance_curve,
    )

    curve = prototype_distance_curve(None, MEAN, _pool(), K_values=[1, 2, 6], seeds=[0, 1, 2], reference_K=2)
    assert len(curve.per_seed_distance[1]) == 3
    ratios = np.array(curve.per_seed_distance[1]) / np.array(curve.per_seed_distance[2]) - 1
    assert curve.normalized_increase() == pytest.approx(float(np.median(ratios)))
    assert curve.normalized_increase(low_K=2) == pytest.approx(0.0)
    assert curve.to_dict()["normalized_increase"] == pytest.approx(curve.normalized_increase())

    mean = PrototypeDistanceCurve({1: 3.0, 10: 1.0}, 10, MEAN, per_seed_distance={1: [3.0, 4.0, 2.0], 10: [1.0] * 3})
    variational = PrototypeDistanceCurve({1: 1.5, 10: 1.0}, 10, VARIATIONAL)
    comparison = compare_prototype_robustness([mean, variational])
    assert comparison["increase"] == {MEAN: pytest.approx(2.0), VARIATIONAL: pytest.approx(0.5)}
    assert comparison["variational_more_robust"] is True
    assert compare_prototype_robustness([mean])["variational_more_robust"] is None


@pytest.mark.cpu
@pytest.mark.parametrize(
    "K_values,reference_K,estimator",
    [([1, 7], 1, "mean"), ([1, 2], 5, "mean"), ([1, 2], 1, "median")],
)
def test_prototype_distance_invalid(K_values, reference_K, estimator):
    """
    verify K beyond the pool, a reference K outside the curve and unknown estimators raise ValueError
    """
    from fsdet.evaluation import prototype_distance_curve

    with pytest.raises(ValueError):
        prototype_distance_curve(None, estimator, _pool(), K_values=K_values, seeds=[0], reference_K=reference_K)


@pytest.mark.cpu
def test_prototype_distance_variational():
    """
    verify the variational estimator runs through a feature VAE and needs matching dimensions
    """
    from fsdet.evaluation import VARIATIONAL, prototype_distance_curve
    from fsdet.model.vae import FeatureVAE

    torch.manual_seed(0)
    vae = FeatureVAE(feature_dim=4, hidden_dim=8, latent_dim=4)
    curve = prototype_distance_curve(vae, VARIATIONAL, _pool(), K_values=[1, 3], seeds=[0, 1], reference_K=3)
    assert curve.estimator == VARIATIONAL
    assert all(np.isfinite(v) and v >= 0 for v in curve.per_K_distance.values())

    with pytest.raises(ValueError):
        prototype_distance_curve(
            FeatureVAE(feature_dim=4, hidden_dim=8, latent_dim=3),
            VARIATIONAL,
            _pool(),
            K_values=[1],
            seeds=[0],
            reference_K=1,
        )
    with pytest.raises(ValueError):
        prototype_distance_curve(None, VARIATIONAL, _pool(), K_values=[1], seeds=[0], reference_K=1)


@pytest.mark.cpu
def test_novel_pool_and_distributions(tmp_path):
    """
    verify novel pool features and the written class distributions of a variational detector
    """
    from fsdet.data.splits import build_kshot_split, split_support_pool
    from fsdet.evaluation import class_distributions_to_json, load_json, novel_pool_features, support_examples

    args = make_args()
    data = tiny_data(args)
    model, _, _, _ = model_setup(class_ids=data.catalog.all_ids)
    features = novel_pool_features(model, data.train, data.catalog)
    assert sorted(features) == sorted(data.catalog.novel_ids)
    assert all(f.shape[1] == args.feature_dim for f in features.values())

    split = build_kshot_split(data.train, data.catalog, K=1, seed=0)
    path = str(tmp_path / "distributions.json")
    model.train()
    class_distributions_to_json(model, support_examples(split_support_pool(split)), path)
    assert model.training and model.backbone.training
    distributions = load_json(path)
    assert [d["class_id"] for d in distributions] == list(data.catalog.all_ids)
    assert all(len(d["mu"]) == args.vae_latent_dim for d in distributions)
