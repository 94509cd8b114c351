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
box coding, proposals, RoI features, aggregation and the detection head
"""
import math

import pytest
import torch

from ..common import make_args


@pytest.mark.cpu
def test_box_encode_decode():
    """
    verify decoding the encoded offsets recovers the target boxes
    """
    from fsdet.model.box_utils import HEAD_BOX_WEIGHTS, decode_boxes, encode_boxes

    src = torch.tensor([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 25.0, 15.0]])
    dst = torch.tensor([[1.0, 2.0, 12.0, 9.0], [4.0, 6.0, 30.0, 20.0]])
    for weights in [(1.0, 1.0, 1.0, 1.0), HEAD_BOX_WEIGHTS]:
        deltas = encode_boxes(src, dst, weights)
        assert torch.allclose(decode_boxes(src, deltas, weights), dst, atol=1e-4)
    assert torch.allclose(encode_boxes(src, src), torch.zeros(2, 4), atol=1e-6)


@pytest.mark.cpu
def test_anchors():
    """
    verify anchors share the configured area and tile every feature cell
    """
    from fsdet.model.box_utils import enumerate_shifted_anchors, generate_anchor_base

    base = generate_anchor_base(16.0, [0.5, 1.0, 2.0])
    areas = (base[:, 2] - base[:, 0]) * (base[:, 3] - base[:, 1])
    assert torch.allclose(areas, torch.full((3,), 256.0))
    anchors = enumerate_shifted_anchors(base, 8, 4, 5)
    assert anchors.shape == (4 * 5 * 3, 4)
    centers = 0.5 * (anchors[:, :2] + anchors[:, 2:])
    assert torch.allclose(centers[0], torch.tensor([4.0, 4.0]))
    assert torch.allclose(centers[-1], torch.tensor([36.0, 28.0]))


@pytest.mark.cpu
def test_clip_boxes():
    """
    verify boxes are clipped to the image
    """
    from fsdet.model.box_utils import clip_boxes

    boxes = torch.tensor([[-5.0, -1.0, 70.0, 30.0]])
    assert clip_boxes(boxes, 32, 64).tolist() == [[0.0, 0.0, 64.0, 30.0]]


def _features(channels=16, size=64, seed=0):
    from fsdet.model.backbone import Backbone, extract_backbone

    torch.manual_seed(seed)
    backbone = Backbone([8, 8, 16, channels])
    return extract_backbone(backbone, torch.rand(3, size, size)), backbone


@pytest.mark.cpu
def test_backbone_stride():
    """
    verify the backbone downsamples by its stride and the mask slice starts at zero
    """
    features, backbone = _features()
    assert features.feature_map.shape == (1, 16, 8, 8)
    assert features.stride == 8
    assert features.image_size == (64, 64)
    assert torch.count_nonzero(backbone.mask_weight) == 0


@pytest.mark.cpu
def test_backbone_rejects_non_finite():
    """
    verify a non-finite input image raises NumericError
    """
    from fsdet.errors import NumericError
    from fsdet.model.backbone import Backbone, extract_backbone

    image = torch.zeros(3, 16, 16)
    image[0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        extract_backbone(Backbone([4, 4, 4, 4]), image)


@pytest.mark.cpu
def test_propose_train_and_eval():
    """
    verify training proposals are labelled against the ground truth and test proposals are capped
    """
    from fsdet.model.rpn import ProposalTargetSampler, RegionProposalNetwork, propose
    from fsdet.model.types import BACKGROUND, EVAL, TRAIN

    features, _ = _features()
    rpn = RegionProposalNetwork(16, 8, anchor_size=16, batch_size=32, train_top_k=40, test_top_k=10)
    gt_boxes = torch.tensor([[8.0, 8.0, 30.0, 30.0], [36.0, 30.0, 60.0, 50.0]])
    gt_labels = torch.tensor([2, 0])
    sampler = ProposalTargetSampler(batch_size=16, positive_fraction=0.25)
    generator = torch.Generator().manual_seed(0)
    proposals, losses = propose(
        rpn, features, gt_boxes, TRAIN, gt_labels=gt_labels, sampler=sampler, generator=generator
    )
    assert set(losses) == {"rpn_cls", "rpn_reg"}
    assert all(torch.isfinite(v) for v in losses.values())
    assert 0 < len(proposals) <= 16
    assert proposals.foreground.sum() <= 4
    # ground truth boxes are candidates, so both objects are covered
    assert set(proposals.labels[proposals.foreground].tolist()) <= {0, 2}
    assert proposals.foreground.any()
    assert (proposals.matched_gt_boxes[~proposals.foreground] == 0).all()
    records = proposals.to_proposals(class_ids=[3, 4, 5])
    assert {r.assigned_class for r in records} <= {BACKGROUND, 3, 5}

    proposals, losses = propose(rpn, features, mode=EVAL)
    assert losses == {}
    assert len(proposals) <= 10
    assert proposals.labels is None


@pytest.mark.cpu
def test_roi_features_shape_and_degenerate_boxes():
    """
    verify RoI features are R x D and zero-area boxes still give finite features
    """
    from fsdet.model.roi import RoIFeatureExtractor

    features, _ = _features()
    extractor = RoIFeatureExtractor(16, 8, output_size=4, feature_dim=12)
    boxes = torch.tensor([[0.0, 0.0, 32.0, 32.0], [10.0, 10.0, 10.0, 20.0]])
    out = extractor(features.feature_map, boxes)
    assert out.shape == (2, 12)
    assert torch.isfinite(out).all()


@pytest.mark.cpu
def test_roi_pool_gradcheck():
    """
    verify gradients of the RoI pooling with respect to the feature map in float64
    """
    from fsdet.model.roi import RoIFeatureExtractor

    extractor = RoIFeatureExtractor(2, 4, output_size=2, feature_dim=3).double()
    feature_map = torch.rand(1, 2, 5, 5, dtype=torch.float64, requires_grad=True)
    boxes = torch.tensor([[1.0, 2.0, 13.0, 15.0], [0.0, 0.0, 9.0, 7.0]], dtype=torch.float64)
    assert torch.autograd.gradcheck(
        lambda x: extractor.pool(x, boxes), (feature_map,), eps=1e-6, atol=1e-4, rtol=1e-3
    )


@pytest.mark.cpu
def test_channel_modulate():
    """
    verify aggregation is the query times the sigmoid of the signal and dimensions must agree
    """
    from fsdet.model.aggregation import channel_modulate

    query = torch.tensor([[1.0, 2.0, -3.0]])
    signal = torch.tensor([0.0, 100.0, -100.0])
    assert torch.allclose(channel_modulate(query, signal), torch.tensor([[0.5, 2.0, 0.0]]), atol=1e-6)
    with pytest.raises(ValueError):
        channel_modulate(query, torch.zeros(4))


@pytest.mark.cpu
def test_modulation_gradcheck():
    """
    verify gradients of the channel modulation and VFA aggregation with respect to both inputs in float64
    """
    from fsdet.model.aggregation import aggregate_vfa, channel_modulate
    from fsdet.model.types import DETERMINISTIC, Proposal, RoIFeature, VariationalFeature

    torch.manual_seed(0)
    query = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    signal = torch.randn(6, dtype=torch.float64, requires_grad=True)
    kw = dict(eps=1e-6, atol=1e-4, rtol=1e-3)
    assert torch.autograd.gradcheck(channel_modulate, (query, signal), **kw)

    def vfa(q, z):
        roi = RoIFeature(q, Proposal((0, 0, 8, 8), 0.9, assigned_class=1), m=0)
        return aggregate_vfa(roi, VariationalFeature(z, source_class=1, mode=DETERMINISTIC)).vector

    assert torch.autograd.gradcheck(vfa, (query[0].detach().requires_grad_(True), signal), **kw)


@pytest.mark.cpu
def test_aggregate_records():
    """
    verify the aggregated records keep the query and support classes
    """
    import numpy as np

    from fsdet.model.aggregation import aggregate_csa, aggregate_vfa, select_support_caa
    from fsdet.model.types import (
        DETERMINISTIC,
        Proposal,
        RoIFeature,
        SupportFeature,
        VariationalFeature,
    )

    q = RoIFeature(torch.ones(4), Proposal((0, 0, 4, 4), 0.9, assigned_class=2), m=0)
    s = SupportFeature(torch.zeros(4), class_id=2)
    csa = aggregate_csa(q, s)
    assert (csa.query_class, csa.support_class) == (2, 2)
    assert torch.allclose(csa.vector, torch.full((4,), 0.5))
    z = VariationalFeature(torch.zeros(4), source_class=5, mode=DETERMINISTIC)
    assert aggregate_vfa(q, z).support_class == 5

    supports = [SupportFeature(torch.zeros(4), c) for c in (1, 2, 3)]
    rng = np.random.default_rng(0)
    chosen = {select_support_caa(2, supports, rng).class_id for _ in range(50)}
    assert chosen == {1, 2, 3}


@pytest.mark.cpu
def test_select_support_indices():
    """
    verify each RoI gets a support index in range and an empty support set raises SamplingError
    """
    from fsdet.errors import SamplingError
    from fsdet.model.aggregation import select_support_indices

    index = select_support_indices(200, 3, torch.Generator().manual_seed(0))
    assert index.shape == (200,)
    assert set(index.tolist()) == {0, 1, 2}
    with pytest.raises(SamplingError):
        select_support_indices(5, 0)


@pytest.mark.cpu
def test_support_choice_uniform():
    """
    verify the class-agnostic support choice is uniform over the episode's supports (chi-square, 30000 draws)
    """
    import numpy as np
    from scipy import stats

    from fsdet.model.aggregation import select_support_caa, select_support_indices
    from fsdet.model.types import SupportFeature

    n_supports, n_draws = 6, 30000
    supports = [SupportFeature(torch.zeros(4), c) for c in range(n_supports)]
    rng = np.random.default_rng(2024)
    counts = np.bincount(
        [select_support_caa(2, supports, rng).class_id for _ in range(n_draws)], minlength=n_supports
    )
    assert stats.chisquare(counts).pvalue > 0.01

    index = select_support_indices(n_draws, n_supports, torch.Generator().manual_seed(2024))
    counts = np.bincount(index.numpy(), minlength=n_supports)
    assert len(counts) == n_supports
    assert stats.chisquare(counts).pvalue > 0.01


def _head(decouple=True, kind="cosine", class_ids=(1, 2, 3), dim=8):
    from fsdet.model.head import DetectionHead
    from fsdet.model.types import DetectionHeadConfig

    torch.manual_seed(0)
    config = DetectionHeadConfig(kind, 20.0, decouple, len(class_ids), dim)
    return DetectionHead(config, list(class_ids))


@pytest.mark.cpu
@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_head_extend_copy_base(kind):
    """
    verify COPY_BASE keeps the rows of current classes and the background row
    """
    from fsdet.model.head import COPY_BASE

    head = _head(kind=kind)
    old = head.cls.weight.detach().clone()
    head.extend_classes([0, 1, 2, 3, 4], COPY_BASE)
    assert head.n_classes == 5 and head.background_index == 5
    assert head.cls.weight.shape == (6, 8)
    new = head.cls.weight.detach()
    for old_row, new_row in [(0, 1), (1, 2), (2, 3), (3, 5)]:
        assert torch.equal(old[old_row], new[new_row])


@pytest.mark.cpu
def test_head_extend_random_and_invalid():
    """
    verify RANDOM re-initializes every row and dropping a class is rejected
    """
    from fsdet.errors import ConfigurationError
    from fsdet.model.head import RANDOM

    head = _head()
    old = head.cls.weight.detach().clone()
    head.extend_classes([0, 1, 2, 3], RANDOM)
    assert not torch.equal(old[0], head.cls.weight.detach()[1])
    with pytest.raises(ConfigurationError):
        head.extend_classes([0, 1], RANDOM)
    with pytest.raises(ValueError):
        head.extend_classes([0, 1, 2, 3, 4], "zeros")


@pytest.mark.cpu
def test_head_decoupled_regression():
    """
    verify decoupled regression reads only the original feature and coupled regression the aggregated one
    """
    original = torch.rand(5, 8)
    a, b = torch.rand(5, 8), torch.rand(5, 8)

    head = _head(decouple=True)
    logits_a, deltas_a = head(a, original)
    logits_b, deltas_b = head(b, original)
    assert logits_a.shape == (5, 4)
    assert torch.equal(deltas_a, deltas_b)
    assert not torch.equal(logits_a, logits_b)

    head = _head(decouple=False)
    _, deltas_a = head(a, original)
    _, deltas_b = head(b, original)
    assert not torch.equal(deltas_a, deltas_b)


@pytest.mark.cpu
def test_head_dimension_mismatch():
    """
    verify features of the wrong width are rejected
    """
    from fsdet.errors import ConfigurationError

    with pytest.raises(ConfigurationError):
        _head()(torch.rand(2, 6), torch.rand(2, 6))


@pytest.mark.cpu
@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("decouple", [True, False])
def test_head_losses_gradcheck(kind, decouple):
    """
    verify gradients of the cross-entropy and smooth-L1 head losses with respect to both features in float64
    """
    from fsdet.model.head import head_losses

    head = _head(decouple=decouple, kind=kind).double()
    aggregated = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    original = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([0, 3, 2, 3, 1])
    box_targets = torch.randn(3, 4, dtype=torch.float64)

    def f(a, o=original):
        logits, deltas = head(a, o)
        l_cls, l_reg = head_losses(logits, deltas, targets, box_targets)
        return l_cls + l_reg

    inputs = (aggregated, original) if decouple else (aggregated,)
    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-4, rtol=1e-3)


@pytest.mark.cpu
def test_head_losses():
    """
    verify the head losses equal cross entropy over all RoIs and smooth L1 over foreground RoIs divided by the RoI count
    """
    import torch.nn.functional as F

    from fsdet.model.head import head_losses

    logits = torch.randn(4, 3)
    deltas = torch.randn(4, 4)
    targets = torch.tensor([0, 2, 1, 2])
    box_targets = torch.randn(2, 4)
    l_cls, l_reg = head_losses(logits, deltas, targets, box_targets)
    assert torch.allclose(l_cls, F.cross_entropy(logits, targets))
    expected = F.smooth_l1_loss(deltas[[0, 2]], box_targets, beta=1.0 / 9, reduction="sum") / 4
    assert torch.allclose(l_reg, expected)

    _, l_reg = head_losses(logits, deltas, torch.full((4,), 2), torch.zeros(0, 4))
    assert float(l_reg) == 0.0
    with pytest.raises(ValueError):
        head_losses(logits, deltas, targets, torch.zeros(3, 4))


@pytest.mark.cpu
def test_cosine_classifier_scale():
    """
    verify the cosine classifier is bounded by its scale
    """
    from fsdet.model.head import CosineClassifier

    classifier = CosineClassifier(8, 3, scale=20.0)
    logits = classifier(torch.randn(10, 8) * 100)
    assert logits.abs().max() <= 20.0 + 1e-4
    with torch.no_grad():
        classifier.weight[0] = torch.arange(8.0)
    x = torch.arange(8.0)[None] * 3
    assert math.isclose(float(classifier(x)[0, 0]), 20.0, rel_tol=1e-5)


@pytest.mark.cpu
def test_decode_detections_never_background():
    """
    verify decoding keeps scores above threshold, never emits background and maps positions to class ids
    """
    from fsdet.model.head import decode_detections
    from fsdet.model.types import DetectionOutput

    scores = torch.tensor([[0.7, 0.2, 0.1], [0.01, 0.03, 0.96]])
    output = DetectionOutput(scores=scores, deltas=torch.zeros(2, 4))
    proposals = torch.tensor([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
    detections = decode_detections(output, proposals, [3, 5], (64, 64), score_thresh=0.05)
    assert [(d.class_id, round(d.score, 4)) for d in detections] == [(3, 0.7), (5, 0.2)]
    assert detections[0].box == (0.0, 0.0, 10.0, 10.0)


@pytest.mark.cpu
def test_detection_head_config_validation():
    """
    verify invalid head configurations raise ConfigurationError
    """
    from fsdet.errors import ConfigurationError
    from fsdet.model.types import DetectionHeadConfig

    with pytest.raises(ConfigurationError):
        DetectionHeadConfig("softmax", 20.0, True, 3, 8)
    with pytest.raises(ConfigurationError):
        DetectionHeadConfig("cosine", 0.0, True, 3, 8)
    config = DetectionHeadConfig.from_args(make_args(), 4)
    assert config.to_dict()["n_classes"] == 4
