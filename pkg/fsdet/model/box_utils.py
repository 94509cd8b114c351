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

"""Box encoding, decoding and anchor generation. Boxes are (x1, y1, x2, y2)."""

import math
from typing import Sequence

import torch

RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
HEAD_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)

# no box grows by more than 1000/16 in one decoding step
BBOX_XFORM_CLIP = math.log(1000.0 / 16)


def encode_boxes(src: torch.Tensor, dst: torch.Tensor, weights=RPN_BOX_WEIGHTS) -> torch.Tensor:
    """Offsets (dx, dy, dw, dh) that move `src` boxes onto `dst` boxes."""
    wx, wy, ww, wh = weights
    eps = torch.finfo(src.dtype).eps
    src_w = (src[:, 2] - src[:, 0]).clamp(min=eps)
    src_h = (src[:, 3] - src[:, 1]).clamp(min=eps)
    src_cx = src[:, 0] + 0.5 * src_w
    src_cy = src[:, 1] + 0.5 * src_h

    dst_w = (dst[:, 2] - dst[:, 0]).clamp(min=eps)
    dst_h = (dst[:, 3] - dst[:, 1]).clamp(min=eps)
    dst_cx = dst[:, 0] + 0.5 * dst_w
    dst_cy = dst[:, 1] + 0.5 * dst_h

    dx = wx * (dst_cx - src_cx) / src_w
    dy = wy * (dst_cy - src_cy) / src_h
    dw = ww * torch.log(dst_w / src_w)
    dh = wh * torch.log(dst_h / src_h)
    return torch.stack((dx, dy, dw, dh), dim=1)


def decode_boxes(src: torch.Tensor, deltas: torch.Tensor, weights=RPN_BOX_WEIGHTS) -> torch.Tensor:
    """Inverse of encode_boxes; deltas is R x 4 or R x C x 4."""
    wx, wy, ww, wh = weights
    widths = src[:, 2] - src[:, 0]
    heights = src[:, 3] - src[:, 1]
    ctr_x = src[:, 0] + 0.5 * widths
    ctr_y = src[:, 1] + 0.5 * heights
    if deltas.dim() == 3:
        widths, heights = widths[:, None], heights[:, None]
        ctr_x, ctr_y = ctr_x[:, None], ctr_y[:, None]

    dx = deltas[..., 0] / wx
    dy = deltas[..., 1] / wy
    dw = (deltas[..., 2] / ww).clamp(max=BBOX_XFORM_CLIP)
    dh = (deltas[..., 3] / wh).clamp(max=BBOX_XFORM_CLIP)

    pred_ctr_x = dx * widths + ctr_x
    pred_ctr_y = dy * heights + ctr_y
    pred_w = torch.exp(dw) * widths
    pred_h = torch.exp(dh) * heights
    return torch.stack(
        (
            pred_ctr_x - 0.5 * pred_w,
            pred_ctr_y - 0.5 * pred_h,
            pred_ctr_x + 0.5 * pred_w,
            pred_ctr_y + 0.5 * pred_h,
        ),
        dim=-1,
    )


def clip_boxes(boxes: torch.Tensor, height, width) -> torch.Tensor:
    x = boxes[..., 0::2].clamp(min=0, max=width)
    y = boxes[..., 1::2].clamp(min=0, max=height)
    return torch.stack((x[..., 0], y[..., 0], x[..., 1], y[..., 1]), dim=-1)


def generate_anchor_base(size: float, ratios: Sequence[float]) -> torch.Tensor:
    """One anchor per aspect ratio (h / w), centered on the origin, all of area size^2."""
    anchors = []
    for ratio in ratios:
        h = size * math.sqrt(ratio)
        w = size / math.sqrt(ratio)
        anchors.append([-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h])
    return torch.tensor(anchors, dtype=torch.float32)


def enumerate_shifted_anchors(anchor_base: torch.Tensor, stride: int, height: int, width: int) -> torch.Tensor:
    """
    Anchors centered on every feature cell center: (h * w * A) x 4 ordered
    cell-major, matching a permuted A-channel prediction map.
    """
    shift_y = (torch.arange(height, dtype=torch.float32) + 0.5) * stride
    shift_x = (torch.arange(width, dtype=torch.float32) + 0.5) * stride
    shift_y, shift_x = torch.meshgrid(shift_y, shift_x, indexing="ij")
    shifts = torch.stack(
        (shift_x.reshape(-1), shift_y.reshape(-1), shift_x.reshape(-1), shift_y.reshape(-1)),
        dim=1,
    )
    anchors = shifts[:, None, :] + anchor_base.to(shifts)[None, :, :]
    return anchors.reshape(-1, 4)
