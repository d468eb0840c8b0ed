"""Axis-aligned box geometry: format conversion, IoU, and generalized IoU.

Boxes travel through the detector in normalized center format
(cx, cy, w, h), all in [0, 1]. Geometry below works on corner format
(x1, y1, x2, y2); convert first. Numpy variants serve matching costs and
evaluation; tensor variants are differentiable for the regression loss.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def center_to_corners(boxes):
    """[..., 4] center format -> corner format (numpy)."""
    boxes = np.asarray(boxes)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def center_to_corners_t(boxes):
    """Differentiable center -> corner conversion; boxes: Tensor [..., 4]."""
    cx = boxes[..., 0:1]
    cy = boxes[..., 1:2]
    w = boxes[..., 2:3]
    h = boxes[..., 3:4]
    half_w = T.mul(w, 0.5)
    half_h = T.mul(h, 0.5)
    return T.concat(
        [T.sub(cx, half_w), T.sub(cy, half_h), T.add(cx, half_w), T.add(cy, half_h)],
        axis=-1,
    )


def _validate_corners(a):
    if np.any(a[..., 2] <= a[..., 0]) or np.any(a[..., 3] <= a[..., 1]):
        raise ValueError("degenerate box: width and height must be positive")


def iou_matrix(a, b):
    """Pairwise IoU of corner boxes a [A,4] and b [B,4] -> [A,B]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def giou_matrix(a, b):
    """Pairwise generalized IoU of corner boxes a [A,4], b [B,4] -> [A,B]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _validate_corners(a)
    _validate_corners(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    hx1 = np.minimum(a[:, None, 0], b[None, :, 0])
    hy1 = np.minimum(a[:, None, 1], b[None, :, 1])
    hx2 = np.maximum(a[:, None, 2], b[None, :, 2])
    hy2 = np.maximum(a[:, None, 3], b[None, :, 3])
    hull = (hx2 - hx1) * (hy2 - hy1)
    return inter / union - (hull - union) / hull


def giou(a, b):
    """GIoU of two corner boxes; scalar in (-1, 1], symmetric."""
    a = np.asarray(a, dtype=np.float64).reshape(1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(1, 4)
    return float(giou_matrix(a, b)[0, 0])


def giou_pairs_t(pred, gt):
    """Differentiable GIoU of matched corner-box pairs.

    pred: Tensor [M, 4]; gt: Tensor [M, 4] (typically a constant).
    Returns Tensor [M].
    """
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (gt[:, i] for i in range(4))
    iw = T.relu(T.sub(T.tminimum(px2, gx2), T.tmaximum(px1, gx1)))
    ih = T.relu(T.sub(T.tminimum(py2, gy2), T.tmaximum(py1, gy1)))
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_g = T.mul(T.sub(gx2, gx1), T.sub(gy2, gy1))
    union = T.sub(T.add(area_p, area_g), inter)
    hw = T.sub(T.tmaximum(px2, gx2), T.tminimum(px1, gx1))
    hh = T.sub(T.tmaximum(py2, gy2), T.tminimum(py1, gy1))
    hull = T.mul(hw, hh)
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))
