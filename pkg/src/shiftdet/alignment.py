"""Backbone and encoder feature alignment losses.

Backbone: every pixel of every scale is domain-classified (local term),
and pixels inside object regions are additionally classified with weight
1.5 (object term); the two means are summed, so object pixels carry an
effective weight of 1 + 1.5. Object regions come from ground truth on
source images and from confident (score > 0.5) current predictions on
target images, with class identities discarded.

Encoder: per-level mean BCE over token probabilities, averaged over the
levels.

Both losses expect features that already passed through gradient
reversal; they only score and reduce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adversarial import bce_terms
from .data import SOURCE, TARGET


@dataclass
class MaskPyramid:
    """Per-scale pixel weight maps: entries are 0 or `weight` (1.5)."""

    scales: list  # numpy [N, H_i, W_i] per backbone scale
    provenance: list  # per image: "source-gt" | "target-pred"
    weight: float


def build_object_mask(
    domains,
    annotations,
    preds,
    strides,
    feature_shapes,
    image_size,
    conf_thresh=0.5,
    weight=1.5,
):
    """Rasterize retained boxes into per-scale weight maps.

    A cell (u, v) at scale i receives `weight` iff its center
    (u + 0.5, v + 0.5) lies inside any retained box after dividing the
    box pixel coordinates by stride_i; otherwise 0.

    domains: [N] ints. annotations: per-image BoxSet or None (source
    images must have one). preds: (scores [N, Q], boxes [N, Q, 4]) from
    the final decoder layer, required for target images. Class identity
    is never consulted.
    """
    n_images = len(domains)
    scales = [np.zeros((n_images, h, w)) for (h, w) in feature_shapes]
    provenance = []
    for n in range(n_images):
        if domains[n] == SOURCE:
            if annotations[n] is None:
                raise ValueError(f"source image {n} lacks annotations")
            boxes_norm = annotations[n].boxes
            provenance.append("source-gt")
        elif domains[n] == TARGET:
            if preds is None:
                raise ValueError(f"target image {n} has no predictions to build masks from")
            scores, pboxes = preds
            keep = scores[n] > conf_thresh
            boxes_norm = pboxes[n][keep]
            provenance.append("target-pred")
        else:
            raise ValueError(f"unknown domain label {domains[n]}")
        if len(boxes_norm) == 0:
            continue
        px = np.asarray(boxes_norm, dtype=np.float64) * image_size  # pixel center format
        x1 = px[:, 0] - px[:, 2] / 2
        y1 = px[:, 1] - px[:, 3] / 2
        x2 = px[:, 0] + px[:, 2] / 2
        y2 = px[:, 1] + px[:, 3] / 2
        for i, (stride, (h, w)) in enumerate(zip(strides, feature_shapes)):
            cols = np.arange(w) + 0.5
            rows = np.arange(h) + 0.5
            in_x = (cols[None, :] >= x1[:, None] / stride) & (cols[None, :] <= x2[:, None] / stride)
            in_y = (rows[None, :] >= y1[:, None] / stride) & (rows[None, :] <= y2[:, None] / stride)
            inside = np.einsum("bh,bw->hw", in_y.astype(np.float64), in_x.astype(np.float64)) > 0
            scales[i][n][inside] = weight
    return MaskPyramid(scales, provenance, weight)


def lofa_loss(rev_features, domains, masks: MaskPyramid, bank):
    """Local + object-level backbone alignment.

    rev_features: list of gradient-reversed scale tensors [N, C_i, H_i, W_i].
    Returns (total Tensor, {"loc": float, "obj": float}).

    Local term: mean of per-pixel BCE pooled over every pixel of every
    scale. Object term: same pool, each term multiplied by its mask
    weight (masked-out pixels still count in the denominator).
    """
    loc_sum, obj_sum = None, None
    count = 0
    for i, f in enumerate(rev_features):
        n, _, h, w = f.shape
        mask = masks.scales[i]
        if mask.shape != (n, h, w):
            raise ValueError(f"mask shape {mask.shape} != feature pixels {(n, h, w)}")
        probs = T.reshape(bank.disc_pixel(f, i + 1), (n, h, w))
        d_map = np.broadcast_to(np.asarray(domains, dtype=probs.dtype)[:, None, None], (n, h, w))
        terms = bce_terms(probs, d_map)
        loc_part = T.tsum(terms)
        obj_part = T.tsum(T.mul(terms, T.Tensor(mask.astype(probs.dtype))))
        loc_sum = loc_part if loc_sum is None else T.add(loc_sum, loc_part)
        obj_sum = obj_part if obj_sum is None else T.add(obj_sum, obj_part)
        count += n * h * w
    loc = T.mul(loc_sum, 1.0 / count)
    obj = T.mul(obj_sum, 1.0 / count)
    return T.add(loc, obj), {"loc": loc.item(), "obj": obj.item()}


def ssfa_loss(rev_levels, domains, bank):
    """Scene-semantic encoder alignment: mean over levels of the mean
    per-token BCE. rev_levels: gradient-reversed token tensors [N, T_j, D]."""
    total = None
    for tokens in rev_levels:
        n, t, _ = tokens.shape
        probs = bank.disc_token(tokens)
        d_map = np.broadcast_to(np.asarray(domains, dtype=probs.dtype)[:, None], (n, t))
        level_loss = T.tmean(bce_terms(probs, d_map))
        total = level_loss if total is None else T.add(total, level_loss)
    return T.mul(total, 1.0 / len(rev_levels))
