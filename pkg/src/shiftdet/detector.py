"""Miniature DETR-style detector: multi-scale conv backbone, per-scale
token encoder, query decoder with per-layer prediction heads, and the
supervised set-prediction loss (Hungarian matching + CE/L1/GIoU).

Everything on the inference path lives here; adaptation modules hook in
from outside and never alter these outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as B
from . import nn
from . import tensor as T
from .data import BoxSet
from .matching import hungarian_match
from .tensor import Tensor

# cost = CLS_COST*CE + L1_COST*L1 + GIOU_COST*(1-GIoU); loss uses CE + L1_LOSS*L1 + GIOU_LOSS*(1-GIoU)
CLS_COST = 2.0
L1_COST = 5.0
GIOU_COST = 2.0
L1_LOSS = 5.0
GIOU_LOSS = 2.0

_LOG_EPS = 1e-7


@dataclass
class MultiScaleFeatures:
    levels: list  # Tensors [N, C_i, H_i, W_i]
    strides: tuple


@dataclass
class EncodedFeatures:
    levels: list  # Tensors [N, T_j, D]
    shapes: list  # (H_j, W_j) per level
    strides: tuple


@dataclass
class DecoderOutput:
    states: list  # per layer: Tensor [N, Q, D]
    logits: list  # per layer: Tensor [N, Q, K+1]
    boxes: list  # per layer: Tensor [N, Q, 4], sigmoid-normalized centers


@dataclass
class DetectorForward:
    features: MultiScaleFeatures
    encoded: EncodedFeatures
    decoder: DecoderOutput


def _np_dtype(name):
    return np.float32 if name == "float32" else np.float64


class Backbone(nn.Module):
    """Five stride-2 convs; taps at total stride 8, 16, 32."""

    def __init__(self, rng, cfg):
        dt = _np_dtype(cfg.dtype)
        c1, c2, c3 = cfg.backbone_channels
        self.stem0 = nn.Conv2d(rng, 3, c1, 3, stride=2, padding=1, dtype=dt)
        self.stem1 = nn.Conv2d(rng, c1, c1, 3, stride=2, padding=1, dtype=dt)
        self.stage1 = nn.Conv2d(rng, c1, c1, 3, stride=2, padding=1, dtype=dt)
        self.stage2 = nn.Conv2d(rng, c1, c2, 3, stride=2, padding=1, dtype=dt)
        self.stage3 = nn.Conv2d(rng, c2, c3, 3, stride=2, padding=1, dtype=dt)

    def __call__(self, images):
        x = T.relu(self.stem0(images))
        x = T.relu(self.stem1(x))
        f1 = T.relu(self.stage1(x))
        f2 = T.relu(self.stage2(f1))
        f3 = T.relu(self.stage3(f2))
        return MultiScaleFeatures([f1, f2, f3], (8, 16, 32))


class EncoderLayer(nn.Module):
    def __init__(self, rng, dim, heads, ffn_dim, dtype):
        self.attn = nn.MultiHeadAttention(rng, dim, heads, dtype)
        self.norm1 = nn.LayerNorm(dim, dtype)
        self.ffn = nn.MLP(rng, (dim, ffn_dim, dim), dtype)
        self.norm2 = nn.LayerNorm(dim, dtype)

    def __call__(self, x, pos=None):
        qk = T.add(x, pos) if pos is not None else x
        x = self.norm1(T.add(x, self.attn(qk, qk, x)))
        x = self.norm2(T.add(x, self.ffn(x)))
        return x


class Encoder(nn.Module):
    """Per-scale input projection + one self-attention block per scale."""

    def __init__(self, rng, cfg):
        dt = _np_dtype(cfg.dtype)
        self.in_proj = [nn.Linear(rng, c, cfg.embed_dim, dt) for c in cfg.backbone_channels]
        self.layers = [
            EncoderLayer(rng, cfg.embed_dim, cfg.num_heads, cfg.ffn_dim, dt)
            for _ in cfg.backbone_channels
        ]
        self.dim = cfg.embed_dim
        self.use_pos = cfg.use_pos_encoding
        self.dtype = dt
        self._pos_cache = {}

    def pos_table(self, h, w):
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = Tensor(
                nn.sinusoidal_positions_2d(h, w, self.dim, self.dtype)
            )
        return self._pos_cache[key]

    def __call__(self, feats: MultiScaleFeatures):
        levels, shapes = [], []
        for j, f in enumerate(feats.levels):
            n, c, h, w = f.shape
            tokens = T.transpose(T.reshape(f, (n, c, h * w)), (0, 2, 1))
            tokens = self.in_proj[j](tokens)
            pos = self.pos_table(h, w) if self.use_pos else None
            levels.append(self.layers[j](tokens, pos))
            shapes.append((h, w))
        return EncodedFeatures(levels, shapes, feats.strides)


class DecoderLayer(nn.Module):
    def __init__(self, rng, dim, heads, ffn_dim, dtype):
        self.self_attn = nn.MultiHeadAttention(rng, dim, heads, dtype)
        self.norm1 = nn.LayerNorm(dim, dtype)
        self.cross_attn = nn.MultiHeadAttention(rng, dim, heads, dtype)
        self.norm2 = nn.LayerNorm(dim, dtype)
        self.ffn = nn.MLP(rng, (dim, ffn_dim, dim), dtype)
        self.norm3 = nn.LayerNorm(dim, dtype)

    def __call__(self, x, memory, mem_pos=None):
        x = self.norm1(T.add(x, self.self_attn(x, x, x)))
        keys = T.add(memory, mem_pos) if mem_pos is not None else memory
        x = self.norm2(T.add(x, self.cross_attn(x, keys, memory)))
        x = self.norm3(T.add(x, self.ffn(x)))
        return x


class Decoder(nn.Module):
    """Learned object queries refined over N layers; shared prediction heads."""

    def __init__(self, rng, cfg):
        dt = _np_dtype(cfg.dtype)
        d = cfg.embed_dim
        self.query_embed = Tensor(
            rng.standard_normal((cfg.num_queries, d)) * 0.5, requires_grad=True, dtype=dt
        )
        self.layers = [
            DecoderLayer(rng, d, cfg.num_heads, cfg.ffn_dim, dt)
            for _ in range(cfg.decoder_layers)
        ]
        self.class_head = nn.Linear(rng, d, cfg.num_classes + 1, dt)
        self.box_head = nn.MLP(rng, (d, d, 4), dt)

    def __call__(self, enc: EncodedFeatures, encoder_pos=None):
        memory = T.concat(enc.levels, axis=1)
        mem_pos = None
        if encoder_pos is not None:
            mem_pos = T.concat(encoder_pos, axis=0)
        n = memory.shape[0]
        x = T.tile_leading(self.query_embed, n)
        states, logits, boxes = [], [], []
        for layer in self.layers:
            x = layer(x, memory, mem_pos)
            states.append(x)
            logits.append(self.class_head(x))
            boxes.append(T.sigmoid(self.box_head(x)))
        return DecoderOutput(states, logits, boxes)


class Detector(nn.Module):
    def __init__(self, rng, cfg):
        self.cfg = cfg
        self.backbone = Backbone(rng, cfg)
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)

    def __call__(self, images) -> DetectorForward:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=_np_dtype(self.cfg.dtype)))
        feats = self.backbone(images)
        enc = self.encoder(feats)
        enc_pos = None
        if self.cfg.use_pos_encoding:
            enc_pos = [self.encoder.pos_table(h, w) for (h, w) in enc.shapes]
        dec = self.decoder(enc, enc_pos)
        return DetectorForward(feats, enc, dec)

    def predict(self, images):
        """Inference: per query (class, score, box) from the final layer.

        Score is the max non-background softmax probability; class its
        argmax. Returns numpy arrays (classes [N,Q], scores [N,Q],
        boxes [N,Q,4] center format).
        """
        with T.no_grad():
            fwd = self(images)
        logits = fwd.decoder.logits[-1].data
        probs = _np_softmax(logits)
        fg = probs[..., :-1]
        classes = fg.argmax(axis=-1)
        scores = fg.max(axis=-1)
        return classes, scores, fwd.decoder.boxes[-1].data.copy()


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_cost_matrix(logits, pred_boxes, gt: BoxSet):
    """DETR-style matching cost on raw numpy arrays; [Q, M]."""
    probs = _np_softmax(np.asarray(logits, dtype=np.float64))
    ce = -np.log(np.clip(probs[:, gt.classes], _LOG_EPS, None))  # [Q, M]
    l1 = np.abs(pred_boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    giou = B.giou_matrix(B.center_to_corners(pred_boxes), B.center_to_corners(gt.boxes))
    return CLS_COST * ce + L1_COST * l1 + GIOU_COST * (1.0 - giou)


def match_layer(logits, pred_boxes, annotations):
    """Hungarian assignment per image for one decoder layer (numpy side)."""
    matchings = []
    for n, gt in enumerate(annotations):
        if gt is None or len(gt) == 0:
            matchings.append(np.zeros(0, dtype=np.int64))
            continue
        cost = build_cost_matrix(logits[n], pred_boxes[n], gt)
        matchings.append(hungarian_match(cost))
    return matchings


def detection_loss(out: DecoderOutput, annotations, num_classes, fixed_matching=None):
    """Supervised set-prediction loss, summed over decoder layers.

    Per layer: Hungarian match (on detached predictions), then
    cross-entropy over all queries with unmatched queries assigned the
    background class, plus L1 and (1 - GIoU) over matched pairs
    normalized per image by its ground-truth count. The per-layer sums
    are averaged over the batch.

    Must only see labeled (source) images: any None annotation raises.
    `fixed_matching` freezes the assignment (used by gradient checks,
    where a matching flip would be a spurious discontinuity).

    Returns (loss Tensor, details dict with per-layer floats + matchings).
    """
    if any(gt is None for gt in annotations):
        raise ValueError("detection_loss called with unlabeled (target) images")
    n_layers = len(out.logits)
    n_batch = out.logits[0].shape[0]
    n_queries = out.logits[0].shape[1]
    bg = num_classes

    total = None
    per_layer = []
    all_matchings = []
    for layer in range(n_layers):
        logits = out.logits[layer]
        pboxes = out.boxes[layer]
        if fixed_matching is not None:
            matchings = fixed_matching[layer]
        else:
            matchings = match_layer(logits.data, pboxes.data, annotations)
        all_matchings.append(matchings)

        targets = np.full((n_batch, n_queries), bg, dtype=np.int64)
        pair_rows, pair_gt_boxes, pair_weights = [], [], []
        for n, (gt, assign) in enumerate(zip(annotations, matchings)):
            if len(assign) == 0:
                continue
            targets[n, assign] = gt.classes
            for m, q in enumerate(assign):
                pair_rows.append(n * n_queries + q)
                pair_gt_boxes.append(gt.boxes[m])
                pair_weights.append(1.0 / len(assign))

        logp = T.log_softmax(T.reshape(logits, (n_batch * n_queries, bg + 1)), axis=-1)
        picked = logp[np.arange(n_batch * n_queries), targets.reshape(-1)]
        ce = T.neg(T.tmean(picked))

        layer_loss = ce
        if pair_rows:
            dt = pboxes.dtype
            rows = np.asarray(pair_rows)
            w = Tensor(np.asarray(pair_weights), dtype=dt)
            gt_boxes = np.asarray(pair_gt_boxes)
            pred_pairs = T.reshape(pboxes, (n_batch * n_queries, 4))[rows]
            gt_t = Tensor(gt_boxes, dtype=dt)
            l1 = T.tsum(T.tabs(T.sub(pred_pairs, gt_t)), axis=-1)
            gval = B.giou_pairs_t(B.center_to_corners_t(pred_pairs), Tensor(B.center_to_corners(gt_boxes), dtype=dt))
            l1_term = T.mul(T.tsum(T.mul(l1, w)), 1.0 / n_batch)
            giou_term = T.mul(T.tsum(T.mul(T.sub(1.0, gval), w)), 1.0 / n_batch)
            layer_loss = T.add(layer_loss, T.add(T.mul(l1_term, L1_LOSS), T.mul(giou_term, GIOU_LOSS)))

        per_layer.append(layer_loss.item())
        total = layer_loss if total is None else T.add(total, layer_loss)

    return total, {"per_layer": per_layer, "matchings": all_matchings}
