"""Gradient-reversal adversarial machinery: the three domain
discriminators and the shared masked binary cross-entropy.

All discriminators are training-only. Their parameters are disjoint from
the detector's, and nothing on the inference path calls them; deleting
the bank leaves detector predictions bit-identical.

Convention throughout: source domain label 0, target domain label 1.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7


def grl(x, coeff=1.0):
    """Gradient reversal: identity forward, -coeff * upstream backward."""
    return T.grad_reverse(x, coeff)


def bce_terms(p, d):
    """Elementwise -d*log(p) - (1-d)*log(1-p) with clamped probabilities.

    p: probability Tensor; d: scalar or array broadcast to p's shape.
    """
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    d_arr = np.broadcast_to(np.asarray(d, dtype=p.dtype), p.shape).astype(p.dtype)
    pos = T.mul(T.tlog(pc), Tensor(d_arr))
    negp = T.mul(T.tlog(T.sub(1.0, pc)), Tensor(1.0 - d_arr))
    return T.neg(T.add(pos, negp))


def bce_domain(p, d, w=None):
    """Mean over all elements of w * BCE(p, d); absent w means all-ones."""
    terms = bce_terms(p, d)
    if w is not None:
        if not isinstance(w, Tensor):
            w = Tensor(np.asarray(w), dtype=p.dtype)
        if w.shape != terms.shape:
            raise ValueError(f"weight shape {w.shape} != probability shape {terms.shape}")
        terms = T.mul(terms, w)
    return T.tmean(terms)


class DiscriminatorBank(nn.Module):
    """D_b (per-pixel 1x1 conv per backbone scale), D_e (token MLP),
    D_d (query-vector MLP). Outputs are sigmoid probabilities clamped to
    [1e-7, 1 - 1e-7]."""

    def __init__(self, rng, cfg):
        dt = np.float32 if cfg.dtype == "float32" else np.float64
        if cfg.disc_share_backbone_heads:
            shared = nn.Conv2d(rng, cfg.backbone_channels[0], 1, 1, dtype=dt)
            self.pixel_heads = [shared] * 3
        else:
            self.pixel_heads = [nn.Conv2d(rng, c, 1, 1, dtype=dt) for c in cfg.backbone_channels]
        hidden = cfg.disc_hidden_dim
        self.token_mlp = nn.MLP(rng, (cfg.embed_dim, hidden, 1), dt)
        self.query_mlp = nn.MLP(rng, (cfg.embed_dim, hidden, 1), dt)

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) not in seen:  # shared pixel heads appear once
                seen.add(id(p))
                yield name, p

    def disc_pixel(self, f, scale_idx):
        """Per-pixel domain probability map [N, 1, H, W] for scale 1..3."""
        if scale_idx not in (1, 2, 3):
            raise ValueError(f"scale index must be 1, 2 or 3, got {scale_idx}")
        logits = self.pixel_heads[scale_idx - 1](f)
        return T.clamp(T.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)

    def disc_token(self, tokens):
        """Per-token domain probability [N, T] from token features [N, T, D]."""
        n, t, _ = tokens.shape
        logits = T.reshape(self.token_mlp(tokens), (n, t))
        return T.clamp(T.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)

    def disc_query(self, q):
        """Domain probability [N] from a query vector batch [N, D]."""
        logits = T.reshape(self.query_mlp(q), (q.shape[0],))
        return T.clamp(T.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
