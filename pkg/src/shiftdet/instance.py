"""Instance-level alignment in the decoder: a single learned domain
query harvests object-query features through its own per-layer
cross-attention stack (parameters disjoint from the decoder), feeds the
decoder discriminator adversarially, and an inter-layer JS-divergence
consistency loss pulls each layer's class predictions toward their
ensemble on target images.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

_EPS = 1e-7


class DomainQueryHead(nn.Module):
    """q_{i+1} = Linear_i(MultiHeadAttn_i(q_i, k_i, v_i)) with k, v the
    layer-i object-query states. One attention + projection pair per
    decoder layer, none shared with the decoder."""

    def __init__(self, rng, cfg):
        dt = np.float32 if cfg.dtype == "float32" else np.float64
        d = cfg.embed_dim
        self.embed = Tensor(rng.standard_normal((1, d)) * 0.5, requires_grad=True, dtype=dt)
        self.attn = [
            nn.MultiHeadAttention(rng, d, cfg.num_heads, dt) for _ in range(cfg.decoder_layers)
        ]
        self.proj = [nn.Linear(rng, d, d, dt) for _ in range(cfg.decoder_layers)]

    def __call__(self, decoder_states):
        """decoder_states: per-layer object-query tensors [N, Q, D].
        Returns [q_1 .. q_N], each [N, D]."""
        if len(decoder_states) != len(self.attn):
            raise ValueError(
                f"expected {len(self.attn)} decoder layers, got {len(decoder_states)}"
            )
        n = decoder_states[0].shape[0]
        d = self.embed.shape[1]
        q = T.tile_leading(self.embed, n)  # [N, 1, D]
        outputs = []
        for attn, proj, states in zip(self.attn, self.proj, decoder_states):
            q = proj(attn(q, states, states))
            outputs.append(T.reshape(q, (n, d)))
        return outputs


def ifa_loss(rev_queries, domains, bank):
    """Decoder adversarial loss: mean over layers and batch of
    BCE(D_d(q_i), d). rev_queries: gradient-reversed [N, D] tensors."""
    total = None
    for q in rev_queries:
        probs = bank.disc_query(q)
        d_arr = np.asarray(domains, dtype=probs.dtype)
        pc = T.clamp(probs, _EPS, 1.0 - _EPS)
        pos = T.mul(T.tlog(pc), Tensor(d_arr))
        neg = T.mul(T.tlog(T.sub(1.0, pc)), Tensor(1.0 - d_arr))
        layer_loss = T.neg(T.tmean(T.add(pos, neg)))
        total = layer_loss if total is None else T.add(total, layer_loss)
    return T.mul(total, 1.0 / len(rev_queries))


def _kl_terms(p, m):
    """Elementwise p * (log p - log m) with clamped log arguments; exact
    zero contribution where p is exactly zero."""
    logp = T.tlog(T.clamp(p, _EPS, 1.0))
    logm = T.tlog(T.clamp(m, _EPS, 1.0))
    return T.mul(p, T.sub(logp, logm))


def jsd_pointwise(p, q, axis=-1):
    """JS divergence along `axis` for stacked distributions (Tensor in,
    Tensor out, differentiable)."""
    m = T.mul(T.add(p, q), 0.5)
    kl_pm = T.tsum(_kl_terms(p, m), axis=axis)
    kl_qm = T.tsum(_kl_terms(q, m), axis=axis)
    return T.mul(T.add(kl_pm, kl_qm), 0.5)


def jsd(p, q):
    """Jensen-Shannon divergence of two distributions (natural log).

    Accepts 1-D arrays or Tensors; both must be nonnegative and sum to 1
    within 1e-6. Symmetric, bounded by [0, ln 2].
    """
    pt = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    qt = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64), dtype=pt.dtype)
    for name, t in (("P", pt), ("Q", qt)):
        if np.any(t.data < 0):
            raise ValueError(f"{name} has negative entries")
        if abs(float(t.data.sum()) - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1 (got {t.data.sum()})")
    return jsd_pointwise(pt, qt, axis=-1)


def consistency_loss(layer_logits, detach_reference=True):
    """Inter-layer prediction consistency for target-domain images.

    layer_logits: per-decoder-layer class logits [N, Q, K+1]. Each layer
    is softmaxed per query; the reference is the mean of the layer
    distributions (a constant when detach_reference, so layers are
    pulled toward the ensemble rather than collapsing it). Returns
    (1/L) * sum_i mean-over-images-and-queries JSD(reference, y_i).
    """
    probs = [T.softmax(lg, axis=-1) for lg in layer_logits]
    n_layers = len(probs)
    ref = probs[0]
    for p in probs[1:]:
        ref = T.add(ref, p)
    ref = T.mul(ref, 1.0 / n_layers)
    if detach_reference:
        ref = ref.detach()
    total = None
    for p in probs:
        layer_term = T.tmean(jsd_pointwise(ref, p, axis=-1))
        total = layer_term if total is None else T.add(total, layer_term)
    return T.mul(total, 1.0 / n_layers)


def mean_interlayer_jsd(layer_logits_np):
    """Diagnostic: numpy mean over layers/queries of JSD(reference, y_i),
    matching consistency_loss but graph-free (for evaluation reports)."""
    def softmax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    probs = [softmax(np.asarray(lg, dtype=np.float64)) for lg in layer_logits_np]
    ref = np.mean(probs, axis=0)

    def kl(a, b):
        terms = a * (np.log(np.clip(a, _EPS, None)) - np.log(np.clip(b, _EPS, None)))
        return terms.sum(axis=-1)

    vals = []
    for p in probs:
        m = 0.5 * (ref + p)
        vals.append(np.mean(0.5 * kl(ref, m) + 0.5 * kl(p, m)))
    return float(np.mean(vals))
