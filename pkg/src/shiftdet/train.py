"""Training harness: source-domain pretraining and adversarial adaptation.

Pretraining sees labeled source images only and trains the detection
loss. Adaptation steps on a mixed pair (one source + one target image in
a single forward), computes the detection loss on the source element,
the three adversarial alignment losses on both, the consistency loss on
the target element, and takes one joint optimizer step over detector
and discriminator parameters (gradient reversal makes the minimax a
single pass).

A run directory holds config.txt, log.jsonl (one JSON object per step
with the six loss series det/B/E/D/cons/total), and checkpoint.ckpt.
"""

from __future__ import annotations

import json
import os
import zlib

import numpy as np

from . import tensor as T
from .adversarial import DiscriminatorBank, grl
from .alignment import build_object_mask, lofa_loss, ssfa_loss
from .checkpoint import check_architecture, load_checkpoint, save_checkpoint
from .config import Config, config_hash, save_config
from .data import SOURCE, TARGET, read_dataset
from .detector import DecoderOutput, Detector, _np_softmax, detection_loss
from .instance import DomainQueryHead, consistency_loss, ifa_loss
from .optim import AdamW
from .tensor import Tensor

LOSS_SERIES = ("det", "B", "E", "D", "cons", "total")


class TargetLabelLeak(RuntimeError):
    """Raised when training code would touch target-domain annotations."""


def _rng_for(cfg, tag):
    return np.random.default_rng(
        np.random.SeedSequence((cfg.seed, zlib.crc32(tag.encode("utf-8"))))
    )


def build_models(cfg: Config):
    """Deterministically seeded detector + adaptation modules."""
    detector = Detector(_rng_for(cfg, "detector"), cfg)
    bank = DiscriminatorBank(_rng_for(cfg, "bank"), cfg)
    dq_head = DomainQueryHead(_rng_for(cfg, "dq"), cfg)
    return detector, bank, dq_head


def total_loss(l_det, l_b, l_e, l_d, l_cons, cfg: Config):
    """Weighted sum: det + l1*B + l2*E + l3*D + l4*cons. Missing terms
    (disabled modules) enter as zero."""
    out = l_det
    for term, lam in ((l_b, cfg.lambda1), (l_e, cfg.lambda2), (l_d, cfg.lambda3), (l_cons, cfg.lambda4)):
        if term is not None and lam != 0.0:
            out = T.add(out, T.mul(term, float(lam)))
    return out


class _JsonlLogger:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8")

    def write(self, **fields):
        self.fh.write(json.dumps(fields) + "\n")

    def close(self):
        self.fh.flush()
        self.fh.close()


def _detector_arrays(detector):
    return {f"det.{n}": p.data for n, p in detector.named_parameters()}


def _load_detector_arrays(detector, arrays):
    state = {n[len("det."):]: a for n, a in arrays.items() if n.startswith("det.")}
    detector.load_state_dict(state)


def _assert_finite(value, step, out_dir, components):
    if np.isfinite(value):
        return
    dump = {"step": step, "components": components}
    path = os.path.join(out_dir, "nan_dump.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dump, fh, indent=2, sort_keys=True)
    raise RuntimeError(f"non-finite loss at step {step}; state dumped to {path}")


def _batch_images(records, idxs, dtype):
    return Tensor(np.stack([records[i].image for i in idxs]).astype(dtype))


def pretrain_source(cfg: Config, source_dir, out_dir, batch_size=2, resume_from=None):
    """Supervised pretraining on the labeled source split.

    Discriminators are never constructed or updated here. Any target
    record in the split is a hard failure (label-leak guard).
    """
    os.makedirs(out_dir, exist_ok=True)
    records = read_dataset(source_dir)
    for r in records:
        if r.domain != SOURCE:
            raise TargetLabelLeak(f"pretraining split contains target-domain record {r.file}")
        if r.boxes is None:
            raise ValueError(f"source record {r.file} lacks annotations")

    detector, _, _ = build_models(cfg)
    opt = AdamW(
        list(detector.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    loop_rng = _rng_for(cfg, "pretrain-loop")
    start_epoch = 0
    step = 0
    if resume_from is not None:
        arrays, ckpt_cfg, meta = load_checkpoint(resume_from)
        check_architecture(ckpt_cfg, cfg, resume_from)
        _load_detector_arrays(detector, arrays)
        opt.load_state_arrays(arrays, meta["opt_t"])
        loop_rng.bit_generator.state = json.loads(meta["rng_state"])
        start_epoch = int(meta["epoch"])
        step = int(meta["step"])

    save_config(cfg, os.path.join(out_dir, "config.txt"))
    log = _JsonlLogger(os.path.join(out_dir, "log.jsonl"))
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    epoch_means = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = loop_rng.permutation(len(records))
            losses = []
            for lo in range(0, len(order) - len(order) % batch_size, batch_size):
                idxs = order[lo : lo + batch_size]
                images = _batch_images(records, idxs, dtype)
                fwd = detector(images)
                loss, _ = detection_loss(
                    fwd.decoder, [records[i].boxes for i in idxs], cfg.num_classes
                )
                value = loss.item()
                _assert_finite(value, step, out_dir, {"det": value})
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                losses.append(value)
                log.write(
                    step=step, epoch=epoch, det=value, B=0.0, E=0.0, D=0.0,
                    cons=0.0, total=value, lr=cfg.lr, seed=cfg.seed,
                )
            epoch_means.append(float(np.mean(losses)) if losses else float("nan"))
            log.write(step=step, epoch=epoch, epoch_mean_det=epoch_means[-1], seed=cfg.seed)
    finally:
        log.close()

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    arrays = dict(_detector_arrays(detector))
    arrays.update(opt.state_arrays())
    meta = {
        "phase": "pretrain",
        "epoch": cfg.epochs,
        "step": step,
        "opt_t": opt.t,
        "rng_state": json.dumps(loop_rng.bit_generator.state),
        "config_hash": config_hash(cfg),
    }
    save_checkpoint(ckpt_path, arrays, cfg, meta)
    return ckpt_path, epoch_means


def adapt_step(cfg, detector, bank, dq_head, opt, src_record, tgt_record):
    """One mixed-domain optimization step; returns the six loss components."""
    if tgt_record.boxes is not None and tgt_record.domain == TARGET:
        raise TargetLabelLeak(f"target record {tgt_record.file} arrived with labels attached")
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    images = Tensor(np.stack([src_record.image, tgt_record.image]).astype(dtype))
    domains = np.array([SOURCE, TARGET])
    annotations = [src_record.boxes, None]

    fwd = detector(images)
    src_idx = np.array([0])
    tgt_idx = np.array([1])

    src_out = DecoderOutput(
        [s[src_idx] for s in fwd.decoder.states],
        [l[src_idx] for l in fwd.decoder.logits],
        [b[src_idx] for b in fwd.decoder.boxes],
    )
    l_det, _ = detection_loss(src_out, [src_record.boxes], cfg.num_classes)

    l_b = l_e = l_d = l_cons = None
    if cfg.enable_lofa:
        probs = _np_softmax(fwd.decoder.logits[-1].data)[..., :-1]
        scores = probs.max(axis=-1)
        masks = build_object_mask(
            domains,
            annotations,
            (scores, fwd.decoder.boxes[-1].data),
            cfg.strides,
            [(f.shape[2], f.shape[3]) for f in fwd.features.levels],
            cfg.image_size,
            conf_thresh=cfg.target_conf_thresh,
            weight=cfg.obj_mask_weight,
        )
        rev = [grl(f, cfg.grl_coeff) for f in fwd.features.levels]
        l_b, _ = lofa_loss(rev, domains, masks, bank)
    if cfg.enable_ssfa:
        rev = [grl(t, cfg.grl_coeff) for t in fwd.encoded.levels]
        l_e = ssfa_loss(rev, domains, bank)
    if cfg.enable_ifa:
        qs = dq_head(fwd.decoder.states)
        l_d = ifa_loss([grl(q, cfg.grl_coeff) for q in qs], domains, bank)
    if cfg.enable_cons:
        tgt_logits = [l[tgt_idx] for l in fwd.decoder.logits]
        l_cons = consistency_loss(tgt_logits, detach_reference=cfg.cons_detach_reference)

    loss = total_loss(l_det, l_b, l_e, l_d, l_cons, cfg)
    opt.zero_grad()
    loss.backward()
    opt.step()

    def val(t):
        return 0.0 if t is None else t.item()

    return {
        "det": l_det.item(),
        "B": val(l_b),
        "E": val(l_e),
        "D": val(l_d),
        "cons": val(l_cons),
        "total": loss.item(),
    }


def adapt(cfg: Config, init_checkpoint, source_dir, target_dir, out_dir):
    """Adaptation training from a pretrained checkpoint.

    Per epoch, source and target orders are shuffled independently and
    consumed pairwise (one image of each domain per step). The loader
    withholds target labels; adapt_step additionally refuses any that
    slip through.
    """
    os.makedirs(out_dir, exist_ok=True)
    src_records = read_dataset(source_dir)
    tgt_records = read_dataset(target_dir)
    for r in src_records:
        if r.domain != SOURCE:
            raise ValueError(f"source split contains non-source record {r.file}")
    for r in tgt_records:
        if r.domain != TARGET:
            raise ValueError(f"target split contains non-target record {r.file}")

    detector, bank, dq_head = build_models(cfg)
    arrays, ckpt_cfg, _ = load_checkpoint(init_checkpoint)
    check_architecture(ckpt_cfg, cfg, init_checkpoint)
    _load_detector_arrays(detector, arrays)

    named = list(detector.named_parameters())
    named += [(f"bank.{n}", p) for n, p in bank.named_parameters()]
    named += [(f"dq.{n}", p) for n, p in dq_head.named_parameters()]
    opt = AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)

    loop_rng = _rng_for(cfg, "adapt-loop")
    save_config(cfg, os.path.join(out_dir, "config.txt"))
    log = _JsonlLogger(os.path.join(out_dir, "log.jsonl"))
    step = 0
    try:
        for epoch in range(cfg.epochs):
            src_order = loop_rng.permutation(len(src_records))
            tgt_order = loop_rng.permutation(len(tgt_records))
            for s_idx, t_idx in zip(src_order, tgt_order):
                components = adapt_step(
                    cfg, detector, bank, dq_head, opt,
                    src_records[s_idx], tgt_records[t_idx],
                )
                step += 1
                _assert_finite(components["total"], step, out_dir, components)
                log.write(step=step, epoch=epoch, lr=cfg.lr, seed=cfg.seed, **components)
    finally:
        log.close()

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    arrays = dict(_detector_arrays(detector))
    arrays.update({f"bank.{n}": p.data for n, p in bank.named_parameters()})
    arrays.update({f"dq.{n}": p.data for n, p in dq_head.named_parameters()})
    meta = {
        "phase": "adapt",
        "epoch": cfg.epochs,
        "step": step,
        "opt_t": opt.t,
        "config_hash": config_hash(cfg),
    }
    save_checkpoint(ckpt_path, arrays, cfg, meta)
    return ckpt_path


def load_detector(ckpt_path, cfg: Config | None = None):
    """Detector restored from a checkpoint (config from the snapshot
    unless one is passed, in which case architectures must agree)."""
    arrays, ckpt_cfg, _ = load_checkpoint(ckpt_path)
    if cfg is not None:
        check_architecture(ckpt_cfg, cfg, ckpt_path)
    else:
        cfg = ckpt_cfg
    detector, _, _ = build_models(cfg)
    _load_detector_arrays(detector, arrays)
    return detector, cfg
