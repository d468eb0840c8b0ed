"""Evaluation: mAP@0.5, the linear domain probe, and run reports.

mAP follows the set-prediction convention: every query of every image is
a candidate detection (no score threshold, no NMS). Detections are
greedily matched to ground truth in descending score order at IoU >= 0.5,
one ground truth at most once; AP integrates the precision-recall curve
with all-points interpolation, and mAP averages classes that have at
least one ground-truth instance.

The domain probe operationalizes "how separable are the two domains in
feature space": pooled per-image features feed a logistic classifier
trained with this package's own optimizer for a fixed 200 steps on an
80/20 split; held-out accuracy near 0.5 means aligned features.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .adversarial import bce_terms
from .boxes import center_to_corners, iou_matrix
from .checkpoint import load_checkpoint
from .config import config_hash
from .data import SOURCE, TARGET, read_dataset
from .instance import mean_interlayer_jsd
from .optim import AdamW
from .tensor import Tensor


def _batched(records, batch_size=32):
    for lo in range(0, len(records), batch_size):
        yield records[lo : lo + batch_size]


def collect_detections(detector, records, batch_size=32):
    """Per image: (classes [Q], scores [Q], boxes [Q,4]) numpy triples."""
    out = []
    for chunk in _batched(records, batch_size):
        images = np.stack([r.image for r in chunk])
        classes, scores, boxes = detector.predict(images)
        for i in range(len(chunk)):
            out.append((classes[i], scores[i], boxes[i]))
    return out


def average_precision(tp_flags, num_gt):
    """All-points interpolated AP from score-ordered TP/FP flags."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground-truth instances")
    if len(tp_flags) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - np.asarray(tp_flags))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at any recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, interp):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap), precision, recall


def evaluate_map(detector, records, iou_thresh=0.5, batch_size=32):
    """mAP@0.5 over a labeled split; records need ground-truth boxes."""
    if not records:
        raise ValueError("evaluation dataset is empty")
    for r in records:
        if r.boxes is None:
            raise ValueError(f"record {r.file} has no ground truth; load with labels")
    num_classes = 1 + max(
        (int(r.boxes.classes.max()) for r in records if len(r.boxes)), default=0
    )
    detections = collect_detections(detector, records, batch_size)

    per_class = {}
    curves = {}
    for c in range(num_classes):
        gt_boxes = []
        for r in records:
            sel = r.boxes.classes == c
            gt_boxes.append(center_to_corners(r.boxes.boxes[sel]))
        num_gt = int(sum(len(g) for g in gt_boxes))
        if num_gt == 0:
            per_class[c] = None
            continue
        cand = []
        for img_idx, (classes, scores, boxes) in enumerate(detections):
            for q in np.flatnonzero(classes == c):
                cand.append((-scores[q], img_idx, int(q)))
        cand.sort()
        matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
        flags = []
        for neg_score, img_idx, q in cand:
            box = center_to_corners(detections[img_idx][2][q].reshape(1, 4))
            gts = gt_boxes[img_idx]
            if len(gts) == 0:
                flags.append(0)
                continue
            ious = iou_matrix(box, gts)[0]
            ious[matched[img_idx]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_thresh:
                matched[img_idx][best] = True
                flags.append(1)
            else:
                flags.append(0)
        ap, precision, recall = average_precision(flags, num_gt)
        per_class[c] = ap
        curves[c] = {"precision": precision.tolist(), "recall": recall.tolist()}

    valid = [ap for ap in per_class.values() if ap is not None]
    return {
        "per_class_ap": {str(c): ap for c, ap in per_class.items()},
        "map": float(np.mean(valid)) if valid else 0.0,
        "num_images": len(records),
        "iou_thresh": iou_thresh,
        "pr_curves": curves,
    }


# -- pooled features --------------------------------------------------------------


def pooled_encoder_features(detector, records, batch_size=32):
    """Global-average-pool of all encoder tokens per image -> [N, D]."""
    feats = []
    for chunk in _batched(records, batch_size):
        images = np.stack([r.image for r in chunk])
        with T.no_grad():
            fwd = detector(images)
        pooled = np.concatenate([lvl.data for lvl in fwd.encoded.levels], axis=1).mean(axis=1)
        feats.append(pooled)
    return np.concatenate(feats, axis=0)


def pooled_backbone_features(detector, records, batch_size=32):
    """Spatially pooled backbone channels, concatenated over scales."""
    feats = []
    for chunk in _batched(records, batch_size):
        images = np.stack([r.image for r in chunk])
        with T.no_grad():
            fwd = detector(images)
        pooled = np.concatenate(
            [f.data.mean(axis=(2, 3)) for f in fwd.features.levels], axis=1
        )
        feats.append(pooled)
    return np.concatenate(feats, axis=0)


def pooled_pixel_features(records):
    """Raw-pixel statistics per image: channel means, channel stds, and
    mean absolute horizontal gradient (texture proxy)."""
    rows = []
    for r in records:
        img = r.image
        grad = np.abs(np.diff(img, axis=2)).mean()
        rows.append(np.concatenate([img.mean(axis=(1, 2)), img.std(axis=(1, 2)), [grad]]))
    return np.asarray(rows)


def domain_probe(features_source, features_target, seed=0, steps=200, lr=0.05, min_per_domain=100):
    """Held-out accuracy of a logistic linear domain classifier.

    Lower is better-aligned; chance is 0.5. Features are standardized by
    training-split statistics; the classifier trains full-batch for a
    fixed number of steps with this package's optimizer.
    """
    xs = np.asarray(features_source, dtype=np.float64)
    xt = np.asarray(features_target, dtype=np.float64)
    if len(xs) < min_per_domain or len(xt) < min_per_domain:
        raise ValueError(
            f"domain probe needs >= {min_per_domain} images per domain, "
            f"got {len(xs)} source / {len(xt)} target"
        )
    x = np.concatenate([xs, xt], axis=0)
    y = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_train = int(round(0.8 * len(x)))
    train_idx, test_idx = order[:n_train], order[n_train:]
    if len(set(y[train_idx])) < 2 or len(set(y[test_idx])) < 2:
        raise ValueError("degenerate probe split: a side contains one domain only")

    mu = x[train_idx].mean(axis=0)
    sd = np.maximum(x[train_idx].std(axis=0), 1e-6)
    xn = (x - mu) / sd

    w = Tensor(np.zeros((x.shape[1], 1)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    opt = AdamW([("w", w), ("b", b)], lr=lr)
    xtr = Tensor(xn[train_idx])
    ytr = y[train_idx]
    for _ in range(steps):
        p = T.sigmoid(T.reshape(T.linear(xtr, w, b), (len(train_idx),)))
        loss = T.tmean(bce_terms(p, ytr))
        opt.zero_grad()
        loss.backward()
        opt.step()
    logits = xn[test_idx] @ w.data[:, 0] + b.data[0]
    pred = (logits > 0).astype(np.float64)
    return float((pred == y[test_idx]).mean())


def probe_model(detector, source_records, target_records, seed=0, max_per_domain=250):
    """Backbone- and encoder-pooled probe accuracies for a detector."""
    src = source_records[:max_per_domain]
    tgt = target_records[:max_per_domain]
    return {
        "backbone": domain_probe(
            pooled_backbone_features(detector, src),
            pooled_backbone_features(detector, tgt),
            seed=seed,
        ),
        "encoder": domain_probe(
            pooled_encoder_features(detector, src),
            pooled_encoder_features(detector, tgt),
            seed=seed,
        ),
    }


def interlayer_jsd(detector, records, batch_size=32):
    """Mean inter-layer JSD of class predictions over a split."""
    vals = []
    for chunk in _batched(records, batch_size):
        images = np.stack([r.image for r in chunk])
        with T.no_grad():
            fwd = detector(images)
        vals.append(mean_interlayer_jsd([lg.data for lg in fwd.decoder.logits]))
    return float(np.mean(vals))


# -- run reports --------------------------------------------------------------------


def _read_log_series(log_path):
    series = {k: [] for k in ("det", "B", "E", "D", "cons", "total")}
    steps = []
    with open(log_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            if "total" not in obj:
                continue  # epoch-summary lines
            steps.append(obj["step"])
            for k in series:
                series[k].append(obj[k])
    return steps, series


def write_eval(run_dir, eval_result, name="eval.json"):
    path = os.path.join(run_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(eval_result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def report(run_dir):
    """Assemble report.json plus PR/loss plots from a completed run dir.

    Requires log.jsonl, checkpoint.ckpt and eval.json (written by the
    eval entry point); probe.json is included when present. Refuses a
    run whose config.txt hash disagrees with the checkpoint snapshot.
    """
    from .config import load_config

    missing = [
        name
        for name in ("log.jsonl", "checkpoint.ckpt", "eval.json", "config.txt")
        if not os.path.exists(os.path.join(run_dir, name))
    ]
    if missing:
        raise FileNotFoundError(f"{run_dir}: missing required run artifacts: {missing}")

    run_cfg = load_config(os.path.join(run_dir, "config.txt"))
    _, ckpt_cfg, meta = load_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"))
    if config_hash(run_cfg) != config_hash(ckpt_cfg):
        raise ValueError(
            f"{run_dir}: config.txt hash {config_hash(run_cfg)[:12]} does not match "
            f"checkpoint snapshot {config_hash(ckpt_cfg)[:12]}"
        )

    with open(os.path.join(run_dir, "eval.json"), "r", encoding="utf-8") as fh:
        eval_result = json.load(fh)
    probe_path = os.path.join(run_dir, "probe.json")
    probe_result = None
    if os.path.exists(probe_path):
        with open(probe_path, "r", encoding="utf-8") as fh:
            probe_result = json.load(fh)

    steps, series = _read_log_series(os.path.join(run_dir, "log.jsonl"))

    report_obj = {
        "schema": "shiftdet-report-v1",
        "per_class_ap": eval_result["per_class_ap"],
        "map": eval_result["map"],
        "domain_probe": probe_result,
        "loss_log": "log.jsonl",
        "final_losses": {k: (v[-1] if v else None) for k, v in series.items()},
        "config_hash": config_hash(run_cfg),
        "seed": run_cfg.seed,
        "phase": meta.get("phase"),
    }
    report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

    _plot_run(run_dir, steps, series, eval_result)
    return report_path


def _plot_run(run_dir, steps, series, eval_result):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("det", "B", "E", "D", "cons", "total"):
        ax.plot(steps, series[key], label=key, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(ncol=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "loss_curves.png"), dpi=110)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, curve in eval_result.get("pr_curves", {}).items():
        ax.plot(curve["recall"], curve["precision"], label=f"class {cls}", linewidth=1.0)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "pr_curves.png"), dpi=110)
    plt.close(fig)


def eval_checkpoint(ckpt_path, data_dir, out_path=None):
    """Evaluate a checkpoint's detector on a labeled split; writes eval.json."""
    from .train import load_detector

    detector, _ = load_detector(ckpt_path)
    records = read_dataset(data_dir, with_target_labels=True)
    result = evaluate_map(detector, records)
    result["interlayer_jsd"] = interlayer_jsd(detector, records)
    if out_path is None:
        out_path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "eval.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result, out_path


def probe_checkpoint(ckpt_path, source_dir, target_dir, out_path=None, seed=0):
    """Probe a checkpoint's features for domain separability; writes probe.json."""
    from .train import load_detector

    detector, _ = load_detector(ckpt_path)
    src = read_dataset(source_dir)
    tgt = read_dataset(target_dir)
    src = [r for r in src if r.domain == SOURCE]
    tgt = [r for r in tgt if r.domain == TARGET]
    result = probe_model(detector, src, tgt, seed=seed)
    if out_path is None:
        out_path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "probe.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result, out_path
