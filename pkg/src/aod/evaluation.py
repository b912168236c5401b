"""Detection pipeline and VOC-style average precision."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import aodnet
from .errors import ContractError
from .geometry import BoundingBox, clip_boxes, decode_boxes, iou_matrix

log = logging.getLogger(__name__)

PROTOCOLS = ("voc2007_11pt", "all_point")


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: int  # object class, 0..K-1
    score: float
    box: BoundingBox


@dataclass
class EvalConfig:
    score_thresh: float = 0.05
    nms_thresh: float = 0.3
    iou_thresh: float = 0.5
    protocol: str = "voc2007_11pt"
    images_per_chunk: int = 16


def nms(dets, iou_thresh):
    """Greedy suppression: best score first (ties: smaller box, then input order)."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.area, i))
    boxes = np.array([d.box.as_array() for d in dets])
    ious = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(dets), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(dets[i])
        suppressed |= ious[i] > iou_thresh
    return keep


def _detections_from_outputs(image_id, proposals, probs, deltas, image_hw, score_thresh, nms_thresh):
    H, W = image_hw
    out = []
    K = deltas.shape[1]
    for c in range(K):
        scores = probs[:, c + 1]
        rows = np.flatnonzero(scores >= score_thresh)
        if rows.size == 0:
            continue
        boxes = clip_boxes(decode_boxes(deltas[rows, c], proposals[rows]), W, H)
        dets = [Detection(image_id, c, float(scores[r]), BoundingBox.from_array(b)) for r, b in zip(rows, boxes)]
        out.extend(nms(dets, nms_thresh))
    return out


def detect_images(images, proposals_list, image_ids, params, config: aodnet.AODConfig,
                  score_thresh=0.05, nms_thresh=0.3):
    """Eval-mode noiseless rollouts for every proposal of several images at once."""
    images = np.asarray(images, dtype=params["fc6.W"].value.dtype)
    batch_idx = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(proposals_list)])
    props = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 4) for p in proposals_list])
    if props.shape[0] == 0:
        return []
    ro = aodnet.forward_batch(images, batch_idx, props, params, config)
    probs, deltas = ro.probs, ro.bbox_deltas
    out = []
    for i, image_id in enumerate(image_ids):
        rows = batch_idx == i
        out.extend(_detections_from_outputs(image_id, props[rows], probs[rows], deltas[rows],
                                            images.shape[2:], score_thresh, nms_thresh))
    return out


def detect_image(image, proposals, params, config, score_thresh=0.05, nms_thresh=0.3, image_id=""):
    """Detections for one ``C x H x W`` image and its proposal boxes."""
    props = np.array([p.as_array() if isinstance(p, BoundingBox) else p for p in proposals]).reshape(-1, 4)
    return detect_images(np.asarray(image)[None], [props], [image_id], params, config, score_thresh, nms_thresh)


def detect_dataset(dataset, params, config, eval_config: EvalConfig = None):
    ec = eval_config or EvalConfig()
    dets = []
    chunk = max(1, ec.images_per_chunk)
    for s in range(0, len(dataset.images), chunk):
        imgs = dataset.images[s:s + chunk]
        dets.extend(detect_images(
            np.stack([im.image for im in imgs]), [im.proposals for im in imgs], [im.id for im in imgs],
            params, config, ec.score_thresh, ec.nms_thresh,
        ))
    return dets


def _interpolated_ap(recall, precision, protocol):
    if protocol == "voc2007_11pt":
        total = 0.0
        for i in range(11):
            above = precision[recall >= i / 10]
            total += above.max() if above.size else 0.0
        return total / 11.0
    if protocol == "all_point":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(mpre.size - 1, 0, -1):
            mpre[i - 1] = max(mpre[i - 1], mpre[i])
        idx = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ContractError(f"unknown AP protocol {protocol!r}")


def match_detections(dets, gts, iou_thresh=0.5):
    """VOC matching for one class. ``gts`` maps image id -> list of (BoundingBox, difficult).

    Returns ``(tp, fp, n_positive)`` arrays in descending-score order; detections
    that only hit difficult objects are dropped from both.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gt_arrays = {k: (np.array([b.as_array() for b, _ in v]).reshape(-1, 4), np.array([d for _, d in v], dtype=bool))
                 for k, v in gts.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    n_pos = int(sum((~d).sum() for _, d in gt_arrays.values()))
    tp, fp = [], []
    for i in order:
        det = dets[i]
        boxes, difficult = gt_arrays.get(det.image_id, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
        if boxes.shape[0] == 0:
            tp.append(0)
            fp.append(1)
            continue
        ious = iou_matrix(det.box.as_array()[None], boxes)[0]
        free = (~difficult) & (~used[det.image_id]) & (ious >= iou_thresh)
        if np.any(free):
            j = int(np.flatnonzero(free)[np.argmax(ious[free])])
            used[det.image_id][j] = True
            tp.append(1)
            fp.append(0)
        elif np.any(difficult & (ious >= iou_thresh)):
            continue
        else:
            tp.append(0)
            fp.append(1)
    return np.array(tp, dtype=np.float64), np.array(fp, dtype=np.float64), n_pos


def average_precision(dets, gts, iou_thresh=0.5, protocol="voc2007_11pt"):
    """AP of one class's detections against ``gts`` (image id -> [(box, difficult)]).

    Returns ``None`` when the class has no non-difficult ground truth.
    """
    tp, fp, n_pos = match_detections(dets, gts, iou_thresh)
    if n_pos == 0:
        return None
    if tp.size == 0:
        return 0.0
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_pos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return float(_interpolated_ap(recall, precision, protocol))


def mean_ap(per_class):
    """Unweighted mean over classes; ``None`` entries (no ground truth) are skipped."""
    values = [v for v in per_class.values()] if isinstance(per_class, dict) else list(per_class)
    present = [v for v in values if v is not None]
    skipped = len(values) - len(present)
    if skipped:
        log.info("mAP skips %d class(es) without ground truth", skipped)
    if not present:
        raise ContractError("every class is empty; mAP undefined")
    return float(np.mean(present))


def dataset_gts(dataset, K):
    """Per-class ground-truth maps for :func:`average_precision`."""
    out = {c: {} for c in range(K)}
    for img in dataset.images:
        for c in range(K):
            out[c][img.id] = [(b, False) for b, k in img.gts if k == c]
    return out


def evaluate(dets, gts_by_class, iou_thresh=0.5, protocol="voc2007_11pt", class_names=None):
    K = len(gts_by_class)
    names = class_names or [f"class{c}" for c in range(K)]
    per_class = {}
    for c in range(K):
        per_class[names[c]] = average_precision([d for d in dets if d.cls == c], gts_by_class[c], iou_thresh, protocol)
    return {"per_class": per_class, "mAP": mean_ap(per_class), "protocol": protocol, "iou_thresh": iou_thresh}


def write_results(results, json_path, csv_path=None, method="AOD"):
    with open(json_path, "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    if csv_path:
        names = list(results["per_class"])
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method"] + names + ["mAP"])
            row = [method]
            for n in names:
                v = results["per_class"][n]
                row.append("" if v is None else f"{100 * v:.1f}")
            row.append(f"{100 * results['mAP']:.1f}")
            w.writerow(row)
