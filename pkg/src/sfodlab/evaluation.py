"""Detection quality: greedy matching, all-point average precision, mAP@0.5."""

from dataclasses import dataclass

import numpy as np
import torch

from .detector import DetectorParams, forward
from .geometry import clamp_boxes_array

SCORE_FLOOR = 0.05
IOU_THRESHOLD = 0.5


def _iou_xywh(a, b):
    ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax2, ay2 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / max(union, 1e-9)


def average_precision(detections, ground_truths, iou_threshold=IOU_THRESHOLD) -> float:
    """All-point interpolated AP of one class.

    detections: (image_id, score, cxcywh array) triples, any order; sorted here
    by descending score with ties kept in list order.  ground_truths:
    (image_id, cxcywh array) pairs.  A detection is a true positive when its
    best-IoU unmatched ground truth of the same image reaches the threshold;
    each ground truth matches at most once.  With no ground truths the AP is 0.
    """
    n_gt = len(ground_truths)
    if n_gt == 0:
        return 0.0
    gt_by_image = {}
    for gi, (img, box) in enumerate(ground_truths):
        gt_by_image.setdefault(img, []).append((gi, np.asarray(box, dtype=np.float64)))

    order = sorted(range(len(detections)), key=lambda i: -float(detections[i][1]))
    matched = set()
    tps = []
    for di in order:
        img, _, box = detections[di]
        box = np.asarray(box, dtype=np.float64)
        best_iou, best_gi = 0.0, -1
        for gi, gbox in gt_by_image.get(img, []):
            if gi in matched:
                continue
            v = _iou_xywh(box, gbox)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_iou >= iou_threshold and best_gi >= 0:
            matched.add(best_gi)
            tps.append(1.0)
        else:
            tps.append(0.0)

    tps = np.asarray(tps, dtype=np.float64)
    if len(tps) == 0:
        return 0.0
    cum_tp = np.cumsum(tps)
    precision = cum_tp / np.arange(1, len(tps) + 1)
    recall = cum_tp / n_gt
    # precision envelope from the right, integrated over recall increments
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(len(tps)):
        if tps[k] > 0:
            ap += (recall[k] - prev_r) * env[k]
            prev_r = recall[k]
    return float(ap)


@dataclass
class MapResult:
    mean: float
    per_class: dict


def decode_detections(params: DetectorParams, images, score_floor=SCORE_FLOOR, batch=64):
    """Final-layer inference: per query the argmax class and max score.

    Returns one list per image of (class, score, clamped cxcywh array), queries
    below the floor dropped, original query order kept.
    """
    results = []
    n = len(images)
    for start in range(0, n, batch):
        chunk = np.asarray(images[start : start + batch], dtype=np.float32)
        with torch.no_grad():
            out = forward(params, chunk)
        probs = out.final_probs.numpy()
        boxes = out.final_boxes.numpy()
        for i in range(len(chunk)):
            scores = probs[i].max(axis=1)
            classes = probs[i].argmax(axis=1)
            keep = np.flatnonzero(scores >= score_floor)
            clamped = clamp_boxes_array(boxes[i][keep]) if len(keep) else np.zeros((0, 4))
            results.append(
                [(int(classes[q]), float(scores[q]), clamped[j]) for j, q in enumerate(keep)]
            )
    return results


def map50(
    params: DetectorParams,
    dataset,
    score_floor=SCORE_FLOOR,
    iou_threshold=IOU_THRESHOLD,
    batch=64,
) -> MapResult:
    """Mean AP at IoU 0.5 over the classes present in the ground truth."""
    detections = decode_detections(params, dataset.images, score_floor, batch)
    classes_present = sorted(
        {int(c) for ann in dataset.annotations for c in ann.classes}
    )
    per_class = {}
    for cls in classes_present:
        dets = [
            (img_id, score, box)
            for img_id, dets_i in enumerate(detections)
            for (c, score, box) in dets_i
            if c == cls
        ]
        gts = [
            (img_id, ann.boxes[k])
            for img_id, ann in enumerate(dataset.annotations)
            for k in range(len(ann))
            if int(ann.classes[k]) == cls
        ]
        per_class[cls] = average_precision(dets, gts, iou_threshold)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MapResult(mean=mean, per_class=per_class)
