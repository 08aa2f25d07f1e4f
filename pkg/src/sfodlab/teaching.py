"""Mean-teacher machinery: EMA weights, pseudo labels and the student losses.

The teacher consumes the weak view (flip only) and its surviving detections
are stored in the canonical frame; the strong view's flip record maps them
into the student's frame.  The historical loss supervises the current student
with soft scores from a frozen earlier snapshot on the same inputs, so its
gradient never reaches the snapshot.
"""

import numpy as np
import torch

from .augment import AugRecord
from .detector import DetectorParams, forward
from .geometry import clamp_boxes_array, flip_boxes_array
from .labels import PseudoLabelSet
from .losses import LossWeights, detection_loss_terms, qfl_terms


def ema_update(teacher: DetectorParams, student: DetectorParams, alpha) -> DetectorParams:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise.

    alpha=1 keeps the teacher, alpha=0 copies the student.  Configs must match.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher.config != student.config:
        raise ValueError("teacher and student configs differ")
    if set(teacher.tensors) != set(student.tensors):
        raise ValueError("teacher and student tensor names differ")
    out = {
        k: alpha * teacher.tensors[k] + (1.0 - alpha) * student.tensors[k]
        for k in teacher.tensors
    }
    return DetectorParams(config=teacher.config, tensors=out)


def _labels_from_outputs(probs, boxes, threshold, flip):
    """Filter one image's final-layer outputs into a canonical PseudoLabelSet."""
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = probs.max(axis=1)
    classes = probs.argmax(axis=1)
    keep = scores >= threshold
    kept_boxes = boxes[keep]
    if flip:
        kept_boxes = flip_boxes_array(kept_boxes)
    kept_boxes = clamp_boxes_array(kept_boxes) if len(kept_boxes) else kept_boxes.reshape(0, 4)
    return PseudoLabelSet(
        boxes=kept_boxes,
        classes=classes[keep],
        scores=scores[keep],
        threshold=threshold,
    )


def generate_pseudo_labels(
    teacher: DetectorParams, image, threshold, weak_record: AugRecord
) -> PseudoLabelSet:
    """Detections of the teacher on one weak-view image, canonical frame.

    image is the weak-augmented (3, H, W) array.  Per query the max sigmoid
    score and its argmax class are kept when score >= threshold (boundary
    kept); boxes are un-flipped back through the weak record.
    """
    with torch.no_grad():
        out = forward(teacher, np.asarray(image, dtype=np.float32)[None])
    return _labels_from_outputs(
        out.final_probs[0].numpy(), out.final_boxes[0].numpy(), threshold, weak_record.flip
    )


def generate_pseudo_labels_batch(teacher, images, threshold, records):
    """Batched variant: one forward, one PseudoLabelSet per image."""
    with torch.no_grad():
        out = forward(teacher, images)
    return [
        _labels_from_outputs(
            out.final_probs[i].numpy(), out.final_boxes[i].numpy(), threshold, rec.flip
        )
        for i, rec in enumerate(records)
    ]


def labels_in_student_frame(pseudo: PseudoLabelSet, strong_record: AugRecord):
    """Map canonical pseudo labels into the strong view's geometry."""
    return pseudo.flipped() if strong_record.flip else pseudo


def _pseudo_target_tensors(pseudo: PseudoLabelSet):
    return (
        np.asarray(pseudo.classes, dtype=np.int64),
        torch.from_numpy(np.asarray(pseudo.boxes, dtype=np.float64).reshape(-1, 4)),
    )


def teach_loss_terms(
    out_strong_probs,
    out_strong_boxes,
    out_masked_probs,
    out_masked_boxes,
    pseudo_student_frame: PseudoLabelSet,
    weights=LossWeights(),
    gamma=2.0,
    alpha_f=0.25,
):
    """Strong-view plus masked-view detection loss of one image (tensors)."""
    tc, tb = _pseudo_target_tensors(pseudo_student_frame)
    strong = detection_loss_terms(
        out_strong_probs, out_strong_boxes, tc, tb, weights, gamma, alpha_f
    )
    masked = detection_loss_terms(
        out_masked_probs, out_masked_boxes, tc, tb, weights, gamma, alpha_f
    )
    return strong["total"] + masked["total"]


def teach_loss(
    student: DetectorParams,
    strong_image,
    masked_image,
    pseudo: PseudoLabelSet,
    strong_record: AugRecord,
    weights=LossWeights(),
    gamma=2.0,
    alpha_f=0.25,
) -> float:
    """Consistency loss of one image: detection loss on the strong view plus
    detection loss on the masked view, both against the same pseudo labels."""
    batch = np.stack(
        [np.asarray(strong_image, np.float32), np.asarray(masked_image, np.float32)]
    )
    with torch.no_grad():
        out = forward(student, batch)
    mapped = labels_in_student_frame(pseudo, strong_record)
    return float(
        teach_loss_terms(
            out.final_probs[0],
            out.final_boxes[0],
            out.final_probs[1],
            out.final_boxes[1],
            mapped,
            weights,
            gamma,
            alpha_f,
        )
    )


def historical_positives(snapshot_probs, threshold):
    """Confident (query, class, soft_score) triples of a frozen snapshot.

    snapshot_probs is a detached (Q, C) array of final-layer probabilities;
    a query is positive when its max score reaches the threshold.
    """
    probs = np.asarray(snapshot_probs, dtype=np.float64)
    scores = probs.max(axis=1)
    classes = probs.argmax(axis=1)
    return [
        (int(q), int(classes[q]), float(scores[q]))
        for q in range(len(scores))
        if scores[q] >= threshold
    ]


def historical_loss_terms(current_probs, snapshot_probs, threshold, gamma=2.0):
    """Quality focal loss pulling current probs toward snapshot soft scores."""
    positives = historical_positives(snapshot_probs, threshold)
    return qfl_terms(current_probs, positives, gamma)


def historical_loss(
    student: DetectorParams,
    init_snapshot: DetectorParams,
    strong_image,
    masked_image,
    threshold=0.3,
    gamma=2.0,
) -> float:
    """Snapshot-supervised classification loss on the strong and masked views.

    The snapshot runs without gradients; only the student's probabilities are
    pulled toward the snapshot's confident soft scores.
    """
    batch = np.stack(
        [np.asarray(strong_image, np.float32), np.asarray(masked_image, np.float32)]
    )
    with torch.no_grad():
        snap = forward(init_snapshot, batch)
        cur = forward(student, batch)
    total = sum(
        historical_loss_terms(
            cur.final_probs[i], snap.final_probs[i].numpy(), threshold, gamma
        )
        for i in range(2)
    )
    return float(total)


def total_student_loss(
    student: DetectorParams,
    init_snapshot,
    strong_image,
    masked_image,
    pseudo: PseudoLabelSet,
    strong_record: AugRecord,
    use_historical=True,
    weights=LossWeights(),
    gamma=2.0,
    alpha_f=0.25,
    historical_threshold=0.3,
    qfl_gamma=2.0,
) -> float:
    """Teaching loss plus (optionally) the historical loss, one image."""
    total = teach_loss(
        student, strong_image, masked_image, pseudo, strong_record, weights, gamma, alpha_f
    )
    if use_historical:
        if init_snapshot is None:
            raise ValueError("historical loss requested without a snapshot")
        total += historical_loss(
            student, init_snapshot, strong_image, masked_image, historical_threshold, qfl_gamma
        )
    return total
