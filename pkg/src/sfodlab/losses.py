"""Classification and box supervision for the set-prediction detector.

Everything is written against per-class sigmoid probabilities, not logits, so
probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.  The
tensor cores keep gradients; the dataclass wrappers return plain floats.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import BoxCXCYWH, giou_matrix, l1_matrix
from .hungarian import Assignment, hungarian

# probability clamp applied before every log
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ClassScores:
    """Per-class sigmoid probabilities of one query, each in [0, 1]."""

    scores: tuple

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        object.__setattr__(self, "scores", scores)
        if not scores:
            raise ValueError("need at least one class")
        if any(not np.isfinite(s) or s < 0 or s > 1 for s in scores):
            raise ValueError(f"scores must lie in [0, 1], got {scores}")

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class Detection:
    """One decoded query: a box plus its class scores."""

    box: BoxCXCYWH
    scores: ClassScores


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the classification / L1 / GIoU terms."""

    w_cls: float = 1.0
    w_l1: float = 1.0
    w_giou: float = 1.0

    def __post_init__(self):
        if min(self.w_cls, self.w_l1, self.w_giou) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Unweighted per-term values plus the weighted total."""

    cls: float
    l1: float
    giou: float
    total: float


def _clamp(p):
    return p.clamp(min=PROB_EPS, max=1.0 - PROB_EPS)


def focal_terms(probs, targets, gamma, alpha_f):
    """Elementwise sigmoid focal loss on probabilities against 0/1 targets.

    alpha_f weights the positive entries and (1 - alpha_f) the negatives, so
    gamma=0, alpha_f=0.5 reduces to 0.5 * BCE.
    """
    p = _clamp(probs)
    pos = -alpha_f * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha_f) * p**gamma * torch.log(1 - p)
    return targets * pos + (1 - targets) * neg


def focal_cls_loss(pred: ClassScores, target_class, gamma=2.0, alpha_f=0.25) -> float:
    """Focal loss of one query summed over classes.

    target_class None means the query is unmatched and every class is a
    negative; otherwise a one-hot target at target_class.
    """
    probs = torch.tensor(pred.scores, dtype=torch.float64)
    targets = torch.zeros_like(probs)
    if target_class is not None:
        if not 0 <= target_class < len(pred):
            raise ValueError(f"target class {target_class} out of range")
        targets[target_class] = 1.0
    return float(focal_terms(probs, targets, gamma, alpha_f).sum())


def qfl_terms(probs, positives, gamma=2.0):
    """Quality focal loss over a (Q, C) probability tensor.

    positives: (query, class, soft_score) triples.  A positive entry is pulled
    toward its soft score with weight |s - p|^gamma * BCE(p, s); every other
    (query, class) entry is a negative with weight p^gamma * BCE(p, 0).
    Returns the summed scalar (tensor, grad-capable).
    """
    Q, C = probs.shape
    p = _clamp(probs)
    target = torch.zeros_like(probs)
    seen = set()
    for q, c, s in positives:
        if not 0 <= q < Q or not 0 <= c < C:
            raise ValueError(f"positive ({q}, {c}) out of range for ({Q}, {C})")
        if (q, c) in seen:
            raise ValueError(f"duplicate positive entry ({q}, {c})")
        if not 0 <= s <= 1:
            raise ValueError(f"soft score {s} outside [0, 1]")
        seen.add((q, c))
        target[q, c] = s
    bce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    weight = (target - p).abs() ** gamma
    return (weight * bce).sum()


def qfl_loss(preds, positives, gamma=2.0) -> float:
    """Dataclass wrapper of qfl_terms for a list of ClassScores."""
    if not preds:
        raise ValueError("need at least one prediction")
    probs = torch.tensor([d.scores for d in preds], dtype=torch.float64)
    return float(qfl_terms(probs, positives, gamma))


def cost_matrix(probs, boxes, target_classes, target_boxes, weights: LossWeights):
    """Matching cost (Q, m): w_cls * (1 - p[class]) + w_l1 * L1 + w_giou * (1 - giou)."""
    cls_cost = 1.0 - probs[:, target_classes]
    l1 = l1_matrix(boxes, target_boxes)
    giou = giou_matrix(boxes, target_boxes)
    return weights.w_cls * cls_cost + weights.w_l1 * l1 + weights.w_giou * (1.0 - giou)


def matching_cost(
    pred: Detection, target_box: BoxCXCYWH, target_class: int, weights=LossWeights()
) -> float:
    """Cost of assigning one prediction to one target."""
    if not 0 <= target_class < len(pred.scores):
        raise ValueError(f"target class {target_class} out of range")
    probs = torch.tensor([pred.scores.scores], dtype=torch.float64)
    boxes = torch.from_numpy(pred.box.to_array()).reshape(1, 4)
    tb = torch.from_numpy(target_box.to_array()).reshape(1, 4)
    tc = torch.tensor([target_class], dtype=torch.int64)
    return float(cost_matrix(probs, boxes, tc, tb, weights)[0, 0])


def match_predictions(probs, boxes, target_classes, target_boxes, weights) -> Assignment:
    """Hungarian matching on the detached cost matrix."""
    with torch.no_grad():
        cost = cost_matrix(probs, boxes, target_classes, target_boxes, weights)
    return hungarian(cost.numpy())


def detection_loss_terms(
    probs,
    boxes,
    target_classes,
    target_boxes,
    weights=LossWeights(),
    gamma=2.0,
    alpha_f=0.25,
    assignment=None,
):
    """Matched set-prediction loss of one image, on (Q, C) / (Q, 4) tensors.

    Classification is focal loss summed over all queries and classes (matched
    queries get a one-hot target) divided by max(1, n_match); L1 and GIoU terms
    are averaged over matched pairs and zero when nothing matches.  Returns a
    dict of scalar tensors: cls, l1, giou, total.
    """
    Q, C = probs.shape
    m = len(target_classes)
    if m > Q:
        raise ValueError(f"more targets ({m}) than queries ({Q})")
    if assignment is None:
        if m:
            assignment = match_predictions(
                probs, boxes, target_classes, target_boxes, weights
            )
        else:
            assignment = Assignment(pairs=[], unmatched_predictions=list(range(Q)))

    cls_target = torch.zeros_like(probs)
    for qi, tj in assignment.pairs:
        cls_target[qi, int(target_classes[tj])] = 1.0
    n_match = max(1, len(assignment.pairs))
    cls = focal_terms(probs, cls_target, gamma, alpha_f).sum() / n_match

    if assignment.pairs:
        qi = torch.tensor([q for q, _ in assignment.pairs], dtype=torch.int64)
        tj = torch.tensor([t for _, t in assignment.pairs], dtype=torch.int64)
        pb = boxes[qi]
        tb = target_boxes[tj]
        l1 = (pb - tb).abs().sum(dim=1).mean()
        giou = (1.0 - torch.diagonal(giou_matrix(pb, tb))).mean()
    else:
        l1 = probs.new_zeros(())
        giou = probs.new_zeros(())

    total = weights.w_cls * cls + weights.w_l1 * l1 + weights.w_giou * giou
    return {"cls": cls, "l1": l1, "giou": giou, "total": total}


def detection_loss(
    preds, pseudo, weights=LossWeights(), gamma=2.0, alpha_f=0.25
) -> LossBreakdown:
    """Detection loss of one image from Detection dataclasses.

    pseudo is anything exposing (n, 4) .boxes and (n,) .classes arrays, for
    example a PseudoLabelSet or SceneAnnotation.
    """
    if not preds:
        raise ValueError("need at least one prediction")
    probs = torch.tensor([d.scores.scores for d in preds], dtype=torch.float64)
    boxes = torch.from_numpy(np.stack([d.box.to_array() for d in preds]))
    tb = torch.from_numpy(np.asarray(pseudo.boxes, dtype=np.float64).reshape(-1, 4))
    tc = np.asarray(pseudo.classes, dtype=np.int64)
    if len(tc) and (tc.min() < 0 or tc.max() >= probs.shape[1]):
        raise ValueError("target class out of range")
    parts = detection_loss_terms(probs, boxes, tc, tb, weights, gamma, alpha_f)
    return LossBreakdown(**{k: float(v) for k, v in parts.items()})
