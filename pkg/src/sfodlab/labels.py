"""Filtered label sets shared by the supervision losses and the teaching loop."""

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoxCXCYWH, flip_boxes_array


@dataclass
class PseudoLabelSet:
    """Teacher detections that survived the confidence filter, canonical frame.

    boxes: (n, 4) cxcywh array, each row a valid BoxCXCYWH.
    classes: (n,) int array of class indices.
    scores: (n,) confidence of the kept detections, every one >= threshold.
    """

    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray
    threshold: float

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        if len(self.classes) != n or len(self.scores) != n:
            raise ValueError("boxes, classes and scores must have equal length")
        if np.any(self.classes < 0):
            raise ValueError("class indices must be non-negative")
        if n and self.scores.min() < self.threshold:
            raise ValueError("kept score below the filter threshold")
        if n and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        for row in self.boxes:
            BoxCXCYWH(*row.tolist())  # validates frame containment

    def __len__(self):
        return len(self.classes)

    def flipped(self):
        """Mirror all boxes across the vertical center line."""
        return PseudoLabelSet(
            flip_boxes_array(self.boxes), self.classes, self.scores, self.threshold
        )

    def boxes_cxcywh(self):
        return [BoxCXCYWH(*row.tolist()) for row in self.boxes]


@dataclass
class SceneAnnotation:
    """Ground-truth boxes and classes of one image, canonical frame."""

    boxes: np.ndarray
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes must have equal length")

    def __len__(self):
        return len(self.classes)
