"""Window controller that decides when the teacher updates or the student restarts.

After every student step the current batch joins a history buffer.  While the
window is open the student's aggregate uncertainty on the buffered raw images
is compared against the window-start snapshot's; a strict decrease counts as
evolution, triggers one EMA teacher update and reopens the window.  If the
window fills without evolution the student decoder is re-initialized from the
snapshot (backbone and encoder keep training) and its Adam moments are zeroed.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .detector import DetectorParams, forward, replace_partition, snapshot
from .optim import AdamState, reset_moments
from .teaching import ema_update

AGGREGATES = ("mean", "query_max_mean")


class Action(enum.Enum):
    NONE = "none"
    TEACHER_UPDATED = "teacher_updated"
    STUDENT_RETRAINED = "student_retrained"


@dataclass
class UncertaintyReport:
    """Per-entry decoder-layer variance plus its scalar aggregate."""

    per_entry: np.ndarray  # (B, Q, C)
    aggregate: float


def decoder_layer_variance(output) -> torch.Tensor:
    """Population variance of class probabilities across decoder layers.

    output.class_probs is (L, B, Q, C) with L >= 2; the result is (B, Q, C),
    dividing by L (not L - 1).
    """
    probs = output.class_probs
    if probs.shape[0] < 2:
        raise ValueError("need at least two decoder layers for a variance")
    return probs.var(dim=0, unbiased=False)


def _aggregate(var, how):
    if how == "mean":
        return float(var.mean())
    if how == "query_max_mean":
        return float(var.amax(dim=-1).mean())
    raise ValueError(f"unknown aggregate {how!r}, expected one of {AGGREGATES}")


def uncertainty_report(params: DetectorParams, images, aggregate="mean") -> UncertaintyReport:
    """Evaluate one model on a stack of raw images."""
    if len(images) == 0:
        raise ValueError("cannot aggregate uncertainty over an empty buffer")
    with torch.no_grad():
        var = decoder_layer_variance(forward(params, images))
    return UncertaintyReport(per_entry=var.numpy(), aggregate=_aggregate(var, aggregate))


def aggregate_uncertainty(params: DetectorParams, buffer, aggregate="mean") -> float:
    """Flat aggregate over every buffered batch (equal weight per entry)."""
    if not buffer:
        raise ValueError("cannot aggregate uncertainty over an empty buffer")
    images = np.concatenate([np.asarray(b, dtype=np.float32) for b in buffer], axis=0)
    return uncertainty_report(params, images, aggregate).aggregate


def evaluate_evolution(student, window_start, buffer, aggregate="mean") -> bool:
    """True iff the student's uncertainty strictly decreased since window start."""
    u_now = aggregate_uncertainty(student, buffer, aggregate)
    u_start = aggregate_uncertainty(window_start, buffer, aggregate)
    return u_now < u_start


def selective_retrain(student, window_start, adam_state: AdamState = None):
    """Reset the decoder to the window-start snapshot, keep backbone/encoder.

    Returns (student, adam_state); the decoder's Adam moments and step
    counters are zeroed so the restarted partition re-warms cleanly.
    """
    restored = replace_partition(student, window_start, "decoder")
    if adam_state is not None:
        decoder_names = [k for k in restored.tensors if k.split(".", 1)[0] == "decoder"]
        adam_state = reset_moments(adam_state, decoder_names)
    return restored, adam_state


@dataclass
class ControllerState:
    """Open-window bookkeeping plus cumulative event counters."""

    window_start: DetectorParams
    window: int
    count: int = 0
    buffer: list = field(default_factory=list)
    teacher_updates: int = 0
    student_retrains: int = 0
    uncertainty_history: list = field(default_factory=list)  # (u_student, u_start)
    update_intervals: list = field(default_factory=list)  # batches since window start

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")


def new_controller_state(student: DetectorParams, window: int) -> ControllerState:
    return ControllerState(window_start=snapshot(student), window=window)


def controller_step(
    state: ControllerState,
    teacher: DetectorParams,
    student: DetectorParams,
    batch,
    alpha,
    adam_state: AdamState = None,
    aggregate="mean",
    evolution_fn=None,
):
    """Advance the controller by one just-trained batch.

    Returns (state, teacher, student, adam_state, action).  The batch joins
    the buffer first; while count < window the evolution test runs (strict
    uncertainty decrease), otherwise the student decoder restarts from the
    snapshot.  Any action closes the window: snapshot refreshed from the
    current student, buffer cleared, count zeroed.

    evolution_fn replaces the uncertainty comparison when given (used by the
    scripted trace tests); it receives (student, window_start, buffer).
    """
    state.buffer.append(np.asarray(batch, dtype=np.float32))
    state.count += 1
    action = Action.NONE

    if state.count < state.window:
        if evolution_fn is not None:
            evolved = bool(evolution_fn(student, state.window_start, state.buffer))
        else:
            u_now = aggregate_uncertainty(student, state.buffer, aggregate)
            u_start = aggregate_uncertainty(state.window_start, state.buffer, aggregate)
            state.uncertainty_history.append((u_now, u_start))
            evolved = u_now < u_start
        if evolved:
            teacher = ema_update(teacher, student, alpha)
            state.update_intervals.append(state.count)
            state.teacher_updates += 1
            action = Action.TEACHER_UPDATED
    else:
        student, adam_state = selective_retrain(student, state.window_start, adam_state)
        state.student_retrains += 1
        action = Action.STUDENT_RETRAINED

    if action is not Action.NONE:
        state.window_start = snapshot(student)
        state.buffer = []
        state.count = 0
    return state, teacher, student, adam_state, action
