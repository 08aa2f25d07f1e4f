import math

import pytest
import torch

from sfodlab.optim import (
    ADAM_EPS,
    AdamState,
    adam_step,
    clip_grad_norm,
    init_adam_state,
    reset_moments,
)


def test_first_step_moves_by_almost_lr():
    """With g=1 the bias-corrected first step is lr / (1 + eps)."""
    tensors = {"w": torch.zeros(3, dtype=torch.float64)}
    grads = {"w": torch.ones(3, dtype=torch.float64)}
    state = init_adam_state(tensors)
    new_t, new_state = adam_step(tensors, grads, state, lr=0.01)
    expected = -0.01 * 1.0 / (1.0 + ADAM_EPS)
    assert torch.allclose(new_t["w"], torch.full((3,), expected, dtype=torch.float64))
    assert new_state.step["w"] == 1


def test_two_steps_match_scalar_reference():
    """Compare against a hand-rolled scalar Adam over two steps."""
    b1, b2, eps, lr = 0.9, 0.999, ADAM_EPS, 0.05
    w, m, v = 1.0, 0.0, 0.0
    grads_seq = [0.5, -0.3]
    for i, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**i)) / (math.sqrt(v / (1 - b2**i)) + eps)

    tensors = {"w": torch.tensor([1.0], dtype=torch.float64)}
    state = init_adam_state(tensors)
    for g in grads_seq:
        tensors, state = adam_step(
            tensors, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr=lr
        )
    assert abs(float(tensors["w"][0]) - w) <= 1e-12


def test_adam_step_is_pure():
    tensors = {"w": torch.ones(2, dtype=torch.float64)}
    grads = {"w": torch.ones(2, dtype=torch.float64)}
    state = init_adam_state(tensors)
    adam_step(tensors, grads, state, lr=0.1)
    assert torch.equal(tensors["w"], torch.ones(2, dtype=torch.float64))
    assert torch.count_nonzero(state.m["w"]) == 0
    assert state.step["w"] == 0


def test_adam_step_validates_names_and_shapes():
    tensors = {"w": torch.ones(2, dtype=torch.float64)}
    state = init_adam_state(tensors)
    with pytest.raises(ValueError):
        adam_step(tensors, {"b": torch.ones(2, dtype=torch.float64)}, state, lr=0.1)
    with pytest.raises(ValueError):
        adam_step(tensors, {"w": torch.ones(3, dtype=torch.float64)}, state, lr=0.1)


def test_reset_moments_zeroes_only_named():
    tensors = {
        "decoder.w": torch.ones(2, dtype=torch.float64),
        "encoder.w": torch.ones(2, dtype=torch.float64),
    }
    grads = {k: torch.ones_like(t) for k, t in tensors.items()}
    state = init_adam_state(tensors)
    _, state = adam_step(tensors, grads, state, lr=0.1)
    reset = reset_moments(state, ["decoder.w"])
    assert torch.count_nonzero(reset.m["decoder.w"]) == 0
    assert reset.step["decoder.w"] == 0
    assert torch.equal(reset.m["encoder.w"], state.m["encoder.w"])
    assert reset.step["encoder.w"] == 1
    # original state untouched
    assert state.step["decoder.w"] == 1
    with pytest.raises(KeyError):
        reset_moments(state, ["missing"])


def test_reset_restores_fresh_bias_correction():
    """After a reset the next update must equal a first update from scratch."""
    tensors = {"w": torch.zeros(1, dtype=torch.float64)}
    g = {"w": torch.tensor([2.0], dtype=torch.float64)}
    state = init_adam_state(tensors)
    for _ in range(5):
        tensors, state = adam_step(tensors, g, state, lr=0.01)
    state = reset_moments(state, ["w"])
    stepped, _ = adam_step(tensors, g, state, lr=0.01)
    fresh, _ = adam_step(tensors, g, init_adam_state(tensors), lr=0.01)
    assert torch.equal(stepped["w"], fresh["w"])


def test_clip_grad_norm_scales_to_budget():
    grads = {"a": torch.tensor([3.0], dtype=torch.float64), "b": torch.tensor([4.0], dtype=torch.float64)}
    clipped = clip_grad_norm(grads, max_norm=1.0)
    total = math.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
    assert abs(total - 1.0) <= 1e-12
    assert abs(float(clipped["a"][0]) / float(clipped["b"][0]) - 3.0 / 4.0) <= 1e-12


def test_clip_grad_norm_leaves_small_gradients_alone():
    grads = {"a": torch.tensor([0.1], dtype=torch.float64)}
    assert clip_grad_norm(grads, max_norm=1.0) is grads
    zeros = {"a": torch.zeros(2, dtype=torch.float64)}
    assert clip_grad_norm(zeros, max_norm=0.0) is zeros


def test_adam_state_defaults_empty():
    state = AdamState()
    assert state.m == {} and state.v == {} and state.step == {}
