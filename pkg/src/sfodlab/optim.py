"""Functional Adam over named tensor dicts.

State is kept per tensor (first and second moments plus a step counter) so the
moments of one partition can be reset without disturbing bias correction of
the others.
"""

from dataclasses import dataclass, field

import torch

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)


def init_adam_state(tensors) -> AdamState:
    return AdamState(
        m={k: torch.zeros_like(t) for k, t in tensors.items()},
        v={k: torch.zeros_like(t) for k, t in tensors.items()},
        step={k: 0 for k in tensors},
    )


def adam_step(tensors, grads, state: AdamState, lr):
    """One Adam update; returns (new_tensors, new_state), inputs untouched.

    Gradient keys and shapes must match the tensors exactly.
    """
    if set(grads) != set(tensors):
        raise ValueError("gradient names do not match parameter names")
    new_t, new_m, new_v, new_step = {}, {}, {}, {}
    for k, t in tensors.items():
        g = grads[k]
        if g.shape != t.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        step = state.step[k] + 1
        m = BETA1 * state.m[k] + (1 - BETA1) * g
        v = BETA2 * state.v[k] + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**step)
        v_hat = v / (1 - BETA2**step)
        new_t[k] = t - lr * m_hat / (torch.sqrt(v_hat) + ADAM_EPS)
        new_m[k], new_v[k], new_step[k] = m, v, step
    return new_t, AdamState(m=new_m, v=new_v, step=new_step)


def reset_moments(state: AdamState, names) -> AdamState:
    """Zero the moments and step counters of the given tensor names."""
    m = dict(state.m)
    v = dict(state.v)
    step = dict(state.step)
    for k in names:
        if k not in m:
            raise KeyError(f"unknown tensor {k!r}")
        m[k] = torch.zeros_like(m[k])
        v[k] = torch.zeros_like(v[k])
        step[k] = 0
    return AdamState(m=m, v=v, step=step)


def clip_grad_norm(grads, max_norm):
    """Scale the gradient dict so its global L2 norm is at most max_norm."""
    total = torch.sqrt(sum((g * g).sum() for g in grads.values()))
    if float(total) <= max_norm or float(total) == 0.0:
        return grads
    scale = max_norm / float(total)
    return {k: g * scale for k, g in grads.items()}
