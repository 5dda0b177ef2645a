"""Adam with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import BadHyper, MissingGradient, StepOutOfRange

Array = np.ndarray

DEFAULT_WEIGHT_DECAY = 1e-5


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    first_moment: dict[str, Array]
    second_moment: dict[str, Array]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam_state(params: dict[str, Tensor], beta1: float = 0.9,
                    beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    """Zero moments for exactly the given parameter set."""
    return AdamState(
        first_moment={k: np.zeros_like(t.data) for k, t in params.items()},
        second_moment={k: np.zeros_like(t.data) for k, t in params.items()},
        step_count=0,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, Array],
              state: AdamState, lr: float,
              weight_decay: float = DEFAULT_WEIGHT_DECAY,
              ) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update with bias correction and decoupled weight decay.

    Returns fresh parameter tensors (inputs are never mutated) and the
    updated state. Weight decay multiplies parameters by (1 - lr * decay)
    directly instead of being folded into the gradient.
    """
    if lr <= 0.0:
        raise BadHyper(f"adam_step: lr must be positive, got {lr}")
    if set(params) != set(state.first_moment):
        raise MissingGradient("adam_step: state does not cover the parameter set")
    missing = [k for k in params if k not in grads or grads[k] is None]
    if missing:
        raise MissingGradient(f"adam_step: no gradient for {missing[0]!r}")

    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: dict[str, Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise MissingGradient(
                f"adam_step: gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_data = p.data - update - lr * weight_decay * p.data
        new_params[name] = Tensor(new_data, requires_grad=True)
    state.step_count = t
    return new_params, state


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing from lr_initial at step 0 to lr_min at total_steps."""

    lr_initial: float = 1e-5
    lr_min: float = 1e-6
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise BadHyper(f"LrSchedule: total_steps must be >= 1, got {self.total_steps}")
        if self.lr_initial < self.lr_min or self.lr_min < 0:
            raise BadHyper("LrSchedule: need lr_initial >= lr_min >= 0")


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    """lr_min + 0.5 (lr_initial - lr_min) (1 + cos(pi step / total_steps))."""
    if not (0 <= step <= schedule.total_steps):
        raise StepOutOfRange(
            f"cosine_lr: step {step} outside [0, {schedule.total_steps}]")
    if step == 0:
        return schedule.lr_initial  # exact at the endpoints, no rounding slack
    if step == schedule.total_steps:
        return schedule.lr_min
    span = schedule.lr_initial - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * step / schedule.total_steps))
