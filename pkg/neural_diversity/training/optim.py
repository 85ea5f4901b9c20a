"""Warmup-cosine learning rate and a decoupled-weight-decay Adam."""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.errors import FrozenParameterError, NumericalError

logger = logging.getLogger(__name__)


def cosine_lr(step: int, peak: float, warmup_steps: int, total_steps: int, floor: float = 0.0) -> float:
    """Linear warmup from 0 to `peak`, then cosine decay to `floor`.

    Args:
        step (int): Current step, in [0, total_steps].
        peak (float): Learning rate reached at the end of the warmup.
        warmup_steps (int): Length of the warmup.
        total_steps (int): Step at which the decay reaches `floor`.
        floor (float, optional): Final learning rate. Defaults to 0.

    Raises:
        ValueError: `step` is outside [0, total_steps].

    Returns:
        float: The learning rate.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} is outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    decay_steps = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / decay_steps)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, cfg) -> float:
    """Learning rate of `step` under the schedule of a TrainConfig."""
    return cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.steps)


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # parameters whose name starts with one of these are not decayed
    no_decay: tuple[str, ...] = ("prefix",)


@dataclass
class AdamWState:
    """First and second moments per parameter name, and the step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"step": np.array(self.step)}
        arrays.update({f"m/{name}": arr for name, arr in self.m.items()})
        arrays.update({f"v/{name}": arr for name, arr in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamWState":
        state = cls(step=int(arrays.get("step", 0)))
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "m":
                state.m[name] = np.array(arr)
            elif kind == "v":
                state.v[name] = np.array(arr)
        return state


def adamw_step(
    params: Iterable[tuple[str, Tensor]],
    state: AdamWState,
    lr: float,
    cfg: AdamWConfig = AdamWConfig(),
) -> AdamWState:
    """Apply one AdamW update in place using each parameter's `.grad`.

    Every gradient is checked before any parameter moves, so a rejected
    step leaves the model untouched.

    Args:
        params (Iterable[tuple[str, Tensor]]): Named trainable parameters.
        state (AdamWState): Moments, updated in place.
        lr (float): Learning rate of this step.
        cfg (AdamWConfig, optional): Optimizer constants.

    Raises:
        FrozenParameterError: A frozen tensor was passed.
        NumericalError: A gradient is non-finite.

    Returns:
        AdamWState: The updated state.
    """
    named = list(params)
    for name, tensor in named:
        if tensor.frozen:
            msg = f"Refusing to update frozen parameter '{name}'."
            logger.error(msg)
            raise FrozenParameterError(msg)
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            msg = f"Non-finite gradient for '{name}' at step {state.step + 1}; step rejected."
            logger.error(msg)
            raise NumericalError(msg)

    state.step += 1
    bias1 = 1.0 - cfg.beta1**state.step
    bias2 = 1.0 - cfg.beta2**state.step
    for name, tensor in named:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = state.m.get(name, np.zeros_like(tensor.data))
        v = state.v.get(name, np.zeros_like(tensor.data))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        state.m[name], state.v[name] = m, v

        if cfg.weight_decay and not name.startswith(cfg.no_decay):
            tensor.data = tensor.data - lr * cfg.weight_decay * tensor.data
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        tensor.data = (tensor.data - lr * update).astype(tensor.dtype)
    return state
