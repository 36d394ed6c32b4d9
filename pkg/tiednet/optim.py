"""
SGD with momentum and AdamW, learning-rate schedules, and the train state
that carries both across checkpoints.

Updates are written in place into `Parameter.data`, so every holder of a
tied Parameter (and every transpose view of it) sees the new values.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .logger import get_logger

logger = get_logger(__name__)

OPTIMIZERS = ('sgd', 'adamw')
SCHEDULES = ('constant', 'cosine')
WARMUP_FRACTION = 0.05

# Slot buffers kept per Parameter, by optimizer kind.
SLOTS = {'sgd': ('momentum_buffer',), 'adamw': ('exp_avg', 'exp_avg_sq')}


@dataclass
class TrainState:
    """
    Optimizer configuration plus everything needed to resume training.

    `slots` maps slot name -> Parameter name -> array of the Parameter's dims.
    """
    optimizer: str = 'adamw'
    lr: float = 1e-3
    schedule: str = 'constant'
    total_steps: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    step: int = 0
    slots: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f'unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}')
        if self.schedule not in SCHEDULES:
            raise ContractError(f'unknown schedule {self.schedule!r}; expected one of {SCHEDULES}')

    def meta(self):
        """JSON-safe fields (everything but the slot arrays)."""
        return {
            'optimizer': self.optimizer,
            'lr': self.lr,
            'schedule': self.schedule,
            'total_steps': self.total_steps,
            'momentum': self.momentum,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'adam_eps': self.adam_eps,
            'weight_decay': self.weight_decay,
            'seed': self.seed,
            'step': self.step,
            'rng_state': self.rng_state,
        }

    @classmethod
    def from_meta(cls, meta, slots=None):
        return cls(**meta, slots=slots or {})


def learning_rate(state, step=None):
    """
    Learning rate for a (0-based) optimizer step.

    'cosine' ramps linearly over the first 5% of `total_steps`, then decays
    along a half cosine to zero at `total_steps`.
    """
    step = state.step if step is None else step
    if state.schedule == 'constant' or state.total_steps <= 0:
        return state.lr

    warmup = int(math.ceil(WARMUP_FRACTION * state.total_steps))
    if step < warmup:
        return state.lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, state.total_steps - warmup))
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _slot(state, slot, name, param):
    buffers = state.slots.setdefault(slot, {})
    buffer = buffers.get(name)
    if buffer is None or buffer.shape != param.data.shape or buffer.dtype != param.data.dtype:
        buffer = np.zeros_like(param.data)
        buffers[name] = buffer
    return buffer


def _sgd_update(state, name, param, lr):
    grad = param.grad
    if state.weight_decay:
        grad = grad + state.weight_decay * param.data
    buffer = _slot(state, 'momentum_buffer', name, param)
    buffer *= state.momentum
    buffer += grad
    param.data[...] -= lr * buffer


def _adamw_update(state, name, param, lr):
    grad = param.grad
    exp_avg = _slot(state, 'exp_avg', name, param)
    exp_avg_sq = _slot(state, 'exp_avg_sq', name, param)

    # Decoupled weight decay.
    param.data[...] *= 1.0 - lr * state.weight_decay

    exp_avg *= state.beta1
    exp_avg += (1.0 - state.beta1) * grad
    exp_avg_sq *= state.beta2
    exp_avg_sq += (1.0 - state.beta2) * grad * grad

    t = state.step + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    denom = np.sqrt(exp_avg_sq / bias2) + state.adam_eps
    param.data[...] -= (lr / bias1) * exp_avg / denom


def optimizer_step(model, state):
    """
    Applies one update to every trainable Parameter and advances `state.step`.

    Returns:
        float: The learning rate used.
    """
    lr = learning_rate(state)
    update = _sgd_update if state.optimizer == 'sgd' else _adamw_update
    for name, param in model.named_parameters():
        if param.trainable:
            update(state, name, param, lr)
    state.step += 1
    logger.debug(f'step {state.step}: lr {lr:.6g}')
    return lr
