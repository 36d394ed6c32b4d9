"""Toy training loop and evaluation on synthetic data."""
import json
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm  # For displaying progress bars in loops.

from . import ops
from .errors import NumericError, ShapeError, TrainingDivergedError
from .logger import get_logger
from .optim import TrainState, optimizer_step
from .settings import config
from .tensor import Tape, Tensor, no_grad, resolve_dtype

logger = get_logger(__name__)


@dataclass
class StepMetrics:
    step: int
    loss: float
    accuracy: float
    lr: float

    def to_line(self):
        return f'step {self.step} loss {self.loss:.6f} acc {self.accuracy:.4f} lr {self.lr:.6g}'

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def accuracy(logits, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def _batch_inputs(model, data, indices):
    samples = data.samples.data[indices]
    return Tensor(samples.astype(resolve_dtype(model.dtype), copy=False)), data.labels[indices]


def _check_shapes(model, data):
    cfg = model.config
    if data.samples.dims[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f'data samples {data.samples.dims[1:]} do not match the model input '
            f'{(cfg.in_channels, cfg.image_size, cfg.image_size)}'
        )
    if data.num_classes > cfg.num_classes:
        raise ShapeError(f'{data.num_classes} classes do not fit a {cfg.num_classes}-way head')


def train(model, data, steps, batch, state=None, progress=None):
    """
    Runs `steps` optimizer steps of forward, cross-entropy, backward, update
    and zero_grad on random mini-batches.

    Args:
        model (Model): The model to train in place.
        data (SyntheticDataset): Training data.
        steps (int): Number of optimizer steps.
        batch (int): Mini-batch size (clipped to the dataset size).
        state (TrainState, optional): Optimizer configuration and resume
            state; defaults to `TrainState()`. Batches are drawn from a
            generator seeded with `state.seed` (or restored from
            `state.rng_state`).
        progress (bool, optional): Show a tqdm bar on stderr; defaults to
            the TIEDNET_PROGRESS setting.

    Returns:
        tuple: (TrainState, list of StepMetrics).

    Raises:
        TrainingDivergedError: If the loss becomes non-finite.
    """
    state = TrainState() if state is None else state
    progress = config.PROGRESS if progress is None else progress
    _check_shapes(model, data)
    if not state.total_steps:
        state.total_steps = state.step + steps

    rng = np.random.default_rng(state.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    batch = min(batch, len(data))

    model.train()
    model.zero_grad()
    metrics = []
    for _ in tqdm(range(steps), disable=not progress):
        indices = np.sort(rng.choice(len(data), size=batch, replace=False))
        x, labels = _batch_inputs(model, data, indices)

        try:
            with Tape() as tape:
                logits = model(x)
                loss = ops.cross_entropy(logits, labels)
            loss_value = loss.item()
        except NumericError:
            loss_value = float('nan')

        if not np.isfinite(loss_value):
            logger.error(f'Training diverged at step {state.step}: loss {loss_value}')
            raise TrainingDivergedError(
                f'non-finite loss {loss_value} at step {state.step}', step=state.step
            )

        tape.backward(loss)
        lr = optimizer_step(model, state)
        model.zero_grad()

        metrics.append(StepMetrics(
            step=state.step, loss=loss_value, accuracy=accuracy(logits.data, labels), lr=lr
        ))

    state.rng_state = rng.bit_generator.state
    if metrics:
        logger.info(f'Trained {steps} steps; final {metrics[-1].to_line()}')
    return state, metrics


def evaluate(model, data, batch=256):
    """
    Mean cross-entropy and accuracy of `model` in eval mode.

    Returns:
        tuple: (loss, accuracy).
    """
    was_training = model.training
    model.eval()
    total_loss, correct = 0.0, 0
    try:
        with no_grad():
            for start in range(0, len(data), batch):
                indices = np.arange(start, min(start + batch, len(data)))
                x, labels = _batch_inputs(model, data, indices)
                logits = model(x)
                total_loss += ops.cross_entropy(logits, labels).item() * len(indices)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    finally:
        model.train(was_training)
    return total_loss / len(data), correct / len(data)
