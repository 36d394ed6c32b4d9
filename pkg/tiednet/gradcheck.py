"""
Finite-difference verification of the tape's gradients.

The scalar under test is `sum(output * R)` for a fixed random projection R,
so every output entry contributes. Each sampled coordinate of each
Parameter is perturbed in place by ±eps (a tied or shared Parameter is a
single storage, so the numeric derivative is the total derivative over all
of its roles) and the central difference is compared with the analytic
gradient.

A coordinate's error is relative to the larger of its own magnitude and the
largest analytic gradient of its Parameter, so a Parameter whose gradients
are all small is held to the same relative standard as any other. Pairs
that both sit below the rounding floor of the objective (what f64 can
resolve through a central difference of width 2·eps) count as agreeing
zeros.
"""
import copy
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import ops
from .logger import get_logger
from .tensor import Tape, Tensor, as_tensor, no_grad

logger = get_logger(__name__)

WORST_REPORTED = 5

# Rounding slack, in units of f64 epsilon times the objective's magnitude.
ROUNDING_ULPS = 1024


def relative_error(analytic, numeric, scale=0.0):
    """|a - n| / max(|a|, |n|, scale); 0 when all three are zero."""
    denominator = max(abs(analytic), abs(numeric), scale)
    if denominator == 0.0:
        return 0.0
    return abs(analytic - numeric) / denominator


def rounding_floor(magnitude, eps):
    """Smallest derivative a central difference of step `eps` resolves."""
    return ROUNDING_ULPS * np.finfo(np.float64).eps * magnitude / eps


@dataclass
class CoordinateError:
    index: tuple
    analytic: float
    numeric: float
    error: float


@dataclass
class ParameterCheck:
    name: str
    checked: int
    max_error: float
    worst: List[CoordinateError] = field(default_factory=list)

    def passed(self, tol):
        return self.max_error < tol


@dataclass
class GradCheckReport:
    results: List[ParameterCheck]
    eps: float
    tol: float

    @property
    def max_error(self):
        return max((result.max_error for result in self.results), default=0.0)

    @property
    def passed(self):
        return all(result.passed(self.tol) for result in self.results)

    def failures(self):
        return [result for result in self.results if not result.passed(self.tol)]

    def lines(self):
        out = []
        for result in self.results:
            status = 'ok' if result.passed(self.tol) else 'FAIL'
            out.append(
                f'{result.name}: {status} max rel err {result.max_error:.3e} '
                f'({result.checked} coords)'
            )
            if status == 'FAIL':
                out.extend(
                    f'  at {c.index}: analytic {c.analytic:.10e} numeric {c.numeric:.10e}'
                    for c in result.worst
                )
        out.append(f'max rel err {self.max_error:.3e} (tol {self.tol:g})')
        return out

def grad_check(target, inputs=None, seed=0, eps=1e-4, tol=1e-6, coords=None,
               analytic_scale=1.0):
    """
    Compares analytic gradients with central differences.

    Args:
        target (Module): A layer or model. Always checked on an f64 deep
            copy, so the caller's values and batch-norm statistics are left
            alone; batch norms keep their current mode.
        inputs (array-like, optional): Input batch; a model's
            `example_input` is used when omitted.
        seed (int): Seeds the projection R and coordinate sampling.
        eps (float): Central-difference step.
        tol (float): Maximum allowed error.
        coords (int, optional): Coordinates sampled per Parameter; all of
            them when omitted or when the Parameter is smaller.
        analytic_scale (float): Multiplies the analytic gradient before the
            comparison (1.0 in normal use).

    Returns:
        GradCheckReport: One ParameterCheck per distinct Parameter.
    """
    target = copy.deepcopy(target).astype('f64')
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = target.example_input(batch=2, rng=rng)
    x = Tensor(np.asarray(as_tensor(inputs).data, dtype=np.float64))

    with no_grad():
        out = target(x).data
        projection = rng.standard_normal(out.shape)
    floor = rounding_floor(float(np.sum(np.abs(out * projection))), eps)

    def objective():
        with no_grad():
            return float(np.sum(target(x).data * projection))

    target.zero_grad()
    with Tape() as tape:
        loss = ops.sum_all(ops.mul(target(x), projection))
    tape.backward(loss)
    analytic = {name: param.grad * analytic_scale
                for name, param in target.named_parameters()}
    target.zero_grad()

    results = []
    for name, param in target.named_parameters():
        if not param.trainable:
            continue
        flat_indices = np.arange(param.size)
        if coords is not None and param.size > coords:
            flat_indices = np.sort(rng.choice(param.size, size=coords, replace=False))

        errors = []
        flat = param.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        scale = float(np.max(np.abs(grad), initial=0.0))
        for i in flat_indices:
            original = flat[i]
            flat[i] = original + eps
            plus = objective()
            flat[i] = original - eps
            minus = objective()
            flat[i] = original

            numeric = (plus - minus) / (2.0 * eps)
            if max(abs(grad[i]), abs(numeric)) <= floor:
                error = 0.0
            else:
                error = relative_error(float(grad[i]), numeric, scale)
            errors.append(CoordinateError(
                index=tuple(int(v) for v in np.unravel_index(i, param.dims)),
                analytic=float(grad[i]),
                numeric=numeric,
                error=error,
            ))

        errors.sort(key=lambda c: c.error, reverse=True)
        results.append(ParameterCheck(
            name=name,
            checked=len(errors),
            max_error=errors[0].error if errors else 0.0,
            worst=errors[:WORST_REPORTED],
        ))
        logger.debug(f'{name}: {len(errors)} coords, max err {results[-1].max_error:.3e}')

    return GradCheckReport(results=results, eps=eps, tol=tol)
