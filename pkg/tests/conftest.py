from pathlib import Path

import numpy as np
import pytest

from tiednet.tensor import Parameter, Tape

CONFIGS = Path(__file__).resolve().parents[1] / 'configs'


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def configs_dir():
    return CONFIGS


def f64_param(values, name='p'):
    return Parameter(np.asarray(values, dtype=np.float64), name=name)


def numeric_grads(fn, params, eps=1e-6):
    """Central differences of the scalar `fn()` w.r.t. every entry of `params`."""
    grads = []
    for param in params:
        grad = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = fn()
            flat[i] = original - eps
            minus = fn()
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
        grads.append(grad)
    return grads


def analytic_grads(build_loss, params):
    for param in params:
        param.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    return [param.grad.copy() for param in params]


def assert_grads_match(build_loss, params, tol=1e-6):
    """
    Checks tape gradients of `build_loss()` against central differences,
    relative to the largest gradient entry of each parameter.
    """
    analytic = analytic_grads(build_loss, params)
    numeric = numeric_grads(lambda: float(build_loss().data), params)
    for param, a, n in zip(params, analytic, numeric):
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
        assert scale > 0, f'{param.name}: gradient is identically zero'
        error = np.max(np.abs(a - n)) / scale
        assert error < tol, f'{param.name}: max rel err {error:.3e}'


def naive_conv2d(x, w, stride, padding):
    batch, channels, height, width = x.shape
    out_channels, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w))
    for n in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    window = padded[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(window * w[o])
    return out
