"""
Differentiable operations over `Tensor`.

Every operation accepts Tensors or Parameters (or plain arrays, treated as
constants), computes its value with numpy and, when a tape is active,
records a backward rule on it. Operands are made C-contiguous before the
heavy kernels (matmul, convolution) so that a product over a transpose view
and over a contiguous copy with equal values take the same code path and
give bitwise-equal results.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import (
    ContractError,
    LabelIndexError,
    NumericError,
    RankError,
    ShapeError,
)
from .tensor import Tensor, active_tape, as_tensor, check_same_dtype

ACTIVATIONS = ('relu', 'gelu')

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _emit(op, inputs, out, backward):
    """Wraps `out` in a Tensor, recording it when an input is tracked."""
    tape = active_tape()
    if tape is None or not any(t.tape is tape for t in inputs):
        return Tensor(out)
    return tape.record(op, inputs, out, backward)


def _unbroadcast(grad, shape):
    """Sums `grad` over the axes numpy broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b):
    """
    Matrix product `a @ b`.

    Args:
        a (Tensor): [..., m, k].
        b (Tensor): [k, n], or [..., k, n] with the same leading dims as `a`.

    Returns:
        Tensor: [..., m, n].

    Raises:
        RankError: If an operand has fewer than 2 dims.
        ShapeError: If inner or batch extents disagree.
        DTypeError: If the operands have different dtypes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f'matmul needs rank >= 2 operands, got {a.dims} and {b.dims}')
    if a.dims[-1] != b.dims[-2]:
        raise ShapeError(f'matmul inner extents differ: {a.dims} x {b.dims}')
    if b.ndim > 2 and a.dims[:-2] != b.dims[:-2]:
        raise ShapeError(f'matmul batch extents differ: {a.dims} x {b.dims}')
    if b.ndim > a.ndim:
        raise ShapeError(f'matmul cannot broadcast {a.dims} against {b.dims}')
    check_same_dtype('matmul', a, b)

    lhs = np.ascontiguousarray(a.data)
    rhs = np.ascontiguousarray(b.data)
    out = np.matmul(lhs, rhs)

    def _backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(rhs, -1, -2))
        if rhs.ndim == 2 and lhs.ndim > 2:
            # A shared 2-D right operand collects the whole batch.
            grad_b = (
                lhs.reshape(-1, lhs.shape[-1]).T
                @ grad.reshape(-1, grad.shape[-1])
            )
        else:
            grad_b = np.matmul(np.swapaxes(lhs, -1, -2), grad)
        return grad_a, grad_b

    return _emit('matmul', (a, b), out, _backward)


def transpose(a):
    """
    Transpose of a matrix as a view sharing `a`'s storage.

    Gradients flowing into the view land in the gradient of the source, so
    `transpose(param)` used as a weight accumulates into `param.grad`.

    Raises:
        RankError: If `a` is not 2-dimensional.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise RankError(f'transpose needs a matrix, got dims {a.dims}')

    def _backward(grad):
        return (grad.T,)

    return _emit('transpose', (a,), a.data.T, _backward)


def permute(a, axes):
    """Reorders axes (a view); the inverse permutation routes gradients back."""
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f'permute axes {axes} do not match dims {a.dims}')
    inverse = tuple(int(i) for i in np.argsort(axes))

    def _backward(grad):
        return (np.transpose(grad, inverse),)

    return _emit('permute', (a,), np.transpose(a.data, axes), _backward)


def reshape(a, dims):
    a = as_tensor(a)
    try:
        out = a.data.reshape(dims)
    except ValueError as exc:
        raise ShapeError(f'cannot reshape {a.dims} to {tuple(dims)}') from exc
    source_dims = a.dims

    def _backward(grad):
        return (grad.reshape(source_dims),)

    return _emit('reshape', (a,), out, _backward)


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f'cannot add {a.dims} and {b.dims}') from exc

    def _backward(grad):
        return _unbroadcast(grad, a.dims), _unbroadcast(grad, b.dims)

    return _emit('add', (a, b), out, _backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f'cannot multiply {a.dims} and {b.dims}') from exc
    lhs, rhs = a.data, b.data

    def _backward(grad):
        return (
            _unbroadcast(grad * rhs, lhs.shape),
            _unbroadcast(grad * lhs, rhs.shape),
        )

    return _emit('mul', (a, b), out, _backward)


def scale(a, factor):
    """Multiplies by a Python scalar, keeping the operand's dtype."""
    a = as_tensor(a)
    factor = a.data.dtype.type(factor)

    def _backward(grad):
        return (grad * factor,)

    return _emit('scale', (a,), a.data * factor, _backward)


def sum_all(a):
    """Sum of every entry, as a 0-dimensional tensor."""
    a = as_tensor(a)
    dims = a.dims

    def _backward(grad):
        return (np.broadcast_to(grad, dims),)

    return _emit('sum', (a,), np.asarray(a.data.sum()), _backward)


def mean(a, axes, keepdims=False):
    """Mean over `axes` (int or tuple)."""
    a = as_tensor(a)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    axes = tuple(axis % a.ndim for axis in axes)
    count = int(np.prod([a.dims[axis] for axis in axes]))
    dims = a.dims

    def _backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad / grad.dtype.type(count), dims),)

    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return _emit('mean', (a,), out, _backward)


def concat(tensors, axis):
    """Joins tensors along `axis`."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        dims = ', '.join(str(t.dims) for t in tensors)
        raise ShapeError(f'cannot concatenate {dims} on axis {axis}') from exc
    offsets = np.cumsum([t.dims[axis] for t in tensors])[:-1]

    def _backward(grad):
        return tuple(np.split(grad, offsets, axis=axis))

    return _emit('concat', tuple(tensors), out, _backward)


def select(a, index, axis):
    """Picks one index along `axis`, dropping that axis."""
    a = as_tensor(a)
    dims = a.dims
    dtype = a.data.dtype

    def _backward(grad):
        full = np.zeros(dims, dtype=dtype)
        where = [slice(None)] * len(dims)
        where[axis] = index
        full[tuple(where)] = grad
        return (full,)

    return _emit('select', (a,), np.take(a.data, index, axis=axis), _backward)


def expand(a, dims):
    """Broadcasts `a` to `dims` (materialised)."""
    a = as_tensor(a)
    source_dims = a.dims
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, dims))
    except ValueError as exc:
        raise ShapeError(f'cannot expand {a.dims} to {tuple(dims)}') from exc

    def _backward(grad):
        return (_unbroadcast(grad, source_dims),)

    return _emit('expand', (a,), out, _backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------

def activation(x, kind):
    """
    Elementwise nonlinearity.

    Args:
        x (Tensor): Input.
        kind (str): 'relu' or 'gelu' (exact error-function form).

    Returns:
        Tensor: Same dims as `x`.
    """
    x = as_tensor(x)
    data = x.data

    if kind == 'relu':
        out = np.maximum(data, 0)

        def _backward(grad):
            return (grad * (data > 0),)

    elif kind == 'gelu':
        cdf = 0.5 * (1.0 + erf(data * _INV_SQRT2))
        out = data * cdf

        def _backward(grad):
            pdf = np.exp(-0.5 * data * data) * _INV_SQRT2PI
            return (grad * (cdf + data * pdf),)

    else:
        raise ContractError(
            f'unknown activation {kind!r}; expected one of {ACTIVATIONS}'
        )

    return _emit(kind, (x,), out.astype(data.dtype, copy=False), _backward)


def relu(x):
    return activation(x, 'relu')


def gelu(x):
    return activation(x, 'gelu')


def softmax_lastdim(x):
    """
    Softmax over the last axis, computed on max-shifted logits.

    Raises:
        NumericError: If the result is not finite.
    """
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(out)):
        raise NumericError('softmax produced non-finite values')

    def _backward(grad):
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)

    return _emit('softmax', (x,), out, _backward)


def _normalize_backward(grad_xhat, xhat, rstd, axes):
    """Gradient through x -> (x - mean) * rstd with batch statistics."""
    return rstd * (
        grad_xhat
        - grad_xhat.mean(axis=axes, keepdims=True)
        - xhat * (grad_xhat * xhat).mean(axis=axes, keepdims=True)
    )


def layer_norm(x, gamma, beta, eps=1e-6):
    """
    Normalises each last-dim slice to zero mean and unit variance, then
    applies the affine `gamma * xhat + beta`.

    Raises:
        ShapeError: If gamma/beta extents differ from the last dim.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.dims[-1]
    if gamma.dims != (width,) or beta.dims != (width,):
        raise ShapeError(
            f'layer_norm affine dims {gamma.dims}/{beta.dims} '
            f'do not match last dim {width}'
        )

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    lead_axes = tuple(range(x.ndim - 1))
    gamma_data = gamma.data

    def _backward(grad):
        grad_gamma = (grad * xhat).sum(axis=lead_axes)
        grad_beta = grad.sum(axis=lead_axes)
        grad_x = _normalize_backward(grad * gamma_data, xhat, rstd, -1)
        return grad_x, grad_gamma, grad_beta

    return _emit('layer_norm', (x, gamma, beta), out, _backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels, dtype=np.float32):
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
        )


def batch_norm2d(x, gamma, beta, running_stats, mode='train', eps=1e-5,
                 momentum=0.1):
    """
    Batch normalisation over (N, H, W) for each channel of an NCHW tensor.

    In 'train' mode the batch statistics normalise the input and the
    running statistics are updated by an exponential moving average
    (unbiased variance). In 'eval' mode only the running statistics are
    used; before any training step these are mean 0 / var 1.

    Args:
        x (Tensor): [N, C, H, W].
        gamma, beta (Parameter | Tensor): [C].
        running_stats (RunningStats): Updated in place in train mode.
        mode (str): 'train' or 'eval'.
        eps (float): Variance floor.
        momentum (float): Weight of the newest batch in the running average.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise RankError(f'batch_norm2d needs NCHW input, got dims {x.dims}')
    channels = x.dims[1]
    if gamma.dims != (channels,) or beta.dims != (channels,):
        raise ShapeError(
            f'batch_norm2d affine dims {gamma.dims}/{beta.dims} '
            f'do not match {channels} channels'
        )
    if mode not in ('train', 'eval'):
        raise ContractError(f"batch_norm2d mode must be 'train' or 'eval', got {mode!r}")

    dtype = x.data.dtype
    axes = (0, 2, 3)
    affine = (1, channels, 1, 1)
    gamma_data = gamma.data.reshape(affine)

    if mode == 'train':
        batch_mean = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - batch_mean
        batch_var = (centered * centered).mean(axis=axes, keepdims=True)
        rstd = 1.0 / np.sqrt(batch_var + dtype.type(eps))
        xhat = centered * rstd

        count = x.data.size // channels
        unbiased = batch_var.reshape(channels) * (count / max(count - 1, 1))
        running_stats.mean[...] = (
            (1 - momentum) * running_stats.mean
            + momentum * batch_mean.reshape(channels)
        )
        running_stats.var[...] = (
            (1 - momentum) * running_stats.var + momentum * unbiased
        )

        def _grad_x(grad):
            return _normalize_backward(grad * gamma_data, xhat, rstd, axes)

    else:
        rstd = 1.0 / np.sqrt(
            running_stats.var.reshape(affine).astype(dtype) + dtype.type(eps)
        )
        xhat = (x.data - running_stats.mean.reshape(affine).astype(dtype)) * rstd

        def _grad_x(grad):
            return grad * gamma_data * rstd

    out = xhat * gamma_data + beta.data.reshape(affine)

    def _backward(grad):
        grad_gamma = (grad * xhat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        return _grad_x(grad), grad_gamma, grad_beta

    return _emit('batch_norm2d', (x, gamma, beta), out, _backward)


def cross_entropy(logits, labels):
    """
    Mean negative log-likelihood of `labels` under softmax(`logits`).

    Args:
        logits (Tensor): [B, C].
        labels (Sequence[int]): B class indices.

    Returns:
        Tensor: 0-dimensional loss.

    Raises:
        LabelIndexError: If a label lies outside [0, C).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise RankError(f'cross_entropy needs [B, C] logits, got {logits.dims}')
    batch, classes = logits.dims
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (batch,):
        raise ShapeError(f'{labels.shape[0]} labels for a batch of {batch}')
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelIndexError(
            f'labels must lie in [0, {classes}), got '
            f'[{labels.min()}, {labels.max()}]'
        )

    data = logits.data
    shifted = data - data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = np.asarray((log_norm - shifted[rows, labels]).mean(), dtype=data.dtype)

    def _backward(grad):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1
        return (probs * (grad / batch),)

    return _emit('cross_entropy', (logits,), loss, _backward)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def _output_extent(extent, kernel, stride, padding, floor, what):
    span = extent + 2 * padding - kernel
    if span < 0:
        raise ShapeError(
            f'{what}: kernel {kernel} exceeds padded extent {extent + 2 * padding}'
        )
    if span % stride and not floor:
        raise ShapeError(
            f'{what}: output extent ({extent}+2*{padding}-{kernel})/{stride}+1 '
            f'is not integral'
        )
    return span // stride + 1


def _windows(padded, kh, kw, stride, out_h, out_w):
    """im2col as a strided view: [N, C, out_h, out_w, kh, kw]."""
    view = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def conv2d(x, w, stride=1, padding=0, floor=False):
    """
    Direct 2-D cross-correlation (no kernel flip) via im2col.

    Args:
        x (Tensor): [N, C_in, H, W].
        w (Tensor | Parameter): [C_out, C_in, kh, kw].
        stride (int): Step between windows.
        padding (int): Zero padding on every spatial border.
        floor (bool): Drop the incomplete trailing window instead of
            raising (the torchvision output-size convention).

    Returns:
        Tensor: [N, C_out, H', W'] with H' = (H + 2*padding - kh)/stride + 1.

    Raises:
        ShapeError: On channel mismatch or non-integral output extent.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise RankError(f'conv2d needs NCHW input and 4-D kernel, got {x.dims}, {w.dims}')
    batch, channels, height, width = x.dims
    out_channels, in_channels, kh, kw = w.dims
    if channels != in_channels:
        raise ShapeError(f'conv2d: input has {channels} channels, kernel expects {in_channels}')
    check_same_dtype('conv2d', x, w)

    out_h = _output_extent(height, kh, stride, padding, floor, 'conv2d height')
    out_w = _output_extent(width, kw, stride, padding, floor, 'conv2d width')
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pad)
    windows = _windows(padded, kh, kw, stride, out_h, out_w)
    kernel = np.ascontiguousarray(w.data)

    out = np.tensordot(windows, kernel, axes=((1, 4, 5), (1, 2, 3)))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _backward(grad):
        grad_w = np.tensordot(grad, windows, axes=((0, 2, 3), (0, 2, 3)))
        grad_padded = np.zeros_like(padded)
        # col2im: scatter each kernel tap back onto the input grid.
        for i in range(kh):
            for j in range(kw):
                tap = np.tensordot(grad, kernel[:, :, i, j], axes=((1,), (0,)))
                grad_padded[
                    :, :,
                    i:i + stride * out_h:stride,
                    j:j + stride * out_w:stride,
                ] += tap.transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        return grad_x, grad_w

    return _emit('conv2d', (x, w), out, _backward)


def max_pool2d(x, kernel, stride, padding=0, floor=False):
    """
    Max pooling over kernel×kernel windows (padding with -inf).

    Gradients go to the first maximal entry of each window.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise RankError(f'max_pool2d needs NCHW input, got dims {x.dims}')
    batch, channels, height, width = x.dims
    out_h = _output_extent(height, kernel, stride, padding, floor, 'max_pool2d height')
    out_w = _output_extent(width, kernel, stride, padding, floor, 'max_pool2d width')

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pad, constant_values=-np.inf)
    windows = _windows(padded, kernel, kernel, stride, out_h, out_w)
    flat = windows.reshape(batch, channels, out_h, out_w, kernel * kernel)
    winners = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winners[..., None], axis=-1)[..., 0]

    def _backward(grad):
        grad_padded = np.zeros_like(padded)
        for i in range(kernel):
            for j in range(kernel):
                hit = winners == i * kernel + j
                grad_padded[
                    :, :,
                    i:i + stride * out_h:stride,
                    j:j + stride * out_w:stride,
                ] += grad * hit
        return (grad_padded[:, :, padding:padding + height, padding:padding + width],)

    return _emit('max_pool2d', (x,), np.ascontiguousarray(out), _backward)


# ---------------------------------------------------------------------------
# Composite operations
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """
    Applies `y = x W^T + b` to every row of `x`.

    Args:
        x (Tensor): [..., in].
        weight (Tensor | Parameter): [out, in]; may be a transpose view.
        bias (Tensor | Parameter, optional): [out].

    Returns:
        Tensor: [..., out].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise RankError(f'linear weight must be a matrix, got dims {weight.dims}')
    out_features, in_features = weight.dims
    if x.dims[-1] != in_features:
        raise ShapeError(
            f'linear expects last extent {in_features}, got input dims {x.dims}'
        )
    lead = x.dims[:-1]
    rows = reshape(x, (-1, in_features))
    out = matmul(rows, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (out_features,))


def pointwise_conv(x, weight):
    """
    1×1 convolution with a 2-D kernel [C_out, C_in], stride 1.

    Computed as a per-pixel matmul so that the kernel may be a transpose
    view of another layer's weight without copying it.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise RankError(f'pointwise_conv needs NCHW input, got dims {x.dims}')
    batch, channels, height, width = x.dims
    if weight.ndim != 2 or weight.dims[1] != channels:
        raise ShapeError(
            f'pointwise_conv: kernel {weight.dims} does not accept {channels} channels'
        )
    pixels = reshape(permute(x, (0, 2, 3, 1)), (batch * height * width, channels))
    mixed = matmul(pixels, transpose(weight))
    mixed = reshape(mixed, (batch, height, width, weight.dims[0]))
    return permute(mixed, (0, 3, 1, 2))
