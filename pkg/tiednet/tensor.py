"""
Dense tensors, trainable parameters and the reverse-mode tape.

A `Tape` records every operation executed while it is active (define-by-run:
a new tape per forward pass). `Tape.backward` replays the records in reverse
and ACCUMULATES the resulting gradients into `Parameter.grad`. Because a
Parameter is bound to a single tape node no matter how many times (or in
which role, W or W^T) it is used, the contributions of all of its uses are
summed into one buffer, which is exactly what transpose tying and stage
sharing require.
"""
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DTypeError, ShapeError
from .logger import get_logger

logger = get_logger(__name__)

DTYPES = {'f32': np.float32, 'f64': np.float64}

# One active tape per thread of control (ContextVars are thread-local).
_ACTIVE_TAPE: ContextVar[Optional['Tape']] = ContextVar(
    'tiednet_active_tape', default=None
)


def dtype_name(np_dtype):
    """
    Maps a numpy dtype to its tiednet name.

    Args:
        np_dtype: A numpy dtype or dtype-like.

    Returns:
        str: 'f32' or 'f64'.

    Raises:
        DTypeError: For any other dtype.
    """
    np_dtype = np.dtype(np_dtype)
    for name, candidate in DTYPES.items():
        if np_dtype == candidate:
            return name
    raise DTypeError(f'unsupported dtype {np_dtype}; expected f32 or f64')


def resolve_dtype(dtype):
    """Accepts 'f32'/'f64' or a numpy float dtype and returns the numpy type."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise DTypeError(f'unsupported dtype {dtype!r}; expected f32 or f64')
        return DTYPES[dtype]
    return DTYPES[dtype_name(dtype)]


class Tensor:
    """
    A dense row-major array, optionally bound to a node of a tape.

    Tensors are thin wrappers: `data` is a numpy array and may be a view
    (a transpose of another tensor shares its storage).
    """

    def __init__(self, data, dtype=None, tape=None, node=None):
        if dtype is None and isinstance(data, (np.ndarray, np.generic)):
            # np.asarray returns ndarrays (and their views) unchanged.
            array = np.asarray(data)
            if array.dtype not in (np.float32, np.float64):
                array = array.astype(np.float32)
        else:
            array = np.asarray(data, dtype=resolve_dtype(dtype or 'f32'))

        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f'all extents must be >= 1, got {array.shape}')

        self.data = array
        self.tape = tape
        self.node = node

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return dtype_name(self.data.dtype)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        """Returns a tape-free tensor over the same storage."""
        return Tensor(self.data)

    def __repr__(self):
        tracked = f', node={self.node}' if self.node is not None else ''
        return f'Tensor(dims={self.dims}, dtype={self.dtype}{tracked})'


class Parameter:
    """
    A named trainable tensor with a gradient accumulator.

    A Parameter is the unit of tying: layers that tie weights keep a
    reference to the same Parameter object, never an equal copy.

    Args:
        data (array-like): Initial values.
        name (str): Path of the parameter inside its model.
        kind (str): Initialisation family: 'matrix', 'conv', 'bias',
            'norm_weight', 'norm_bias' or 'embedding'.
        trainable (bool): Whether optimizers update it.
        dtype (str, optional): 'f32' or 'f64'; inferred from `data` when it
            is already a float array.
    """

    def __init__(self, data, name='', kind='matrix', trainable=True,
                 dtype=None):
        self.tensor = Tensor(data, dtype=dtype)
        self.name = name
        self.kind = kind
        self.trainable = trainable
        self.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self):
        return self.tensor.data

    @property
    def dims(self):
        return self.tensor.dims

    @property
    def size(self):
        return int(self.tensor.data.size)

    @property
    def dtype(self):
        return self.tensor.dtype

    def assign(self, values):
        """
        Overwrites the values in place so that every holder of this
        Parameter (and any view of it) observes the change.
        """
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ShapeError(
                f'cannot assign {values.shape} to parameter {self.name!r} '
                f'of dims {self.data.shape}'
            )
        self.data[...] = values

    def astype(self, dtype):
        """Converts storage and gradient buffer to another dtype, in place."""
        np_dtype = resolve_dtype(dtype)
        self.tensor = Tensor(self.data.astype(np_dtype))
        self.grad = np.zeros_like(self.tensor.data)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f'Parameter({self.name!r}, dims={self.dims}, kind={self.kind})'


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """
    Ordered record of the operations of one forward pass.

    Use as a context manager; operations executed inside the `with` block
    are recorded on this tape.
    """
    records: list = field(default_factory=list)
    _next_node: int = 0
    _leaves: dict = field(default_factory=dict)
    _param_nodes: dict = field(default_factory=dict)
    _tokens: list = field(default_factory=list)

    def __enter__(self):
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def _new_node(self):
        node = self._next_node
        self._next_node += 1
        return node

    def watch(self, param):
        """
        Returns a tracked tensor for `param`, sharing its storage.

        Every use of the same Parameter on this tape maps to one leaf node.
        """
        node = self._param_nodes.get(id(param))
        if node is None:
            node = self._new_node()
            self._param_nodes[id(param)] = node
            self._leaves[node] = param
        return Tensor(param.tensor.data, tape=self, node=node)

    def record(self, op, inputs, output_data, backward):
        """
        Appends an operation and returns its (tracked) output tensor.

        Args:
            op (str): Operation name, for diagnostics.
            inputs (Sequence[Tensor]): The operands; untracked operands
                (constants) receive no gradient.
            output_data (np.ndarray): The computed forward value.
            backward (callable): Maps the output gradient to one gradient
                (or None) per input.

        Returns:
            Tensor: The output, bound to a fresh node.
        """
        input_nodes = tuple(
            t.node if t.tape is self else None for t in inputs
        )
        node = self._new_node()
        self.records.append(TapeRecord(op, input_nodes, node, backward))
        return Tensor(output_data, tape=self, node=node)

    def backward(self, loss):
        """
        Propagates d(loss)/d(.) to every Parameter reachable from `loss`.

        Gradients are added to `Parameter.grad` (+=), so calling this twice
        without `zero_grad` doubles them.

        Args:
            loss (Tensor): A 0-dimensional tensor recorded on this tape.

        Raises:
            ContractError: If `loss` is not a scalar of this tape.
        """
        if loss.tape is not self or loss.node is None:
            raise ContractError('loss was not produced on this tape')
        if loss.data.ndim != 0:
            raise ContractError(
                f'backward needs a scalar loss, got dims {loss.dims}'
            )

        grads = {loss.node: np.ones_like(loss.data)}

        # Records are topologically ordered; reverse order visits every
        #   node after all of its consumers.
        for record in reversed(self.records):
            upstream = grads.pop(record.output, None)
            if upstream is None:
                continue
            for node, grad in zip(record.inputs, record.backward(upstream)):
                if node is None or grad is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + grad
                else:
                    grads[node] = grad

        for node, param in self._leaves.items():
            grad = grads.get(node)
            if grad is None or not param.trainable:
                continue
            if grad.shape != param.grad.shape:
                raise ContractError(
                    f'gradient dims {grad.shape} differ from parameter '
                    f'{param.name!r} dims {param.grad.shape}'
                )
            np.add(param.grad, grad, out=param.grad, casting='unsafe')

        logger.debug(
            f'backward over {len(self.records)} records, '
            f'{len(self._leaves)} parameters'
        )


def active_tape():
    """Returns the tape recording in this thread, or None."""
    return _ACTIVE_TAPE.get()


@contextmanager
def no_grad():
    """Suspends recording: operations inside compute values only."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def as_tensor(value):
    """
    Normalises an operand: Parameters are watched on the active tape (or
    wrapped untracked), arrays become constant tensors.
    """
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Parameter):
        tape = active_tape()
        if tape is None:
            return Tensor(value.tensor.data)
        return tape.watch(value)
    return Tensor(np.asarray(value))


def backward(loss):
    """
    Runs reverse-mode differentiation from a scalar loss.

    Args:
        loss (Tensor): Scalar produced on an active (or finished) tape.

    Raises:
        ContractError: If `loss` is untracked or not a scalar.
    """
    if loss.tape is None:
        raise ContractError('loss is not attached to a tape')
    loss.tape.backward(loss)


def check_same_dtype(op, *tensors):
    """Raises DTypeError when operands of `op` disagree on dtype."""
    kinds = {t.data.dtype for t in tensors}
    if len(kinds) > 1:
        names = ', '.join(sorted(dtype_name(k) for k in kinds))
        raise DTypeError(f'{op}: operands have mixed dtypes ({names})')
