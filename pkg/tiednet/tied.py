"""
Transpose-tied layers.

A single matrix W plays two roles: W maps x into the hidden/query space and
W^T maps back. Each layer here owns one Parameter per tied pair and reads the
second role through `ops.transpose`, a view over the same storage, so the
tape deposits the gradients of both roles into the one `Parameter.grad`.

Biases are never tied.
"""
import numpy as np

from . import ops
from .errors import BuildError, ShapeError, TyingError
from .nn import BlockSequence, _AttentionBase, _BottleneckBase, _FfnBase
from .tensor import Parameter, as_tensor


class TiedMhaLayer(_AttentionBase):
    """
    Attention with Q = W_q x, K = W_kv x, V = W_kv^T x and output W_q^T x̂.

    Args:
        dim (int): Token width d; the two matrices are d × d.
        heads (int): Number of heads, must divide d.
        qkv_bias (bool): Untied biases b_q, b_k, b_v.
        proj_bias (bool): Untied bias b_proj.
    """

    def __init__(self, dim, heads, qkv_bias=True, proj_bias=True):
        super().__init__(dim, heads, qkv_bias, proj_bias)
        self.W_q = Parameter(np.zeros((dim, dim), np.float32), 'W_q', 'matrix')
        self.W_kv = Parameter(np.zeros((dim, dim), np.float32), 'W_kv', 'matrix')

    def query_weight(self):
        return self.W_q

    def key_weight(self):
        return self.W_kv

    def value_weight(self):
        return ops.transpose(self.W_kv)

    def proj_weight(self):
        return ops.transpose(self.W_q)


class TiedFfnLayer(_FfnBase):
    """`FFN(x) = W^T F(W x + b_1) + b_2` with a single W [f × d]."""

    def __init__(self, dim, hidden, activation='gelu', bias=True):
        super().__init__(dim, hidden, activation, bias)
        self.W = Parameter(np.zeros((hidden, dim), np.float32), 'W', 'matrix')

    def first_weight(self):
        return self.W

    def second_weight(self):
        return ops.transpose(self.W)


class TiedBottleneckBlock(_BottleneckBase):
    """
    Identity bottleneck `relu(W^T G(W x) + x)`.

    Expanding through W^T forces c_out == c_in and the residual needs
    stride 1, so only the identity blocks of a stage can be tied.

    Args:
        channels (int): c_in == c_out.
        c_mid (int): Bottleneck width.
        W (Parameter, optional): A [c_mid × channels] weight to share with
            other blocks; a private one is created when omitted.
        c_out (int, optional): Requested output width; anything other than
            `channels` is rejected.
        stride (int): Must be 1.
        eps (float): Batch-norm epsilon.

    Raises:
        TyingError: If the requested shapes cannot be tied.
    """

    def __init__(self, channels, c_mid, W=None, c_out=None, stride=1, eps=1e-5):
        if c_out is not None and c_out != channels:
            raise TyingError(
                f'a tied bottleneck expands through W^T, so c_out must equal '
                f'c_in ({channels}), got {c_out}'
            )
        if stride != 1:
            raise TyingError(f'a tied bottleneck keeps the identity shortcut; stride {stride} given')
        if W is None:
            W = Parameter(np.zeros((c_mid, channels), np.float32), 'W', 'conv')
        elif W.dims != (c_mid, channels):
            raise TyingError(f'shared W has dims {W.dims}, block needs {(c_mid, channels)}')
        self.W = W
        super().__init__(channels, c_mid, channels, stride=1, downsample=False, eps=eps)

    def reduce_weight(self):
        return self.W

    def expand_weight(self):
        return ops.transpose(self.W)


class SharedStage(BlockSequence):
    """
    `n` tied identity blocks reading one W; each block keeps its own 3×3
    convolution and norms.

    Args:
        channels (int): Stage width c_out.
        c_mid (int): Bottleneck width.
        blocks (int): Number of blocks n ≥ 1.
    """

    def __init__(self, channels, c_mid, blocks, eps=1e-5):
        if blocks < 1:
            raise BuildError(f'a shared stage needs at least one block, got {blocks}')
        # Assigned before the blocks so that the stage-level name wins.
        self.W = Parameter(np.zeros((c_mid, channels), np.float32), 'W', 'conv')
        super().__init__(
            TiedBottleneckBlock(channels, c_mid, W=self.W, eps=eps) for _ in range(blocks)
        )

    def forward(self, x):
        x = as_tensor(x)
        if x.dims[1] != self.W.dims[1]:
            raise ShapeError(f'shared stage expects {self.W.dims[1]} channels, got dims {x.dims}')
        return super().forward(x)
