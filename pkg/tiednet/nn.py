"""
Conventional (untied) layers and the ViT / ResNet scaffolding.

Layers are plain parameter holders built on `Module`. Each layer that holds
weight matrices reads them through small accessor methods (`first_weight`,
`query_weight`, `expand_weight`, ...); the tied layers in `tied.py`
override only those accessors, so a tied layer and its untied twin run the
very same sequence of operations.
"""
import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Parameter, as_tensor, resolve_dtype


class Module:
    """
    Base class of every layer and model.

    Parameters, sub-modules and lists of sub-modules assigned as attributes
    are discovered automatically, in assignment order.
    """

    def __init__(self):
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def profile(self, dims):
        """
        Shape propagation with multiply-accumulate counting.

        Args:
            dims (tuple): Input dims, batch first.

        Returns:
            tuple: (output dims, MACs of one forward pass).
        """
        raise NotImplementedError(f'{type(self).__name__} cannot be profiled')

    def _members(self):
        for attr, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f'{attr}.{index}', item

    def named_parameters(self, prefix='', _seen=None):
        """
        Yields (path, Parameter) pairs, each distinct Parameter once.

        A tied or shared Parameter is reported under the first path that
        reaches it.
        """
        seen = set() if _seen is None else _seen
        for attr, value in self._members():
            path = f'{prefix}{attr}'
            if isinstance(value, Parameter):
                if id(value) in seen:
                    continue
                seen.add(id(value))
                yield path, value
            else:
                yield from value.named_parameters(f'{path}.', seen)

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def named_modules(self, prefix=''):
        yield prefix.rstrip('.'), self
        for attr, value in self._members():
            if isinstance(value, Module):
                yield from value.named_modules(f'{prefix}{attr}.')

    def own_buffers(self):
        """Non-trainable state of this module alone (name -> array)."""
        return {}

    def named_buffers(self):
        for path, module in self.named_modules():
            for name, array in module.own_buffers().items():
                yield (f'{path}.{name}' if path else name), array

    def name_parameters(self, prefix=''):
        """Stores each Parameter's path in `Parameter.name`."""
        for path, param in self.named_parameters(prefix):
            param.name = path

    def train(self, mode=True):
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def _cast_buffers(self, np_dtype):
        pass

    def astype(self, dtype):
        """Converts every Parameter and buffer to `dtype` in place."""
        np_dtype = resolve_dtype(dtype)
        for param in self.parameters():
            param.astype(np_dtype)
        for _, module in self.named_modules():
            module._cast_buffers(np_dtype)
        return self


def _zeros(*dims):
    return np.zeros(dims, dtype=np.float32)


def _ones(*dims):
    return np.ones(dims, dtype=np.float32)


def _check_last(x, width, what):
    if x.dims[-1] != width:
        raise ShapeError(f'{what} expects last extent {width}, got dims {x.dims}')


class LinearLayer(Module):
    """`y = x W^T + b` with W [out × in]."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.W = Parameter(_zeros(out_features, in_features), 'W', 'matrix')
        self.b = Parameter(_zeros(out_features), 'b', 'bias') if bias else None

    def forward(self, x):
        x = as_tensor(x)
        _check_last(x, self.in_features, 'linear')
        return ops.linear(x, self.W, self.b)

    def profile(self, dims):
        rows = int(np.prod(dims[:-1]))
        return dims[:-1] + (self.out_features,), rows * self.in_features * self.out_features


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(_ones(dim), 'gamma', 'norm_weight')
        self.beta = Parameter(_zeros(dim), 'beta', 'norm_bias')

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)

    def profile(self, dims):
        return dims, 0


class BatchNorm2d(Module):
    """Per-channel batch normalisation with running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(_ones(channels), 'gamma', 'norm_weight')
        self.beta = Parameter(_zeros(channels), 'beta', 'norm_bias')
        self.stats = ops.RunningStats.initial(channels)

    def forward(self, x):
        mode = 'train' if self.training else 'eval'
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self.stats,
            mode=mode, eps=self.eps, momentum=self.momentum
        )

    def own_buffers(self):
        return {'running_mean': self.stats.mean, 'running_var': self.stats.var}

    def reset_running_stats(self):
        self.stats.mean[...] = 0
        self.stats.var[...] = 1

    def _cast_buffers(self, np_dtype):
        self.stats = ops.RunningStats(
            self.stats.mean.astype(np_dtype), self.stats.var.astype(np_dtype)
        )

    def profile(self, dims):
        return dims, 0


def _conv_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


class Conv2d(Module):
    """
    Square-kernel convolution with a 4-D weight [C_out, C_in, k, k].

    `floor=True` follows the torchvision output-size convention; pass
    `floor=False` to insist on exactly tiling strides.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=False, floor=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.floor = floor
        self.weight = Parameter(
            _zeros(out_channels, in_channels, kernel, kernel), 'weight', 'conv'
        )
        self.bias = Parameter(_zeros(out_channels), 'bias', 'bias') if bias else None

    def forward(self, x):
        out = ops.conv2d(x, self.weight, self.stride, self.padding, self.floor)
        if self.bias is not None:
            out = ops.add(out, ops.reshape(self.bias, (1, self.out_channels, 1, 1)))
        return out

    def profile(self, dims):
        batch, _, height, width = dims
        out_h = _conv_extent(height, self.kernel, self.stride, self.padding)
        out_w = _conv_extent(width, self.kernel, self.stride, self.padding)
        macs = (batch * self.out_channels * out_h * out_w
                * self.in_channels * self.kernel * self.kernel)
        return (batch, self.out_channels, out_h, out_w), macs


class MaxPool2d(Module):
    def __init__(self, kernel, stride, padding=0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride, self.padding, floor=True)

    def profile(self, dims):
        batch, channels, height, width = dims
        out_h = _conv_extent(height, self.kernel, self.stride, self.padding)
        out_w = _conv_extent(width, self.kernel, self.stride, self.padding)
        return (batch, channels, out_h, out_w), 0


# ---------------------------------------------------------------------------
# Transformer encoder pieces
# ---------------------------------------------------------------------------

def multi_head_attention(q, k, v, heads):
    """
    Scaled dot-product attention over `heads` contiguous head slices.

    Args:
        q, k (Tensor): [B, T, d_qk].
        v (Tensor): [B, T, d].
        heads (int): Number of heads; d_qk and d must both divide by it.

    Returns:
        tuple: (context [B, T, d], attention probabilities [B, h, T, T]).
    """
    batch, tokens, qk_width = q.dims
    width = v.dims[-1]

    def split(t, t_width):
        # [B, T, w] -> [B, h, T, w/h], head-major channel order.
        t = ops.reshape(t, (batch, tokens, heads, t_width // heads))
        return ops.permute(t, (0, 2, 1, 3))

    q_heads = split(q, qk_width)
    k_heads = split(k, qk_width)
    v_heads = split(v, width)

    scores = ops.matmul(q_heads, ops.permute(k_heads, (0, 1, 3, 2)))
    scores = ops.scale(scores, 1.0 / np.sqrt(qk_width // heads))
    probs = ops.softmax_lastdim(scores)

    context = ops.matmul(probs, v_heads)
    context = ops.permute(context, (0, 2, 1, 3))
    return ops.reshape(context, (batch, tokens, width)), probs


class _AttentionBase(Module):
    """Shared forward of the untied and tied attention layers."""

    def __init__(self, dim, heads, qkv_bias=True, proj_bias=True, qk_dim=None):
        super().__init__()
        qk_dim = dim if qk_dim is None else qk_dim
        if dim % heads or qk_dim % heads:
            raise ShapeError(f'attention width {dim}/{qk_dim} is not divisible by {heads} heads')
        self.dim = dim
        self.qk_dim = qk_dim
        self.heads = heads
        self.b_q = Parameter(_zeros(qk_dim), 'b_q', 'bias') if qkv_bias else None
        self.b_k = Parameter(_zeros(qk_dim), 'b_k', 'bias') if qkv_bias else None
        self.b_v = Parameter(_zeros(dim), 'b_v', 'bias') if qkv_bias else None
        self.b_proj = Parameter(_zeros(dim), 'b_proj', 'bias') if proj_bias else None
        # Probabilities of the most recent forward pass, [B, h, T, T].
        self.attention = None

    def query_weight(self):
        raise NotImplementedError

    def key_weight(self):
        raise NotImplementedError

    def value_weight(self):
        raise NotImplementedError

    def proj_weight(self):
        raise NotImplementedError

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 3:
            raise ShapeError(f'attention expects [B, T, d] input, got dims {x.dims}')
        _check_last(x, self.dim, 'attention')

        q = ops.linear(x, self.query_weight(), self.b_q)
        k = ops.linear(x, self.key_weight(), self.b_k)
        v = ops.linear(x, self.value_weight(), self.b_v)

        context, probs = multi_head_attention(q, k, v, self.heads)
        self.attention = probs.data
        return ops.linear(context, self.proj_weight(), self.b_proj)

    def profile(self, dims):
        batch, tokens, width = dims
        projections = batch * tokens * (2 * self.qk_dim * width + 2 * width * width)
        # QK^T and AV: h heads of T x T x (width / h) each.
        mixing = batch * tokens * tokens * (self.qk_dim + width)
        return dims, projections + mixing


class MhaLayer(_AttentionBase):
    """Multi-head self-attention with four independent projection matrices."""

    def __init__(self, dim, heads, qkv_bias=True, proj_bias=True, qk_dim=None):
        super().__init__(dim, heads, qkv_bias, proj_bias, qk_dim)
        self.W_q = Parameter(_zeros(self.qk_dim, dim), 'W_q', 'matrix')
        self.W_k = Parameter(_zeros(self.qk_dim, dim), 'W_k', 'matrix')
        self.W_v = Parameter(_zeros(dim, dim), 'W_v', 'matrix')
        self.W_proj = Parameter(_zeros(dim, dim), 'W_proj', 'matrix')

    def query_weight(self):
        return self.W_q

    def key_weight(self):
        return self.W_k

    def value_weight(self):
        return self.W_v

    def proj_weight(self):
        return self.W_proj


class _FfnBase(Module):
    """`FFN(x) = second(F(first x + b_1)) + b_2` for any weight roles."""

    def __init__(self, dim, hidden, activation='gelu', bias=True):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.activation = activation
        self.b_1 = Parameter(_zeros(hidden), 'b_1', 'bias') if bias else None
        self.b_2 = Parameter(_zeros(dim), 'b_2', 'bias') if bias else None

    def first_weight(self):
        raise NotImplementedError

    def second_weight(self):
        raise NotImplementedError

    def forward(self, x):
        x = as_tensor(x)
        _check_last(x, self.dim, 'ffn')
        h = ops.linear(x, self.first_weight(), self.b_1)
        h = ops.activation(h, self.activation)
        return ops.linear(h, self.second_weight(), self.b_2)

    def profile(self, dims):
        rows = int(np.prod(dims[:-1]))
        return dims, 2 * rows * self.dim * self.hidden


class FfnLayer(_FfnBase):
    """Conventional two-matrix FFN: W_1 [f × d], W_2 [d × f]."""

    def __init__(self, dim, hidden, activation='gelu', bias=True):
        super().__init__(dim, hidden, activation, bias)
        self.W_1 = Parameter(_zeros(hidden, dim), 'W_1', 'matrix')
        self.W_2 = Parameter(_zeros(dim, hidden), 'W_2', 'matrix')

    def first_weight(self):
        return self.W_1

    def second_weight(self):
        return self.W_2


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer: x + MHA(LN x), then x + FFN(LN x)."""

    def __init__(self, norm1, attn, norm2, ffn):
        super().__init__()
        self.norm1 = norm1
        self.attn = attn
        self.norm2 = norm2
        self.ffn = ffn

    def forward(self, x):
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.ffn(self.norm2(x)))

    def rows(self):
        return [('norm1', self.norm1), ('attn', self.attn),
                ('norm2', self.norm2), ('ffn', self.ffn)]

    def profile(self, dims):
        total = 0
        for _, module in self.rows():
            dims, macs = module.profile(dims)
            total += macs
        return dims, total


class PatchEmbed(Module):
    """
    ViT stem: non-overlapping patch convolution, class token, positional
    embedding.

    Args:
        in_channels (int): Image channels.
        image_size (int): Side of the square input image.
        patch (int): Patch side; must divide `image_size`.
        dim (int): Token width d.
    """

    def __init__(self, in_channels, image_size, patch, dim):
        super().__init__()
        if image_size % patch:
            raise ShapeError(f'image size {image_size} is not divisible by patch {patch}')
        self.patch = patch
        self.dim = dim
        self.image_size = image_size
        self.tokens = (image_size // patch) ** 2
        self.proj = Conv2d(in_channels, dim, patch, stride=patch, bias=True, floor=False)
        self.cls_token = Parameter(_zeros(1, 1, dim), 'cls_token', 'embedding')
        self.pos_embed = Parameter(_zeros(1, self.tokens + 1, dim), 'pos_embed', 'embedding')

    def forward(self, x):
        x = as_tensor(x)
        batch, _, height, width = x.dims
        if height % self.patch or width % self.patch:
            raise ShapeError(
                f'input {height}x{width} is not divisible by patch {self.patch}'
            )
        tokens = (height // self.patch) * (width // self.patch)
        if tokens != self.tokens:
            raise ShapeError(
                f'input {height}x{width} gives {tokens} patches, '
                f'positional embedding holds {self.tokens}'
            )

        h = self.proj(x)
        h = ops.permute(ops.reshape(h, (batch, self.dim, tokens)), (0, 2, 1))
        cls = ops.expand(self.cls_token, (batch, 1, self.dim))
        h = ops.concat([cls, h], axis=1)
        return ops.add(h, self.pos_embed)

    def profile(self, dims):
        batch, channels, height, width = dims
        tokens = (height // self.patch) * (width // self.patch)
        macs = batch * tokens * self.dim * channels * self.patch * self.patch
        return (batch, tokens + 1, self.dim), macs


# ---------------------------------------------------------------------------
# ResNet pieces
# ---------------------------------------------------------------------------

class ConvNormAct(Module):
    """The inner function G: 3×3 convolution, batch norm, relu."""

    def __init__(self, channels, stride=1, eps=1e-5):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, stride=stride, padding=1)
        self.norm = BatchNorm2d(channels, eps=eps)

    def forward(self, x):
        return ops.relu(self.norm(self.conv(x)))

    def profile(self, dims):
        return self.conv.profile(dims)


class Downsample(Module):
    """Projection shortcut: strided 1×1 convolution and batch norm."""

    def __init__(self, in_channels, out_channels, stride, eps=1e-5):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, stride=stride)
        self.norm = BatchNorm2d(out_channels, eps=eps)

    def forward(self, x):
        return self.norm(self.conv(x))

    def profile(self, dims):
        return self.conv.profile(dims)


class _BottleneckBase(Module):
    """
    reduce 1×1 → BN → relu → G (3×3, stride) → expand 1×1 → BN → + shortcut
    → relu. The 1×1 kernels come from `reduce_weight`/`expand_weight`.
    """

    def __init__(self, c_in, c_mid, c_out, stride=1, downsample=None, eps=1e-5):
        super().__init__()
        self.c_in = c_in
        self.c_mid = c_mid
        self.c_out = c_out
        self.stride = stride
        self.norm_reduce = BatchNorm2d(c_mid, eps=eps)
        self.inner = ConvNormAct(c_mid, stride=stride, eps=eps)
        self.norm_expand = BatchNorm2d(c_out, eps=eps)

        if downsample is None:
            downsample = stride != 1 or c_in != c_out
        self.downsample = Downsample(c_in, c_out, stride, eps) if downsample else None

    def reduce_weight(self):
        raise NotImplementedError

    def expand_weight(self):
        raise NotImplementedError

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.dims[1] != self.c_in:
            raise ShapeError(f'bottleneck expects {self.c_in} channels, got dims {x.dims}')

        h = ops.relu(self.norm_reduce(ops.pointwise_conv(x, self.reduce_weight())))
        h = self.inner(h)
        h = self.norm_expand(ops.pointwise_conv(h, self.expand_weight()))

        shortcut = self.downsample(x) if self.downsample is not None else x
        if shortcut.dims != h.dims:
            raise ShapeError(
                f'residual dims {h.dims} differ from shortcut dims {shortcut.dims}; '
                f'a downsample path is required'
            )
        return ops.relu(ops.add(h, shortcut))

    def profile(self, dims):
        batch, _, height, width = dims
        macs = batch * height * width * self.c_in * self.c_mid
        inner_dims, inner_macs = self.inner.profile((batch, self.c_mid, height, width))
        _, _, out_h, out_w = inner_dims
        macs += inner_macs + batch * out_h * out_w * self.c_mid * self.c_out
        if self.downsample is not None:
            macs += self.downsample.profile(dims)[1]
        return (batch, self.c_out, out_h, out_w), macs


class BottleneckBlock(_BottleneckBase):
    """Conventional bottleneck with independent W_reduce [c_mid × c_in] and W_expand [c_out × c_mid]."""

    def __init__(self, c_in, c_mid, c_out, stride=1, downsample=None, eps=1e-5):
        self.W_reduce = Parameter(_zeros(c_mid, c_in), 'W_reduce', 'conv')
        super().__init__(c_in, c_mid, c_out, stride, downsample, eps)
        self.W_expand = Parameter(_zeros(c_out, c_mid), 'W_expand', 'conv')

    def reduce_weight(self):
        return self.W_reduce

    def expand_weight(self):
        return self.W_expand


class BlockSequence(Module):
    """Blocks applied one after another."""

    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def profile(self, dims):
        total = 0
        for block in self.blocks:
            dims, macs = block.profile(dims)
            total += macs
        return dims, total


class Stem(Module):
    """ResNet stem: 7×7/2 convolution, batch norm, relu, 3×3/2 max pool."""

    def __init__(self, in_channels, width, eps=1e-5):
        super().__init__()
        self.conv = Conv2d(in_channels, width, 7, stride=2, padding=3)
        self.norm = BatchNorm2d(width, eps=eps)
        self.pool = MaxPool2d(3, stride=2, padding=1)

    def forward(self, x):
        return self.pool(ops.relu(self.norm(self.conv(x))))

    def profile(self, dims):
        dims, macs = self.conv.profile(dims)
        return self.pool.profile(dims)[0], macs
