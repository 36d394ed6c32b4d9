"""
Model zoo: ViT / ViT-PE and ResNet / ResNet-PE construction and weight
initialisation.

Every model is built from a `ModelConfig`. The "pe" variant substitutes the
transpose-tied layers of `tied.py`: `TiedMhaLayer` and `TiedFfnLayer` in
every encoder layer of a ViT; tied identity bottlenecks (optionally sharing
one W per stage) in the listed stages of a ResNet. The first block of each
ResNet stage changes width and/or stride and stays conventional.
"""
import copy

import numpy as np

from . import ops
from .config import ModelConfig
from .errors import TyingError
from .logger import get_logger
from .nn import (
    BatchNorm2d,
    BlockSequence,
    BottleneckBlock,
    EncoderLayer,
    FfnLayer,
    LayerNorm,
    LinearLayer,
    MhaLayer,
    Module,
    PatchEmbed,
    Stem,
)
from .tensor import Tensor, dtype_name, resolve_dtype
from .tied import SharedStage, TiedBottleneckBlock, TiedFfnLayer, TiedMhaLayer

logger = get_logger(__name__)

TRUNC_STD = 0.02


class Model(Module):
    """
    A built network: named Parameters, a layer graph and the config it
    was built from.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg

    @property
    def dtype(self):
        return self.config.dtype

    def clone(self):
        """
        Deep copy. Tying inside the clone is preserved (both roles keep
        referencing one Parameter of the clone); nothing is shared with
        the original.
        """
        return copy.deepcopy(self)

    def astype(self, dtype):
        super().astype(dtype)
        self.config = self.config.model_copy(update={'dtype': dtype_name(resolve_dtype(dtype))})
        return self

    def input_dims(self, batch=1, resolution=None):
        side = self.config.image_size if resolution is None else resolution
        return (batch, self.config.in_channels, side, side)

    def example_input(self, batch=2, rng=None, resolution=None):
        """Standard-normal images of the configured shape and dtype."""
        rng = np.random.default_rng(0) if rng is None else rng
        dims = self.input_dims(batch, resolution)
        return Tensor(rng.standard_normal(dims).astype(resolve_dtype(self.config.dtype)))

    def layer_rows(self):
        """
        The rows of an audit: (name, module) pairs covering every
        Parameter, in forward order.
        """
        raise NotImplementedError

    def profile_rows(self, resolution=None):
        """Yields (name, module, macs) for one forward pass on a single image."""
        raise NotImplementedError

    def tying_policy(self):
        raise NotImplementedError


class VisionTransformer(Model):
    """Patch embedding, pre-norm encoder layers, final norm, class-token head."""

    def __init__(self, cfg):
        super().__init__(cfg)
        tied = cfg.variant == 'pe'
        qk_dim = cfg.dim if cfg.qk_dim is None else cfg.qk_dim
        if tied and qk_dim != cfg.dim:
            raise TyingError(
                f'tied attention needs square W_q/W_kv, got qk_dim {qk_dim} != dim {cfg.dim}'
            )

        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.image_size, cfg.patch, cfg.dim)
        self.encoder = [self._encoder_layer(cfg, tied, qk_dim) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim, cfg.norm_eps)
        self.head = LinearLayer(cfg.dim, cfg.num_classes)

    @staticmethod
    def _encoder_layer(cfg, tied, qk_dim):
        if tied:
            attn = TiedMhaLayer(cfg.dim, cfg.heads, cfg.qkv_bias, cfg.proj_bias)
            ffn = TiedFfnLayer(cfg.dim, cfg.hidden_dim, cfg.activation)
        else:
            attn = MhaLayer(cfg.dim, cfg.heads, cfg.qkv_bias, cfg.proj_bias, qk_dim)
            ffn = FfnLayer(cfg.dim, cfg.hidden_dim, cfg.activation)
        return EncoderLayer(
            LayerNorm(cfg.dim, cfg.norm_eps), attn, LayerNorm(cfg.dim, cfg.norm_eps), ffn
        )

    def forward(self, x):
        h = self.patch_embed(x)
        for layer in self.encoder:
            h = layer(h)
        h = self.norm(h)
        return self.head(ops.select(h, 0, axis=1))

    def layer_rows(self):
        rows = [('patch_embed', self.patch_embed)]
        for index, layer in enumerate(self.encoder):
            rows.extend((f'encoder.{index}.{name}', module) for name, module in layer.rows())
        rows.append(('norm', self.norm))
        rows.append(('head', self.head))
        return rows

    def profile_rows(self, resolution=None):
        dims = self.input_dims(1, resolution)
        for name, module in self.layer_rows():
            if module is self.head:
                # Only the class token reaches the classifier.
                dims = (dims[0], dims[-1])
            dims, macs = module.profile(dims)
            yield name, module, macs

    def tying_policy(self):
        if self.config.variant != 'pe':
            return 'baseline: no tying'
        return (
            'vit-pe: every encoder layer ties attention (W_q with the output '
            'projection, W_kv with the value projection) and the FFN (W_1 with '
            'W_2) by transposition; biases, norms, patch embedding and head untied'
        )


class ResNetStage(Module):
    """One ResNet stage: a conventional entry block, then the identity blocks."""

    def __init__(self, entry, body=None):
        super().__init__()
        self.entry = entry
        self.body = body

    def forward(self, x):
        x = self.entry(x)
        return self.body(x) if self.body is not None else x

    def rows(self):
        rows = [('entry', self.entry)]
        if self.body is not None:
            rows.extend((f'body.{i}', block) for i, block in enumerate(self.body.blocks))
        return rows


class ResNet(Model):
    """Bottleneck ResNet (torchvision layout)."""

    def __init__(self, cfg):
        super().__init__(cfg)
        eps = cfg.norm_eps
        width = cfg.base_width
        self.stem = Stem(cfg.in_channels, width, eps)

        self.stages = []
        c_in = width
        for index, count in enumerate(cfg.resnet_layers, start=1):
            c_mid = cfg.base_width * 2 ** (index - 1)
            c_out = 4 * c_mid
            stride = 1 if index == 1 else 2
            entry = BottleneckBlock(c_in, c_mid, c_out, stride, eps=eps)
            self.stages.append(ResNetStage(entry, self._body(cfg, index, count - 1, c_out, c_mid)))
            c_in = c_out

        self.head = LinearLayer(c_in, cfg.num_classes)

    @staticmethod
    def _body(cfg, stage, count, channels, c_mid):
        if count == 0:
            return None
        eps = cfg.norm_eps
        if cfg.variant == 'pe' and stage in cfg.pe_stages:
            if cfg.stage_sharing:
                return SharedStage(channels, c_mid, count, eps)
            return BlockSequence(
                TiedBottleneckBlock(channels, c_mid, eps=eps) for _ in range(count)
            )
        return BlockSequence(
            BottleneckBlock(channels, c_mid, channels, eps=eps) for _ in range(count)
        )

    def forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.head(ops.mean(h, axes=(2, 3)))

    def layer_rows(self):
        rows = [('stem', self.stem)]
        for index, stage in enumerate(self.stages):
            rows.extend((f'stages.{index}.{name}', module) for name, module in stage.rows())
        rows.append(('head', self.head))
        return rows

    def profile_rows(self, resolution=None):
        dims = self.input_dims(1, resolution)
        for name, module in self.layer_rows():
            if module is self.head:
                dims = dims[:2]
            dims, macs = module.profile(dims)
            yield name, module, macs

    def tying_policy(self):
        cfg = self.config
        if cfg.variant != 'pe':
            return 'baseline: no tying'
        sharing = 'one W shared by' if cfg.stage_sharing else 'a private W in each of'
        stages = ', '.join(str(s) for s in cfg.pe_stages) or 'none'
        return (
            f'resnet-pe: stages {stages} use {sharing} the identity blocks '
            f'(reduce W, expand W^T); the first block of every stage, all 3x3 '
            f'convolutions, norms, stem and head stay untied'
        )


def _truncated_normal(rng, dims, std):
    """Normal(0, std) redrawn until every entry lies within ±2 std."""
    values = rng.standard_normal(dims)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


def _kaiming_fan_out(rng, dims):
    # 2-D 1×1 kernels are [C_out, C_in]; 4-D kernels [C_out, C_in, kh, kw].
    fan_out = dims[0] * int(np.prod(dims[2:], dtype=np.int64))
    return rng.standard_normal(dims) * np.sqrt(2.0 / fan_out)


def init_weights(model, seed=0):
    """
    Initialises every Parameter in place and resets batch-norm statistics.

    Transformer matrices, class token and positional embedding are drawn
    from a normal truncated at ±2σ (σ = 0.02); convolution kernels are
    Kaiming-normal (fan-out); norm scales are 1, norm shifts and biases 0.
    Parameters are visited in `named_parameters` order, so the result
    depends only on the architecture and `seed`.

    Args:
        model (Module): A built model or a single layer.
        seed (int): Seed of the numpy Generator.
    """
    rng = np.random.default_rng(seed)
    for name, param in model.named_parameters():
        if param.kind in ('matrix', 'embedding'):
            values = _truncated_normal(rng, param.dims, TRUNC_STD)
        elif param.kind == 'conv':
            values = _kaiming_fan_out(rng, param.dims)
        elif param.kind == 'norm_weight':
            values = np.ones(param.dims)
        else:
            values = np.zeros(param.dims)
        param.assign(values)
        param.zero_grad()

    for _, module in model.named_modules():
        if isinstance(module, BatchNorm2d):
            module.reset_running_stats()


def build_model(cfg, seed=0):
    """
    Builds and initialises the model a configuration describes.

    Args:
        cfg (ModelConfig): A validated configuration.
        seed (int): Initialisation seed.

    Returns:
        Model: A `VisionTransformer` or `ResNet`, parameters named by path
            (e.g. "encoder.0.ffn.W").

    Raises:
        TyingError: If the pe variant cannot be tied (non-square attention).
    """
    model = VisionTransformer(cfg) if cfg.family == 'vit' else ResNet(cfg)
    if cfg.dtype != 'f32':
        model.astype(cfg.dtype)
    model.name_parameters()
    init_weights(model, seed)

    total = sum(param.size for param in model.parameters())
    logger.info(f'Built {cfg.family}-{cfg.variant} with {total:,} parameters (seed {seed})')
    return model
