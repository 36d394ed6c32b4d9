"""
Declarative model configuration.

`ModelConfig` describes one ViT or ResNet architecture together with its
parameter-efficient (transpose-tied) variant flags. Configuration files are
strict UTF-8 JSON: unknown keys are rejected so that a misspelt variant flag
cannot silently produce the wrong model.
"""
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, ConfigParseError, ConfigValidationError, UnknownKeyError
from .logger import get_logger

logger = get_logger(__name__)

MAX_RESNET_STAGES = 4


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    family: Literal['vit', 'resnet']
    variant: Literal['baseline', 'pe'] = 'baseline'

    # Vision transformer shape (DeiT-S by default)
    dim: int = Field(384, ge=1)
    depth: int = Field(12, ge=1)
    heads: int = Field(6, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    patch: int = Field(16, ge=1)
    qkv_bias: bool = True
    proj_bias: bool = True
    qk_dim: Optional[int] = Field(None, ge=1)
    activation: Literal['relu', 'gelu'] = 'gelu'

    # Shared by both families
    image_size: int = Field(224, ge=1)
    num_classes: int = Field(1000, ge=1)
    in_channels: int = Field(3, ge=1)
    norm_eps: Optional[float] = Field(None, gt=0)
    dtype: Literal['f32', 'f64'] = 'f32'

    # ResNet shape (ResNet50 by default)
    resnet_layers: List[int] = Field(default_factory=lambda: [3, 4, 6, 3])
    base_width: int = Field(64, ge=1)
    pe_stages: Optional[List[int]] = None
    stage_sharing: Optional[bool] = None

    @model_validator(mode='before')
    @classmethod
    def _apply_family_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        family = data.get('family')
        tied_resnet = family == 'resnet' and data.get('variant') == 'pe'
        if data.get('norm_eps') is None:
            data['norm_eps'] = 1e-5 if family == 'resnet' else 1e-6
        if data.get('stage_sharing') is None:
            data['stage_sharing'] = tied_resnet
        if data.get('pe_stages') is None:
            layers = data.get('resnet_layers')
            if not isinstance(layers, list) or not layers:
                layers = [3, 4, 6, 3]
            data['pe_stages'] = (
                list(range(1, len(layers) + 1)) if tied_resnet else []
            )
        return data

    @model_validator(mode='after')
    def _check_invariants(self):
        if self.dim % self.heads:
            raise ConfigValidationError(
                f'dim {self.dim} is not divisible by heads {self.heads}', field='heads'
            )
        if self.qk_dim is not None and self.qk_dim % self.heads:
            raise ConfigValidationError(
                f'qk_dim {self.qk_dim} is not divisible by heads {self.heads}', field='qk_dim'
            )
        if self.family == 'vit' and self.image_size % self.patch:
            raise ConfigValidationError(
                f'image_size {self.image_size} is not divisible by patch {self.patch}',
                field='patch'
            )
        if round(self.dim * self.mlp_ratio) < 1:
            raise ConfigValidationError(
                f'mlp_ratio {self.mlp_ratio} gives an empty hidden layer', field='mlp_ratio'
            )

        if not 1 <= len(self.resnet_layers) <= MAX_RESNET_STAGES:
            raise ConfigValidationError(
                f'resnet_layers must list 1 to {MAX_RESNET_STAGES} stages, '
                f'got {self.resnet_layers}',
                field='resnet_layers'
            )
        if any(count < 1 for count in self.resnet_layers):
            raise ConfigValidationError(
                f'every stage needs at least one block, got {self.resnet_layers}',
                field='resnet_layers'
            )

        if self.pe_stages and self.variant != 'pe':
            raise ConfigValidationError(
                f'pe_stages {self.pe_stages} given for variant {self.variant!r}',
                field='pe_stages'
            )
        valid_stages = range(1, MAX_RESNET_STAGES + 1)
        if any(stage not in valid_stages for stage in self.pe_stages):
            raise ConfigValidationError(
                f'pe_stages must be a subset of {{1,2,3,4}}, got {self.pe_stages}',
                field='pe_stages'
            )
        if self.family == 'resnet' and any(s > len(self.resnet_layers) for s in self.pe_stages):
            raise ConfigValidationError(
                f'pe_stages {self.pe_stages} name stages beyond resnet_layers '
                f'{self.resnet_layers}',
                field='pe_stages'
            )
        if len(set(self.pe_stages)) != len(self.pe_stages):
            raise ConfigValidationError(
                f'pe_stages {self.pe_stages} repeats a stage', field='pe_stages'
            )
        return self

    @property
    def hidden_dim(self):
        """FFN hidden width f = dim · mlp_ratio."""
        return int(round(self.dim * self.mlp_ratio))

    @property
    def tokens(self):
        """Patch tokens T of a ViT at the configured image size."""
        return (self.image_size // self.patch) ** 2

    def to_json(self):
        """Canonical JSON echo: sorted keys, no whitespace."""
        return json.dumps(self.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))


def _validation_error(exc):
    """Converts a pydantic ValidationError into the tiednet hierarchy."""
    errors = exc.errors()
    unknown = [e for e in errors if e['type'] == 'extra_forbidden']
    if unknown:
        field = '.'.join(str(part) for part in unknown[0]['loc'])
        return UnknownKeyError(f'unknown configuration key {field!r}', field=field)

    first = errors[0]
    cause = first.get('ctx', {}).get('error')
    if isinstance(cause, ConfigValidationError):
        return ConfigValidationError(str(cause), field=cause.field)

    field = '.'.join(str(part) for part in first['loc'])
    return ConfigValidationError(f'{field}: {first["msg"]}', field=field)


def parse_config(text):
    """
    Parses and validates a JSON model configuration.

    Args:
        text (bytes | str): UTF-8 JSON document.

    Returns:
        ModelConfig: The validated configuration, defaults applied.

    Raises:
        ConfigParseError: If the document is not UTF-8 JSON; `offset` is the
            byte offset of the problem.
        UnknownKeyError: If a key is not a ModelConfig field.
        ConfigValidationError: If a field violates an invariant; `field`
            names it.
    """
    if isinstance(text, bytes):
        try:
            document = text.decode('utf-8')
        except UnicodeDecodeError as exc:
            raise ConfigParseError(
                f'config is not valid UTF-8 at byte {exc.start}', offset=exc.start
            ) from exc
    else:
        document = text

    try:
        obj = json.loads(document)
    except json.JSONDecodeError as exc:
        offset = len(document[:exc.pos].encode('utf-8'))
        raise ConfigParseError(
            f'malformed JSON at byte {offset}: {exc.msg}', offset=offset
        ) from exc

    if not isinstance(obj, dict):
        raise ConfigValidationError(
            f'config must be a JSON object, got {type(obj).__name__}', field=''
        )

    try:
        cfg = ModelConfig.model_validate(obj)
    except ValidationError as exc:
        raise _validation_error(exc) from exc

    logger.debug(f'Parsed config: {cfg.to_json()}')
    return cfg


def load_config(path):
    """
    Reads and parses a configuration file.

    Raises:
        ConfigError: If the file cannot be read; the message names the path.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f'cannot read config {str(path)!r}: {exc.strerror}') from exc
    return parse_config(raw)
