"""
Public interface of tiednet.

Everything a caller needs to build, audit, check, train and persist the
conventional and transpose-tied models is re-exported here.
"""
from .audit import (
    AuditReport,
    Comparison,
    LayerAudit,
    compare_report,
    count_macs,
    count_params,
    param_count,
)
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .cli import cli, cli_dispatch
from .config import ModelConfig, load_config, parse_config
from .data import SyntheticDataset, gen_synthetic, linear_readout_accuracy
from .errors import *
from .gradcheck import GradCheckReport, grad_check
from .nn import (
    BatchNorm2d,
    BottleneckBlock,
    Conv2d,
    EncoderLayer,
    FfnLayer,
    LayerNorm,
    LinearLayer,
    MhaLayer,
    Module,
    PatchEmbed,
)
from .optim import TrainState, learning_rate, optimizer_step
from .tensor import Parameter, Tape, Tensor, backward, no_grad
from .tied import SharedStage, TiedBottleneckBlock, TiedFfnLayer, TiedMhaLayer
from .train import evaluate, train
from .zoo import Model, ResNet, VisionTransformer, build_model, init_weights
