"""
Command-line interface.

    tiednet audit     --config F [--resolution N] [--json]
    tiednet compare   --config-a F --config-b G [--resolution N] [--json]
    tiednet gradcheck --config F [--seed S] [--eps E] [--tol T]
    tiednet train     --config F --steps N --batch B --optimizer sgd|adamw
                      --lr X [--seed S] --out CKPT
    tiednet eval      --config F --ckpt P [--seed S]

Exit codes: 0 success, 1 validation failure (bad config, failed gradient
check, unreadable checkpoint, ...), 2 usage error.
"""
import sys
from contextlib import contextmanager
from pathlib import Path

import click

from .audit import compare_report, count_macs
from .checkpoint import load_into, save_checkpoint
from .config import load_config
from .data import gen_synthetic
from .errors import TiedNetError
from .gradcheck import grad_check
from .logger import get_logger
from .optim import OPTIMIZERS, SCHEDULES, TrainState
from .settings import config
from .train import evaluate, train
from .zoo import build_model

logger = get_logger(__name__)

EVAL_NOISE_SEED = 1


@contextmanager
def _failures_as_exit_code():
    """Reports library and I/O errors on stderr with exit code 1."""
    try:
        yield
    except (TiedNetError, OSError) as exc:
        logger.debug(f'command failed: {exc!r}')
        raise click.ClickException(str(exc)) from exc


def _config_option(*names, help_text='Model configuration (JSON).'):
    return click.option(*names, required=True, type=click.Path(dir_okay=False), help=help_text)


@click.group()
def cli():
    """Transpose-tied ViT / ResNet toolkit: audit, gradient check, train, eval."""


@cli.command()
@_config_option('--config', 'config_path')
@click.option('--resolution', type=click.IntRange(min=1), default=None,
              help='Input side for MAC counting (default: config image_size).')
@click.option('--json', 'as_json', is_flag=True, help='Emit the JSON report.')
def audit(config_path, resolution, as_json):
    """Count parameters and MACs of a configured model."""
    with _failures_as_exit_code():
        model = build_model(load_config(config_path), seed=config.SEED)
        report = count_macs(model, resolution)
    click.echo(report.to_json() if as_json else report.to_text())


@cli.command()
@_config_option('--config-a', 'config_a', help_text='Reference configuration.')
@_config_option('--config-b', 'config_b', help_text='Candidate configuration.')
@click.option('--resolution', type=click.IntRange(min=1), default=None)
@click.option('--json', 'as_json', is_flag=True)
def compare(config_a, config_b, resolution, as_json):
    """Compare the audits of two configurations (b relative to a)."""
    with _failures_as_exit_code():
        reports = [
            count_macs(build_model(load_config(path), seed=config.SEED), resolution)
            for path in (config_a, config_b)
        ]
        comparison = compare_report(*reports)
    click.echo(comparison.to_json() if as_json else comparison.to_text())


@cli.command()
@_config_option('--config', 'config_path')
@click.option('--seed', type=int, default=config.SEED, show_default=True)
@click.option('--eps', type=float, default=1e-4, show_default=True)
@click.option('--tol', type=float, default=1e-6, show_default=True)
@click.option('--coords', type=click.IntRange(min=1), default=config.GRADCHECK_COORDS,
              show_default=True, help='Coordinates sampled per parameter.')
@click.pass_context
def gradcheck(ctx, config_path, seed, eps, tol, coords):
    """Finite-difference check of every parameter's gradient (f64)."""
    with _failures_as_exit_code():
        cfg = load_config(config_path).model_copy(update={'dtype': 'f64'})
        model = build_model(cfg, seed=seed)
        report = grad_check(model, seed=seed, eps=eps, tol=tol, coords=coords)
    for line in report.lines():
        click.echo(line)
    if not report.passed:
        click.echo(f'gradient check failed for {len(report.failures())} parameter(s)', err=True)
        ctx.exit(1)


@cli.command(name='train')
@_config_option('--config', 'config_path')
@click.option('--steps', type=click.IntRange(min=0), required=True)
@click.option('--batch', type=click.IntRange(min=1), required=True)
@click.option('--optimizer', type=click.Choice(OPTIMIZERS), required=True)
@click.option('--lr', type=float, required=True)
@click.option('--seed', type=int, default=config.SEED, show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True)
@click.option('--schedule', type=click.Choice(SCHEDULES), default='constant', show_default=True)
@click.option('--weight-decay', type=float, default=0.0, show_default=True)
@click.option('--momentum', type=float, default=0.9, show_default=True)
@click.option('--n-per-class', type=click.IntRange(min=1), default=64, show_default=True)
@click.option('--metrics', 'metrics_path', type=click.Path(dir_okay=False), default=None,
              help='Per-step JSON lines (default: <out>.metrics.jsonl).')
@click.option('--progress/--no-progress', default=config.PROGRESS)
def train_command(config_path, steps, batch, optimizer, lr, seed, out_path, schedule,
                  weight_decay, momentum, n_per_class, metrics_path, progress):
    """Train on synthetic data and save a checkpoint."""
    with _failures_as_exit_code():
        cfg = load_config(config_path)
        model = build_model(cfg, seed=seed)
        data = gen_synthetic(
            cfg.num_classes, n_per_class, cfg.image_size, seed,
            channels=cfg.in_channels, dtype=cfg.dtype,
        )
        state = TrainState(
            optimizer=optimizer, lr=lr, schedule=schedule, total_steps=steps,
            momentum=momentum, weight_decay=weight_decay, seed=seed,
        )
        state, metrics = train(model, data, steps, batch, state, progress=progress)

        for entry in metrics:
            click.echo(entry.to_line())
        save_checkpoint(model, state, out_path)
        metrics_path = Path(metrics_path or f'{out_path}.metrics.jsonl')
        metrics_path.write_text(''.join(f'{entry.to_json()}\n' for entry in metrics),
                                encoding='utf-8')

    final = metrics[-1] if metrics else None
    if final is not None:
        click.echo(f'final loss {final.loss:.6f} accuracy {final.accuracy:.4f}')
    click.echo(f'saved {out_path}')


@cli.command(name='eval')
@_config_option('--config', 'config_path')
@click.option('--ckpt', 'ckpt_path', type=click.Path(dir_okay=False), required=True)
@click.option('--seed', type=int, default=None,
              help='Data seed (default: the training seed stored in the checkpoint).')
@click.option('--n-per-class', type=click.IntRange(min=1), default=64, show_default=True)
def eval_command(config_path, ckpt_path, seed, n_per_class):
    """Evaluate a checkpoint on held-out synthetic data."""
    with _failures_as_exit_code():
        cfg = load_config(config_path)
        model = build_model(cfg, seed=0)
        state = load_into(model, ckpt_path)
        if seed is None:
            seed = state.seed if state is not None else config.SEED
        # Same class patterns as training, fresh noise.
        data = gen_synthetic(
            cfg.num_classes, n_per_class, cfg.image_size, seed,
            channels=cfg.in_channels, noise_seed=EVAL_NOISE_SEED, dtype=cfg.dtype,
        )
        loss, acc = evaluate(model, data)
    click.echo(f'eval loss {loss:.6f} accuracy {acc:.4f}')


def cli_dispatch(argv=None):
    """
    Runs the CLI on `argv` and returns the exit code instead of exiting.

    Returns:
        int: 0 on success, 1 on validation failure, 2 on usage error.
    """
    try:
        rv = cli.main(args=argv, prog_name='tiednet', standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo('Aborted!', err=True)
        return 1
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))
