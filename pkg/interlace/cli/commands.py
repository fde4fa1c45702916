"""
CLI commands: train, eval, tbatch, synth, describe, sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import functools
import logging
import os
import time

import click

from interlace.cli import cli
from interlace.errors import CheckpointError, IngestError, InterlaceError
from interlace.evalkit import advance, baseline_reports, evaluate_test, sweep, sweep_settings
from interlace.forms import load_run_config, resolve_run_config
from interlace.ingest import (
    SplitConfig,
    annotate_deltas,
    build_arrays,
    chronological_split,
    describe_dataset,
    load_csv,
    serialize_csv,
)
from interlace.model import EmbeddingBank, ModelDims, ModelParams, load_checkpoint, save_checkpoint
from interlace.runlog import (
    ensure_dir,
    register_listeners,
    write_early_warning,
    write_metrics,
    write_sweep,
)
from interlace.synth import PRESETS, generate
from interlace.tbatch import build_tbatches, naive_plan, plan_stats
from interlace.trainer import TASKS, forward_epoch, run_experiment

logger = logging.getLogger(__name__)

STATS_COLUMNS = ('num_interactions', 'num_batches', 'mean_batch', 'max_batch', 'parallelism')


def use_color():
    """False when NO_COLOR is set, otherwise let click decide."""
    return False if os.getenv('NO_COLOR') else None


def handles_errors(command):
    """Turn library errors into a one-line message and exit code 1."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (InterlaceError, OSError) as exc:
            logger.error(f"{command.__name__} failed: {exc}")
            click.secho(f"error: {exc}", fg='red', err=True, color=use_color())
            raise click.exceptions.Exit(1)
    return wrapper


def _resolve(runtime, config_path, **flags):
    file_values = load_run_config(config_path) if config_path else {}
    flags['threads'] = click.get_current_context().meta.get('threads')
    return resolve_run_config(runtime.settings, file_values, flags)


def _fmt(value):
    return '%.6g' % value if isinstance(value, float) else str(value)


def _load_dataset(path):
    dataset = load_csv(path)
    if not len(dataset):
        raise IngestError(f"{path} has no interactions")
    return dataset


# ==================================================================
# TRAINING AND EVALUATION
# ==================================================================
@cli.command('train')
@click.option('--data', required=True, type=click.Path(dir_okay=False), help='Interaction CSV.')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='RunConfig file.')
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Output directory.')
@click.option('--task', type=click.Choice(TASKS), default=None)
@click.option('--epochs', type=click.IntRange(min=1), default=None)
@click.option('--embed-dim', type=click.IntRange(min=1), default=None)
@click.option('--seed', type=click.IntRange(min=0), default=None)
@click.option('--learning-rate', type=click.FloatRange(min=0), default=None)
@click.option('--bptt-window', type=click.IntRange(min=1), default=None)
@click.option('--early-warning', type=click.IntRange(min=1), default=None,
              help='Early-warning horizon (state task).')
@click.pass_obj
@handles_errors
def train_command(runtime, data, config_path, out, task, epochs, embed_dim, seed,
                  learning_rate, bptt_window, early_warning):
    """Train on the training range, keep the best validation epoch, evaluate on test."""
    run = _resolve(
        runtime, config_path, task=task, epochs=epochs, embed_dim=embed_dim, seed=seed,
        learning_rate=learning_rate, bptt_window=bptt_window, early_warning=early_warning,
    )
    dataset = _load_dataset(data)
    logger.info(f"Loaded {data}: {describe_dataset(dataset)}")

    horizon = run.early_warning if run.train.task == 'statechange' else None
    result, report, arrays, split = run_experiment(
        dataset, run.train, run.split, embed_dim=run.embed_dim,
        normalize_deltas=run.normalize_deltas, horizon=horizon,
        listeners=register_listeners(out), progress=runtime.get('PROGRESS'),
    )
    save_checkpoint(
        out, result.params, result.bank, delta_scale=arrays.scale,
        extra={
            'task': run.train.task,
            'train_frac': '%.17g' % run.split.train_frac,
            'valid_frac': '%.17g' % run.split.valid_frac,
            'test_frac': '%.17g' % run.split.test_frac,
            'best_epoch': result.best_epoch,
        },
    )
    write_metrics(out, [report])
    if report.early_warning:
        write_early_warning(out, report.early_warning)
    click.echo(
        f"best epoch {result.best_epoch}: " +
        ', '.join(f"{k}={_fmt(v)}" for k, v in report.as_row().items())
    )


@cli.command('eval')
@click.option('--checkpoint', required=True, type=click.Path(file_okay=False),
              help='Directory written by train.')
@click.option('--data', required=True, type=click.Path(dir_okay=False), help='Interaction CSV.')
@click.option('--task', type=click.Choice(TASKS), default='interaction', show_default=True)
@click.option('--early-warning', type=click.IntRange(min=1), default=None,
              help='Write early_warning.csv with this horizon (state task).')
@click.option('--baselines', is_flag=True, default=False,
              help='Add repeat and popularity baseline rows (interaction task).')
@click.option('--out', type=click.Path(file_okay=False), default=None,
              help='Output directory (defaults to the checkpoint directory).')
@click.pass_obj
@handles_errors
def eval_command(runtime, checkpoint, data, task, early_warning, baselines, out):
    """Evaluate a checkpoint on the test range of its split."""
    if baselines and task != 'interaction':
        raise click.UsageError('--baselines applies to the interaction task only')
    params, bank, header = load_checkpoint(checkpoint)
    dataset = _load_dataset(data)
    dims = params.dims
    if (dataset.num_users, dataset.num_items, dataset.feature_dim) != \
            (dims.num_users, dims.num_items, dims.feature_dim):
        raise CheckpointError(
            f"{data} does not match the checkpoint: {dataset.num_users} users, "
            f"{dataset.num_items} items, {dataset.feature_dim} features"
        )

    try:
        scale = float(header['delta_scale'])
        split_cfg = SplitConfig(
            train_frac=float(header.get('train_frac', runtime.get('TRAIN_FRAC'))),
            valid_frac=float(header.get('valid_frac', runtime.get('VALID_FRAC'))),
            test_frac=float(header.get('test_frac', runtime.get('TEST_FRAC'))),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header lacks {exc}") from None
    except ValueError as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    split = chronological_split(dataset, split_cfg)
    arrays = build_arrays(dataset, annotate_deltas(dataset), scale)
    if bank is None:
        bank = EmbeddingBank.fresh(params)
        advance(params, bank, arrays, split.train)

    report = evaluate_test(params, bank, arrays, split, task, horizon=early_warning)
    reports = [report]
    if baselines:
        reports.extend(baseline_reports(arrays, split.test))
    out = out or checkpoint
    write_metrics(out, reports)
    if report.early_warning:
        write_early_warning(out, report.early_warning)
    for row in reports:
        click.echo(', '.join(f"{k}={_fmt(v)}" for k, v in row.as_row().items()))


@cli.command('sweep')
@click.option('--data', required=True, type=click.Path(dir_okay=False))
@click.option('--config', 'config_path', type=click.Path(dir_okay=False))
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.option('--train-fracs', default=None, help='Comma-separated training fractions.')
@click.option('--embed-dims', default=None, help='Comma-separated embedding sizes.')
@click.pass_obj
@handles_errors
def sweep_command(runtime, data, config_path, out, train_fracs, embed_dims):
    """Train and evaluate once per training fraction or embedding size."""
    if bool(train_fracs) == bool(embed_dims):
        raise click.UsageError('give exactly one of --train-fracs and --embed-dims')
    try:
        settings = sweep_settings(
            train_fracs=[float(x) for x in train_fracs.split(',')] if train_fracs else None,
            embed_dims=[int(x) for x in embed_dims.split(',')] if embed_dims else None,
        )
    except ValueError as exc:
        raise click.UsageError(f"bad sweep list: {exc}") from None

    run = _resolve(runtime, config_path)
    dataset = _load_dataset(data)
    table = sweep(
        dataset, run.train, run.split, settings,
        embed_dim=run.embed_dim, normalize_deltas=run.normalize_deltas,
    )
    write_sweep(out, table)
    click.echo(table.to_csv(index=False, lineterminator='\n'), nl=False)


# ==================================================================
# DATA AND SCHEDULING
# ==================================================================
def _time_forward(params, arrays, plan, workers):
    start = time.perf_counter()
    forward_epoch(params, arrays, plan, workers=workers)
    return time.perf_counter() - start


@cli.command('tbatch')
@click.option('--data', required=True, type=click.Path(dir_okay=False), help='Interaction CSV.')
@click.option('--timing/--no-timing', default=True, show_default=True,
              help='Also time one forward pass under both plans.')
@click.option('--embed-dim', type=click.IntRange(min=1), default=None)
@click.pass_obj
@handles_errors
def tbatch_command(runtime, data, timing, embed_dim):
    """Print t-Batch plan statistics and the batched vs sequential forward time."""
    dataset = _load_dataset(data)
    started = time.perf_counter()
    plan = build_tbatches(dataset)
    build_seconds = time.perf_counter() - started
    stats = plan_stats(plan)
    logger.info(f"Plan built in {build_seconds:.3f}s with {plan.operations} scheduler steps")

    click.echo(','.join(STATS_COLUMNS))
    click.echo(','.join(_fmt(stats[name]) for name in STATS_COLUMNS))
    if not timing:
        return

    workers = click.get_current_context().meta.get('threads') or int(runtime.get('THREADS', 1))
    size = embed_dim or int(runtime.get('EMBED_DIM', 128))
    dims = ModelDims(dataset.num_users, dataset.num_items, dataset.feature_dim, n=size, m=size)
    params = ModelParams.initialize(dims, seed=int(runtime.get('SEED', 0)))
    arrays = build_arrays(dataset)

    naive_seconds = _time_forward(params, arrays, naive_plan(dataset), 1)
    batched_seconds = _time_forward(params, arrays, plan, workers)
    click.echo('plan,workers,seconds,speedup')
    click.echo(f"naive,1,{naive_seconds:.6f},1")
    click.echo(
        f"tbatch,{workers},{batched_seconds:.6f},"
        f"{naive_seconds / max(batched_seconds, 1e-12):.3f}"
    )


cli.add_command(tbatch_command, 'tbatch-stats')


@cli.command('synth')
@click.option('--preset', required=True, type=click.Choice(PRESETS))
@click.option('--users', required=True, type=click.IntRange(min=1))
@click.option('--items', required=True, type=click.IntRange(min=2))
@click.option('--events', required=True, type=click.IntRange(min=1))
@click.option('--seed', type=click.IntRange(min=0), default=0, show_default=True)
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='CSV to write.')
@handles_errors
def synth_command(preset, users, items, events, seed, out):
    """Write a synthetic interaction CSV."""
    dataset = generate(preset, users, items, events, seed)
    parent = os.path.dirname(out)
    if parent:
        ensure_dir(parent)
    with open(out, 'w', encoding='utf-8', newline='') as handle:
        handle.write(serialize_csv(dataset))
    click.echo(
        f"wrote {len(dataset)} interactions ({dataset.num_users} users, "
        f"{dataset.num_items} items) to {out}"
    )


@cli.command('describe')
@click.option('--data', required=True, type=click.Path(dir_okay=False), help='Interaction CSV.')
@handles_errors
def describe_command(data):
    """Print dataset summary counts as key,value CSV."""
    summary = describe_dataset(load_csv(data))
    click.echo('key,value')
    for key, value in summary.items():
        click.echo(f"{key},{_fmt(value)}")
