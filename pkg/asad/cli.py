"""
Command-line entry point: ``python run.py <command> [options]``.

Every command resolves a RunConfig (defaults < --config file < flags), opens a
run directory under the run root, echoes the resolved config there as
config.json and writes its tables next to it.
"""
import dataclasses
import datetime
import logging
import os

import click
import pandas as pd

from config import config as config_classes
from asad import create_runtime
from asad.checkpoint import load_checkpoint
from asad.dataio import (WindowSet, held_out_values, load_manifest, make_split, prepare_dataset, read_trial_file,
                         split_to_dict)
from asad.errors import ConfigError, DataError, InvariantError, SwimError
from asad.evalkit import (channel_importance, evaluate_combined, hyperparameter_grid, trial_range_experiment,
                          window_sweep)
from asad.models import NINE_CHANNELS, TOPOGRAPHIES, EvalReport, RunConfig, to_dict
from asad.selftest import run_selftest
from asad.swim import StreamDecoder, write_decisions
from asad.synth import synth_generate
from asad.trainer import train_runs, window_samples, windowset_accuracy
from asad.utils import load_json, run_directory, save_json, write_table

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ['protocol', 'held_out', 'mean', 'min', 'max', 'n_runs']
REPORT_COLUMNS = ['protocol', 'held_out', 'seed', 'val_acc', 'test_acc', 'n_test_windows']
SELFTEST_COLUMNS = ['name', 'success', 'message', 'seconds']


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def parse_channels(value):
    if value is None:
        return None
    if value.lower() == 'nine':
        return list(NINE_CHANNELS)
    return [c.strip() for c in value.split(',') if c.strip()]


def parse_held_out(values):
    """'all' means the every-trial protocol's single split."""
    out = []
    for v in values:
        if str(v).lower() in ('all', 'none'):
            out.append(None)
            continue
        try:
            out.append(int(v))
        except ValueError:
            raise click.BadParameter(f"held-out value must be an integer or 'all', got {v!r}") from None
    return out


def resolve_config(config_path=None, **flags):
    """RunConfig from the optional JSON file with non-empty flags layered on top."""
    data = {}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        data = load_json(config_path)
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: expected a JSON object")
    for key, value in flags.items():
        if value is None or value == () or value == []:
            continue
        data[key] = list(value) if isinstance(value, tuple) else value
    return RunConfig.load(data)


def open_run(runtime, run_config, command):
    name = run_config.name or datetime.datetime.now().strftime(f'{command}_%Y%m%d_%H%M%S')
    run_dir = run_directory(runtime.run_root, name)
    resolved = dataclasses.replace(run_config, name=name, train=to_dict(run_config.train_config()))
    save_json(resolved.to_dict(), os.path.join(run_dir, 'config.json'))
    logger.info(f"{command}: run directory {run_dir}")
    return run_dir


def require_manifest(run_config):
    if not run_config.manifest:
        raise ConfigError("no dataset manifest given (use --manifest or the config file)")
    return run_config.manifest


def model_configs(run_config, dataset):
    """SW_CNN/SWIM configurations sized for the loaded dataset."""
    if not dataset:
        raise DataError("the manifest lists no trials")
    swcnn_config = run_config.swcnn_config(dataset[0].n_channels)
    if 'n_subjects' not in run_config.swcnn:
        swcnn_config = dataclasses.replace(swcnn_config, n_subjects=max(t.subject_id for t in dataset) + 1)
    swim_config = run_config.swim
    if swim_config.fs != dataset[0].fs:
        raise ConfigError(f"SWIM config expects {swim_config.fs} Hz but the data is sampled at {dataset[0].fs} Hz")
    return swcnn_config, swim_config


def resolve_splits(run_config, dataset):
    held = run_config.held_out if run_config.held_out is not None else held_out_values(dataset, run_config.protocol)
    seed = run_config.train_config().split_seed
    return [make_split(dataset, run_config.protocol, h, seed) for h in held]


def checkpoint_split(checkpoint, run_config, dataset, protocol_flag, held_out_flag):
    """Split a checkpoint is scored on: flags first, then the training metadata."""
    protocol = protocol_flag or checkpoint.metadata.get('protocol') or run_config.protocol
    if held_out_flag:
        held_out = held_out_flag[0]
    elif 'held_out' in checkpoint.metadata:
        held_out = checkpoint.metadata['held_out']
    else:
        held_out = held_out_values(dataset, protocol)[0]
    return make_split(dataset, protocol, held_out, run_config.train_config().split_seed)


def test_windows(checkpoint, run_config, dataset, split):
    kind = checkpoint.model_kind
    swim_config = checkpoint.swim_config() if kind == 'swim' else run_config.swim
    window = window_samples(kind, run_config.train_config(), swim_config, dataset[0].fs)
    return WindowSet(dataset, split.partitions['test'], window, 0.0, kind == 'swcnn')


def write_report(report, run_dir):
    write_table(report.to_frame(), os.path.join(run_dir, 'eval_report.csv'), REPORT_COLUMNS)
    write_table(report.summary(), os.path.join(run_dir, 'eval_summary.csv'), SUMMARY_COLUMNS)


def data_options(fn):
    """Options shared by every command that reads a dataset."""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='RunConfig JSON file.'),
        click.option('--name', help='Run directory name (default: timestamped).'),
        click.option('--manifest', type=click.Path(dir_okay=False), help='Dataset manifest.json.'),
        click.option('--channels', help="'nine' or a comma-separated channel list."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def split_options(fn):
    fn = click.option('--held-out', multiple=True, help="Held-out speaker/subject ('all' for every-trial).")(fn)
    fn = click.option('--protocol', type=click.Choice(['every-trial', 'leave-one-speaker-out',
                                                       'leave-one-subject-out']))(fn)
    return fn


# ---------------------------------------------------------------------------
# Command group
# ---------------------------------------------------------------------------

@click.group()
@click.option('--env', help='Configuration class: development, production, testing, deterministic.')
@click.option('--log-level', help='Override SWIM_LOG_LEVEL.')
@click.option('--run-dir', help='Override SWIM_RUN_ROOT.')
@click.option('--jobs', type=int, help='Parallel training runs (forced to 1 in deterministic mode).')
@click.pass_context
def cli(ctx, env, log_level, run_dir, jobs):
    """Auditory spatial attention decoding with SW_CNN and SWIM."""
    env = env or os.environ.get('SWIM_ENV') or 'default'
    if env not in config_classes:
        raise ConfigError(f"unknown environment {env!r}; choose from {sorted(config_classes)}")
    if jobs is not None and jobs < 1:
        raise click.BadParameter('--jobs must be >= 1')
    ctx.obj = create_runtime(config_classes[env], log_level, jobs, run_dir)


@cli.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False))
@click.option('--name')
@click.option('--out', type=click.Path(file_okay=False), help='Dataset directory (default: <run>/data).')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--subjects', type=int)
@click.option('--trials', type=int)
@click.option('--duration', type=float, help='Seconds per trial.')
@click.option('--snr', type=float, help="Signal-to-noise ratio in dB ('-inf' for noise only).")
@click.option('--drift', type=float)
@click.option('--envelope-on-prob', type=float)
@click.option('--topography', type=click.Choice(TOPOGRAPHIES), help='Locus code of the informative channels.')
@click.pass_obj
def synth(runtime, config_path, name, out, seed, subjects, trials, duration, snr, drift, envelope_on_prob,
          topography):
    """Generate a synthetic dataset with known ground truth."""
    run_config = resolve_config(config_path, name=name)
    overrides = {k: v for k, v in dict(n_subjects=subjects, n_trials=trials, duration_s=duration, snr_db=snr,
                                       drift=drift, envelope_on_prob=envelope_on_prob,
                                       topography=topography).items() if v is not None}
    try:
        synth_config = dataclasses.replace(run_config.synth, **overrides)
    except ValueError as e:
        raise ConfigError(f"synth: {e}") from e
    run_config = dataclasses.replace(run_config, synth=synth_config, seeds=[seed])
    run_dir = open_run(runtime, run_config, 'synth')
    dataset = synth_generate(synth_config, seed, out or os.path.join(run_dir, 'data'))
    click.echo(dataset.manifest_path)


@cli.command()
@data_options
@split_options
@click.pass_obj
def split(runtime, config_path, name, manifest, channels, protocol, held_out):
    """Write the train/val/test partitions of a protocol as JSON."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels),
                                protocol=protocol, held_out=parse_held_out(held_out))
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    run_dir = open_run(runtime, run_config, 'split')
    for spec in resolve_splits(run_config, dataset):
        held = 'all' if spec.held_out is None else spec.held_out
        save_json(split_to_dict(spec, dataset), os.path.join(run_dir, f"split_{spec.protocol}_{held}.json"))


@cli.command()
@data_options
@split_options
@click.option('--model', type=click.Choice(['swcnn', 'swim']))
@click.option('--seed', 'seeds', type=int, multiple=True, help='Training seed (repeatable).')
@click.option('--pretrained', help='SW_CNN checkpoint (template with {held_out} and {seed}) to start SWIM from.')
@click.pass_obj
def train(runtime, config_path, name, manifest, channels, protocol, held_out, model, seeds, pretrained):
    """Train every (held-out, seed) pair and report best-validation test accuracy."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels),
                                protocol=protocol, held_out=parse_held_out(held_out), model=model, seeds=seeds,
                                pretrained=pretrained)
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    swcnn_config, swim_config = model_configs(run_config, dataset)
    splits = resolve_splits(run_config, dataset)
    run_dir = open_run(runtime, run_config, 'train')
    report, _ = train_runs(run_config.model, dataset, splits, run_config.train_config(), run_config.seeds,
                           runtime.jobs, run_dir, swcnn_config, swim_config, run_config.pretrained,
                           runtime.progress)
    write_report(report, run_dir)
    click.echo(f"mean test accuracy {report.mean_accuracy:.4f}")


@cli.command(name='eval')
@data_options
@split_options
@click.option('--checkpoint', 'checkpoints', multiple=True, required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def evaluate_cmd(runtime, config_path, name, manifest, channels, protocol, held_out, checkpoints):
    """Score saved checkpoints on the test partition they were held out for."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels))
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    held = parse_held_out(held_out)
    run_dir = open_run(runtime, run_config, 'eval')
    report = None
    for path in checkpoints:
        checkpoint = load_checkpoint(path)
        spec = checkpoint_split(checkpoint, run_config, dataset, protocol, held)
        window_set = test_windows(checkpoint, run_config, dataset, spec)
        acc = windowset_accuracy(checkpoint.to_model(), window_set, run_config.train_config().eval_batch_size)
        report = report or EvalReport(spec.protocol)
        report.add(spec.held_out, checkpoint.metadata.get('seed'), checkpoint.metadata.get('val_acc'), acc,
                   len(window_set))
        logger.info(f"{path}: test accuracy {acc:.4f} on {len(window_set)} windows")
    write_report(report, run_dir)


@cli.command()
@data_options
@split_options
@click.option('--checkpoint-all', required=True, type=click.Path(dir_okay=False))
@click.option('--checkpoint-nine', required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def combine(runtime, config_path, name, manifest, channels, protocol, held_out, checkpoint_all, checkpoint_nine):
    """Average the posteriors of an all-channel and a nine-channel model."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels))
    ckpt_all, ckpt_nine = load_checkpoint(checkpoint_all), load_checkpoint(checkpoint_nine)
    if ckpt_all.model_kind != ckpt_nine.model_kind:
        raise ConfigError(f"cannot combine a {ckpt_all.model_kind} with a {ckpt_nine.model_kind} model")
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    nine = prepare_dataset(run_config.manifest, NINE_CHANNELS)
    spec = checkpoint_split(ckpt_all, run_config, dataset, protocol, parse_held_out(held_out))
    run_dir = open_run(runtime, run_config, 'combine')
    table = evaluate_combined(ckpt_all, ckpt_nine, test_windows(ckpt_all, run_config, dataset, spec),
                              test_windows(ckpt_nine, run_config, nine, spec),
                              run_config.train_config().eval_batch_size)
    write_table(table, os.path.join(run_dir, 'combine.csv'))


@cli.command(name='ablate-channels')
@data_options
@split_options
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def ablate_channels(runtime, config_path, name, manifest, channels, protocol, held_out, checkpoint):
    """Accuracy drop when each channel is zeroed."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels))
    ckpt = load_checkpoint(checkpoint)
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    spec = checkpoint_split(ckpt, run_config, dataset, protocol, parse_held_out(held_out))
    run_dir = open_run(runtime, run_config, 'ablate-channels')
    table = channel_importance(ckpt, test_windows(ckpt, run_config, dataset, spec), dataset[0].channel_names,
                               run_config.train_config().eval_batch_size, runtime.progress)
    write_table(table, os.path.join(run_dir, 'channel_importance.csv'))


@cli.command(name='sweep-window')
@data_options
@split_options
@click.option('--swim-checkpoint', type=click.Path(dir_okay=False))
@click.option('--swcnn-checkpoint', type=click.Path(dir_okay=False))
@click.option('--length', 'lengths', type=float, multiple=True, help='Window length in seconds (repeatable).')
@click.pass_obj
def sweep_window(runtime, config_path, name, manifest, channels, protocol, held_out, swim_checkpoint,
                 swcnn_checkpoint, lengths):
    """Accuracy of SWIM and SW_CNN as a function of the decision window length."""
    if not swim_checkpoint and not swcnn_checkpoint:
        raise click.UsageError('give --swim-checkpoint, --swcnn-checkpoint or both')
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels),
                                window_lengths=lengths)
    swim_ckpt = load_checkpoint(swim_checkpoint) if swim_checkpoint else None
    swcnn_ckpt = load_checkpoint(swcnn_checkpoint) if swcnn_checkpoint else None
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    spec = checkpoint_split(swim_ckpt or swcnn_ckpt, run_config, dataset, protocol, parse_held_out(held_out))
    run_dir = open_run(runtime, run_config, 'sweep-window')
    table = window_sweep(swim_ckpt, swcnn_ckpt, dataset, spec.partitions['test'], run_config.window_lengths,
                         progress=runtime.progress)
    write_table(table, os.path.join(run_dir, 'window_sweep.csv'))


@cli.command(name='trial-range')
@data_options
@click.option('--range', 'ranges', multiple=True, help="Training slice 'lo,hi' as trial fractions (repeatable).")
@click.option('--seed', 'seeds', type=int, multiple=True)
@click.pass_obj
def trial_range(runtime, config_path, name, manifest, channels, ranges, seeds):
    """Train SW_CNN on one slice of every trial at a time."""
    parsed = []
    for r in ranges:
        try:
            lo, hi = (float(v) for v in r.split(','))
        except ValueError:
            raise click.BadParameter(f"range must look like 'lo,hi', got {r!r}") from None
        parsed.append([lo, hi])
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels),
                                trial_ranges=parsed, seeds=seeds, model='swcnn')
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    swcnn_config, _ = model_configs(run_config, dataset)
    run_dir = open_run(runtime, run_config, 'trial-range')
    table = trial_range_experiment(dataset, [tuple(r) for r in run_config.trial_ranges], run_config.train_config(),
                                   run_config.seeds, swcnn_config, runtime.progress)
    write_table(table, os.path.join(run_dir, 'trial_range.csv'))


@cli.command(name='stream-replay')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False))
@click.option('--name')
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--trial', 'trial_path', required=True, type=click.Path(dir_okay=False), help='Raw float32 trial file.')
@click.option('--manifest', type=click.Path(dir_okay=False), help='Manifest giving the file channel layout.')
@click.option('--channels', help="'nine' or a comma-separated channel list.")
@click.option('--out', type=click.Path(dir_okay=False), help='Decisions CSV (default: <run>/decisions_<trial>.csv).')
@click.pass_obj
def stream_replay(runtime, config_path, name, checkpoint, trial_path, manifest, channels, out):
    """Feed a recording to the streaming decoder one hop at a time."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels))
    ckpt = load_checkpoint(checkpoint)
    if ckpt.model_kind != 'swim':
        raise ConfigError(f"stream-replay needs a SWIM checkpoint, got {ckpt.model_kind}")
    if run_config.manifest:
        names = list(load_manifest(run_config.manifest)['channel_names'])
        data = read_trial_file(trial_path, len(names), label=trial_path)
        if run_config.channels:
            missing = [c for c in run_config.channels if c not in names]
            if missing:
                raise DataError(f"channel(s) {missing} not in {run_config.manifest}")
            data = data[[names.index(c) for c in run_config.channels]]
    else:
        data = read_trial_file(trial_path, ckpt.in_channels, label=trial_path)
    run_dir = open_run(runtime, run_config, 'stream-replay')
    table = StreamDecoder.replay(ckpt, data)
    stem = os.path.splitext(os.path.basename(trial_path))[0]
    write_decisions(table, out or os.path.join(run_dir, f"decisions_{stem}.csv"))


@cli.command()
@click.option('--full', is_flag=True, help='Acceptance-size oracles (slow).')
@click.option('--name')
@click.pass_obj
def selftest(runtime, full, name):
    """Gradient, scan, streaming and counting oracles."""
    run_dir = open_run(runtime, RunConfig(name=name), 'selftest')
    results = run_selftest(full)
    write_table(pd.DataFrame(results), os.path.join(run_dir, 'selftest.csv'), SELFTEST_COLUMNS)
    failed = [r['name'] for r in results if not r['success']]
    for r in results:
        click.echo(f"{'ok  ' if r['success'] else 'FAIL'} {r['name']}: {r['message']}")
    if failed:
        raise InvariantError(f"selftest failed: {', '.join(failed)}")


@cli.command()
@data_options
@split_options
@click.option('--model', type=click.Choice(['swcnn', 'swim']))
@click.option('--param', type=click.Choice(['alpha', 'beta', 'gamma']))
@click.option('--value', 'values', type=float, multiple=True, help='Grid value (repeatable).')
@click.option('--seed', 'seeds', type=int, multiple=True)
@click.option('--pretrained')
@click.pass_obj
def grid(runtime, config_path, name, manifest, channels, protocol, held_out, model, param, values, seeds, pretrained):
    """Vary one of alpha, beta, gamma and report test accuracy across seeds."""
    run_config = resolve_config(config_path, name=name, manifest=manifest, channels=parse_channels(channels),
                                protocol=protocol, held_out=parse_held_out(held_out), model=model, seeds=seeds,
                                grid_param=param, grid_values=values, pretrained=pretrained)
    dataset = prepare_dataset(require_manifest(run_config), run_config.channels)
    swcnn_config, swim_config = model_configs(run_config, dataset)
    splits = resolve_splits(run_config, dataset)
    run_dir = open_run(runtime, run_config, 'grid')
    table = hyperparameter_grid(run_config.model, dataset, splits, run_config.grid_param, run_config.grid_values,
                                run_config.train_config(), run_config.seeds, runtime.jobs, swcnn_config,
                                swim_config, run_config.pretrained)
    write_table(table, os.path.join(run_dir, 'grid.csv'))


# ---------------------------------------------------------------------------
# Process boundary
# ---------------------------------------------------------------------------

def main(argv=None):
    """Run the CLI and map failures to exit codes (1 usage, 2 data, 3 invariant)."""
    try:
        result = cli.main(args=argv, prog_name='run.py', standalone_mode=False)
    except click.exceptions.Abort:
        click.echo('Aborted!', err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except SwimError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}")
        return 2
    return result if isinstance(result, int) else 0
