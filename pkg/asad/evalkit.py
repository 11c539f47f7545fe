"""
Accuracy evaluation and the experiment tables: model combination, channel
importance, window-length sweep, trial train range and hyperparameter grids.
"""
import logging
from dataclasses import replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from asad import ops
from asad.checkpoint import Checkpoint
from asad.dataio import EVERY_TRIAL_RANGES, WindowSet, center, split_by_ranges, stack_windows
from asad.errors import DataError, ShapeError
from asad.models import TrainConfig
from asad.swim import SWIM
from asad.trainer import predict_logits, train, train_runs, windowset_accuracy

logger = logging.getLogger(__name__)

IMPORTANCE_COLUMNS = ['channel_name', 'delta_acc', 'normalized']
SWEEP_COLUMNS = ['length_s', 'model', 'accuracy']
TRIAL_RANGE_COLUMNS = ['lo', 'hi', 'accuracy']
GRID_COLUMNS = ['param', 'value', 'mean', 'min', 'max']
COMBINE_COLUMNS = ['model', 'accuracy', 'n_windows']


def _model(source):
    return source.to_model() if isinstance(source, Checkpoint) else source


def _in_channels(model):
    return model.cnn.config.in_channels if isinstance(model, SWIM) else model.config.in_channels


def as_arrays(windows):
    """DecisionWindow list, WindowSet or (X, labels) -> (X [B, C, T], labels)."""
    if isinstance(windows, WindowSet):
        X, labels, _ = windows.batch(np.arange(len(windows)))
    elif isinstance(windows, tuple):
        X, labels = np.asarray(windows[0]), np.asarray(windows[1], dtype=np.int64)
    else:
        if not windows:
            raise DataError("cannot evaluate an empty window list")
        X, labels, _ = stack_windows(windows)
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty window list")
    return X, labels


def evaluate(model, windows, batch_size=256):
    """Fraction of windows whose locus-logit argmax equals the label."""
    model = _model(model)
    X, labels = as_arrays(windows)
    if X.shape[1] != _in_channels(model):
        raise ShapeError(f"windows have {X.shape[1]} channels, model expects {_in_channels(model)}")
    logits = predict_logits(model, X, batch_size)
    return float(np.mean(logits.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# Combination
# ---------------------------------------------------------------------------

def combine_models(logits_a, logits_b):
    """0.5 * softmax(a[:2]) + 0.5 * softmax(b[:2]); works on [K] or [B, K]."""
    a = np.asarray(logits_a, dtype=np.float64)[..., :2]
    b = np.asarray(logits_b, dtype=np.float64)[..., :2]
    return 0.5 * ops.softmax(a) + 0.5 * ops.softmax(b)


def evaluate_combined(model_all, model_nine, windows_all, windows_nine, batch_size=256):
    """Accuracy of the all-channel model, the reduced model and their posterior average."""
    model_all, model_nine = _model(model_all), _model(model_nine)
    X_all, labels = as_arrays(windows_all)
    X_nine, labels_nine = as_arrays(windows_nine)
    if not np.array_equal(labels, labels_nine):
        raise DataError("combined evaluation needs the same windows in both channel sets")
    logits_all = predict_logits(model_all, X_all, batch_size)
    logits_nine = predict_logits(model_nine, X_nine, batch_size)
    posterior = combine_models(logits_all, logits_nine)
    rows = [
        {'model': 'all-channels', 'accuracy': float(np.mean(logits_all.argmax(1) == labels)), 'n_windows': len(labels)},
        {'model': 'nine-channels', 'accuracy': float(np.mean(logits_nine.argmax(1) == labels)), 'n_windows': len(labels)},
        {'model': 'combined', 'accuracy': float(np.mean(posterior.argmax(1) == labels)), 'n_windows': len(labels)},
    ]
    return pd.DataFrame(rows, columns=COMBINE_COLUMNS)


# ---------------------------------------------------------------------------
# Channel importance
# ---------------------------------------------------------------------------

def mask_channels(X, channels):
    out = np.array(X, copy=True)
    out[:, list(channels), :] = 0
    return out


def channel_importance(model, windows, channel_names, batch_size=256, progress=False):
    """Accuracy drop when each channel is zeroed in every window, raw and min-max normalized."""
    model = _model(model)
    X, labels = as_arrays(windows)
    if len(channel_names) != X.shape[1]:
        raise ShapeError(f"{len(channel_names)} channel names for {X.shape[1]}-channel windows")
    base = evaluate(model, (X, labels), batch_size)
    channels = range(X.shape[1])
    if progress:
        channels = tqdm(channels, desc="channels", leave=False)
    deltas = np.array([base - evaluate(model, (mask_channels(X, [c]), labels), batch_size) for c in channels])
    span = deltas.max() - deltas.min()
    normalized = (deltas - deltas.min()) / span if span > 0 else np.zeros_like(deltas)
    logger.info(f"Channel importance: base accuracy {base:.4f}, largest drop {deltas.max():.4f}")
    return pd.DataFrame({'channel_name': list(channel_names), 'delta_acc': deltas, 'normalized': normalized},
                        columns=IMPORTANCE_COLUMNS)


# ---------------------------------------------------------------------------
# Window-length sweep
# ---------------------------------------------------------------------------

def decision_ends(segments, length, step):
    """(trial_index, end) pairs: first end leaves room for one span of ``length``, then one per step."""
    ends = []
    for seg in segments:
        for end in range(seg.start + length, seg.stop + 1, step):
            ends.append((seg.trial_index, end))
    return ends


def _spans(dataset, ends, length, centered):
    X = np.stack([dataset[i].data[:, e - length:e] for i, e in ends])
    return center(X) if centered else X


def window_sweep(swim_model, swcnn_model, dataset, segments, lengths_seconds, batch_size=32, progress=False):
    """SWIM and SW_CNN accuracy when each decision may look back t seconds.

    Each length is scored on its own grid of decision instants, one per second
    of the test segments once t seconds of history exist. At t=1 the SW_CNN
    row covers exactly the non-overlapping 1 s test windows.
    """
    swim_model, swcnn_model = _model(swim_model), _model(swcnn_model)
    fs = int(dataset[0].fs)
    shortest = min(seg.length for seg in segments)
    lengths = []
    for t in lengths_seconds:
        if int(round(t * fs)) > shortest:
            logger.warning(f"window length {t} s exceeds the shortest test segment ({shortest / fs:.1f} s); skipped")
        else:
            lengths.append(t)
    if not lengths:
        raise DataError("no window length fits the test segments")

    rows = []
    iterator = tqdm(lengths, desc="window sweep", leave=False) if progress else lengths
    for t in iterator:
        n = int(round(t * fs))
        ends = decision_ends(segments, n, fs)
        labels = np.array([dataset[i].locus_label for i, _ in ends], dtype=np.int64)
        for name, model, centered in (('swim', swim_model, False), ('swcnn', swcnn_model, True)):
            if model is None:
                continue
            if name == 'swim' and n < model.config.window_samples:
                logger.warning(f"SWIM needs at least {model.config.cnn_window_seconds} s; {t} s skipped")
                continue
            correct = 0
            for start in range(0, len(ends), batch_size):
                chunk = ends[start:start + batch_size]
                logits = predict_logits(model, _spans(dataset, chunk, n, centered), batch_size)
                correct += int(np.sum(logits.argmax(axis=1) == labels[start:start + batch_size]))
            rows.append({'length_s': t, 'model': name, 'accuracy': correct / len(ends)})
            logger.info(f"{name} at {t} s: {correct / len(ends):.4f} over {len(ends)} decisions")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


# ---------------------------------------------------------------------------
# Trial train range
# ---------------------------------------------------------------------------

def trial_range_experiment(dataset, ranges, config=None, seeds=None, swcnn_config=None, progress=False):
    """Train SW_CNN on one slice of every trial, validate on 70-85 %, test on the last 15 %."""
    config = config or TrainConfig.for_model('swcnn')
    val_lo, val_hi = EVERY_TRIAL_RANGES['val']
    test_lo, _ = EVERY_TRIAL_RANGES['test']
    seeds = list(config.seeds if seeds is None else seeds)
    rows = []
    for lo, hi in ranges:
        if not 0.0 <= lo < hi <= test_lo:
            raise DataError(f"train range ({lo}, {hi}) must lie within [0, {test_lo}] and not overlap the test slice")
        split = split_by_ranges(dataset, {'train': (lo, hi), 'val': (val_lo, val_hi), 'test': EVERY_TRIAL_RANGES['test']},
                                'every-trial')
        accs = []
        for seed in seeds:
            result = train('swcnn', dataset, split, config, seed, swcnn_config, progress=progress)
            window = int(round(config.window_seconds * dataset[0].fs))
            test_set = WindowSet(dataset, split.partitions['test'], window, 0.0)
            accs.append(windowset_accuracy(result.model, test_set, config.eval_batch_size))
        rows.append({'lo': lo, 'hi': hi, 'accuracy': float(np.mean(accs))})
        logger.info(f"train range {lo:.2f}-{hi:.2f}: {rows[-1]['accuracy']:.4f}")
    return pd.DataFrame(rows, columns=TRIAL_RANGE_COLUMNS)


# ---------------------------------------------------------------------------
# Hyperparameter grid
# ---------------------------------------------------------------------------

GRID_PARAMS = ('alpha', 'beta', 'gamma')


def hyperparameter_grid(model_kind, dataset, splits, param, values, config=None, seeds=None, jobs=1,
                        swcnn_config=None, swim_config=None, pretrained=None):
    """Vary one of alpha, beta, gamma and report mean/min/max test accuracy across seeds."""
    if param not in GRID_PARAMS:
        raise DataError(f"grid parameter must be one of {GRID_PARAMS}, got {param!r}")
    config = config or TrainConfig.for_model(model_kind)
    rows = []
    for value in values:
        report, _ = train_runs(model_kind, dataset, splits, replace(config, **{param: value}), seeds, jobs,
                               swcnn_config=swcnn_config, swim_config=swim_config, pretrained=pretrained)
        per_seed = report.to_frame().groupby('seed')['test_acc'].mean()
        rows.append({'param': param, 'value': value, 'mean': float(per_seed.mean()),
                     'min': float(per_seed.min()), 'max': float(per_seed.max())})
        logger.info(f"{param}={value}: mean {rows[-1]['mean']:.4f}")
    return pd.DataFrame(rows, columns=GRID_COLUMNS)