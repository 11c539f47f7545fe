"""
Dataset container format, normalization, decision windows, augmentation and
the three evaluation split protocols.

Manifest (JSON): {fs, channel_names, trials: [{subject_id, trial_id,
attended_locus, attended_speaker, story, n_samples, data_file}], ground_truth?}.
Each data file holds little-endian float32 samples, row-major [channel][sample].
"""
import dataclasses
import logging
import math
import os

import numpy as np

from asad.errors import DataError
from asad.models import LOCI, DecisionWindow, EEGTrial, Segment, SplitSpec, hop_length
from asad.utils import derive_rng, ensure_dir, load_json, save_json

logger = logging.getLogger(__name__)

TRIAL_FIELDS = ('subject_id', 'trial_id', 'attended_locus', 'attended_speaker', 'story', 'n_samples', 'data_file')
VAL_FRACTION = 0.15
EVERY_TRIAL_RANGES = {'train': (0.0, 0.7), 'val': (0.7, 0.85), 'test': (0.85, 1.0)}


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------

def load_manifest(manifest_path):
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = load_json(manifest_path)
    except ValueError as e:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    for key in ('fs', 'channel_names', 'trials'):
        if key not in manifest:
            raise DataError(f"manifest {manifest_path}: missing field '{key}'")
    return manifest


def read_trial_file(path, n_channels, n_samples=None, label='trial'):
    """Read one raw float32 trial file, checking its byte length."""
    if not os.path.exists(path):
        raise DataError(f"{label}: data file not found: {path}")
    actual = os.path.getsize(path)
    if n_samples is None:
        if actual % (4 * n_channels) != 0:
            raise DataError(f"{label}: {path} has {actual} bytes, not a multiple of 4 x {n_channels} channels")
        n_samples = actual // (4 * n_channels)
    expected = 4 * n_channels * n_samples
    if actual != expected:
        raise DataError(f"{label}: {path} has {actual} bytes, expected {expected} "
                        f"({n_channels} channels x {n_samples} samples)")
    data = np.fromfile(path, dtype='<f4').reshape(n_channels, n_samples).astype(np.float32)
    data.flags.writeable = False
    return data


def load_dataset(manifest_path):
    """Load every trial of a manifest verbatim (no normalization)."""
    manifest = load_manifest(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    fs = manifest['fs']
    channel_names = tuple(manifest['channel_names'])
    trials = []
    for position, entry in enumerate(manifest['trials']):
        label = f"trial #{position} (subject {entry.get('subject_id')}, trial {entry.get('trial_id')})"
        missing = [k for k in TRIAL_FIELDS if k not in entry]
        if missing:
            raise DataError(f"{label}: missing field(s) {missing}")
        if entry['attended_locus'] not in LOCI:
            raise DataError(f"{label}: unknown attended_locus {entry['attended_locus']!r}")
        path = os.path.join(base_dir, entry['data_file'])
        data = read_trial_file(path, len(channel_names), int(entry['n_samples']), label)
        trials.append(EEGTrial(
            subject_id=int(entry['subject_id']),
            trial_id=int(entry['trial_id']),
            fs=fs,
            channel_names=channel_names,
            data=data,
            attended_locus=entry['attended_locus'],
            attended_speaker=int(entry['attended_speaker']),
            story=int(entry['story']),
        ))
    logger.info(f"Loaded {len(trials)} trials from {manifest_path}")
    return trials


def prepare_dataset(manifest_path, channels=None):
    """Load, optionally reduce to ``channels``, and normalize every trial."""
    trials = load_dataset(manifest_path)
    if channels:
        trials = [select_channels(t, tuple(channels)) for t in trials]
    return [normalize_trial(t) for t in trials]


def trial_filename(trial):
    return f"s{trial.subject_id:02d}_t{trial.trial_id:02d}.f32"


def write_dataset(trials, directory, ground_truth=None, manifest_name='manifest.json'):
    """Write trials in the container format; returns the manifest path."""
    ensure_dir(directory)
    if trials:
        fs, channel_names = trials[0].fs, list(trials[0].channel_names)
    else:
        fs, channel_names = 128, []
    entries = []
    for trial in trials:
        name = trial_filename(trial)
        np.ascontiguousarray(trial.data, dtype='<f4').tofile(os.path.join(directory, name))
        entries.append({
            'subject_id': trial.subject_id,
            'trial_id': trial.trial_id,
            'attended_locus': trial.attended_locus,
            'attended_speaker': trial.attended_speaker,
            'story': trial.story,
            'n_samples': trial.n_samples,
            'data_file': name,
        })
    manifest = {'fs': fs, 'channel_names': channel_names, 'trials': entries}
    if ground_truth is not None:
        manifest['ground_truth'] = ground_truth
    path = os.path.join(directory, manifest_name)
    save_json(manifest, path)
    logger.info(f"Wrote {len(trials)} trials to {directory}")
    return path


# ---------------------------------------------------------------------------
# Normalization and channel selection
# ---------------------------------------------------------------------------

def trial_stds(trial):
    return trial.data.astype(np.float64).std(axis=1)


def normalize_trial(trial):
    """Scale every channel to unit standard deviation over the whole trial."""
    std = trial_stds(trial)
    flat = np.flatnonzero(~(std > 0))
    if flat.size:
        names = [trial.channel_names[i] for i in flat]
        raise DataError(f"trial {trial.trial_id} (subject {trial.subject_id}): zero-variance channel(s) {names}")
    data = (trial.data.astype(np.float64) / std[:, None]).astype(np.float32)
    data.flags.writeable = False
    return dataclasses.replace(trial, data=data)


def select_channels(trial, names):
    """Keep only the named channels, in the given order."""
    try:
        rows = [trial.channel_names.index(n) for n in names]
    except ValueError:
        missing = [n for n in names if n not in trial.channel_names]
        raise DataError(f"trial {trial.trial_id}: channel(s) {missing} not in recording") from None
    data = np.ascontiguousarray(trial.data[rows])
    data.flags.writeable = False
    return dataclasses.replace(trial, channel_names=tuple(names), data=data)


# ---------------------------------------------------------------------------
# Windows and augmentation
# ---------------------------------------------------------------------------

def window_count(length, window, alpha):
    if window > length:
        return 0
    return (length - window) // hop_length(window, alpha) + 1


def center(x):
    """Subtract the per-channel mean over the trailing axis (float32 result)."""
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 - x64.mean(axis=-1, keepdims=True)).astype(np.float32)


def extract_windows(trial, window, alpha, start=0, stop=None):
    """Sliding decision windows over [start, stop) of a normalized trial."""
    stop = trial.n_samples if stop is None else stop
    length = stop - start
    if window > length:
        raise DataError(f"trial {trial.trial_id}: window of {window} samples exceeds range of {length}")
    hop = hop_length(window, alpha)
    count = (length - window) // hop + 1
    windows = []
    for i in range(count):
        s = start + i * hop
        windows.append(DecisionWindow(
            x=center(trial.data[:, s:s + window]),
            locus_label=trial.locus_label,
            subject_label=trial.subject_id,
            source=(trial.subject_id, trial.trial_id, s),
        ))
    return windows


def draw_mask(n_time, beta, rng):
    """Masked run (t0, t): t ~ U[0, tau), t0 ~ U[0, T - t), tau = round(beta*T)."""
    tau = int(math.floor(beta * n_time + 0.5))
    if tau <= 0:
        return 0, 0
    t = int(rng.integers(0, tau))
    t0 = int(rng.integers(0, n_time - t))
    return t0, t


def mask_columns(x, beta, rng):
    t0, t = draw_mask(x.shape[-1], beta, rng)
    if t == 0:
        return x
    out = np.array(x, copy=True)
    out[..., t0:t0 + t] = 0
    return out


def time_mask(window, beta, rng):
    """Zero a random run of consecutive time steps; the input window is untouched."""
    x = mask_columns(window.x, beta, rng)
    if x is window.x:
        return window
    return dataclasses.replace(window, x=x)


class WindowSet:
    """Index table of decision windows over partition segments.

    Windows are materialized on demand so that overlapping windows of long
    recordings never coexist in memory.
    """

    def __init__(self, trials, segments, window, alpha=0.0, center_windows=True):
        self.trials = trials
        self.window = window
        self.alpha = alpha
        self.center_windows = center_windows
        hop = hop_length(window, alpha)
        index, starts = [], []
        for seg in segments:
            if seg.length < window:
                logger.debug(f"segment {seg} shorter than window {window}; skipped")
                continue
            count = (seg.length - window) // hop + 1
            index.append(np.full(count, seg.trial_index, dtype=np.int64))
            starts.append(seg.start + hop * np.arange(count, dtype=np.int64))
        self.trial_index = np.concatenate(index) if index else np.zeros(0, dtype=np.int64)
        self.start = np.concatenate(starts) if starts else np.zeros(0, dtype=np.int64)
        self.locus = np.array([trials[i].locus_label for i in self.trial_index], dtype=np.int64)
        self.subject = np.array([trials[i].subject_id for i in self.trial_index], dtype=np.int64)

    def __len__(self):
        return int(self.trial_index.size)

    @property
    def n_channels(self):
        return self.trials[0].n_channels if self.trials else 0

    def batch(self, idx, beta=0.0, seed=0, epoch=0):
        """Assemble windows ``idx`` as X [B, C, T] plus locus and subject labels."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty((idx.size, self.n_channels, self.window), dtype=np.float32)
        for row, i in enumerate(idx):
            trial = self.trials[self.trial_index[i]]
            s = int(self.start[i])
            x = trial.data[:, s:s + self.window]
            x = center(x) if self.center_windows else x
            if beta > 0:
                rng = derive_rng(seed, epoch, trial.subject_id, trial.trial_id, s)
                x = mask_columns(x, beta, rng)
            out[row] = x
        return out, self.locus[idx], self.subject[idx]

    def windows(self):
        X, locus, subject = self.batch(np.arange(len(self)))
        return [
            DecisionWindow(x=X[i], locus_label=int(locus[i]), subject_label=int(subject[i]),
                           source=(int(subject[i]), self.trials[self.trial_index[i]].trial_id, int(self.start[i])))
            for i in range(len(self))
        ]


def stack_windows(windows):
    """DecisionWindow list -> (X [B, C, T], locus, subject)."""
    X = np.stack([w.x for w in windows]).astype(np.float32)
    locus = np.array([w.locus_label for w in windows], dtype=np.int64)
    subject = np.array([w.subject_label for w in windows], dtype=np.int64)
    return X, locus, subject


# ---------------------------------------------------------------------------
# Split protocols
# ---------------------------------------------------------------------------

def _fraction_bounds(n_samples, lo, hi):
    return int(math.floor(lo * n_samples + 0.5)), int(math.floor(hi * n_samples + 0.5))


def split_by_ranges(dataset, ranges, protocol='every-trial'):
    """Per-trial fraction ranges, e.g. {'train': (0, 0.7), ...}."""
    spec = SplitSpec(protocol=protocol, held_out=None, partitions={name: [] for name in ranges})
    for i, trial in enumerate(dataset):
        for name, (lo, hi) in ranges.items():
            start, stop = _fraction_bounds(trial.n_samples, lo, hi)
            if stop > start:
                spec.partitions[name].append(Segment(i, start, stop))
    return spec


def split_every_trial(dataset):
    """First 70% of every trial trains, the next 15% validates, the last 15% tests."""
    return split_by_ranges(dataset, EVERY_TRIAL_RANGES, 'every-trial')


def _held_out_split(dataset, protocol, held_out, test_indices, seed):
    if not test_indices:
        raise DataError(f"{protocol}: no trials for held-out value {held_out}; test partition would be empty")
    held = set(test_indices)
    rest = [i for i in range(len(dataset)) if i not in held]
    order = [rest[j] for j in np.random.default_rng(seed).permutation(len(rest))]
    n_val = int(math.floor(VAL_FRACTION * len(order) + 0.5))
    if len(order) >= 2:
        n_val = max(1, n_val)
    val, train = sorted(order[:n_val]), sorted(order[n_val:])

    def whole(indices):
        return [Segment(i, 0, dataset[i].n_samples) for i in indices]

    spec = SplitSpec(protocol=protocol, held_out=held_out, partitions={
        'train': whole(train), 'val': whole(val), 'test': whole(sorted(test_indices)),
    })
    logger.info(f"{protocol} held_out={held_out}: {len(train)} train, {len(val)} val, {len(test_indices)} test trials")
    return spec


def split_leave_speaker_out(dataset, speaker, seed=0):
    """Trials attending ``speaker`` (1 or 2) form the test set."""
    if speaker not in (1, 2):
        raise DataError(f"leave-one-speaker-out holds out Speaker1 or Speaker2 only, got {speaker}")
    test = [i for i, t in enumerate(dataset) if t.attended_speaker == speaker]
    return _held_out_split(dataset, 'leave-one-speaker-out', speaker, test, seed)


def split_leave_subject_out(dataset, subject, seed=0):
    """All trials of ``subject`` form the test set."""
    test = [i for i, t in enumerate(dataset) if t.subject_id == subject]
    if not test:
        raise DataError(f"leave-one-subject-out: subject {subject} is not in the dataset")
    return _held_out_split(dataset, 'leave-one-subject-out', subject, test, seed)


def held_out_values(dataset, protocol):
    if protocol == 'every-trial':
        return [None]
    if protocol == 'leave-one-speaker-out':
        return [1, 2]
    if protocol == 'leave-one-subject-out':
        return sorted({t.subject_id for t in dataset})
    raise DataError(f"unknown protocol {protocol!r}")


def make_split(dataset, protocol, held_out=None, seed=0):
    if protocol == 'every-trial':
        return split_every_trial(dataset)
    if protocol == 'leave-one-speaker-out':
        return split_leave_speaker_out(dataset, held_out, seed)
    if protocol == 'leave-one-subject-out':
        return split_leave_subject_out(dataset, held_out, seed)
    raise DataError(f"unknown protocol {protocol!r}")


def split_to_dict(spec, dataset):
    def rows(segments):
        return [{'subject_id': dataset[s.trial_index].subject_id, 'trial_id': dataset[s.trial_index].trial_id,
                 'trial_index': s.trial_index, 'start': s.start, 'stop': s.stop} for s in segments]
    return {
        'protocol': spec.protocol,
        'held_out': spec.held_out,
        'partitions': {name: rows(segs) for name, segs in spec.partitions.items()},
    }
