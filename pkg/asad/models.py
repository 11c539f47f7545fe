"""Record types and configuration dataclasses shared across the package."""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from asad.errors import ConfigError, DataError

LOCI = ('left', 'right')

PROTOCOLS = ('every-trial', 'leave-one-speaker-out', 'leave-one-subject-out')

# Locus codes of the synthetic generator.
TOPOGRAPHIES = ('phase', 'sign')

BIOSEMI64 = (
    'Fp1', 'AF7', 'AF3', 'F1', 'F3', 'F5', 'F7', 'FT7', 'FC5', 'FC3', 'FC1', 'C1',
    'C3', 'C5', 'T7', 'TP7', 'CP5', 'CP3', 'CP1', 'P1', 'P3', 'P5', 'P7', 'P9',
    'PO7', 'PO3', 'O1', 'Iz', 'Oz', 'POz', 'Pz', 'CPz', 'Fpz', 'Fp2', 'AF8', 'AF4',
    'AFz', 'Fz', 'F2', 'F4', 'F6', 'F8', 'FT8', 'FC6', 'FC4', 'FC2', 'FCz', 'Cz',
    'C2', 'C4', 'C6', 'T8', 'TP8', 'CP6', 'CP4', 'CP2', 'P2', 'P4', 'P6', 'P8',
    'P10', 'PO8', 'PO4', 'O2',
)

# Frontal channels near the eyes used by the reduced model.
NINE_CHANNELS = ('Fpz', 'Fp1', 'AF3', 'F5', 'Fp2', 'AF4', 'F6', 'AF7', 'AF8')


def from_dict(cls, data, where=None):
    """Build a dataclass from a mapping, rejecting keys it does not declare."""
    where = where or cls.__name__
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls.__name__, name))
        if nested is not None and value is not None:
            value = from_dict(nested, value, f"{where}.{name}")
        elif isinstance(value, list) and isinstance(known[name].default, tuple):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def to_dict(obj):
    """dataclasses.asdict with tuples turned into lists (JSON-friendly)."""
    def convert(value):
        if isinstance(value, (tuple, list)):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, float) and math.isinf(value):
            return '-inf' if value < 0 else 'inf'
        return value
    return convert(dataclasses.asdict(obj))


# ---------------------------------------------------------------------------
# Data records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EEGTrial:
    subject_id: int
    trial_id: int
    fs: float
    channel_names: tuple
    data: np.ndarray
    attended_locus: str
    attended_speaker: int
    story: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channel_names):
            raise DataError(f"trial {self.trial_id} (subject {self.subject_id}): data shape {self.data.shape} "
                            f"does not match {len(self.channel_names)} channel names")
        if not self.fs > 0:
            raise DataError(f"trial {self.trial_id}: sampling rate must be positive, got {self.fs}")
        if self.attended_locus not in LOCI:
            raise DataError(f"trial {self.trial_id}: unknown locus label {self.attended_locus!r}")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def locus_label(self):
        return LOCI.index(self.attended_locus)

    @property
    def key(self):
        return self.subject_id, self.trial_id


@dataclass(frozen=True)
class DecisionWindow:
    x: np.ndarray
    locus_label: int
    subject_label: int
    source: tuple  # (subject_id, trial_id, start_sample)


@dataclass(frozen=True)
class Segment:
    """Half-open sample range [start, stop) of one trial in a dataset list."""
    trial_index: int
    start: int
    stop: int

    @property
    def length(self):
        return self.stop - self.start


@dataclass
class SplitSpec:
    protocol: str
    held_out: Optional[int]
    partitions: dict = field(default_factory=lambda: {'train': [], 'val': [], 'test': []})

    def trial_indices(self, partition):
        return sorted({s.trial_index for s in self.partitions[partition]})


@dataclass(frozen=True)
class AugmentConfig:
    alpha: float = 0.75
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")

    def tau(self, window):
        return int(math.floor(self.beta * window + 0.5))


def hop_length(window, alpha):
    """round((1 - alpha) * T), half-up, never below one sample."""
    return max(1, int(math.floor((1.0 - alpha) * window + 0.5)))


# ---------------------------------------------------------------------------
# Model and training configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SWCNNConfig:
    in_channels: int = 64
    conv_out_channels: int = 16
    kernel_time: int = 5
    hidden_dim: int = 64
    n_subjects: int = 16
    gamma: float = 0.05
    batchnorm: bool = True

    def __post_init__(self):
        if self.kernel_time % 2 != 1:
            raise ValueError(f"kernel_time must be odd, got {self.kernel_time}")
        if self.conv_out_channels < 1 or self.in_channels < 1:
            raise ValueError("in_channels and conv_out_channels must be positive")

    @property
    def n_outputs(self):
        return 2 + self.n_subjects

    @classmethod
    def preset(cls, name, **overrides):
        """Architecture steps from the reference CNN to SW_CNN."""
        presets = {
            'cnn-baseline': dict(kernel_time=17, conv_out_channels=5, hidden_dim=5, batchnorm=False),
            'cnn-kernel5': dict(kernel_time=5, conv_out_channels=5, hidden_dim=5, batchnorm=False),
            'swcnn': {},
        }
        if name not in presets:
            raise ConfigError(f"unknown SW_CNN preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass(frozen=True)
class SWIMConfig:
    fs: int = 128
    cnn_window_seconds: float = 1.0
    hop_seconds: float = 0.125
    train_total_seconds: float = 5.0
    n_layers: int = 3
    d_model: int = 64
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int = 0
    zoh: bool = False
    chunk_size: int = 64
    scan: str = 'parallel'

    def __post_init__(self):
        window, hop, total = self.window_samples, self.hop_samples, self.total_samples
        if hop < 1 or window % hop != 0:
            raise ValueError(f"hop ({hop} samples) must divide the CNN window ({window} samples)")
        if total < window or (total - window) % hop != 0:
            raise ValueError(f"(total - window) / hop must be a non-negative integer, got ({total} - {window}) / {hop}")
        if self.scan not in ('parallel', 'sequential'):
            raise ValueError(f"scan must be 'parallel' or 'sequential', got {self.scan!r}")

    @property
    def window_samples(self):
        return int(round(self.cnn_window_seconds * self.fs))

    @property
    def hop_samples(self):
        return int(round(self.hop_seconds * self.fs))

    @property
    def total_samples(self):
        return int(round(self.train_total_seconds * self.fs))

    @property
    def d_inner(self):
        return self.expand * self.d_model

    @property
    def resolved_dt_rank(self):
        return self.dt_rank or math.ceil(self.d_model / 16)

    def n_steps(self, n_samples):
        return (n_samples - self.window_samples) // self.hop_samples + 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    cnn_lr: float = 1e-5
    max_epochs: int = 100
    weight_decay: float = 1e-3
    patience: int = 10
    seeds: tuple = (0, 1, 2)
    gamma: float = 0.05
    alpha: float = 0.75
    beta: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    freeze_batchnorm: bool = False
    eval_batch_size: int = 256
    window_seconds: float = 1.0
    split_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must all be >= 1")
        AugmentConfig(self.alpha, self.beta)

    @classmethod
    def for_model(cls, model_kind, **overrides):
        if model_kind == 'swcnn':
            base = {}
        elif model_kind == 'swim':
            base = dict(batch_size=32, max_epochs=5, weight_decay=0.0, patience=5)
        else:
            raise ConfigError(f"unknown model kind {model_kind!r}")
        return cls(**{**base, **overrides})


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 16
    n_trials: int = 8
    duration_s: float = 360.0
    fs: int = 128
    snr_db: float = 0.0
    channel_names: tuple = BIOSEMI64
    informative: tuple = ('AF7', 'AF8')
    topography: str = 'phase'
    template_hz: float = 8.0
    subject_mixing: float = 0.3
    drift: float = 0.0
    envelope_on_prob: float = 1.0
    envelope_block_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'snr_db', float(self.snr_db))
        # -inf is the noise-only setting; nan and +inf have no amplitude.
        if math.isnan(self.snr_db) or self.snr_db == math.inf:
            raise ConfigError(f"snr_db must be finite or -inf, got {self.snr_db}")
        if not self.duration_s > 0 or not self.fs > 0:
            raise ValueError(f"duration_s and fs must be positive, got {self.duration_s} and {self.fs}")
        if self.topography not in TOPOGRAPHIES:
            raise ValueError(f"topography must be one of {TOPOGRAPHIES}, got {self.topography!r}")
        sizes = (1, 2) if self.topography == 'sign' else (2,)
        if len(self.informative) not in sizes or any(c not in self.channel_names for c in self.informative):
            raise ValueError(f"{self.topography} topography needs {' or '.join(map(str, sizes))} informative "
                             f"channel(s) from the channel names, got {self.informative}")
        if not 0.0 <= self.envelope_on_prob <= 1.0:
            raise ValueError(f"envelope_on_prob must lie in [0, 1], got {self.envelope_on_prob}")

    @property
    def n_samples(self):
        return int(round(self.duration_s * self.fs))

    @property
    def amplitude(self):
        snr = float(self.snr_db)
        return 0.0 if math.isinf(snr) and snr < 0 else 2.0 * 10.0 ** (snr / 20.0)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    protocol: str
    rows: list = field(default_factory=list)

    def add(self, held_out, seed, val_acc, test_acc, n_test_windows):
        for name, acc in (('val_acc', val_acc), ('test_acc', test_acc)):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {acc}")
        self.rows.append({
            'protocol': self.protocol,
            'held_out': held_out,
            'seed': seed,
            'val_acc': val_acc,
            'test_acc': test_acc,
            'n_test_windows': n_test_windows,
        })

    def to_frame(self):
        columns = ['protocol', 'held_out', 'seed', 'val_acc', 'test_acc', 'n_test_windows']
        return pd.DataFrame(self.rows, columns=columns)

    def summary(self):
        df = self.to_frame()
        if df.empty:
            return pd.DataFrame(columns=['protocol', 'held_out', 'mean', 'min', 'max', 'n_runs'])
        df['held_out'] = df['held_out'].astype(str)
        per = df.groupby('held_out', sort=False)['test_acc'].agg(['mean', 'min', 'max', 'count']).reset_index()
        overall = pd.DataFrame([{
            'held_out': 'all',
            'mean': per['mean'].mean(),
            'min': df['test_acc'].min(),
            'max': df['test_acc'].max(),
            'count': len(df),
        }])
        out = pd.concat([per, overall], ignore_index=True).rename(columns={'count': 'n_runs'})
        out.insert(0, 'protocol', self.protocol)
        return out

    @property
    def mean_accuracy(self):
        return float(self.summary().iloc[-1]['mean'])


# ---------------------------------------------------------------------------
# Experiment file
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    name: Optional[str] = None
    model: str = 'swcnn'
    protocol: str = 'leave-one-speaker-out'
    held_out: Optional[list] = None
    manifest: Optional[str] = None
    channels: Optional[list] = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    swcnn_preset: str = 'swcnn'
    swcnn: dict = field(default_factory=dict)
    swim: SWIMConfig = field(default_factory=SWIMConfig)
    train: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrained: Optional[str] = None
    window_lengths: list = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0, 50.0])
    trial_ranges: list = field(default_factory=lambda: [[i / 10, (i + 1) / 10] for i in range(7)])
    grid_param: str = 'alpha'
    grid_values: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])

    def __post_init__(self):
        if self.model not in ('swcnn', 'swim'):
            raise ValueError(f"model must be 'swcnn' or 'swim', got {self.model!r}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.grid_param not in ('alpha', 'beta', 'gamma'):
            raise ValueError(f"grid_param must be alpha, beta or gamma, got {self.grid_param!r}")
        self.train_config()
        self.swcnn_config()

    def train_config(self):
        overrides = dict(self.train)
        if 'seeds' not in overrides:
            overrides['seeds'] = tuple(self.seeds)
        return from_dict(TrainConfig, {**dataclasses.asdict(TrainConfig.for_model(self.model)), **overrides},
                         'RunConfig.train')

    def swcnn_config(self, in_channels=None):
        overrides = dict(self.swcnn)
        if in_channels is not None:
            overrides['in_channels'] = in_channels
        unknown = sorted(set(overrides) - {f.name for f in dataclasses.fields(SWCNNConfig)})
        if unknown:
            raise ConfigError(f"RunConfig.swcnn: unknown field(s) {unknown}")
        return SWCNNConfig.preset(self.swcnn_preset, **overrides)

    @classmethod
    def load(cls, data):
        return from_dict(cls, data, 'RunConfig')

    def to_dict(self):
        return to_dict(self)


_NESTED = {
    ('RunConfig', 'swim'): SWIMConfig,
    ('RunConfig', 'synth'): SynthConfig,
}
