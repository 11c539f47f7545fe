"""Shared fixtures: tiny synthetic recordings and a quiet test runtime."""
import numpy as np
import pytest

from config import TestingConfig
from asad import create_runtime
from asad.dataio import make_split, prepare_dataset
from asad.models import SWCNNConfig, SWIMConfig, SynthConfig, TrainConfig
from asad.synth import synth_generate
from asad.trainer import train
from asad.tensor import precision

SMALL_CHANNELS = ('AF7', 'AF8', 'Fz', 'Cz')


def small_synth_config(**overrides):
    base = dict(n_subjects=2, n_trials=4, duration_s=20.0, snr_db=10.0, channel_names=SMALL_CHANNELS)
    return SynthConfig(**{**base, **overrides})


@pytest.fixture
def runtime(tmp_path):
    """TestingConfig runtime rooted in the test's temporary directory."""
    return create_runtime(TestingConfig, run_root=str(tmp_path / 'runs'))


@pytest.fixture
def float64():
    with precision('float64'):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def synth_dir(tmp_path):
    """Small synthetic dataset written in the container format; returns the manifest path."""
    dataset = synth_generate(small_synth_config(), seed=0, out_dir=str(tmp_path / 'data'))
    return dataset.manifest_path


@pytest.fixture
def dataset(synth_dir):
    return prepare_dataset(synth_dir)


@pytest.fixture
def raw_trials():
    return synth_generate(small_synth_config(), seed=0).trials


@pytest.fixture
def tiny_swcnn_config():
    return SWCNNConfig(in_channels=len(SMALL_CHANNELS), conv_out_channels=3, hidden_dim=4, n_subjects=2)


@pytest.fixture
def tiny_swim_config():
    return SWIMConfig(fs=128, hop_seconds=0.25, train_total_seconds=2.0, n_layers=1, d_model=8, d_state=4)


@pytest.fixture
def quick_train_config():
    return TrainConfig(batch_size=16, max_epochs=2, patience=2, seeds=(0,), eval_batch_size=64)


@pytest.fixture(scope='session')
def trained_swcnn(tmp_path_factory):
    """Full-size SW_CNN trained with the standard settings on a balanced 10 dB set.

    Session-scoped: training takes a while and several modules score the result.
    Returns (dataset, every-trial split, TrainResult).
    """
    config = small_synth_config(n_subjects=2, n_trials=4, duration_s=200.0, snr_db=10.0)
    path = synth_generate(config, seed=0, out_dir=str(tmp_path_factory.mktemp('trained') / 'data')).manifest_path
    dataset = prepare_dataset(path)
    split = make_split(dataset, 'every-trial')
    train_config = TrainConfig.for_model('swcnn', max_epochs=20, seeds=(0,))
    result = train('swcnn', dataset, split, train_config, 0, SWCNNConfig(in_channels=len(SMALL_CHANNELS), n_subjects=2))
    return dataset, split, result
