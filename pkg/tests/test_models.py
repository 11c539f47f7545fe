"""Tests for configuration dataclasses, experiment files and result tables."""
import math

import pytest

from asad.errors import ConfigError
from asad.models import (AugmentConfig, EvalReport, RunConfig, SWCNNConfig, SynthConfig, TrainConfig, from_dict,
                         hop_length, to_dict)


class TestDefaults:

    def test_standard_augmentation_setting(self):
        config = TrainConfig()
        assert (config.alpha, config.beta, config.gamma) == (0.75, 1.0, 0.05)
        assert (config.lr, config.cnn_lr, config.weight_decay, config.batch_size) == (1e-3, 1e-5, 1e-3, 64)

    def test_swim_training_defaults(self):
        config = TrainConfig.for_model('swim')
        assert (config.batch_size, config.max_epochs, config.weight_decay) == (32, 5, 0.0)
        with pytest.raises(ConfigError):
            TrainConfig.for_model('lstm')

    @pytest.mark.parametrize('window,alpha,hop', [(128, 0.0, 128), (128, 0.75, 32), (128, 0.5, 64),
                                                  (5, 0.5, 3), (1, 0.75, 1)])
    def test_hop_rounds_half_up(self, window, alpha, hop):
        assert hop_length(window, alpha) == hop

    @pytest.mark.parametrize('alpha,beta', [(1.0, 0.5), (-0.1, 0.5), (0.5, 1.5)])
    def test_augment_ranges(self, alpha, beta):
        with pytest.raises(ValueError):
            AugmentConfig(alpha, beta)

    def test_augment_tau(self):
        assert AugmentConfig(beta=1.0).tau(128) == 128
        assert AugmentConfig(beta=0.25).tau(128) == 32


class TestFromDict:

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match='learning_rate'):
            from_dict(TrainConfig, {'learning_rate': 0.1})

    def test_invalid_value_becomes_config_error(self):
        with pytest.raises(ConfigError):
            from_dict(SWCNNConfig, {'kernel_time': 4})

    def test_lists_become_tuples(self):
        config = from_dict(TrainConfig, {'seeds': [4, 5], 'adam_betas': [0.8, 0.9]})
        assert config.seeds == (4, 5) and config.adam_betas == (0.8, 0.9)

    def test_negative_infinite_snr_round_trips(self):
        data = to_dict(SynthConfig(snr_db=-math.inf))
        assert data['snr_db'] == '-inf'
        assert from_dict(SynthConfig, data).amplitude == 0.0


class TestRunConfig:

    def test_nested_unknown_field(self):
        with pytest.raises(ConfigError, match='swim'):
            RunConfig.load({'swim': {'d_modle': 32}})
        with pytest.raises(ConfigError):
            RunConfig.load({'swcnn': {'filters': 3}})
        with pytest.raises(ConfigError):
            RunConfig.load({'train': {'epochs': 3}})

    def test_bad_choices(self):
        for data in ({'model': 'lstm'}, {'protocol': 'random'}, {'grid_param': 'lr'}):
            with pytest.raises(ConfigError):
                RunConfig.load(data)

    def test_train_overrides_follow_model_kind(self):
        config = RunConfig.load({'model': 'swim', 'train': {'max_epochs': 2}, 'seeds': [7]})
        train = config.train_config()
        assert (train.max_epochs, train.batch_size, train.seeds) == (2, 32, (7,))

    def test_round_trip(self):
        config = RunConfig.load({'model': 'swim', 'swim': {'n_layers': 2}, 'swcnn_preset': 'cnn-kernel5',
                                 'held_out': [1]})
        again = RunConfig.load(config.to_dict())
        assert again == config
        assert again.swcnn_config(in_channels=9).in_channels == 9


class TestEvalReport:

    def test_summary(self):
        report = EvalReport('leave-one-speaker-out')
        for held_out, seed, acc in ((1, 0, 0.8), (1, 1, 0.6), (2, 0, 0.9), (2, 1, 0.9)):
            report.add(held_out, seed, 0.5, acc, 100)
        summary = report.summary()
        assert summary['held_out'].tolist() == ['1', '2', 'all']
        assert summary.iloc[0]['mean'] == pytest.approx(0.7)
        assert summary.iloc[-1]['mean'] == pytest.approx(0.8)
        assert (summary.iloc[-1]['min'], summary.iloc[-1]['max'], summary.iloc[-1]['n_runs']) == (0.6, 0.9, 4)
        assert report.mean_accuracy == pytest.approx(0.8)

    def test_accuracy_range(self):
        with pytest.raises(ValueError):
            EvalReport('every-trial').add(None, 0, 0.5, 1.2, 10)
