"""Tests for evaluation, model combination and the experiment tables."""
import numpy as np
import pytest

from asad import ops
from asad.dataio import WindowSet, make_split, prepare_dataset
from asad.errors import DataError, ShapeError
from asad.evalkit import (COMBINE_COLUMNS, GRID_COLUMNS, IMPORTANCE_COLUMNS, SWEEP_COLUMNS, TRIAL_RANGE_COLUMNS,
                          channel_importance, combine_models, decision_ends, evaluate, evaluate_combined,
                          hyperparameter_grid, mask_channels, trial_range_experiment, window_sweep)
from asad.models import NINE_CHANNELS, SWCNNConfig, SWIMConfig, Segment, TrainConfig
from asad.swcnn import SWCNN
from asad.swim import SWIM
from asad.synth import synth_generate, template
from asad.tensor import Tensor
from asad.trainer import train

from tests.conftest import SMALL_CHANNELS, small_synth_config


class ConstantModel:
    """Stand-in that always predicts one locus."""

    def __init__(self, locus, n_channels=4):
        self.locus = locus
        self.config = SWCNNConfig(in_channels=n_channels)

    def forward(self, X, mode='eval'):
        out = np.zeros((len(X), 2), dtype=np.float32)
        out[:, self.locus] = 1.0
        return Tensor(out)


class TemplateReadout:
    """Linear readout: one channel projected on the fixed-phase template."""

    def __init__(self, channel, weights, n_channels=4):
        self.channel = channel
        self.weights = np.asarray(weights, dtype=np.float32)
        self.config = SWCNNConfig(in_channels=n_channels)

    def forward(self, X, mode='eval'):
        score = np.asarray(X)[:, self.channel] @ self.weights
        return Tensor(np.stack([score, -score], axis=1))


def generated_dataset(tmp_path, name, **overrides):
    config = small_synth_config(**overrides)
    return prepare_dataset(synth_generate(config, seed=0, out_dir=str(tmp_path / name)).manifest_path)


@pytest.fixture
def calibrated_swcnn(tiny_swcnn_config, rng):
    model = SWCNN(tiny_swcnn_config, rng)
    model(rng.standard_normal((8, 4, 128)), 'train')
    return model


@pytest.fixture
def test_set(dataset):
    return WindowSet(dataset, make_split(dataset, 'every-trial').partitions['test'], 128, 0.0)


class TestEvaluate:

    def test_constant_model_scores_label_share(self, test_set):
        share_right = float(np.mean(test_set.locus))
        assert evaluate(ConstantModel(1), test_set) == pytest.approx(share_right)
        assert evaluate(ConstantModel(0), test_set) == pytest.approx(1 - share_right)

    def test_accepts_window_list_and_arrays(self, calibrated_swcnn, test_set):
        X, labels, _ = test_set.batch(np.arange(len(test_set)))
        a = evaluate(calibrated_swcnn, test_set)
        assert evaluate(calibrated_swcnn, test_set.windows()) == a
        assert evaluate(calibrated_swcnn, (X, labels)) == a

    def test_empty_and_mismatched_windows(self, calibrated_swcnn, rng):
        with pytest.raises(DataError):
            evaluate(calibrated_swcnn, [])
        with pytest.raises(ShapeError):
            evaluate(calibrated_swcnn, (rng.standard_normal((2, 5, 128)), np.array([0, 1])))


class TestCombination:

    def test_identity_and_opposition(self):
        a = np.array([0.3, -1.2, 4.0])
        np.testing.assert_allclose(combine_models(a, a), ops.softmax(a[:2]))
        np.testing.assert_allclose(combine_models([10.0, -10.0], [-10.0, 10.0]), 0.5)

    def test_batched(self, rng):
        a, b = rng.standard_normal((4, 18)), rng.standard_normal((4, 18))
        out = combine_models(a, b)
        assert out.shape == (4, 2)
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_evaluate_combined_table(self, tmp_path, rng):
        path = synth_generate(small_synth_config(channel_names=NINE_CHANNELS + ('Cz',)), 0,
                              str(tmp_path / 'nine')).manifest_path
        full, nine = prepare_dataset(path), prepare_dataset(path, NINE_CHANNELS)
        segments = make_split(full, 'every-trial').partitions['test']
        model_all = SWCNN(SWCNNConfig(in_channels=10, conv_out_channels=3, hidden_dim=4, n_subjects=2), rng)
        model_nine = SWCNN(SWCNNConfig(in_channels=9, conv_out_channels=3, hidden_dim=4, n_subjects=2), rng)
        for m, n in ((model_all, 10), (model_nine, 9)):
            m(rng.standard_normal((4, n, 128)), 'train')
        table = evaluate_combined(model_all, model_nine, WindowSet(full, segments, 128),
                                  WindowSet(nine, segments, 128))
        assert list(table.columns) == COMBINE_COLUMNS
        assert table['model'].tolist() == ['all-channels', 'nine-channels', 'combined']
        assert table['n_windows'].nunique() == 1


class TestChannelImportance:

    def test_mask_channels_copies(self, rng):
        X = rng.standard_normal((2, 3, 5))
        out = mask_channels(X, [1])
        assert np.all(out[:, 1] == 0) and np.array_equal(out[:, 0], X[:, 0]) and np.all(X[:, 1] != 0)

    def test_table(self, calibrated_swcnn, test_set, dataset):
        table = channel_importance(calibrated_swcnn, test_set, dataset[0].channel_names)
        assert list(table.columns) == IMPORTANCE_COLUMNS
        assert table['channel_name'].tolist() == list(dataset[0].channel_names)
        assert table['normalized'].between(0, 1).all()

    def test_constant_model_has_zero_importance(self, test_set, dataset):
        table = channel_importance(ConstantModel(0), test_set, dataset[0].channel_names)
        assert (table['delta_acc'] == 0).all() and (table['normalized'] == 0).all()

    def test_trained_model_relies_on_informative_pair(self, trained_swcnn):
        dataset, split, result = trained_swcnn
        windows = WindowSet(dataset, split.partitions['test'], 128, 0.0)
        table = channel_importance(result.model, windows, SMALL_CHANNELS)
        delta = table.set_index('channel_name')['delta_acc']
        assert delta['AF7'] == pytest.approx(0.5, abs=0.1)
        assert delta['AF8'] == pytest.approx(0.5, abs=0.1)
        assert abs(delta['Fz']) < 0.01 and abs(delta['Cz']) < 0.01

    def test_masking_the_sole_informative_channel_gives_chance(self, tmp_path):
        dataset = generated_dataset(tmp_path, 'sole', topography='sign', informative=('AF7',), snr_db=0.0)
        config = small_synth_config(topography='sign')
        readout = TemplateReadout(0, template(config, np.arange(128) / config.fs, None))
        windows = WindowSet(dataset, make_split(dataset, 'every-trial').partitions['test'], 128, 0.0)
        assert evaluate(readout, windows) == 1.0
        table = channel_importance(readout, windows, SMALL_CHANNELS)
        delta = table.set_index('channel_name')['delta_acc']
        assert delta['AF7'] == pytest.approx(0.5, abs=0.05)
        assert (delta.drop('AF7').abs() < 0.01).all()
        assert table['normalized'].tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_name_count_mismatch(self, calibrated_swcnn, test_set):
        with pytest.raises(ShapeError):
            channel_importance(calibrated_swcnn, test_set, ['AF7'])


class TestWindowSweep:

    def test_decision_ends(self):
        ends = decision_ends([Segment(0, 100, 500), Segment(2, 0, 300)], 256, 128)
        assert ends == [(0, 356), (0, 484), (2, 256)]
        assert decision_ends([Segment(1, 0, 100)], 128, 128) == []

    def test_one_second_row_matches_plain_evaluation(self, dataset, calibrated_swcnn):
        segments = make_split(dataset, 'leave-one-speaker-out', 1).partitions['test']
        plain = WindowSet(dataset, segments, 128, 0.0)
        assert len(decision_ends(segments, 128, 128)) == len(plain) == 40
        table = window_sweep(None, calibrated_swcnn, dataset, segments, [1.0, 10.0])
        alone = window_sweep(None, calibrated_swcnn, dataset, segments, [1.0])
        one_second = table[table['length_s'] == 1.0]['accuracy'].item()
        assert one_second == evaluate(calibrated_swcnn, plain)
        assert one_second == alone['accuracy'].item()

    def test_table_and_skipped_lengths(self, dataset, calibrated_swcnn, tiny_swim_config, tiny_swcnn_config,
                                       caplog):
        swim_model = SWIM.from_swcnn(calibrated_swcnn, tiny_swim_config, np.random.default_rng(0))
        segments = make_split(dataset, 'leave-one-speaker-out', 1).partitions['test']
        table = window_sweep(swim_model, calibrated_swcnn, dataset, segments, [0.5, 1.0, 2.0, 60.0])
        assert list(table.columns) == SWEEP_COLUMNS
        assert sorted(set(table['length_s'])) == [0.5, 1.0, 2.0]
        assert table[table['length_s'] == 0.5]['model'].tolist() == ['swcnn']
        assert table['accuracy'].between(0, 1).all()
        assert 'exceeds' in caplog.text

    def test_single_model(self, dataset, calibrated_swcnn):
        segments = make_split(dataset, 'every-trial').partitions['test']
        table = window_sweep(None, calibrated_swcnn, dataset, segments, [1.0])
        assert table['model'].tolist() == ['swcnn']

    def test_no_length_fits(self, dataset, calibrated_swcnn):
        segments = make_split(dataset, 'every-trial').partitions['test']
        with pytest.raises(DataError):
            window_sweep(None, calibrated_swcnn, dataset, segments, [30.0])

    def test_longer_history_helps_swim_on_bursty_data(self, tmp_path):
        dataset = generated_dataset(tmp_path, 'bursty', duration_s=60.0, envelope_on_prob=0.5)
        split = make_split(dataset, 'leave-one-speaker-out', 1)
        cnn_config = SWCNNConfig(in_channels=len(SMALL_CHANNELS), n_subjects=2)
        swim_config = SWIMConfig(fs=128, hop_seconds=0.25, train_total_seconds=2.0, n_layers=1, d_model=8, d_state=4)
        swcnn = train('swcnn', dataset, split, TrainConfig.for_model('swcnn', max_epochs=4, lr=3e-3, seeds=(0,)),
                      0, cnn_config).model
        swim = train('swim', dataset, split, TrainConfig.for_model('swim', max_epochs=3, lr=1e-2, seeds=(0,)),
                     0, cnn_config, swim_config, swcnn).model
        table = window_sweep(swim, swcnn, dataset, split.partitions['test'], [1.0, 10.0])
        swim_rows = table[table['model'] == 'swim'].set_index('length_s')['accuracy']
        assert swim_rows[10.0] >= swim_rows[1.0] - 0.02


class TestExperiments:

    def test_trial_range(self, dataset, tiny_swcnn_config, quick_train_config):
        table = trial_range_experiment(dataset, [(0.0, 0.2), (0.5, 0.7)], quick_train_config, [0],
                                       tiny_swcnn_config)
        assert list(table.columns) == TRIAL_RANGE_COLUMNS
        assert table[['lo', 'hi']].values.tolist() == [[0.0, 0.2], [0.5, 0.7]]

    @pytest.mark.parametrize('drift', [0.0, 1.9])
    def test_trial_range_follows_drift(self, tmp_path, drift):
        dataset = generated_dataset(tmp_path, 'drift', duration_s=100.0, drift=drift)
        config = TrainConfig(batch_size=32, max_epochs=8, patience=8, lr=3e-3, seeds=(0,))
        cnn_config = SWCNNConfig(in_channels=len(SMALL_CHANNELS), n_subjects=2)
        table = trial_range_experiment(dataset, [(0.0, 0.2), (0.5, 0.7)], config, [0], cnn_config)
        early, late = table['accuracy'].tolist()
        if drift == 0.0:
            assert min(early, late) >= 0.85 and abs(early - late) <= 0.1
        else:
            # The early slice sees the topography rotated by about a quarter turn.
            assert late - early > 0.3

    def test_trial_range_cannot_reach_test_slice(self, dataset, quick_train_config):
        with pytest.raises(DataError):
            trial_range_experiment(dataset, [(0.8, 0.9)], quick_train_config, [0])

    def test_grid(self, dataset, tiny_swcnn_config, quick_train_config):
        splits = [make_split(dataset, 'leave-one-speaker-out', 1)]
        table = hyperparameter_grid('swcnn', dataset, splits, 'gamma', [0.0, 0.1], quick_train_config, [0, 1],
                                    swcnn_config=tiny_swcnn_config)
        assert list(table.columns) == GRID_COLUMNS
        assert table['value'].tolist() == [0.0, 0.1]
        assert (table['min'] <= table['mean']).all() and (table['mean'] <= table['max']).all()

    def test_grid_rejects_other_params(self, dataset, quick_train_config):
        with pytest.raises(DataError):
            hyperparameter_grid('swcnn', dataset, [], 'lr', [0.1], quick_train_config)
