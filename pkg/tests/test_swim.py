"""Tests for the SWIM model and its streaming decoder."""
import numpy as np
import pytest

from asad import ops
from asad.dataio import normalize_trial
from asad.errors import CheckpointError, ShapeError
from asad.models import SWCNNConfig, SWIMConfig
from asad.selftest import small_swim
from asad.swcnn import SWCNN
from asad.swim import (DECISION_COLUMNS, SWIM, WARMING, StreamDecision, StreamDecoder, cnn_feature_sequence,
                       replay_trial, sliding_windows, write_decisions)
from asad.tensor import grad_check_params

from tests.conftest import small_synth_config


@pytest.fixture
def swim_model(tiny_swcnn_config, tiny_swim_config):
    model = SWIM(tiny_swim_config, tiny_swcnn_config, np.random.default_rng(0))
    model.cnn.bn.stats.update(np.zeros(3), np.ones(3), 1.0)
    return model


class TestConfig:

    def test_step_counts(self):
        config = SWIMConfig()
        assert (config.window_samples, config.hop_samples, config.total_samples) == (128, 16, 640)
        assert config.n_steps(640) == 33
        assert config.n_steps(6400) == 393
        assert config.d_inner == 128 and config.resolved_dt_rank == 4

    def test_hop_must_divide_window(self):
        with pytest.raises(ValueError):
            SWIMConfig(hop_seconds=0.3)


class TestForward:

    def test_sliding_windows_are_centered_copies(self, rng):
        eeg = rng.standard_normal((2, 200)).astype(np.float32)
        windows = sliding_windows(eeg, 128, 16)
        assert windows.shape == (5, 2, 128)
        expected = eeg[:, 32:160] - eeg[:, 32:160].astype(np.float64).mean(axis=1, keepdims=True)
        np.testing.assert_allclose(windows[2], expected, atol=1e-6)

    def test_feature_sequence_matches_cnn(self, swim_model, rng):
        eeg = rng.standard_normal((4, 256)).astype(np.float32)
        seq = cnn_feature_sequence(eeg, swim_model.cnn, swim_model.config).data
        assert seq.shape == (5, 4)
        one = swim_model.cnn.features(sliding_windows(eeg, 128, 32)[3][None], 'eval').data[0]
        np.testing.assert_allclose(seq[3], one, rtol=1e-5, atol=1e-6)

    def test_logit_shapes(self, swim_model, rng):
        assert swim_model(rng.standard_normal((4, 256))).shape == (2,)
        assert swim_model(rng.standard_normal((3, 4, 256))).shape == (3, 2)
        assert swim_model.locus_logits(rng.standard_normal((5, 4, 256)), batch_size=2).shape == (5, 2)

    def test_too_short_input(self, swim_model, rng):
        with pytest.raises(ShapeError):
            swim_model(rng.standard_normal((4, 100)))

    def test_prefix_posteriors_match_forward(self, swim_model, rng):
        eeg = rng.standard_normal((4, 320)).astype(np.float32)
        posteriors = swim_model.step_posteriors(eeg)
        assert posteriors.shape == (7, 2)
        for n in (0, 3, 6):
            prefix = eeg[:, :128 + 32 * n]
            np.testing.assert_allclose(posteriors[n], ops.softmax(swim_model(prefix).data.astype(np.float64)),
                                       atol=1e-5)

    def test_from_swcnn_copies_cnn(self, tiny_swcnn_config, tiny_swim_config, rng):
        cnn = SWCNN(tiny_swcnn_config, rng)
        model = SWIM.from_swcnn(cnn, tiny_swim_config, rng)
        for (name, a), (_, b) in zip(cnn.state_dict().items(), model.cnn.state_dict().items()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_end_to_end_gradient(self, float64):
        rng = np.random.default_rng(3)
        model = small_swim(rng)
        X = rng.standard_normal((2, 4, 32))
        err, name = grad_check_params(lambda: ops.softmax_cross_entropy(model(X, 'train'), [0, 1]),
                                      dict(model.named_parameters()), max_coords=6)
        assert err < 1e-4, name

    def test_parameter_prefixes(self, swim_model):
        names = [n for n, _ in swim_model.named_parameters()]
        assert names[0].startswith('cnn.')
        assert any(n.startswith('backbone.layers.0.') for n in names)
        assert names[-1].startswith('head.')


class TestStreaming:

    def test_stream_matches_batch_posteriors(self, swim_model):
        trial = synth_trial(10.0)
        table = StreamDecoder.replay(swim_model, trial.data)
        batch = swim_model.step_posteriors(normalize_trial(trial).data)
        assert list(table.columns) == DECISION_COLUMNS
        assert len(table) == len(batch) == 37
        stream = table[['posterior_left', 'posterior_right']].to_numpy()
        assert np.max(np.abs(stream - batch)) < 1e-3

    def test_decision_timing(self, swim_model):
        table = replay_trial(swim_model, synth_trial(3.0))
        assert table['step_index'].tolist() == list(range(len(table)))
        assert table['time_s'].iloc[0] == pytest.approx(1.0)
        np.testing.assert_allclose(np.diff(table['time_s']), 0.25)
        assert set(table['decision']) <= {'left', 'right'}

    def test_warming_then_decisions(self, swim_model):
        decoder = StreamDecoder(swim_model, np.ones(4))
        chunk = np.zeros((4, 32), dtype=np.float32)
        assert [decoder.push(chunk) for _ in range(3)] == [WARMING] * 3
        decision = decoder.push(chunk)
        assert isinstance(decision, StreamDecision) and decision.step_index == 0
        assert decision.posterior.sum() == pytest.approx(1.0)

    def test_state_memory_is_constant(self, swim_model, rng):
        decoder = StreamDecoder(swim_model, np.ones(4))
        sizes = set()
        for i in range(300):
            decoder.push(rng.standard_normal((4, 32)))
            if i > 4:
                sizes.add(decoder.state.nbytes)
        assert len(sizes) == 1

    def test_chunk_and_channel_checks(self, swim_model):
        with pytest.raises(ShapeError):
            StreamDecoder(swim_model, np.ones(5))
        decoder = StreamDecoder(swim_model, np.ones(4))
        with pytest.raises(ShapeError):
            decoder.push(np.zeros((4, 31)))

    def test_swcnn_checkpoint_cannot_stream(self, tiny_swcnn_config):
        from asad.checkpoint import Checkpoint
        ckpt = Checkpoint.from_model(SWCNN(tiny_swcnn_config))
        with pytest.raises(CheckpointError):
            StreamDecoder(ckpt, np.ones(4))

    def test_write_decisions(self, swim_model, tmp_path):
        path = write_decisions(replay_trial(swim_model, synth_trial(2.0)), str(tmp_path / 'decisions.csv'))
        header = open(path).readline().strip()
        assert header == ','.join(DECISION_COLUMNS)


def synth_trial(seconds):
    from asad.synth import synth_generate
    config = small_synth_config(n_subjects=1, n_trials=1, duration_s=seconds, envelope_on_prob=0.7)
    return synth_generate(config, seed=5).trials[0]
