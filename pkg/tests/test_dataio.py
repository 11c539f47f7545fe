"""Tests for the trial container, normalization, windowing, masking and split protocols."""
import json
import os

import numpy as np
import pytest

from asad.dataio import (WindowSet, center, draw_mask, extract_windows, load_dataset, load_manifest,
                         make_split, mask_columns, normalize_trial, prepare_dataset, read_trial_file,
                         select_channels, split_every_trial, split_leave_speaker_out, split_leave_subject_out,
                         split_to_dict, time_mask, window_count, write_dataset)
from asad.errors import DataError
from asad.models import NINE_CHANNELS, EEGTrial, Segment
from asad.utils import derive_rng


def make_trial(n_samples, n_channels=1, subject=0, trial_id=0, locus='left', speaker=1, data=None):
    if data is None:
        data = np.random.default_rng(trial_id).standard_normal((n_channels, n_samples)).astype(np.float32)
    names = tuple(f"c{i}" for i in range(data.shape[0]))
    return EEGTrial(subject, trial_id, 128, names, data, locus, speaker, 1)


# =============================================================================
# Container format
# =============================================================================

class TestContainer:

    def test_round_trip(self, tmp_path, raw_trials):
        path = write_dataset(raw_trials, str(tmp_path / 'ds'))
        loaded = load_dataset(path)
        assert len(loaded) == len(raw_trials)
        for a, b in zip(raw_trials, loaded):
            assert (a.subject_id, a.trial_id, a.attended_locus, a.attended_speaker) == \
                   (b.subject_id, b.trial_id, b.attended_locus, b.attended_speaker)
            np.testing.assert_array_equal(a.data, b.data)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(str(tmp_path / 'nope.json'))

    def test_truncated_data_file(self, synth_dir):
        manifest = load_manifest(synth_dir)
        path = os.path.join(os.path.dirname(synth_dir), manifest['trials'][0]['data_file'])
        with open(path, 'rb+') as f:
            f.truncate(os.path.getsize(path) - 4)
        with pytest.raises(DataError, match='bytes'):
            load_dataset(synth_dir)

    def test_missing_trial_field(self, synth_dir):
        manifest = load_manifest(synth_dir)
        del manifest['trials'][1]['story']
        with open(synth_dir, 'w') as f:
            json.dump(manifest, f)
        with pytest.raises(DataError, match='story'):
            load_dataset(synth_dir)

    def test_unknown_locus(self, synth_dir):
        manifest = load_manifest(synth_dir)
        manifest['trials'][0]['attended_locus'] = 'up'
        with open(synth_dir, 'w') as f:
            json.dump(manifest, f)
        with pytest.raises(DataError):
            load_dataset(synth_dir)

    def test_read_without_sample_count(self, tmp_path):
        data = np.arange(12, dtype='<f4').reshape(3, 4)
        path = tmp_path / 'x.f32'
        data.tofile(path)
        np.testing.assert_array_equal(read_trial_file(str(path), 3), data)
        with pytest.raises(DataError):
            read_trial_file(str(path), 5)


# =============================================================================
# Normalization and channels
# =============================================================================

class TestNormalization:

    def test_unit_std_per_channel(self, raw_trials):
        out = normalize_trial(raw_trials[0])
        np.testing.assert_allclose(out.data.astype(np.float64).std(axis=1), 1.0, rtol=1e-5)
        assert out.data.dtype == np.float32

    def test_zero_variance_names_channel(self):
        data = np.ones((2, 50), dtype=np.float32)
        data[0] = np.arange(50)
        with pytest.raises(DataError, match='c1'):
            normalize_trial(make_trial(50, data=data))

    def test_select_channels_order(self, raw_trials):
        out = select_channels(raw_trials[0], ('Fz', 'AF7'))
        names = raw_trials[0].channel_names
        np.testing.assert_array_equal(out.data[0], raw_trials[0].data[names.index('Fz')])
        assert out.channel_names == ('Fz', 'AF7')

    def test_select_unknown_channel(self, raw_trials):
        with pytest.raises(DataError, match='Oz'):
            select_channels(raw_trials[0], ('AF7', 'Oz'))

    def test_prepare_dataset_nine_channels(self, tmp_path):
        from asad.models import SynthConfig
        from asad.synth import synth_generate
        config = SynthConfig(n_subjects=1, n_trials=1, duration_s=4.0)
        path = synth_generate(config, 0, str(tmp_path / 'full')).manifest_path
        trials = prepare_dataset(path, NINE_CHANNELS)
        assert trials[0].channel_names == NINE_CHANNELS
        assert trials[0].n_channels == 9


# =============================================================================
# Windows
# =============================================================================

class TestWindows:

    @pytest.mark.parametrize('alpha,expected', [(0.0, 360), (0.75, 1437)])
    def test_six_minute_trial_counts(self, alpha, expected):
        assert window_count(46080, 128, alpha) == expected
        trial = make_trial(46080)
        assert len(WindowSet([trial], [Segment(0, 0, 46080)], 128, alpha)) == expected

    def test_window_longer_than_trial(self):
        trial = make_trial(100)
        assert window_count(100, 128, 0.0) == 0
        with pytest.raises(DataError):
            extract_windows(trial, 128, 0.0)
        assert len(WindowSet([trial], [Segment(0, 0, 100)], 128)) == 0

    def test_windows_are_centered(self):
        trial = make_trial(400, n_channels=3)
        for w in extract_windows(trial, 128, 0.5):
            np.testing.assert_allclose(w.x.mean(axis=1), 0.0, atol=1e-6)

    def test_window_set_matches_extract_windows(self):
        trial = make_trial(500, n_channels=2, locus='right')
        expected = extract_windows(trial, 128, 0.75, 20, 480)
        window_set = WindowSet([trial], [Segment(0, 20, 480)], 128, 0.75)
        X, locus, subject = window_set.batch(np.arange(len(window_set)))
        assert len(expected) == len(window_set)
        np.testing.assert_array_equal(X, np.stack([w.x for w in expected]))
        assert set(locus) == {1}
        assert [w.source for w in window_set.windows()] == [w.source for w in expected]

    def test_uncentered_window_set_is_raw(self):
        trial = make_trial(300, n_channels=2)
        X, _, _ = WindowSet([trial], [Segment(0, 0, 300)], 128, 0.0, center_windows=False).batch([1])
        np.testing.assert_array_equal(X[0], trial.data[:, 128:256])

    def test_center_uses_float64_accumulation(self):
        x = np.full((1, 1000), 1e4, dtype=np.float32) + np.float32(0.5)
        np.testing.assert_allclose(center(x), 0.0, atol=1e-6)


# =============================================================================
# Time masking
# =============================================================================

class TestTimeMask:

    def test_beta_zero_never_masks(self, rng):
        x = np.ones((2, 64), dtype=np.float32)
        assert mask_columns(x, 0.0, rng) is x
        assert draw_mask(64, 0.0, rng) == (0, 0)

    def test_mask_is_one_contiguous_run(self):
        for seed in range(50):
            x = np.ones((3, 128), dtype=np.float32)
            out = mask_columns(x, 1.0, np.random.default_rng(seed))
            zero_cols = np.flatnonzero(np.all(out == 0, axis=0))
            assert np.all(out[:, ~np.isin(np.arange(128), zero_cols)] == 1)
            if zero_cols.size:
                assert zero_cols[-1] - zero_cols[0] + 1 == zero_cols.size
                assert zero_cols.size < 128
            assert np.all(x == 1)

    def test_mask_draws_are_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            t0, t = draw_mask(128, 0.25, rng)
            assert 0 <= t < 32
            assert 0 <= t0 and t0 + t <= 128

    def test_time_mask_keeps_labels(self):
        trial = make_trial(128, n_channels=2)
        window = extract_windows(trial, 128, 0.0)[0]
        masked = time_mask(window, 1.0, np.random.default_rng(3))
        assert masked.locus_label == window.locus_label and masked.source == window.source

    def test_batch_masks_are_reproducible(self):
        trial = make_trial(600, n_channels=2)
        window_set = WindowSet([trial], [Segment(0, 0, 600)], 128, 0.75)
        a, _, _ = window_set.batch(np.arange(5), beta=1.0, seed=4, epoch=2)
        b, _, _ = window_set.batch(np.arange(5)[::-1], beta=1.0, seed=4, epoch=2)
        np.testing.assert_array_equal(a, b[::-1])
        c, _, _ = window_set.batch(np.arange(5), beta=1.0, seed=4, epoch=3)
        assert not np.array_equal(a, c)

    def test_batch_mask_uses_per_window_stream(self):
        trial = make_trial(256, n_channels=1, subject=2, trial_id=5)
        window_set = WindowSet([trial], [Segment(0, 0, 256)], 128, 0.0)
        X, _, _ = window_set.batch([1], beta=1.0, seed=9, epoch=1)
        expected = mask_columns(center(trial.data[:, 128:256]), 1.0, derive_rng(9, 1, 2, 5, 128))
        np.testing.assert_array_equal(X[0], expected)


# =============================================================================
# Splits
# =============================================================================

class TestSplits:

    def test_every_trial_boundaries(self):
        split = split_every_trial([make_trial(46080)])
        assert split.partitions['train'] == [Segment(0, 0, 32256)]
        assert split.partitions['val'] == [Segment(0, 32256, 39168)]
        assert split.partitions['test'] == [Segment(0, 39168, 46080)]

    def test_leave_speaker_out(self, dataset):
        split = split_leave_speaker_out(dataset, 1)
        test = split.trial_indices('test')
        assert test and all(dataset[i].attended_speaker == 1 for i in test)
        rest = split.trial_indices('train') + split.trial_indices('val')
        assert all(dataset[i].attended_speaker != 1 for i in rest)
        assert len(split.trial_indices('val')) == 1
        assert not set(split.trial_indices('train')) & set(split.trial_indices('val'))

    def test_leave_speaker_three_is_rejected(self, dataset):
        with pytest.raises(DataError):
            split_leave_speaker_out(dataset, 3)

    def test_leave_subject_out(self, dataset):
        split = split_leave_subject_out(dataset, 1)
        assert {dataset[i].subject_id for i in split.trial_indices('test')} == {1}
        assert {dataset[i].subject_id for i in split.trial_indices('train')} == {0}
        with pytest.raises(DataError):
            split_leave_subject_out(dataset, 7)

    def test_split_is_seeded(self, dataset):
        a = make_split(dataset, 'leave-one-speaker-out', 2, seed=3)
        b = make_split(dataset, 'leave-one-speaker-out', 2, seed=3)
        assert a.partitions == b.partitions

    def test_split_to_dict_is_json_ready(self, dataset):
        doc = split_to_dict(make_split(dataset, 'every-trial'), dataset)
        json.dumps(doc)
        assert doc['protocol'] == 'every-trial'
        assert len(doc['partitions']['test']) == len(dataset)
