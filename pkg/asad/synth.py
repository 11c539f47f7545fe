"""
Synthetic EEG with a known locus code, used in place of the licensed corpus.

Informative channels carry an 8 Hz template whose topography depends on the
attended locus. Two codes exist:

- ``phase`` (default): a random-phase sinusoid on a channel pair, in phase
  for left and anti-phase for right. Neither channel alone tells left from
  right, and the code is not linear in the raw samples.
- ``sign``: a fixed-phase waveform with a second harmonic whose sign flips
  with the locus. One informative channel is enough, and raw windows that
  start on a template period are linearly separable.

Every other channel is white noise, mixed by a per-subject matrix so that
subject identity is recoverable.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from asad.dataio import write_dataset
from asad.models import LOCI, EEGTrial, SynthConfig, to_dict
from asad.utils import derive_rng

logger = logging.getLogger(__name__)

# Speaker 3 narrates stories 3 and 4.
STORY_SPEAKER = {1: 1, 2: 2, 3: 3, 4: 3}

# Fraction of the trial where the topography equals its nominal angle (the test slice).
DRIFT_ANCHOR = 0.925


@dataclass
class SyntheticDataset:
    trials: list
    manifest: dict
    manifest_path: str = None


def trial_labels(subject, trial_id):
    story = trial_id % 4 + 1
    locus = (trial_id + trial_id // 4 + subject) % 2
    return LOCI[locus], STORY_SPEAKER[story], story


def subject_mixing(config, seed, subject, n_noise):
    rng = derive_rng(seed, 1, subject)
    return np.eye(n_noise) + config.subject_mixing * rng.standard_normal((n_noise, n_noise)) / math.sqrt(max(n_noise, 1))


def topography(theta, locus, code='phase'):
    """Weights of the informative pair for one locus."""
    if code == 'sign':
        sign = 1.0 if locus == 'left' else -1.0
        return sign * np.cos(theta), sign * np.sin(theta)
    if locus == 'left':
        return np.cos(theta), np.sin(theta)
    return -np.sin(theta), np.cos(theta)


def template(config, t, rng):
    arg = 2.0 * math.pi * config.template_hz * t
    if config.topography == 'sign':
        return np.sin(arg) - 0.5 * np.cos(2.0 * arg)
    return np.sin(arg + rng.uniform(0.0, 2.0 * math.pi))


def informative_weights(config, theta, locus):
    if len(config.informative) == 1:
        return (1.0 if locus == 'left' else -1.0,)
    return topography(theta, locus, config.topography)


def envelope(config, rng, n_samples):
    if config.envelope_on_prob >= 1.0:
        return np.ones(n_samples)
    block = max(1, int(round(config.envelope_block_s * config.fs)))
    n_blocks = -(-n_samples // block)
    on = (rng.random(n_blocks) < config.envelope_on_prob).astype(np.float64)
    return np.repeat(on, block)[:n_samples]


def ground_truth(config, informative_idx):
    return {
        'informative_channels': [int(i) for i in informative_idx],
        'informative_names': list(config.informative),
        'template': {
            'kind': 'sine' if config.topography == 'phase' else 'sine+harmonic',
            'code': config.topography,
            'frequency_hz': config.template_hz,
            'amplitude': config.amplitude,
            'left_topography': 'in-phase' if config.topography == 'phase' else 'positive',
            'right_topography': 'anti-phase' if config.topography == 'phase' else 'negative',
            'phase': 'random per trial' if config.topography == 'phase' else 'fixed',
            'drift': config.drift,
            'drift_anchor': DRIFT_ANCHOR,
            'envelope_on_prob': config.envelope_on_prob,
            'envelope_block_s': config.envelope_block_s,
        },
        'config': to_dict(config),
    }


def synth_generate(config=None, seed=0, out_dir=None):
    """Generate trials (and optionally write them with a manifest to ``out_dir``)."""
    config = config or SynthConfig()
    names = tuple(config.channel_names)
    informative_idx = [names.index(c) for c in config.informative]
    noise_idx = [i for i in range(len(names)) if i not in informative_idx]
    n = config.n_samples
    t = np.arange(n) / config.fs
    theta = math.pi / 4 + config.drift * (np.arange(n) / n - DRIFT_ANCHOR)
    amplitude = config.amplitude

    trials = []
    for subject in range(config.n_subjects):
        mixing = subject_mixing(config, seed, subject, len(noise_idx))
        for trial_id in range(config.n_trials):
            rng = derive_rng(seed, 2, subject, trial_id)
            locus, speaker, story = trial_labels(subject, trial_id)
            data = rng.standard_normal((len(names), n))
            data[noise_idx] = mixing @ data[noise_idx]
            if amplitude > 0:
                wave = template(config, t, rng)
                signal = amplitude * envelope(config, rng, n) * wave
                for idx, weight in zip(informative_idx, informative_weights(config, theta, locus)):
                    data[idx] += weight * signal
            data = data.astype(np.float32)
            data.flags.writeable = False
            trials.append(EEGTrial(
                subject_id=subject,
                trial_id=trial_id,
                fs=config.fs,
                channel_names=names,
                data=data,
                attended_locus=locus,
                attended_speaker=speaker,
                story=story,
            ))

    truth = ground_truth(config, informative_idx)
    manifest = {'fs': config.fs, 'channel_names': list(names), 'n_trials': len(trials), 'ground_truth': truth}
    path = write_dataset(trials, out_dir, truth) if out_dir else None
    logger.info(f"Generated {len(trials)} synthetic trials ({config.n_subjects} subjects, snr {config.snr_db} dB)")
    return SyntheticDataset(trials=trials, manifest=manifest, manifest_path=path)
