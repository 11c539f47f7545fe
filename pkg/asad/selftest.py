"""
Oracle suites run by ``run.py selftest``.

Each check returns a status dict {'name', 'success', 'message', 'value'} and
never raises for a failed comparison; unexpected exceptions are reported as
failures too.
"""
import logging
import math
import time

import numpy as np

from asad import ops
from asad.dataio import WindowSet, extract_windows, normalize_trial, window_count
from asad.evalkit import combine_models
from asad.models import EEGTrial, Segment, SWCNNConfig, SWIMConfig, SynthConfig
from asad.ssm import MambaBlock, selective_scan_parallel, selective_scan_sequential
from asad.swcnn import SWCNN, multitask_loss
from asad.swim import SWIM, StreamDecoder
from asad.synth import synth_generate
from asad.tensor import Tensor, grad_check_params, precision

logger = logging.getLogger(__name__)


def _status(name, success, message, value=None):
    return {'name': name, 'success': bool(success), 'message': message, 'value': value}


def check_grad_swcnn(tol=1e-5):
    with precision('float64'):
        rng = np.random.default_rng(1)
        model = SWCNN(SWCNNConfig(in_channels=4, conv_out_channels=3, hidden_dim=5, n_subjects=3), rng)
        X = rng.standard_normal((3, 4, 16))
        locus, subject = np.array([0, 1, 1]), np.array([2, 0, 1])
        err, name = grad_check_params(lambda: multitask_loss(model(X, 'train'), locus, subject, 0.05),
                                      dict(model.named_parameters()), eps=1e-6)
    return _status('grad_swcnn', err < tol, f"max relative error {err:.2e} at {name}", err)


def check_grad_mamba_block(tol=1e-5):
    with precision('float64'):
        rng = np.random.default_rng(2)
        block = MambaBlock(SWIMConfig(d_model=8, d_state=4, expand=2, d_conv=3), rng)
        u = Tensor(rng.standard_normal((2, 6, 8)))
        weights = rng.standard_normal((2, 6, 8))
        err, name = grad_check_params(lambda: ops.mean(ops.reshape(block(u) * weights, (-1,)), axis=0),
                                      dict(block.named_parameters()), eps=1e-6)
    return _status('grad_mamba_block', err < tol, f"max relative error {err:.2e} at {name}", err)


def small_swim(rng, n_channels=4):
    swim_config = SWIMConfig(fs=16, cnn_window_seconds=1.0, hop_seconds=0.25, train_total_seconds=2.0,
                             n_layers=2, d_model=6, d_state=3, d_conv=3)
    cnn_config = SWCNNConfig(in_channels=n_channels, conv_out_channels=3, hidden_dim=5, n_subjects=2)
    return SWIM(swim_config, cnn_config, rng)


def check_grad_swim(tol=1e-4):
    with precision('float64'):
        rng = np.random.default_rng(3)
        model = small_swim(rng)
        X = rng.standard_normal((2, 4, 32))
        locus = np.array([0, 1])
        err, name = grad_check_params(lambda: ops.softmax_cross_entropy(model(X, 'train'), locus),
                                      dict(model.named_parameters()), eps=1e-6, max_coords=8)
    return _status('grad_swim', err < tol, f"max relative error {err:.2e} at {name}", err)


def random_scan_inputs(rng, n_steps, d_inner, d_state, batch=1):
    x = rng.standard_normal((batch, n_steps, d_inner))
    delta = np.logaddexp(0, rng.standard_normal((batch, n_steps, d_inner)) - 2.0)
    A = -np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)) * rng.uniform(0.5, 1.5, (d_inner, 1))
    B = rng.standard_normal((batch, n_steps, d_state))
    C = rng.standard_normal((batch, n_steps, d_state))
    D = rng.standard_normal(d_inner)
    return x, delta, A, B, C, D


def check_scan_equivalence(n_configs=100, max_steps=1024, max_inner=128, max_state=16, tol=1e-5):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(n_configs):
        n_steps = int(rng.integers(1, max_steps + 1)) if i else max_steps
        d_inner = int(rng.integers(1, max_inner + 1)) if i else max_inner
        d_state = int(rng.integers(1, max_state + 1)) if i else max_state
        chunk = int(rng.choice([1, 7, 16, 64, 128]))
        args = random_scan_inputs(rng, n_steps, d_inner, d_state)
        zoh = bool(i % 2)
        diff = np.max(np.abs(selective_scan_parallel(*args, zoh=zoh, chunk_size=chunk)
                             - selective_scan_sequential(*args, zoh=zoh)))
        worst = max(worst, float(diff))
    return _status('scan_equivalence', worst < tol, f"{n_configs} configs, max abs diff {worst:.2e}", worst)


def _stream_fixture(seconds, seed=5):
    config = SynthConfig(n_subjects=1, n_trials=1, duration_s=seconds, envelope_on_prob=0.7)
    trial = synth_generate(config, seed).trials[0]
    model = SWIM(SWIMConfig(), SWCNNConfig(), np.random.default_rng(seed))
    # Give BatchNorm running statistics so eval mode is usable.
    model.cnn.bn.stats.update(np.zeros(16), np.ones(16), 1.0)
    return trial, model


def check_streaming_equivalence(seconds=50.0, tol=1e-3):
    trial, model = _stream_fixture(seconds)
    normalized = normalize_trial(trial)
    batch = model.step_posteriors(normalized.data)
    table = StreamDecoder.replay(model, trial.data)
    stream = table[['posterior_left', 'posterior_right']].to_numpy()
    if stream.shape != batch.shape:
        return _status('streaming_equivalence', False, f"{stream.shape[0]} stream decisions vs {batch.shape[0]} batch steps")
    diff = float(np.max(np.abs(stream - batch)))
    return _status('streaming_equivalence', diff < tol, f"{len(stream)} decisions, max posterior diff {diff:.2e}", diff)


def check_stream_memory(n_pushes=2000):
    trial, model = _stream_fixture(2.0)
    decoder = StreamDecoder(model, np.ones(trial.n_channels))
    chunk = np.zeros((trial.n_channels, model.config.hop_samples), dtype=np.float32)
    sizes = set()
    for i in range(n_pushes):
        decoder.push(chunk + np.float32(i % 3))
        if i >= 8:
            sizes.add(decoder.state.nbytes)
    return _status('stream_memory', len(sizes) == 1, f"state size after {n_pushes} pushes: {sorted(sizes)} bytes",
                   n_pushes)


def check_window_counts(max_length=1000, max_window=64, stride=37):
    failures = []
    for alpha in (0.0, 0.25, 0.5, 0.75):
        for length in range(1, max_length + 1, stride):
            data = np.ones((1, length), dtype=np.float32)
            trial = EEGTrial(0, 0, 128, ('c',), data, 'left', 1, 1)
            for window in range(1, min(max_window, length) + 1, 5):
                expected = (length - window) // max(1, math.floor((1 - alpha) * window + 0.5)) + 1
                got = len(WindowSet([trial], [Segment(0, 0, length)], window, alpha))
                # Materializing every window is slow; spot-check a tenth of the grid.
                if (length + window) % 10 == 0 and len(extract_windows(trial, window, alpha)) != got:
                    got = -1
                if got != expected or window_count(length, window, alpha) != expected:
                    failures.append((length, window, alpha, got, expected))
    swim = SWIMConfig()
    steps = (swim.n_steps(640), swim.n_steps(6400))
    ok = not failures and steps == (33, 393)
    return _status('window_counts', ok, f"{len(failures)} mismatches; N(5 s)={steps[0]}, N(50 s)={steps[1]}",
                   failures[:5])


def check_loss_identity(tol=1e-6):
    logits = Tensor(np.zeros(18), dtype=np.float64)
    loss = multitask_loss(logits, 0, 0, 0.05).item()
    expected = math.log(2) + 0.05 * math.log(16)
    locus_only = multitask_loss(logits, 1, 3, 0.0).item()
    ok = abs(loss - expected) < tol and locus_only == ops.softmax_cross_entropy(ops.slice_last(logits, 0, 2), 1).item()
    return _status('loss_identity', ok, f"uniform multitask loss {loss:.8f} (expected {expected:.8f})", loss)


def check_combination_identity(tol=1e-6):
    a = np.array([0.3, -1.2, 4.0])
    same = np.max(np.abs(combine_models(a, a) - ops.softmax(a[:2])))
    opposed = np.max(np.abs(combine_models([10.0, -10.0], [-10.0, 10.0]) - 0.5))
    ok = same < tol and opposed < tol
    return _status('combination_identity', ok, f"identity diff {same:.1e}, opposed diff {opposed:.1e}",
                   max(same, opposed))


def selftest_plan(full=False):
    """(name, check, kwargs) triples; ``full`` uses acceptance-size settings."""
    return [
        ('grad_swcnn', check_grad_swcnn, {}),
        ('grad_mamba_block', check_grad_mamba_block, {}),
        ('grad_swim', check_grad_swim, {}),
        ('scan_equivalence', check_scan_equivalence, {} if full else {'n_configs': 20, 'max_steps': 256}),
        ('streaming_equivalence', check_streaming_equivalence, {} if full else {'seconds': 10.0}),
        ('stream_memory', check_stream_memory, {'n_pushes': 100000} if full else {}),
        ('window_counts', check_window_counts, {'stride': 1} if full else {}),
        ('loss_identity', check_loss_identity, {}),
        ('combination_identity', check_combination_identity, {}),
    ]


def run_selftest(full=False, plan=None):
    """Run every oracle and return one status dict per check."""
    results = []
    for name, fn, kwargs in plan or selftest_plan(full):
        started = time.perf_counter()
        try:
            result = fn(**kwargs)
        except Exception as e:
            logger.error(f"selftest {name} raised: {str(e)}")
            result = _status(name, False, f"raised {type(e).__name__}: {e}")
        result['seconds'] = round(time.perf_counter() - started, 3)
        level = logging.INFO if result['success'] else logging.ERROR
        logger.log(level, f"{name}: {'ok' if result['success'] else 'FAILED'} ({result['message']})")
        results.append(result)
    return results
