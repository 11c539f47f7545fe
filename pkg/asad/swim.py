"""
SWIM: SW_CNN feature sequence -> projection -> Mamba backbone -> mean pool -> locus head,
plus the chunk-by-chunk streaming decoder.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from asad import ops
from asad.dataio import center, trial_stds
from asad.errors import CheckpointError, ShapeError
from asad.models import LOCI, SWCNNConfig, SWIMConfig
from asad.nn import Linear, Module
from asad.ssm import MambaBackbone
from asad.swcnn import SWCNN
from asad.utils import write_table

logger = logging.getLogger(__name__)

DECISION_COLUMNS = ['step_index', 'time_s', 'posterior_left', 'posterior_right', 'decision']

# Upper bound on scan-state elements (B * N * d_inner * d_state) per evaluation batch.
SCAN_BUDGET = 1 << 24


def sliding_windows(eeg, window, hop):
    """[..., C, T] -> [..., N, C, window] centered copies at ``hop`` spacing."""
    n_time = eeg.shape[-1]
    if n_time < window:
        raise ShapeError(f"SWIM needs at least {window} samples, got {n_time}")
    view = np.lib.stride_tricks.sliding_window_view(eeg, window, axis=-1)[..., ::hop, :]
    return center(np.moveaxis(view, -2, -3))


def cnn_feature_sequence(eeg, cnn, config, mode='eval'):
    """Hidden SW_CNN features of every 1 s sub-window: [C, T] -> [N, H] or [B, C, T] -> [B, N, H]."""
    eeg = np.asarray(eeg)
    if eeg.ndim not in (2, 3):
        raise ShapeError(f"cnn_feature_sequence expects [C, T] or [B, C, T], got {eeg.shape}")
    windows = sliding_windows(eeg, config.window_samples, config.hop_samples)
    lead = windows.shape[:-2]
    flat = windows.reshape((-1,) + windows.shape[-2:])
    features = cnn.features(flat, mode)
    return ops.reshape(features, lead + (features.shape[-1],))


class SWIM(Module):

    def __init__(self, config=None, cnn_config=None, rng=None):
        self.config = config or SWIMConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cnn = SWCNN(cnn_config or SWCNNConfig(), rng)
        self.proj = Linear(self.cnn.config.hidden_dim, self.config.d_model, rng)
        self.backbone = MambaBackbone(self.config, rng)
        self.head = Linear(self.config.d_model, 2, rng)

    @classmethod
    def from_swcnn(cls, swcnn, config=None, rng=None):
        """New SWIM whose CNN starts from a trained SW_CNN."""
        model = cls(config, swcnn.config, rng)
        model.cnn.load_state_dict(swcnn.state_dict())
        return model

    def hidden(self, eeg, mode='eval', cnn_mode=None):
        features = cnn_feature_sequence(eeg, self.cnn, self.config, cnn_mode or mode)
        return self.backbone(self.proj(features), mode)

    def forward(self, eeg, mode='eval', cnn_mode=None):
        """Locus logits [2] (or [B, 2]) from the mean over every hop of ``eeg``."""
        h = self.hidden(eeg, mode, cnn_mode)
        return self.head(ops.mean(h, axis=-2))

    __call__ = forward

    def step_posteriors(self, eeg):
        """Posteriors after every hop for one recording [C, T] -> [N, 2].

        Row n pools backbone outputs 0..n, so it equals forward() on the
        first window + n * hop samples.
        """
        h = self.hidden(eeg, 'eval').data.astype(np.float64)
        if h.ndim != 2:
            raise ShapeError(f"step_posteriors takes one recording [C, T], got {np.shape(eeg)}")
        pooled = np.cumsum(h, axis=0) / np.arange(1, h.shape[0] + 1)[:, None]
        return ops.softmax(self.head.array(pooled))

    def locus_logits(self, X, batch_size=32):
        """Eval-mode logits for an array of spans [B, C, T], batched under SCAN_BUDGET."""
        X = np.asarray(X)
        n_steps = self.config.n_steps(X.shape[-1])
        per_sample = n_steps * self.config.d_inner * self.config.d_state
        step = max(1, min(batch_size, SCAN_BUDGET // max(per_sample, 1)))
        out = [self.forward(X[i:i + step], 'eval').data for i in range(0, len(X), step)]
        return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.float32)


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------

@dataclass
class StreamDecision:
    step_index: int
    time_s: float
    posterior: np.ndarray
    decision: str

    def as_row(self):
        return {
            'step_index': self.step_index,
            'time_s': self.time_s,
            'posterior_left': float(self.posterior[0]),
            'posterior_right': float(self.posterior[1]),
            'decision': self.decision,
        }


WARMING = 'warming'


class StreamState:
    """Ring buffer of the latest window, per-layer SSM states and the running pool."""

    def __init__(self, model, stds):
        config = model.config
        n_channels = model.cnn.config.in_channels
        stds = np.asarray(stds, dtype=np.float64)
        if stds.shape != (n_channels,):
            raise ShapeError(f"model expects {n_channels} channels, got {stds.shape[0] if stds.ndim else 0} channel stds")
        if not np.all(stds > 0):
            raise ShapeError("channel standard deviations must all be positive")
        self.model = model
        self.stds = stds
        self.buffer = np.zeros((n_channels, config.window_samples), dtype=np.float32)
        self.filled = 0
        self.ssm = model.backbone.init_state(1)
        self.pooled_sum = np.zeros(config.d_model, dtype=np.float64)
        self.n_decisions = 0
        self.n_pushes = 0

    @property
    def ready(self):
        return self.n_decisions > 0

    @property
    def nbytes(self):
        return self.buffer.nbytes + self.ssm.nbytes + self.pooled_sum.nbytes + self.stds.nbytes


def stream_init(source, trial_channel_stds):
    """Fresh StreamState for a SWIM model or a checkpoint holding one."""
    model = source
    if not isinstance(source, SWIM):
        if getattr(source, 'model_kind', None) != 'swim':
            raise CheckpointError("streaming needs a checkpoint with both SW_CNN and Mamba parameters")
        model = source.to_model()
    return StreamState(model, trial_channel_stds)


def stream_push(state, chunk):
    """Feed one hop of raw EEG [C, hop]; returns 'warming' or a StreamDecision."""
    model = state.model
    config = model.config
    hop = config.hop_samples
    chunk = np.asarray(chunk)
    if chunk.shape != (state.buffer.shape[0], hop):
        raise ShapeError(f"stream chunk must be [{state.buffer.shape[0]}, {hop}], got {chunk.shape}")
    state.n_pushes += 1
    state.buffer[:, :-hop] = state.buffer[:, hop:]
    state.buffer[:, -hop:] = (chunk.astype(np.float64) / state.stds[:, None]).astype(np.float32)
    state.filled = min(state.filled + hop, config.window_samples)
    if state.filled < config.window_samples:
        return WARMING

    features = model.cnn.features(center(state.buffer)[None], 'eval').data
    _, out = model.backbone.step(state.ssm, model.proj.array(features))
    state.pooled_sum += out[0]
    state.n_decisions += 1
    pooled = state.pooled_sum / state.n_decisions
    posterior = ops.softmax(model.head.array(pooled))
    return StreamDecision(
        step_index=state.n_decisions - 1,
        time_s=state.n_pushes * hop / config.fs,
        posterior=posterior,
        decision=LOCI[int(np.argmax(posterior))],
    )


class StreamDecoder:
    """Convenience wrapper owning one StreamState."""

    def __init__(self, source, trial_channel_stds):
        self.state = stream_init(source, trial_channel_stds)

    def push(self, chunk):
        return stream_push(self.state, chunk)

    @classmethod
    def replay(cls, source, data, stds=None):
        """Push a whole raw recording [C, T] hop by hop; returns the decisions table."""
        data = np.asarray(data)
        if stds is None:
            stds = data.astype(np.float64).std(axis=1)
        decoder = cls(source, stds)
        hop = decoder.state.model.config.hop_samples
        n_chunks = data.shape[1] // hop
        if data.shape[1] % hop:
            logger.debug(f"replay drops the trailing {data.shape[1] % hop} samples")
        rows = []
        for k in range(n_chunks):
            result = decoder.push(data[:, k * hop:(k + 1) * hop])
            if isinstance(result, StreamDecision):
                rows.append(result.as_row())
        logger.info(f"Replayed {n_chunks} chunks, {len(rows)} decisions")
        return pd.DataFrame(rows, columns=DECISION_COLUMNS)


def replay_trial(source, trial):
    """Replay an EEGTrial using its whole-trial channel stds."""
    return StreamDecoder.replay(source, trial.data, trial_stds(trial))


def write_decisions(frame, path):
    return write_table(frame, path, DECISION_COLUMNS)
