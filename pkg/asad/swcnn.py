"""Short-window CNN: feature extractor with locus and subject heads."""
import logging

import numpy as np

from asad import ops
from asad.errors import DataError, ShapeError
from asad.models import SWCNNConfig
from asad.nn import BatchNorm, Linear, Module, Parameter, uniform_init

logger = logging.getLogger(__name__)


class SWCNN(Module):
    """conv_time -> BatchNorm -> ReLU -> mean over time -> FC1 -> ReLU -> FC2.

    Accepts [C, T] or [B, C, T] windows of any T >= kernel_time. The first two
    logits score the locus, the remaining ``n_subjects`` the subject.
    """

    def __init__(self, config=None, rng=None):
        self.config = config or SWCNNConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        fan_in = c.in_channels * c.kernel_time
        self.conv_weight = Parameter(uniform_init(rng, (c.conv_out_channels, c.in_channels, c.kernel_time), fan_in))
        self.conv_bias = Parameter(uniform_init(rng, (c.conv_out_channels,), fan_in))
        self.bn = BatchNorm(c.conv_out_channels) if c.batchnorm else None
        self.fc1 = Linear(c.conv_out_channels, c.hidden_dim, rng)
        self.fc2 = Linear(c.hidden_dim, c.n_outputs, rng)

    def _check(self, x):
        n_channels = x.shape[-2] if x.ndim >= 2 else None
        if x.ndim not in (2, 3) or n_channels != self.config.in_channels:
            raise ShapeError(f"SW_CNN expects [{self.config.in_channels}, T] windows, got shape {x.shape}")
        if x.shape[-1] < self.config.kernel_time:
            raise ShapeError(f"window of {x.shape[-1]} samples is shorter than the kernel ({self.config.kernel_time})")

    def features(self, x, mode='eval'):
        """Post-ReLU FC1 activations: the hidden vector SWIM consumes."""
        self._check(x)
        pad = (self.config.kernel_time - 1) // 2
        h = ops.conv_time(x, self.conv_weight, self.conv_bias, pad, pad)
        if self.bn is not None:
            h = self.bn(h, mode)
        h = ops.relu(h)
        h = ops.mean_over_time(h)
        return ops.relu(self.fc1(h))

    def forward(self, x, mode='eval'):
        return self.fc2(self.features(x, mode))

    __call__ = forward


def multitask_loss(logits, locus, subject, gamma):
    """CE(locus logits) + gamma * CE(subject logits)."""
    n_outputs = logits.shape[-1]
    loss = ops.softmax_cross_entropy(ops.slice_last(logits, 0, 2), locus)
    if gamma == 0:
        subjects = np.atleast_1d(np.asarray(subject))
        if np.any(subjects < 0) or np.any(subjects >= n_outputs - 2):
            raise DataError(f"subject label out of range [0, {n_outputs - 2})")
        return loss
    subject_loss = ops.softmax_cross_entropy(ops.slice_last(logits, 2, n_outputs), subject)
    return loss + subject_loss * gamma


def predict_locus(model, X, batch_size=256):
    """Argmax locus predictions for an array of windows [B, C, T] (eval mode)."""
    logits = locus_logits_array(model, X, batch_size)
    return logits.argmax(axis=1)


def locus_logits_array(model, X, batch_size=256):
    out = []
    for i in range(0, len(X), batch_size):
        out.append(model.forward(X[i:i + batch_size], 'eval').data[:, :2])
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.float32)
