"""
Differentiable operations used by the SW_CNN and Mamba models.

Every op accepts an optional leading batch axis. Backward closures return one
adjoint per recorded parent (None where no gradient is needed).
"""
import numpy as np

from asad.errors import DataError, ModelStateError, ShapeError
from asad.tensor import Tensor, as_tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Pointwise activations
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _relu(x):
    return np.maximum(x, 0)


def _silu(x):
    return x * _sigmoid(x)


def _softplus(x):
    return np.logaddexp(0, x)


ACTIVATIONS = {
    'relu': _relu,
    'sigmoid': _sigmoid,
    'silu': _silu,
    'softplus': _softplus,
    'exp': np.exp,
}


def activation(kind, array):
    """Plain numpy forward of an activation (used by streaming inference)."""
    try:
        return ACTIVATIONS[kind](array)
    except KeyError:
        raise ValueError(f"Unknown activation: {kind}") from None


def elementwise(x, kind):
    x = as_tensor(x)
    xd = x.data
    y = activation(kind, xd)

    def backward_fn(g):
        if kind == 'relu':
            return (g * (xd > 0),)
        if kind == 'sigmoid':
            return (g * y * (1.0 - y),)
        if kind == 'silu':
            s = _sigmoid(xd)
            return (g * s * (1.0 + xd * (1.0 - s)),)
        if kind == 'softplus':
            return (g * _sigmoid(xd),)
        return (g * y,)

    return make_result(y, (x,), kind, backward_fn)


def relu(x):
    return elementwise(x, 'relu')


def silu(x):
    return elementwise(x, 'silu')


def softplus(x):
    return elementwise(x, 'softplus')


def exp(x):
    return elementwise(x, 'exp')


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), 'add', backward_fn)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), 'mul', backward_fn)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), 'reshape', backward_fn)


def slice_last(x, start, stop):
    """x[..., start:stop] along the trailing axis."""
    x = as_tensor(x)
    out = x.data[..., start:stop]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return make_result(out, (x,), 'slice', backward_fn)


def mean(x, axis=-1):
    x = as_tensor(x)
    n = x.shape[axis]
    if n == 0:
        raise ShapeError(f"mean over an empty axis {axis} of shape {x.shape}")
    out = x.data.mean(axis=axis)

    def backward_fn(g):
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_result(out, (x,), 'mean', backward_fn)


def mean_over_time(x):
    """Average over the trailing time axis: [..., F, T] -> [..., F]."""
    return mean(x, axis=-1)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv_time(x, kernel, bias=None, pad_left=0, pad_right=0):
    """Convolution over time with a kernel spanning all input channels.

    x: [C, T] or [B, C, T]; kernel: [F, C, K]; bias: [F]. Zero padding is
    applied on the time axis only.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv_time expects x [B,C,T] and kernel [F,C,K], got {x.shape} and {kernel.shape}")
    n_batch, n_channels, n_time = xd.shape
    n_filters, k_channels, width = kernel.shape
    if k_channels != n_channels:
        raise ShapeError(f"conv_time channel mismatch: input has {n_channels}, kernel expects {k_channels}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n_filters,):
            raise ShapeError(f"conv_time bias shape {bias.shape} does not match {n_filters} filters")
    padded = n_time + pad_left + pad_right
    if width > padded:
        raise ShapeError(f"conv_time kernel width {width} exceeds padded length {padded}")
    t_out = padded - width + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad_left, pad_right)))
    w = kernel.data
    out = np.zeros((n_batch, n_filters, t_out), dtype=np.result_type(xd, w))
    for k in range(width):
        out += np.matmul(w[:, :, k], xp[:, :, k:k + t_out])
    if bias is not None:
        out += bias.data[None, :, None]
    if squeeze:
        out = out[0]

    def backward_fn(g):
        g3 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(width):
                gxp[:, :, k:k + t_out] += np.matmul(w[:, :, k].T, g3)
            gx = gxp[:, :, pad_left:pad_left + n_time]
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gw = np.empty_like(w)
            for k in range(width):
                gw[:, :, k] = np.tensordot(g3, xp[:, :, k:k + t_out], axes=([0, 2], [0, 2]))
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result(out, parents, 'conv_time', backward_fn)


def causal_depthwise_conv(x, weight, bias=None):
    """Per-channel causal convolution over time.

    x: [N, D] or [B, N, D]; weight: [D, W]; out[n, d] = bias[d] +
    sum_k x[n + k - (W - 1), d] * weight[d, k], reading zeros before step 0.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    n_batch, n_steps, n_channels = xd.shape
    if weight.ndim != 2 or weight.shape[0] != n_channels:
        raise ShapeError(f"depthwise conv weight {weight.shape} does not match {n_channels} channels")
    width = weight.shape[1]
    xp = np.pad(xd, ((0, 0), (width - 1, 0), (0, 0)))
    w = weight.data
    out = np.zeros_like(xd)
    for k in range(width):
        out += xp[:, k:k + n_steps, :] * w[:, k]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    if squeeze:
        out = out[0]

    def backward_fn(g):
        g3 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(width):
                gxp[:, k:k + n_steps, :] += g3 * w[:, k]
            gx = gxp[:, width - 1:, :]
            if squeeze:
                gx = gx[0]
        if weight.requires_grad:
            gw = np.empty_like(w)
            for k in range(width):
                gw[:, k] = (g3 * xp[:, k:k + n_steps, :]).sum(axis=(0, 1))
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 1))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, 'causal_conv', backward_fn)


def linear(x, weight, bias=None):
    """y = x W^T + b over the trailing axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input trailing dim {x.shape[-1]} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, weight.shape[1])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, 'linear', backward_fn)


class RunningStats:
    """Exponential moving averages of per-channel mean and variance."""

    def __init__(self, n_features, dtype=None):
        dtype = dtype or as_tensor(0.0).dtype
        self.mean = np.zeros(n_features, dtype=dtype)
        self.var = np.ones(n_features, dtype=dtype)
        self.num_batches_tracked = np.zeros((), dtype=np.int64)

    def update(self, batch_mean, batch_var_unbiased, momentum):
        self.mean[...] = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var[...] = (1.0 - momentum) * self.var + momentum * batch_var_unbiased
        self.num_batches_tracked[...] = self.num_batches_tracked + 1


def batchnorm(x, gamma, beta, stats, mode='train', momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization per feature channel over batch and time.

    x: [F, T] or [B, F, T]. In train mode the running statistics in ``stats``
    are updated; eval mode refuses statistics that were never updated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    n_features = xd.shape[1]
    if gamma.shape != (n_features,) or beta.shape != (n_features,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {n_features} channels")
    axes = (0, 2)
    g_ = gamma.data[None, :, None]

    if mode == 'train':
        count = xd.shape[0] * xd.shape[2]
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        unbiased = var * (count / (count - 1)) if count > 1 else var
        stats.update(mu.reshape(-1), unbiased.reshape(-1), momentum)
    elif mode == 'eval':
        if int(stats.num_batches_tracked) == 0:
            raise ModelStateError("batchnorm in eval mode needs running statistics; none were ever updated")
        count = None
        inv = (1.0 / np.sqrt(stats.var + eps))[None, :, None].astype(xd.dtype)
        xhat = (xd - stats.mean[None, :, None]) * inv
    else:
        raise ValueError(f"Unknown batchnorm mode: {mode}")

    out = g_ * xhat + beta.data[None, :, None]
    if squeeze:
        out = out[0]

    def backward_fn(g):
        g3 = g[None] if squeeze else g
        gb = g3.sum(axis=axes)
        gg = (g3 * xhat).sum(axis=axes)
        gxhat = g3 * g_
        if mode == 'train':
            gx = (inv / count) * (count * gxhat
                                  - gxhat.sum(axis=axes, keepdims=True)
                                  - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv
        if squeeze:
            gx = gx[0]
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), f'batchnorm[{mode}]', backward_fn)


def rms_norm(x, weight, eps=1e-5):
    """x / sqrt(mean(x^2) + eps) * weight over the trailing axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    out = xd * r * weight.data

    def backward_fn(g):
        gw_ = g * weight.data
        gx = r * gw_ - xd * (r ** 3) * (gw_ * xd).mean(axis=-1, keepdims=True)
        gweight = (g * xd * r).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gweight

    return make_result(out, (x, weight), 'rms_norm', backward_fn)


def rms_norm_array(x, weight, eps=1e-5):
    """Numpy forward of rms_norm for streaming."""
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * weight


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax(logits):
    z = np.asarray(logits)
    s = np.exp(z - z.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Mean over the batch of -log softmax(logits)[label].

    logits: [K] or [B, K]; label: int or int array of length B.
    """
    logits = as_tensor(logits)
    squeeze = logits.ndim == 1
    z = logits.data[None] if squeeze else logits.data
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n_batch, n_classes = z.shape
    if labels.shape != (n_batch,):
        raise ShapeError(f"cross-entropy: {labels.shape[0]} labels for {n_batch} logit rows")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise DataError(f"cross-entropy: label out of range [0, {n_classes})")

    rows = np.arange(n_batch)
    m = z.max(axis=1, keepdims=True)
    s = np.exp(z - m)
    rest = s.copy()
    rest[rows, z.argmax(axis=1)] = 0
    lse = m[:, 0] + np.log1p(rest.sum(axis=1))
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=z.dtype)
    probs = s / s.sum(axis=1, keepdims=True)

    def backward_fn(g):
        gz = probs.copy()
        gz[rows, labels] -= 1.0
        gz *= g / n_batch
        return (gz[0] if squeeze else gz,)

    return make_result(loss, (logits,), 'cross_entropy', backward_fn)


__all__ = [
    'Tensor', 'activation', 'elementwise', 'relu', 'silu', 'softplus', 'exp',
    'add', 'mul', 'reshape', 'slice_last', 'mean', 'mean_over_time',
    'conv_time', 'causal_depthwise_conv', 'linear', 'RunningStats', 'batchnorm',
    'rms_norm', 'rms_norm_array', 'softmax', 'softmax_cross_entropy',
]
