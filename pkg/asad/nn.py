"""Parameter containers and the small layers SW_CNN and Mamba are built from."""
from collections import OrderedDict

import numpy as np

from asad import ops
from asad.errors import CheckpointError
from asad.tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A learnable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Module:
    """Walks its attributes in definition order to find parameters, buffers and children."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + '.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=''):
        for name, value in vars(self).items():
            if isinstance(value, ops.RunningStats):
                yield prefix + name + '.running_mean', value.mean
                yield prefix + name + '.running_var', value.var
                yield prefix + name + '.num_batches_tracked', value.num_batches_tracked
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + '.')

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state, strict=True):
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        params = dict(self.named_parameters())
        for name, target in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise CheckpointError(f"tensor {name}: shape {value.shape} does not match model {target.shape}")
            if name in params:
                params[name].data = np.array(value, dtype=value.dtype, copy=True)
            else:
                target[...] = value

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class ModuleList(Module):

    def __init__(self, modules):
        for i, module in enumerate(modules):
            setattr(self, str(i), module)
        self._length = len(modules)

    def __len__(self):
        return self._length

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._length))

    def __getitem__(self, i):
        return getattr(self, str(i))


class Linear(Module):

    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = Parameter(uniform_init(rng, (out_features, in_features), in_features))
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def array(self, x):
        out = x @ self.weight.data.T
        return out + self.bias.data if self.bias is not None else out


class BatchNorm(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, n_features, momentum=ops.BN_MOMENTUM, eps=ops.BN_EPS):
        dtype = get_default_dtype()
        self.weight = Parameter(np.ones(n_features, dtype=dtype))
        self.bias = Parameter(np.zeros(n_features, dtype=dtype))
        self.stats = ops.RunningStats(n_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, mode):
        return ops.batchnorm(x, self.weight, self.bias, self.stats, mode=mode,
                             momentum=self.momentum, eps=self.eps)

    @property
    def calibrated(self):
        return int(self.stats.num_batches_tracked) > 0


class RMSNorm(Module):

    def __init__(self, n_features, eps=1e-5):
        self.weight = Parameter(np.ones(n_features, dtype=get_default_dtype()))
        self.eps = eps

    def __call__(self, x):
        return ops.rms_norm(x, self.weight, self.eps)

    def array(self, x):
        return ops.rms_norm_array(x, self.weight.data, self.eps)
