"""
Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor records the operation that produced it together with a closure
that maps the output adjoint to one adjoint per parent. ``backward`` orders
the recorded graph topologically and replays those closures in reverse.
"""
import contextlib
import logging

import numpy as np

from asad.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Switch the dtype used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported tensor dtype: {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default dtype, e.g. ``with precision('float64')``."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense array node of the differentiation graph."""

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=''):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        from asad import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def __add__(self, other):
        from asad import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from asad import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from asad import ops
        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from asad import ops
        return ops.add(self, ops.mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        from asad import ops
        return ops.add(as_tensor(other, self.dtype), ops.mul(self, -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(data, parents, op, backward_fn):
    """Wrap an op output; parents are only recorded when a gradient can flow."""
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, dtype=np.asarray(data).dtype,
                 _parents=parents if requires_grad else (), _op=op)
    if requires_grad:
        out._backward = backward_fn
    return out


class Graph:
    """Executed operations reachable from a root, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from a scalar loss.

    Gradients accumulate across calls; callers reset them explicitly.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    graph = Graph.from_root(loss)
    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = adjoints.get(id(node))
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    for node in graph.nodes:
        if not node.requires_grad:
            continue
        g = adjoints.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
        node.grad = g.copy() if node.grad is None else node.grad + g


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"grad_check: non-finite {what}")


def grad_check(f, point, eps=1e-6):
    """Compare the analytic gradient of scalar ``f(point)`` with central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    point.requires_grad = True
    point.zero_grad()
    out = f(point)
    _check_finite(out.data, "function value")
    backward(out)
    analytic = point.grad.copy()
    _check_finite(analytic, "analytic gradient")

    flat = point.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        f_plus = f(point).item()
        flat[i] = original - eps
        f_minus = f(point).item()
        flat[i] = original
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    _check_finite(numeric, "numeric gradient")

    diff = np.abs(analytic.reshape(-1).astype(np.float64) - numeric)
    return float(np.max(diff / np.maximum(1.0, np.abs(numeric)))) if diff.size else 0.0


def grad_check_params(loss_fn, params, eps=1e-6, max_coords=None, rng=None):
    """grad_check over the named parameters of a model.

    ``loss_fn`` is a zero-argument callable returning a scalar Tensor built
    from ``params`` (a name -> Tensor mapping). ``max_coords`` samples that
    many coordinates per parameter. Returns (max_rel_err, worst_name).
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    _check_finite(out.data, "function value")
    backward(out)

    worst, worst_name = 0.0, None
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            f_plus = loss_fn().item()
            flat[i] = original - eps
            f_minus = loss_fn().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"grad_check: non-finite numeric gradient for {name}[{i}]")
            err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst, worst_name = err, name
    logger.debug(f"grad_check_params: max relative error {worst:.3e} at {worst_name}")
    return worst, worst_name
