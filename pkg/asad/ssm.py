"""
Selective state-space layers.

Shapes follow the batch-first convention: x, delta are [B, N, D] with D the
inner width, A is [D, S], the input-dependent B and C are [B, N, S] and the
skip coefficient is [D]. The recurrence per channel d is

    h_n = exp(delta_n * A) * h_{n-1} + Bbar_n * x_n,    y_n = <C_n, h_n> + D * x_n

with Bbar_n = delta_n * B_n (Euler) or (exp(delta_n * A) - 1) / A * B_n (exact ZOH).
"""
import logging
import math

import numpy as np

from asad import ops
from asad.errors import NonFiniteError, ShapeError
from asad.models import SWIMConfig
from asad.nn import Linear, Module, ModuleList, Parameter, RMSNorm, uniform_init
from asad.tensor import as_tensor, get_default_dtype, make_result

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Discretization and scan kernels (plain arrays)
# ---------------------------------------------------------------------------

def discretize(A, B, delta, zoh=False):
    """(Abar, Bbar) for broadcast-compatible A, B and step sizes delta > 0."""
    A, B, delta = np.asarray(A), np.asarray(B), np.asarray(delta)
    a_bar = np.exp(delta * A)
    if zoh:
        return a_bar, (a_bar - 1.0) / A * B
    return a_bar, delta * B


def _coefficients(delta, A, zoh):
    """exp(delta*A) and the Bbar factor multiplying B, both [B, N, D, S]."""
    d = delta[..., None]
    a_bar = np.exp(d * A)
    coef = (a_bar - 1.0) / A if zoh else np.broadcast_to(d, a_bar.shape)
    return a_bar, coef


def scan_sequential(a, b):
    """h_n = a_n * h_{n-1} + b_n along axis 1, h_{-1} = 0."""
    h = np.empty_like(b)
    carry = np.zeros_like(b[:, 0])
    for n in range(b.shape[1]):
        carry = a[:, n] * carry + b[:, n]
        h[:, n] = carry
    return h


def _scan_chunk(a, b):
    """Inclusive scan of (a, b) pairs over axis 1 by recursive doubling.

    Composition (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).
    """
    a, b = a.copy(), b.copy()
    n = a.shape[1]
    offset = 1
    while offset < n:
        b_new = b[:, offset:] + a[:, offset:] * b[:, :-offset]
        a_new = a[:, offset:] * a[:, :-offset]
        b[:, offset:] = b_new
        a[:, offset:] = a_new
        offset *= 2
    return a, b


def scan_parallel(a, b, chunk_size=64):
    """Same recurrence as scan_sequential, evaluated chunk by chunk.

    Inside a chunk every step is combined with the associative operator; the
    chunk-final state carries into the next chunk.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    h = np.empty_like(b)
    carry = np.zeros_like(b[:, 0])
    for start in range(0, b.shape[1], chunk_size):
        stop = min(start + chunk_size, b.shape[1])
        a_cum, b_cum = _scan_chunk(a[:, start:stop], b[:, start:stop])
        h[:, start:stop] = a_cum * carry[:, None] + b_cum
        carry = h[:, stop - 1]
    return h


def _scan(a, b, method, chunk_size):
    if method == 'sequential':
        return scan_sequential(a, b)
    if method == 'parallel':
        return scan_parallel(a, b, chunk_size)
    raise ValueError(f"Unknown scan method: {method}")


def _check_scan_inputs(x, delta, A, B, C, D):
    if x.ndim != 3 or delta.shape != x.shape:
        raise ShapeError(f"selective scan expects x and delta [B, N, D], got {x.shape} and {delta.shape}")
    n_batch, n_steps, d_inner = x.shape
    if n_steps < 1:
        raise ShapeError("selective scan needs at least one step")
    if A.ndim != 2 or A.shape[0] != d_inner:
        raise ShapeError(f"A must be [{d_inner}, S], got {A.shape}")
    d_state = A.shape[1]
    for name, m in (('B', B), ('C', C)):
        if m.shape != (n_batch, n_steps, d_state):
            raise ShapeError(f"{name} must be [{n_batch}, {n_steps}, {d_state}], got {m.shape}")
    if D.shape != (d_inner,):
        raise ShapeError(f"D must be [{d_inner}], got {D.shape}")
    for name, m in (('x', x), ('delta', delta), ('B', B), ('C', C)):
        if not np.all(np.isfinite(m)):
            raise NonFiniteError(f"selective scan: non-finite values in {name}")


def _as_batch(arrays):
    arrays = [np.asarray(m) for m in arrays]
    squeeze = arrays[0].ndim == 2
    if squeeze:
        arrays = [m[None] if i in (0, 1, 3, 4) else m for i, m in enumerate(arrays)]
    return arrays, squeeze


def _scan_forward(x, delta, A, B, C, D, zoh, method, chunk_size):
    a_bar, coef = _coefficients(delta, A, zoh)
    b = coef * B[:, :, None, :] * x[..., None]
    h = _scan(a_bar, b, method, chunk_size)
    y = np.einsum('bnds,bns->bnd', h, C) + x * D
    return y, h, a_bar, coef


def selective_scan_sequential(x, delta, A, B, C, D, zoh=False):
    """Reference recurrence, one step at a time. Accepts [N, D] or [B, N, D] inputs."""
    (x, delta, A, B, C, D), squeeze = _as_batch((x, delta, A, B, C, D))
    _check_scan_inputs(x, delta, A, B, C, D)
    y = _scan_forward(x, delta, A, B, C, D, zoh, 'sequential', 1)[0]
    return y[0] if squeeze else y


def selective_scan_parallel(x, delta, A, B, C, D, zoh=False, chunk_size=64):
    """Chunked associative scan; matches selective_scan_sequential."""
    (x, delta, A, B, C, D), squeeze = _as_batch((x, delta, A, B, C, D))
    _check_scan_inputs(x, delta, A, B, C, D)
    y = _scan_forward(x, delta, A, B, C, D, zoh, 'parallel', chunk_size)[0]
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# Differentiable fused op
# ---------------------------------------------------------------------------

def selective_scan(x, delta, A, B, C, D, zoh=False, method='parallel', chunk_size=64):
    """Selective scan as one graph node with an analytic reverse-time adjoint."""
    x, delta, A, B, C, D = (as_tensor(t) for t in (x, delta, A, B, C, D))
    xd, dd, Ad, Bd, Cd, Dd = x.data, delta.data, A.data, B.data, C.data, D.data
    _check_scan_inputs(xd, dd, Ad, Bd, Cd, Dd)
    y, h, a_bar, coef = _scan_forward(xd, dd, Ad, Bd, Cd, Dd, zoh, method, chunk_size)

    def backward_fn(gy):
        gh = gy[..., None] * Cd[:, :, None, :]
        # lam_n = gh_n + a_{n+1} * lam_{n+1}, solved as a forward scan over reversed time.
        a_next = np.ones_like(a_bar)
        a_next[:, :-1] = a_bar[:, 1:]
        lam = _scan(a_next[:, ::-1], gh[:, ::-1], method, chunk_size)[:, ::-1]
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]

        lam_b = lam * Bd[:, :, None, :]
        gx = gy * Dd + (lam_b * coef).sum(axis=-1)
        gC = np.einsum('bnd,bnds->bns', gy, h)
        gD = (gy * xd).sum(axis=(0, 1))
        gB = np.einsum('bnds,bnds,bnd->bns', lam, coef, xd)

        g_abar = lam * h_prev
        g_coef = lam_b * xd[..., None]
        g_exponent = g_abar * a_bar
        gdelta = (g_exponent * Ad).sum(axis=-1)
        gA = np.einsum('bnds,bnd->ds', g_exponent, dd)
        if zoh:
            gdelta = gdelta + (g_coef * a_bar).sum(axis=-1)
            d = dd[..., None]
            gA = gA + (g_coef * (d * a_bar * Ad - (a_bar - 1.0)) / (Ad * Ad)).sum(axis=(0, 1))
        else:
            gdelta = gdelta + g_coef.sum(axis=-1)
        return gx, gdelta, gA, gB, gC, gD

    return make_result(y.astype(xd.dtype), (x, delta, A, B, C, D), 'selective_scan', backward_fn)


# ---------------------------------------------------------------------------
# Mamba block and backbone
# ---------------------------------------------------------------------------

def _inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


class LayerState:
    """Streaming state of one Mamba block: conv ring buffer and SSM state h."""

    def __init__(self, conv, h):
        self.conv = conv
        self.h = h

    @classmethod
    def zeros(cls, config, batch_size=1, dtype=None):
        dtype = dtype or get_default_dtype()
        return cls(np.zeros((batch_size, config.d_conv - 1, config.d_inner), dtype=dtype),
                   np.zeros((batch_size, config.d_inner, config.d_state), dtype=dtype))

    @property
    def nbytes(self):
        return self.conv.nbytes + self.h.nbytes


class SSMState:
    """Per-layer streaming states of a backbone."""

    def __init__(self, layers):
        self.layers = layers

    @classmethod
    def zeros(cls, config, batch_size=1, dtype=None):
        return cls([LayerState.zeros(config, batch_size, dtype) for _ in range(config.n_layers)])

    @property
    def nbytes(self):
        return sum(layer.nbytes for layer in self.layers)


class MambaBlock(Module):
    """Pre-norm residual block: u + out_proj(scan(silu(conv(x))) * silu(z))."""

    def __init__(self, config=None, rng=None):
        self.config = config or SWIMConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        d_inner, d_state, rank = c.d_inner, c.d_state, c.resolved_dt_rank
        dtype = get_default_dtype()
        self.norm = RMSNorm(c.d_model)
        self.in_proj = Linear(c.d_model, 2 * d_inner, rng, bias=False)
        self.conv_weight = Parameter(uniform_init(rng, (d_inner, c.d_conv), c.d_conv))
        self.conv_bias = Parameter(uniform_init(rng, (d_inner,), c.d_conv))
        self.x_proj = Linear(d_inner, rank + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(rank, d_inner, rng)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d_inner))
        self.dt_proj.bias.data = _inverse_softplus(dt).astype(dtype)
        self.A_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))).astype(dtype))
        self.D = Parameter(np.ones(d_inner, dtype=dtype))
        self.out_proj = Linear(d_inner, c.d_model, rng, bias=False)

    def _split(self, t, sizes):
        out, start = [], 0
        for size in sizes:
            out.append(ops.slice_last(t, start, start + size))
            start += size
        return out

    def forward(self, u, mode='train'):
        u = as_tensor(u)
        c = self.config
        if u.shape[-1] != c.d_model or u.ndim not in (2, 3):
            raise ShapeError(f"Mamba block expects [N, {c.d_model}] or [B, N, {c.d_model}], got {u.shape}")
        squeeze = u.ndim == 2
        if squeeze:
            u = ops.reshape(u, (1,) + u.shape)
        rank, d_state, d_inner = c.resolved_dt_rank, c.d_state, c.d_inner

        x, z = self._split(self.in_proj(self.norm(u)), (d_inner, d_inner))
        x = ops.silu(ops.causal_depthwise_conv(x, self.conv_weight, self.conv_bias))
        dt_in, B, C = self._split(self.x_proj(x), (rank, d_state, d_state))
        delta = ops.softplus(self.dt_proj(dt_in))
        A = ops.exp(self.A_log) * -1.0
        y = selective_scan(x, delta, A, B, C, self.D, zoh=c.zoh, method=c.scan, chunk_size=c.chunk_size)
        out = u + self.out_proj(y * ops.silu(z))
        if squeeze:
            out = ops.reshape(out, out.shape[1:])
        return out

    __call__ = forward

    def step(self, state, u):
        """One streaming step: u [B, d_model] -> (state, y [B, d_model]), numpy only."""
        c = self.config
        u = np.asarray(u)
        squeeze = u.ndim == 1
        u2 = u[None] if squeeze else u
        if u2.shape[-1] != c.d_model:
            raise ShapeError(f"Mamba step expects d_model={c.d_model}, got {u2.shape}")
        expected_h = (u2.shape[0], c.d_inner, c.d_state)
        if state.h.shape != expected_h or state.conv.shape != (u2.shape[0], c.d_conv - 1, c.d_inner):
            raise ShapeError(f"layer state shapes {state.conv.shape}/{state.h.shape} do not match input {u2.shape}")
        rank, d_state, d_inner = c.resolved_dt_rank, c.d_state, c.d_inner

        xz = self.in_proj.array(self.norm.array(u2))
        x, z = xz[:, :d_inner], xz[:, d_inner:]
        window = np.concatenate([state.conv, x[:, None, :]], axis=1)
        state.conv = window[:, 1:]
        x = ops.activation('silu', (window * self.conv_weight.data.T[None]).sum(axis=1) + self.conv_bias.data)
        dbc = self.x_proj.array(x)
        delta = ops.activation('softplus', self.dt_proj.array(dbc[:, :rank]))
        B, C = dbc[:, rank:rank + d_state], dbc[:, rank + d_state:]
        A = -np.exp(self.A_log.data)
        a_bar, coef = _coefficients(delta, A, c.zoh)
        state.h = a_bar * state.h + coef * B[:, None, :] * x[..., None]
        y = (state.h * C[:, None, :]).sum(axis=-1) + self.D.data * x
        y = y * ops.activation('silu', z)
        out = u2 + self.out_proj.array(y)
        return state, (out[0] if squeeze else out)


class MambaBackbone(Module):
    """Stack of Mamba blocks followed by a final RMS norm."""

    def __init__(self, config=None, rng=None):
        self.config = config or SWIMConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = ModuleList([MambaBlock(self.config, rng) for _ in range(self.config.n_layers)])
        self.norm_f = RMSNorm(self.config.d_model)

    def forward(self, u, mode='train'):
        for layer in self.layers:
            u = layer(u, mode)
        return self.norm_f(u)

    __call__ = forward

    def init_state(self, batch_size=1):
        return SSMState.zeros(self.config, batch_size, self.norm_f.weight.dtype)

    def step(self, state, u):
        if len(state.layers) != len(self.layers):
            raise ShapeError(f"state has {len(state.layers)} layers, backbone has {len(self.layers)}")
        for layer, layer_state in zip(self.layers, state.layers):
            _, u = layer.step(layer_state, u)
        return state, self.norm_f.array(u)
