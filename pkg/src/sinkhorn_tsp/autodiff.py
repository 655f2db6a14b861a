"""Minimal reverse-mode differentiation over numpy arrays.

The op set is exactly what the tour model needs: dense matmul with batch
broadcasting, elementwise arithmetic, row softmax, gathers, masked fills,
reductions, and batch normalization. Values are numpy arrays (C-order flat
data plus a shape, float32 or float64 uniform per run); the graph is a DAG of
`Node` objects whose leaves are either constants or parameters backed by a
`ParamStore`. `backward` accumulates gradients additively into the store
until `zero_grad` is called.

Concurrency: graph construction and backward are single-writer: one logical
context owns a graph. Forward evaluation of independent graphs may share
parameter values read-only; only the trainer mutates them, between batches.
"""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    """Shape mismatch, unknown name, or other fatal misconfiguration."""


class DomainError(ArithmeticError):
    """Numerical domain violation (log of a non-positive value, zero divisor)."""


class Node:
    """One value in the computation graph.

    grad_fn maps the gradient at this node to a tuple of parent gradients
    (None for parents that need none). `sink`, set only on parameter leaves,
    is the array gradients accumulate into.
    """

    __slots__ = ("value", "parents", "grad_fn", "needs_grad", "sink")

    def __init__(self, value, parents=(), grad_fn=None, needs_grad=False, sink=None):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.needs_grad = needs_grad
        self.sink = sink

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def constant(value, dtype=None):
    """Leaf node that never receives gradient."""
    return Node(np.asarray(value, dtype=dtype))


def _make(value, parents, grad_fn):
    if any(p.needs_grad for p in parents):
        return Node(value, tuple(parents), grad_fn, True)
    return Node(value)


def _swap(a):
    return a.swapaxes(-1, -2)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ConfigurationError(
            f"{kind}: shapes {a.value.shape} and {b.value.shape} do not conform"
        ) from None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.value.ndim < 2 or b.value.ndim < 2 or a.value.shape[-1] != b.value.shape[-2]:
        raise ConfigurationError(
            f"matmul: shapes {a.value.shape} and {b.value.shape} do not conform"
        )
    value = a.value @ b.value

    def grad_fn(g):
        ga = _unbroadcast(g @ _swap(b.value), a.value.shape) if a.needs_grad else None
        gb = _unbroadcast(_swap(a.value) @ g, b.value.shape) if b.needs_grad else None
        return ga, gb

    return _make(value, (a, b), grad_fn)


def add(a, b):
    _check_broadcast("add", a, b)
    value = a.value + b.value

    def grad_fn(g):
        return (
            _unbroadcast(g, a.value.shape) if a.needs_grad else None,
            _unbroadcast(g, b.value.shape) if b.needs_grad else None,
        )

    return _make(value, (a, b), grad_fn)


def sub(a, b):
    _check_broadcast("sub", a, b)
    value = a.value - b.value

    def grad_fn(g):
        return (
            _unbroadcast(g, a.value.shape) if a.needs_grad else None,
            _unbroadcast(-g, b.value.shape) if b.needs_grad else None,
        )

    return _make(value, (a, b), grad_fn)


def mul(a, b):
    _check_broadcast("mul", a, b)
    value = a.value * b.value

    def grad_fn(g):
        return (
            _unbroadcast(g * b.value, a.value.shape) if a.needs_grad else None,
            _unbroadcast(g * a.value, b.value.shape) if b.needs_grad else None,
        )

    return _make(value, (a, b), grad_fn)


def div(a, b):
    _check_broadcast("div", a, b)
    if np.any(b.value == 0):
        raise DomainError("div: zero divisor")
    value = a.value / b.value

    def grad_fn(g):
        return (
            _unbroadcast(g / b.value, a.value.shape) if a.needs_grad else None,
            _unbroadcast(-g * value / b.value, b.value.shape) if b.needs_grad else None,
        )

    return _make(value, (a, b), grad_fn)


def exp(x):
    value = np.exp(x.value)

    def grad_fn(g):
        return (g * value,)

    return _make(value, (x,), grad_fn)


def log(x):
    if np.any(x.value <= 0):
        raise DomainError("log: input <= 0")
    value = np.log(x.value)

    def grad_fn(g):
        return (g / x.value,)

    return _make(value, (x,), grad_fn)


def tanh(x):
    value = np.tanh(x.value)

    def grad_fn(g):
        return (g * (1.0 - value * value),)

    return _make(value, (x,), grad_fn)


def softmax_rows(x):
    """Softmax over the last axis, with the row max subtracted for safety."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (value * (g - (g * value).sum(axis=-1, keepdims=True)),)

    return _make(value, (x,), grad_fn)


def transpose(x):
    """Swap the last two axes (batch dimensions untouched)."""
    if x.value.ndim < 2:
        raise ConfigurationError(f"transpose: rank-{x.value.ndim} input")
    value = _swap(x.value)

    def grad_fn(g):
        return (_swap(g),)

    return _make(value, (x,), grad_fn)


def scale(x, factor):
    factor = float(factor)
    value = x.value * factor

    def grad_fn(g):
        return (g * factor,)

    return _make(value, (x,), grad_fn)


def gather_rows(x, indices, per_batch=False, axis=-2):
    """Select slices along `axis` (default: rows).

    Shared mode takes the same index list in every batch; per-batch mode takes
    one row index per batch element of a rank-3 input: out[b] = x[b, idx[b]].
    """
    idx = np.asarray(indices)
    if per_batch:
        if x.value.ndim != 3 or idx.shape != (x.value.shape[0],):
            raise ConfigurationError(
                f"gather-rows per-batch: input {x.value.shape}, indices {idx.shape}"
            )
        batch = np.arange(x.value.shape[0])
        value = x.value[batch, idx]

        def grad_fn(g):
            z = np.zeros_like(x.value)
            np.add.at(z, (batch, idx), g)
            return (z,)

        return _make(value, (x,), grad_fn)

    ax = axis % x.value.ndim
    if np.any(idx < 0) or np.any(idx >= x.value.shape[ax]):
        raise ConfigurationError(f"gather-rows: index out of range for axis {ax}")
    value = np.take(x.value, idx, axis=ax)

    def grad_fn(g):
        z = np.zeros_like(x.value)
        np.add.at(np.moveaxis(z, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (z,)

    return _make(value, (x,), grad_fn)


def masked_fill(x, mask, fill=-1e9, mode="additive"):
    """Mask entries of x.

    additive: x + fill*mask: the large-negative-logit form whose gradient is
    the identity, so softmax backward never sees an infinity.
    replace: where(mask, fill, x): gradient zero at masked entries; doubles
    as value flooring and as relu.
    """
    mask = np.asarray(mask, dtype=bool)
    fill = x.value.dtype.type(fill)
    if mode == "additive":
        value = x.value + fill * mask.astype(x.value.dtype)

        def grad_fn(g):
            return (_unbroadcast(g, x.value.shape),)

    elif mode == "replace":
        value = np.where(mask, fill, x.value)

        def grad_fn(g):
            return (_unbroadcast(g * ~mask, x.value.shape),)

    else:
        raise ConfigurationError(f"masked-fill: unknown mode {mode!r}")
    return _make(value, (x,), grad_fn)


def relu(x):
    return masked_fill(x, x.value < 0, 0.0, mode="replace")


def reduce_sum(x, axis=None, keepdims=False):
    value = x.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.value.shape),)

    return _make(value, (x,), grad_fn)


def reduce_mean(x, axis=None, keepdims=False):
    value = x.value.mean(axis=axis, keepdims=keepdims)
    count = x.value.size / value.size

    def grad_fn(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.value.shape) / count,)

    return _make(value, (x,), grad_fn)


class BatchNormState:
    """Running statistics for one batch-normalize site, kept across batches."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, running_mean, running_var, momentum=0.1, eps=1e-5):
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps


def batch_normalize(x, gamma, beta, state, training):
    """Normalize per feature channel over all leading axes.

    For (batch, city, channel) inputs the statistics pool batch and city;
    a rank-2 (city, channel) input is the single-instance case. Training mode
    uses batch statistics and updates the running ones (momentum 0.1 style);
    evaluation mode applies the running statistics as a fixed affine map.
    """
    axes = tuple(range(x.value.ndim - 1))
    eps = x.value.dtype.type(state.eps)
    if training:
        mu = x.value.mean(axis=axes)
        centered = x.value - mu
        var = (centered * centered).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[...] = (1.0 - m) * state.running_var + m * var
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.value - state.running_mean) * inv
    value = gamma.value * xhat + beta.value

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.needs_grad else None
        dbeta = g.sum(axis=axes) if beta.needs_grad else None
        if not x.needs_grad:
            return None, dgamma, dbeta
        dxhat = g * gamma.value
        if training:
            dx = inv * (
                dxhat
                - dxhat.mean(axis=axes)
                - xhat * (dxhat * xhat).mean(axis=axes)
            )
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _make(value, (x, gamma, beta), grad_fn)


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "softmax-rows": softmax_rows,
    "transpose": transpose,
    "scale": scale,
    "gather-rows": gather_rows,
    "masked-fill": masked_fill,
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "batch-normalize": batch_normalize,
}


def forward_op(kind, *inputs, **attrs):
    """Dispatch by op-kind name; the named functions are the primary API."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable parameter's sink.

    Repeated calls without zero_grad accumulate additively. A node feeding
    several consumers receives the sum of their contributions.
    """
    if loss.value.size != 1:
        raise ConfigurationError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not loss.needs_grad:
        return
    # Iterative postorder: unrolled graphs are deeper than the recursion limit.
    topo = []
    seen = {id(loss)}
    stack = [(loss, iter(loss.parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.needs_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            topo.append(node)
            stack.pop()

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topo):
        g = grads.pop(id(node))
        if node.sink is not None:
            node.sink += g
        if node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.needs_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------

class ParamEntry:
    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)   # Adam moments
        self.v = np.zeros_like(value)


class ParamStore:
    """Named parameters with gradient and optimizer-moment slots.

    Also holds non-trainable buffers (batch-norm running statistics) so a
    checkpoint captures the full model state. `step` counts optimizer updates
    for Adam bias correction.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.entries = {}
        self.buffers = {}
        self.step = 0

    def add(self, name, value):
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self.entries[name] = ParamEntry(arr)

    def add_buffer(self, name, value):
        if name in self.buffers:
            raise ConfigurationError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def node(self, name):
        try:
            entry = self.entries[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None
        return Node(entry.value, (), None, True, sink=entry.grad)

    def zero_grad(self):
        for entry in self.entries.values():
            entry.grad[...] = 0

    def copy_from(self, other):
        """Copy parameter values and buffers (not moments) from another store."""
        if set(self.entries) != set(other.entries) or set(self.buffers) != set(other.buffers):
            raise ConfigurationError("copy_from: stores have different names")
        for name, entry in self.entries.items():
            entry.value[...] = other.entries[name].value
        for name, buf in self.buffers.items():
            buf[...] = other.buffers[name]

    def clone(self):
        out = ParamStore(self.dtype)
        for name, entry in self.entries.items():
            out.add(name, entry.value.copy())
            out.entries[name].m[...] = entry.m
            out.entries[name].v[...] = entry.v
        for name, buf in self.buffers.items():
            out.add_buffer(name, buf.copy())
        out.step = self.step
        return out

    @property
    def n_params(self):
        return sum(e.value.size for e in self.entries.values())

    def state_hash(self, include_buffers=True):
        """Hash of parameter values (and optionally buffers) for freeze checks."""
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.entries):
            h.update(name.encode())
            h.update(self.entries[name].value.tobytes())
        if include_buffers:
            for name in sorted(self.buffers):
                h.update(name.encode())
                h.update(self.buffers[name].tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Finite-difference self-check
# ---------------------------------------------------------------------------

class GradCheckReport:
    def __init__(self, per_param, tolerance):
        self.per_param = per_param
        self.tolerance = tolerance
        self.max_rel_error = max(per_param.values()) if per_param else 0.0
        self.passed = self.max_rel_error <= tolerance

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, "
            f"tolerance={self.tolerance:.1e})"
        )


def finite_difference_check(fn, store, step=1e-6, tolerance=1e-5):
    """Compare backward's gradients against central differences.

    fn(store) must deterministically build and return a scalar loss Node from
    the store's current parameter values. Each parameter's error is the
    largest entrywise deviation measured against the parameter's largest
    gradient magnitude, max|a - b| / max(||a||_inf, ||b||_inf, 1e-12):
    entries far below that scale sit under the finite-difference noise floor
    (about |loss| * 1e-16 / step) and cannot carry an entrywise comparison,
    while any wrong backward rule perturbs the dominant entries and is
    caught. Meaningful only on float64 stores.
    """
    store.zero_grad()
    backward(fn(store))
    analytic = {name: e.grad.copy() for name, e in store.entries.items()}
    store.zero_grad()

    per_param = {}
    for name, entry in store.entries.items():
        flat = entry.value.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(fn(store).value)
            flat[i] = keep - step
            lo = float(fn(store).value)
            flat[i] = keep
            numeric[i] = (hi - lo) / (2.0 * step)
        a = analytic[name].reshape(-1)
        if flat.size == 0:
            per_param[name] = 0.0
            continue
        scale = max(np.abs(a).max(), np.abs(numeric).max(), 1e-12)
        per_param[name] = float(np.abs(a - numeric).max() / scale)
    return GradCheckReport(per_param, tolerance)
