"""
Reverse-mode differentiation over dense numpy arrays.

Every op takes and returns `Tensor`. Binary ops require operands of identical
shape: there is no implicit broadcasting, line operands up with `expand`,
`reshape` or `index` first. Values are 32-bit by default; `gradcheck` widens a
copy of the parameters to 64-bit before comparing against finite differences.

The graph is implicit: each tracked tensor keeps its parents and a closure
mapping its output gradient to parent gradients. `backward` orders the nodes
topologically and runs the closures in reverse.
"""
import contextlib
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", self.shape, (1,))
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def constant(data, dtype=DEFAULT_DTYPE):
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def as_tensor(value):
    return value if isinstance(value, Tensor) else constant(value)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _topological_order(root):
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate `.grad` on every tracked tensor reachable from the scalar `loss`."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be scalar")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.data.dtype)
            if g.shape != parent.shape:
                raise ShapeError("backward", g.shape, parent.shape, detail="gradient/value mismatch")
            parent.grad = g if parent.grad is None else parent.grad + g


def gradients(loss, params):
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# elementwise

def add(a, b):
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    _same_shape("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a, factor):
    factor = float(factor)
    return _result(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


def shift(a, offset):
    return _result(a.data + a.data.dtype.type(offset), (a,), lambda g: (g,))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def log(a):
    floor = np.finfo(a.data.dtype).tiny
    safe = np.maximum(a.data, floor)
    return _result(np.log(safe), (a,), lambda g: (g / safe,))


def clip(a, low, high):
    mask = (a.data > low) & (a.data < high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * mask,))


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), grad)


# linear algebra

def matmul(a, b):
    """(m, k) @ (k, n), or batched (..., m, k) @ (..., k, n) with equal batch dims."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def grad(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), grad)


def cross(a, b):
    _same_shape("cross", a, b)
    if a.shape[-1] != 3:
        raise ShapeError("cross", a.shape, b.shape, detail="last axis must be 3")
    return _result(np.cross(a.data, b.data), (a, b), lambda g: (np.cross(b.data, g), np.cross(g, a.data)))


def norm(a, axis=-1):
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def grad(g):
        inv = np.divide(g, n, out=np.zeros_like(n), where=n > 0)
        return (a.data * np.expand_dims(inv, axis),)

    return _result(n, (a,), grad)


def normalize(a, axis=-1):
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    n = np.maximum(n, np.finfo(a.data.dtype).eps)
    y = a.data / n

    def grad(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _result(y, (a,), grad)


# reductions

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _result(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def max_pool(a, axis):
    """Maximum along `axis`; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def grad(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), grad)


def mean_pool(a, axis):
    return mean(a, axis=axis)


# structure

def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def expand(a, axis, count):
    """Insert `axis` and repeat the tensor `count` times along it."""
    out = np.repeat(np.expand_dims(a.data, axis), count, axis=axis)
    return _result(out, (a,), lambda g: (g.sum(axis=axis),))


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def index(a, key):
    out = a.data[key]
    basic = _is_basic_key(key)

    def grad(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out), (a,), grad)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _result(out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


# layers

def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DEFAULT_DTYPE)


def dense(x, weight, bias):
    """Affine map of row vectors: (rows, in) @ (in, out) + bias."""
    return matmul(x, weight) + expand(bias, 0, x.shape[0])


def mlp(x, params, prefix, layers, final_activation=False):
    h = x
    for i in range(layers):
        h = dense(h, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"])
        if i < layers - 1 or final_activation:
            h = relu(h)
    return h


def init_mlp(rng, prefix, widths, zero_last=False):
    """Glorot weights and zero biases for consecutive `widths`."""
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last and zero_last:
            arrays[f"{prefix}{i}.weight"] = np.zeros((fan_in, fan_out), dtype=DEFAULT_DTYPE)
        else:
            arrays[f"{prefix}{i}.weight"] = glorot_uniform(rng, fan_in, fan_out)
        arrays[f"{prefix}{i}.bias"] = np.zeros(fan_out, dtype=DEFAULT_DTYPE)
    return arrays


class ParamSet:
    """Ordered, named trainable tensors."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    @classmethod
    def from_arrays(cls, arrays, dtype=DEFAULT_DTYPE):
        return cls({name: Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)
                    for name, value in arrays.items()})

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def arrays(self):
        return {name: t.data for name, t in self._tensors.items()}

    def astype(self, dtype):
        return ParamSet.from_arrays(self.arrays(), dtype=dtype)

    def copy(self):
        return self.astype(DEFAULT_DTYPE)

    @property
    def num_parameters(self):
        return int(np.sum([t.data.size for t in self._tensors.values()]))

    def checksum(self):
        digest = hashlib.sha256()
        for name, t in self._tensors.items():
            digest.update(name.encode())
            digest.update(str(t.shape).encode())
            digest.update(np.ascontiguousarray(t.data).tobytes())
        return digest.hexdigest()

    def all_finite(self):
        return all(np.isfinite(t.data).all() for t in self._tensors.values())


# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, arrays):
        return cls(0, {k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns (new params, new state); inputs are not modified."""
    step = state.step + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError("adam_step", value.shape, g.shape)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = (value - update).astype(value.dtype)
        new_m[name] = m.astype(value.dtype)
        new_v[name] = v.astype(value.dtype)
    return new_params, AdamState(step, new_m, new_v)


class Adam:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.zeros(params.arrays())

    def step(self):
        grads = {name: t.grad for name, t in self.params.items() if t.grad is not None}
        updated, self.state = adam_step(self.params.arrays(), grads, self.state,
                                        self.lr, self.beta1, self.beta2, self.eps)
        for name, t in self.params.items():
            t.data = updated[name]
            t.grad = None
        if not self.params.all_finite():
            raise NumericalError("Adam step produced non-finite parameters", component="params")


# finite differences

@dataclass
class GradcheckResult:
    checked: int
    max_rel_error: float
    failures: list

    @property
    def ok(self):
        return not self.failures


def gradcheck(loss_fn, params, eps=1e-3, rtol=1e-3, atol=1e-6, max_checks=None, rng=None):
    """Compare analytic gradients of `loss_fn(params)` with central differences in float64.

    `loss_fn` must rebuild its graph from the ParamSet it receives. With
    `max_checks`, only that many randomly chosen entries per tensor are checked.
    """
    wide = params.astype(np.float64)
    loss = loss_fn(wide)
    backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1).copy()
                for name, t in wide.items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    checked = 0
    worst = 0.0
    failures = []
    with no_grad():
        for name, t in wide.items():
            flat = t.data.reshape(-1)
            picks = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                picks = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in picks:
                original = flat[i]
                flat[i] = original + eps
                up = loss_fn(wide).item()
                flat[i] = original - eps
                down = loss_fn(wide).item()
                flat[i] = original
                numeric = (up - down) / (2.0 * eps)
                a = float(analytic[name][i])
                diff = abs(a - numeric)
                scale_ = max(abs(a), abs(numeric))
                rel = diff / scale_ if scale_ > 0 else 0.0
                checked += 1
                if diff > atol + rtol * scale_:
                    failures.append((name, int(i), a, numeric))
                    worst = max(worst, rel)
                elif diff > atol:
                    worst = max(worst, rel)
    if failures:
        logger.warning("gradcheck: %d of %d entries disagree (worst relative error %.3g)", len(failures), checked, worst)
    return GradcheckResult(checked, worst, failures)
