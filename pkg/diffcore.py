#!/usr/bin/env python3

"""Reverse-mode automatic differentiation over the fixed set of numpy primitives the scene model needs"""

import threading
import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    pass


class GradientError(ValueError):
    pass


def get_dtype():
    return getattr(_state, 'dtype', np.float32)


class precision:
    """Switch the float type used for tensors created on this thread (float32 fit, float64 widened)"""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self._prev = get_dtype()
        _state.dtype = self.dtype
        return self

    def __exit__(self, *args):
        _state.dtype = self._prev


def _active_tape():
    tapes = getattr(_state, 'tapes', None)
    return tapes[-1] if tapes else None


class RowGradient:
    """
    Gradient of a table that only some rows received, kept as (row, value) pairs.

    Rows index the table viewed as (-1, F) and may repeat until coalesce() sums them.
    Adding two RowGradients concatenates their pairs in order, so a fixed summation order
    gives a fixed result.
    """

    __slots__ = ('shape', 'rows', 'values')
    __array_ufunc__ = None

    def __init__(self, shape, rows, values):
        self.shape = tuple(shape)
        self.rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        self.values = np.asarray(values).reshape(-1, self.shape[-1])
        if len(self.rows) != len(self.values):
            raise ShapeError(f"row gradient has {len(self.rows)} rows but {len(self.values)} value rows")

    @property
    def row_count(self):
        return int(np.prod(self.shape[:-1]))

    def __add__(self, other):
        if isinstance(other, RowGradient):
            if other.shape != self.shape:
                raise ShapeError(f"row gradients of shapes {self.shape} and {other.shape} cannot be added")
            return RowGradient(self.shape, np.concatenate([self.rows, other.rows]),
                               np.concatenate([self.values, other.values]))
        return self.to_dense() + other

    __radd__ = __add__

    def astype(self, dtype):
        return RowGradient(self.shape, self.rows, self.values.astype(dtype))

    def coalesce(self):
        """Same gradient with every touched row listed once, rows ascending"""
        seen = np.zeros(self.row_count, dtype=bool)
        seen[self.rows] = True
        rows = np.flatnonzero(seen)
        slot = np.empty(self.row_count, dtype=np.int64)
        slot[rows] = np.arange(len(rows))
        inverse = slot[self.rows]
        values = np.stack([np.bincount(inverse, weights=self.values[:, f], minlength=len(rows))
                           for f in range(self.shape[-1])], axis=1)
        return RowGradient(self.shape, rows, values.astype(self.values.dtype))

    def to_dense(self, dtype=None):
        merged = self.coalesce()
        out = np.zeros(self.shape, dtype=dtype or self.values.dtype)
        out.reshape(-1, self.shape[-1])[merged.rows] = merged.values
        return out


def densify(grad):
    return grad.to_dense() if isinstance(grad, RowGradient) else grad


class Tensor:
    """A dense array plus the flag saying whether gradients are tracked through it"""

    __slots__ = ('data', 'requires_grad')
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the Tensor side

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor with shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return subtract(self, other)
    def __rsub__(self, other): return subtract(other, self)
    def __mul__(self, other): return multiply(self, other)
    def __rmul__(self, other): return multiply(other, self)
    def __truediv__(self, other): return divide(self, other)
    def __rtruediv__(self, other): return divide(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return multiply(self, -1.0)
    def __pow__(self, exponent): return power(self, exponent)
    def __getitem__(self, key): return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of operations; backward walks it in exact reverse recording order"""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_state, 'tapes'):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *args):
        _state.tapes.pop()

    def record(self, inputs, output, backward):
        self.nodes.append((inputs, output, backward))

    def gradient(self, target, sources, seed=None, sparse=False):
        """
        Reverse-mode gradients of target w.r.t. sources.

        Args:
            target: Tensor produced while this tape was active
            sources: dict name->Tensor or list of Tensors
            seed: upstream gradient; required when target is not a scalar
            sparse: keep table gradients that came from gather as RowGradient

        Returns:
            Gradients with the same container type as sources (zeros where unreached)
        """
        if seed is None:
            if target.size != 1:
                raise GradientError(f"gradient of non-scalar output with shape {target.shape} needs an explicit seed")
            seed = np.ones_like(target.data)
        grads = {id(target): np.asarray(seed, dtype=target.data.dtype).reshape(target.shape)}

        for inputs, output, backward in reversed(self.nodes):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            for inp, ig in zip(inputs, backward(densify(g))):
                if ig is None or not inp.requires_grad:
                    continue
                ig = _unbroadcast(ig, inp.shape)
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig

        def pick(t):
            g = grads.get(id(t))
            if g is None:
                return np.zeros_like(t.data)
            if isinstance(g, RowGradient):
                return g.astype(t.data.dtype) if sparse else g.to_dense(t.data.dtype)
            return np.asarray(g, dtype=t.data.dtype)

        if isinstance(sources, dict):
            return {name: pick(t) for name, t in sources.items()}
        return [pick(t) for t in sources]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(grad, shape):
    """Sum out the dimensions numpy broadcast over"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name, *tensors):
    try:
        np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        shapes = ' and '.join(str(t.shape) for t in tensors)
        raise ShapeError(f"{name}: incompatible shapes {shapes}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('add', a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('subtract', a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('multiply', a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('divide', a, b)
    return _make(a.data / b.data, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at exactly 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def abs_(x):
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / count)


def gather(table, idx):
    """
    Row read from table viewed as (-1, F); output shape idx.shape + (F,).
    Backward is a RowGradient, so k reads of a row collect k upstream gradients and unread rows cost nothing.
    """
    table = as_tensor(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather: index must be integer, got {idx.dtype}")
    if table.ndim < 2:
        raise ShapeError(f"gather: table needs at least 2 dims, got shape {table.shape}")
    rows = table.data.reshape(-1, table.shape[-1])
    return _make(rows[idx], (table,), lambda g: (RowGradient(table.shape, idx, g),))


def index(x, key):
    x = as_tensor(x)

    def backward(g):
        z = np.zeros_like(x.data)
        np.add.at(z, key, g)
        return (z,)

    return _make(x.data[key], (x,), backward)


def lerp(a, b, w):
    """Linear interpolation blend (1 - w) * a + w * b"""
    a, b, w = as_tensor(a), as_tensor(b), as_tensor(w)
    _check_broadcast('lerp', a, b, w)
    diff = b.data - a.data
    return _make(a.data + w.data * diff, (a, b, w),
                 lambda g: (g * (1.0 - w.data), g * w.data, g * diff))


def stop_gradient(x):
    return Tensor(as_tensor(x).data)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def tree_sum(values):
    """Pairwise reduction in a fixed order, independent of how the values were produced"""
    values = list(values)
    while len(values) > 1:
        values = [values[i] + values[i + 1] if i + 1 < len(values) else values[i]
                  for i in range(0, len(values), 2)]
    return values[0]


def evaluate_with_gradients(graph, inputs, wrt=None, target=None, seed=None):
    """
    Run graph on fresh leaves and differentiate one of its outputs.

    Args:
        graph: callable taking dict name->Tensor, returning a Tensor or dict name->Tensor
        inputs: dict name->array
        wrt: names that require gradients (default: all)
        target: output name to differentiate (default: the first)
        seed: upstream gradient for non-scalar targets

    Returns:
        (outputs dict name->array, gradients dict name->array)
    """
    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=wrt is None or k in wrt) for k, v in inputs.items()}
        result = graph(leaves)
        outputs = result if isinstance(result, dict) else {'output': result}
        key = target or next(iter(outputs))
        grads = tape.gradient(outputs[key], {k: t for k, t in leaves.items() if t.requires_grad}, seed)
    return {k: t.data for k, t in outputs.items()}, grads


def check_gradients(function, point, step, indices=None):
    """
    Max relative error between analytic and central-difference gradients, in widened precision.

    Args:
        function: callable Tensor -> scalar Tensor
        point: array at which to differentiate
        step: finite-difference step (> 0)
        indices: optional flat coordinate indices to check (default: all)
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    with precision(np.float64):
        x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        _, grads = evaluate_with_gradients(lambda leaves: function(leaves['x']), {'x': x0})
        analytic = grads['x'].reshape(-1)
        flat = x0.reshape(-1)
        worst = 0.0
        for i in (range(flat.size) if indices is None else indices):
            values = []
            for delta in (step, -step):
                shifted = flat.copy()
                shifted[i] += delta
                values.append(as_tensor(function(Tensor(shifted.reshape(x0.shape)))).item())
            if not np.all(np.isfinite(values)) or not np.isfinite(analytic[i]):
                coord = tuple(int(c) for c in np.unravel_index(i, x0.shape))
                raise GradientError(f"non-finite value probing coordinate {coord}")
            numeric = (values[0] - values[1]) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
