"""Dense 2-D tensors with reverse-mode automatic differentiation.

Define-by-run: every operation appends to an implicit tape held by the
output tensors' parent links. The tape is rebuilt on each forward pass,
which is cheap for the small dense networks this package trains.
All math is float64.
"""

import numpy as np

from .errors import ContractError, DimensionError, SpecfuseError

__all__ = [
    "Tensor",
    "matmul",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "concat_cols",
    "sum_all",
    "mean_all",
    "sum_rows",
    "backward",
    "grad_check",
]


def _as_2d(values):
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got ndim={a.ndim}")
    return a


class Tensor:
    """A rows x cols float64 array, optionally tracked on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.data = _as_2d(values)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _make(data, (a, b), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} x {b.shape} (inner dims {a.cols} != {b.rows})"
        )
    data = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(data, (a, b), bwd)


def sigmoid(x):
    x = _wrap(x)
    # overflow-safe: exp of a non-positive argument only
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bwd)


def softplus(x):
    x = _wrap(x)
    d = x.data
    # max(x,0) + log1p(exp(-|x|)) never overflows
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def bwd(g):
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ez = np.exp(d[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)

    return _make(out, (x,), bwd)


def exp(x):
    x = _wrap(x)
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (x,), bwd)


def log(x):
    x = _wrap(x)
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make(out, (x,), bwd)


def sqrt(x):
    x = _wrap(x)
    out = np.sqrt(x.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _make(out, (x,), bwd)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes through only inside the range."""
    x = _wrap(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        return (g * inside,)

    return _make(out, (x,), bwd)


def concat_cols(tensors):
    tensors = [_wrap(t) for t in tensors]
    rows = tensors[0].rows
    for t in tensors:
        if t.rows != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {t.shape} vs {rows} rows"
            )
    data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.cols for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _make(data, tuple(tensors), bwd)


def sum_all(x):
    x = _wrap(x)
    data = np.array([[x.data.sum()]])

    def bwd(g):
        return (np.full(x.shape, g[0, 0]),)

    return _make(data, (x,), bwd)


def mean_all(x):
    x = _wrap(x)
    n = x.data.size
    data = np.array([[x.data.sum() / n]])

    def bwd(g):
        return (np.full(x.shape, g[0, 0] / n),)

    return _make(data, (x,), bwd)


def sum_rows(x):
    """Per-row sum, shape (rows, 1)."""
    x = _wrap(x)
    data = x.data.sum(axis=1, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), bwd)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Repeated calls without zeroing grads accumulate, matching the usual
    autograd convention.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    local = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            key = id(p)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg


def grad_check(fn, params, step=1e-5, per_block_errors=None):
    """Compare analytic gradients of a scalar function against central
    finite differences.

    `fn` takes the dict of parameter Tensors and returns a scalar Tensor;
    it must rebuild its tape on every call. Returns the worst relative
    error over all coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8). Pass a dict as `per_block_errors`
    to also collect the worst error per parameter name.
    """
    if step <= 0:
        raise ContractError("grad_check step must be > 0")
    for p in params.values():
        p.zero_grad()
    loss = fn(params)
    if not np.isfinite(loss.item()):
        raise SpecfuseError("grad_check: function value is not finite")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }

    per_block = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(params).item()
            flat[i] = orig - step
            fm = fn(params).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise SpecfuseError(f"grad_check: non-finite value perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
        per_block[name] = worst
    if per_block_errors is not None:
        per_block_errors.update(per_block)
    return max(per_block.values()) if per_block else 0.0
