"""Dense tensors with a small reverse-mode tape.

Only the primitives the models need are provided: elementwise arithmetic,
reductions, parameter slicing, dense and convolutional layers, ReLU, max
pooling, dropout and softmax cross-entropy.  Hessian-vector products are
obtained by central differences of first-order gradients.
"""
from __future__ import annotations

import itertools

import numpy as np

_node_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when a loss or activation contains NaN or Inf."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class Tensor:
    """An ndarray plus the bookkeeping needed to replay it backward.

    Every tensor produced by an operation on a tensor that requires grad is
    stamped with a creation index.  The backward pass visits the recorded
    nodes in reverse creation order, which is exactly tape replay order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op=""):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._id = next(_node_counter)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __len__(self):
        return self.data.shape[0]

    # -- tape --------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        tape = GradTape.collect(self)
        adj = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in tape.nodes:
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = adj.get(id(parent))
                adj[id(parent)] = pg if prev is None else prev + pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class GradTape:
    """Nodes reachable from an output, in backward replay order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def collect(cls, out):
        seen = set()
        found = []
        stack = [out]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda n: n._id, reverse=True)
        return cls(found)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data ** exponent, (a,), backward, "pow")


def tsum(a):
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(out, (a,), backward, "sum")


def dot(a, b):
    """Inner product of two 1-D tensors."""
    return tsum(mul(a, b))


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def segment(theta, offset, length, shape):
    """View ``theta[offset:offset+length]`` reshaped to ``shape``.

    The adjoint is scattered back into a full-length buffer so that many
    segments of one flat parameter vector accumulate into one gradient.
    """
    total = theta.shape[0]

    def backward(g):
        full = np.zeros(total, dtype=theta.dtype)
        full[offset:offset + length] = g.ravel()
        return (full,)

    view = theta.data[offset:offset + length].reshape(shape)
    return _result(view, (theta,), backward, "segment")


# -- layer primitives -------------------------------------------------------

def dense(x, w, b):
    """``x @ w.T + b`` with ``w`` stored as (outputs, inputs)."""
    x2 = x.data.reshape(x.shape[0], -1)

    def backward(g):
        gx = (g @ w.data).reshape(x.shape) if x.requires_grad else None
        return gx, g.T @ x2, g.sum(axis=0)

    return _result(x2 @ w.data.T + b.data, (x, w, b), backward, "dense")


def relu(x):
    # derivative at exactly 0 is 0
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def _im2col(xp, k, s, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u:u + s * ho:s, v:v + s * wo:s]
    # rows indexed by (n, i_o, j_o), columns by (c, u, v)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k)


def _col2im(dcols, shape_p, k, s, ho, wo):
    n, c = shape_p[:2]
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape_p, dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + s * ho:s, v:v + s * wo:s] += d[:, :, u, v]
    return out


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of (N,C,H,W) input with (C_out,C_in,k,k) filters."""
    n, c, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    if c != c_in:
        raise ValueError(f"conv2d expects {c_in} input channels, got {c}")
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, ho, wo)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxp = _col2im(gm @ wmat, xp.shape, k, s, ho, wo)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")


def maxpool2d(x, window=2, stride=2):
    """Max pooling; ties go to the lowest flat index inside the window."""
    n, c, h, wd = x.shape
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    taps = np.empty((window * window, n, c, ho, wo), dtype=x.dtype)
    for u in range(window):
        for v in range(window):
            taps[u * window + v] = x.data[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
    arg = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg[None], axis=0)[0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for u in range(window):
            for v in range(window):
                hit = arg == u * window + v
                gx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += g * hit
        return (gx,)

    return _result(out, (x,), backward, "maxpool2d")


def dropout(x, rate, rng):
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy; reductions run in float64."""
    z = logits.data.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    with np.errstate(invalid="ignore", over="ignore"):
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        loss = float(np.mean(logsum - z[np.arange(n), labels]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=np.float64), (logits,), backward, "xent")


# -- differentiation entry points -------------------------------------------

def _values(theta):
    return getattr(theta, "data", theta)


def _like(theta, values):
    if hasattr(theta, "with_data"):
        return theta.with_data(values)
    return values


def _scalar_loss(loss_fn, values, batch):
    out = loss_fn(Tensor(values), batch)
    val = float(np.asarray(_values(out)).reshape(()))
    if not np.isfinite(val):
        raise NonFiniteError(f"loss is not finite ({val})", getattr(out, "layer", None))
    return val


def grad(loss_fn, theta, batch=None):
    """Exact reverse-mode gradient of ``loss_fn(theta, batch)``.

    ``loss_fn`` receives a leaf :class:`Tensor` and must return a scalar
    tensor.  ``theta`` may be a ``ParamVector`` or a plain array; the result
    has the same kind.
    """
    values = np.asarray(_values(theta))
    leaf = Tensor(values, requires_grad=True)
    out = loss_fn(leaf, batch)
    val = float(out.data.reshape(()))
    if not np.isfinite(val):
        raise NonFiniteError(f"loss is not finite ({val})", getattr(out, "layer", None))
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(values)
    return _like(theta, np.asarray(g, dtype=values.dtype))


def value_and_grad(loss_fn, theta, batch=None):
    values = np.asarray(_values(theta))
    leaf = Tensor(values, requires_grad=True)
    out = loss_fn(leaf, batch)
    val = float(out.data.reshape(()))
    if not np.isfinite(val):
        raise NonFiniteError(f"loss is not finite ({val})", getattr(out, "layer", None))
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(values)
    return val, _like(theta, np.asarray(g, dtype=values.dtype))


def finite_diff_grad(loss_fn, theta, batch=None, eps=1e-6):
    """Central-difference gradient, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = np.array(_values(theta), dtype=np.float64)
    g = np.zeros_like(values)
    for i in range(values.size):
        old = values[i]
        values[i] = old + eps
        up = _scalar_loss(loss_fn, values, batch)
        values[i] = old - eps
        down = _scalar_loss(loss_fn, values, batch)
        values[i] = old
        g[i] = (up - down) / (2 * eps)
    return _like(theta, g)


def hvp(loss_fn, theta, batch, v, eps0=1e-4):
    """Hessian-vector product by central differences of gradients.

    The probe direction is normalised, stepped by ``eps0 * (1 + |theta|)``
    and the result rescaled by ``|v|``.
    """
    values = np.asarray(_values(theta))
    v = np.asarray(_values(v), dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0 or not np.isfinite(vnorm):
        raise ValueError("hvp needs a direction with nonzero finite norm")
    eps = eps0 * (1.0 + float(np.linalg.norm(values.astype(np.float64))))
    step = (eps * v / vnorm).astype(values.dtype)
    g_up = np.asarray(_values(grad(loss_fn, values + step, batch)), dtype=np.float64)
    g_down = np.asarray(_values(grad(loss_fn, values - step, batch)), dtype=np.float64)
    hv = (g_up - g_down) * (vnorm / (2 * eps))
    return _like(theta, hv.astype(values.dtype))
