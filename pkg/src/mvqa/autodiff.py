"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything downstream (encoders, attention, fusion, losses) is built from
the operations in this module.  Design constraints:

- Tensors hold a row-major numpy array (`float32` for model execution,
  `float64` for the gradient-checking path) plus an optional gradient
  buffer of the same shape.
- Ops execute eagerly.  When a `Tape` is active and an input is tracked
  (a parameter with ``requires_grad`` or the output of an earlier
  recorded op), the op appends a node to the tape.  Nodes are appended
  in execution order, so the tape is topologically sorted by
  construction and `backward` is a single reverse sweep that visits each
  node exactly once.
- Broadcasting is deliberately restricted to the two forms the model
  needs: scalar constants (`smul`/`sadd`) and per-column scaling of a
  ``d x n`` matrix by an ``n``-vector (`scale_columns`).  Everything else
  requires exact shape agreement and raises `ShapeError` otherwise.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand dimensions are incompatible."""


class GraphError(AutodiffError):
    """The tape/backward machinery was used incorrectly."""


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.type not in _FLOAT_DTYPES:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag}{label})"

    # Operator sugar; all real work happens in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return smul(self, float(other))

    def __rmul__(self, other):
        return smul(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        # backward_fn(upstream: ndarray) -> tuple of ndarray-or-None, one per input
        self.backward_fn = backward_fn


_TAPE_STACK = []


class Tape:
    """Execution-ordered record of ops, replayable backwards.

    Use as a context manager around a forward pass::

        with Tape() as tape:
            loss = model_loss(...)
        backward(tape, loss)
    """

    def __init__(self):
        self.nodes = []
        self._tracked = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise GraphError("tape stack corrupted: tapes must nest")
        return False

    def watches(self, t):
        return t.requires_grad or id(t) in self._tracked

    def backward(self, loss):
        backward(self, loss)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op, inputs, output, backward_fn):
    """Append a node to the active tape if any input is tracked.

    Exposed so callers (and tests) can register custom differentiable
    operations without touching the engine.
    """
    tape = _active_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape.nodes.append(_Node(op, tuple(inputs), output, backward_fn))
        tape._tracked.add(id(output))
    return output


def backward(tape, loss):
    """Populate ``grad`` on every requires_grad tensor touched by the tape.

    Gradients accumulate (+=) into pre-existing ``grad`` buffers; call
    ``zero_grad`` between steps.  Tensors that do not lie on a path to
    ``loss`` receive a zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")

    flowing = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}

    leaves = []
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                leaves.append(t)

    for node in reversed(tape.nodes):
        out_id = id(node.output)
        upstream = flowing.pop(out_id, None)
        if upstream is None:
            upstream = leaf_grads.get(out_id)
        if upstream is None:
            continue  # not on a path to the loss
        grads = node.backward_fn(upstream)
        if len(grads) != len(node.inputs):
            raise GraphError(f"op {node.op!r} returned {len(grads)} gradients for {len(node.inputs)} inputs")
        for t, g in zip(node.inputs, grads):
            if g is None:
                continue
            bucket = leaf_grads if t.requires_grad else flowing
            key = id(t)
            if key in bucket:
                bucket[key] = bucket[key] + g
            else:
                bucket[key] = g

    if loss.requires_grad:
        if id(loss) not in leaf_grads:
            leaf_grads[id(loss)] = np.ones_like(loss.data)
        if not any(t is loss for t in leaves):
            leaves.append(loss)
    for t in leaves:
        g = leaf_grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape / dtype guards
# ---------------------------------------------------------------------------

def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _check_same_dtype(op, a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape("add", a, b)
    _check_same_dtype("add", a, b)
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a, b):
    _check_same_shape("sub", a, b)
    _check_same_dtype("sub", a, b)
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out, lambda g: (g, -g))


def neg(a):
    out = Tensor(-a.data)
    return record("neg", (a,), out, lambda g: (-g,))


def hadamard(a, b):
    """Elementwise product of two same-shape tensors."""
    _check_same_shape("hadamard", a, b)
    _check_same_dtype("hadamard", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return record("hadamard", (a, b), out, lambda g: (g * bd, g * ad))


def smul(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = Tensor(a.data * a.dtype.type(c))
    return record("smul", (a,), out, lambda g: (g * a.dtype.type(c),))


def sadd(a, c):
    """Add a python scalar constant."""
    c = float(c)
    out = Tensor(a.data + a.dtype.type(c))
    return record("sadd", (a,), out, lambda g: (g,))


def scale_columns(m, w):
    """Scale column j of a ``d x n`` matrix by ``w[j]``.

    The one sanctioned row-vector broadcast: a length-``n`` weight vector
    applied down the rows of every column.
    """
    if m.data.ndim != 2 or w.data.ndim != 1:
        raise ShapeError(f"scale_columns: need matrix and vector, got {tuple(m.shape)} and {tuple(w.shape)}")
    if m.shape[1] != w.shape[0]:
        raise ShapeError(f"scale_columns: matrix has {m.shape[1]} columns but weight vector has {w.shape[0]} entries")
    _check_same_dtype("scale_columns", m, w)
    out = Tensor(m.data * w.data[None, :])
    md, wd = m.data, w.data
    return record("scale_columns", (m, w), out,
                  lambda g: (g * wd[None, :], (g * md).sum(axis=0)))


def matmul(a, b):
    """Matrix product of a ``p x q`` and a ``q x r`` tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    _check_same_dtype("matmul", a, b)
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return record("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need 2-d tensor, got {tuple(a.shape)}")
    out = Tensor(a.data.T.copy())
    return record("transpose", (a,), out, lambda g: (g.T,))


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {tuple(a.shape)} as {shape}")
    out = Tensor(a.data.reshape(shape).copy())
    old = a.shape
    return record("reshape", (a,), out, lambda g: (g.reshape(old),))


def narrow(a, axis, start, stop):
    """Slice ``a`` along ``axis`` to the half-open range [start, stop)."""
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {tuple(a.shape)}")
    axis = axis % nd
    extent = a.shape[axis]
    if not (0 <= start <= stop <= extent):
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for extent {extent}")
    index = tuple(slice(start, stop) if d == axis else slice(None) for d in range(nd))
    out = Tensor(a.data[index].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record("narrow", (a,), out, bwd)


def concat(a, b, axis=0):
    """Concatenate two tensors along ``axis``; all other extents must agree."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: ranks differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} invalid for shape {tuple(a.shape)}")
    axis = axis % nd
    for d in range(nd):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeError(f"concat: shapes {tuple(a.shape)} and {tuple(b.shape)} disagree off axis {axis}")
    _check_same_dtype("concat", a, b)
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.shape[axis]

    def bwd(g):
        ga = np.take(g, range(split), axis=axis)
        gb = np.take(g, range(split, g.shape[axis]), axis=axis)
        return (ga, gb)

    return record("concat", (a, b), out, bwd)


def detach(a):
    """Copy of ``a`` severed from the graph (no gradient flows through)."""
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def tanh(a):
    out = Tensor(np.tanh(a.data))
    od = out.data
    return record("tanh", (a,), out, lambda g: (g * (1.0 - od * od),))


def sigmoid(a):
    # Piecewise-stable form: never exponentiates a positive argument.
    x = a.data
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    z[~pos] = ez / (1.0 + ez)
    out = Tensor(z)
    od = out.data
    return record("sigmoid", (a,), out, lambda g: (g * od * (1.0 - od),))


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return record("relu", (a,), out, lambda g: (g * mask,))


def log(a):
    out = Tensor(np.log(a.data))
    ad = a.data
    return record("log", (a,), out, lambda g: (g / ad,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is passed through strictly inside the range."""
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data > lo) & (a.data < hi)
    return record("clip", (a,), out, lambda g: (g * mask,))


def softmax(a, axis=0):
    """Max-subtracted softmax along ``axis``."""
    nd = a.data.ndim
    if nd == 0 or not -nd <= axis < nd:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {tuple(a.shape)}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", (a,), out, bwd)


def sum_all(a):
    """Sum of every element, as a 0-d tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    shape = a.shape
    return record("sum_all", (a,), out, lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=True),))


def mean_all(a):
    if a.size == 0:
        raise ShapeError("mean_all: empty tensor")
    return smul(sum_all(a), 1.0 / a.size)


def elementwise(kind, a, b=None):
    """Dispatch by name over the pointwise op family.

    ``kind`` is one of tanh, sigmoid, relu (unary) or add, hadamard
    (binary, identical shapes).
    """
    unary = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
    binary = {"add": add, "hadamard": hadamard}
    if kind in unary:
        if b is not None:
            raise GraphError(f"elementwise: {kind} is unary")
        return unary[kind](a)
    if kind in binary:
        if b is None:
            raise GraphError(f"elementwise: {kind} needs two operands")
        return binary[kind](a, b)
    raise GraphError(f"elementwise: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# embedding and convolution
# ---------------------------------------------------------------------------

def embedding_lookup(table, ids):
    """Columns of the output are rows of ``table`` selected by ``ids``.

    ``table`` is ``V x d``; the result is ``d x n`` for ``n`` ids.  The
    backward rule scatter-adds column gradients into the selected rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-d, got shape {tuple(ids.shape)}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {tuple(table.shape)}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for vocabulary of {table.shape[0]} rows")
    out = Tensor(table.data[ids].T.copy())

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g.T)
        return (dt,)

    return record("embedding_lookup", (table,), out, bwd)


def _conv_out_extent(op, extent, k, stride):
    if extent < k:
        raise ShapeError(f"{op}: spatial extent {extent} is smaller than the required minimum {k}")
    return (extent - k) // stride + 1


def conv2d(x, kernels, bias=None, stride=1):
    """Valid-padding cross-correlation of a ``c x h x w`` input.

    ``kernels`` has shape ``o x c x kh x kw``; ``bias``, when given, has
    shape ``(o,)``.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be c x h x w, got {tuple(x.shape)}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be o x c x kh x kw, got {tuple(kernels.shape)}")
    c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {kc}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ho = _conv_out_extent("conv2d", h, kh, stride)
    wo = _conv_out_extent("conv2d", w, kw, stride)

    xd, kd = x.data, kernels.data
    outd = np.empty((o, ho, wo), dtype=x.data.dtype)
    for i in range(ho):
        for j in range(wo):
            window = xd[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
            outd[:, i, j] = np.tensordot(kd, window, axes=([1, 2, 3], [0, 1, 2]))
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} does not match {o} output channels")
        outd += bias.data[:, None, None]
    out = Tensor(outd)

    def bwd(g):
        dx = np.zeros_like(xd)
        dk = np.zeros_like(kd)
        for i in range(ho):
            for j in range(wo):
                window = xd[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                gij = g[:, i, j]
                dk += gij[:, None, None, None] * window[None, :, :, :]
                dx[:, i * stride:i * stride + kh, j * stride:j * stride + kw] += np.tensordot(gij, kd, axes=(0, 0))
        if bias is None:
            return (dx, dk)
        return (dx, dk, g.sum(axis=(1, 2)))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record("conv2d", inputs, out, bwd)


def maxpool2d(x, kernel, stride=None):
    """Valid max pooling over each channel of a ``c x h x w`` input."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d: input must be c x h x w, got {tuple(x.shape)}")
    if stride is None:
        stride = kernel
    c, h, w = x.shape
    ho = _conv_out_extent("maxpool2d", h, kernel, stride)
    wo = _conv_out_extent("maxpool2d", w, kernel, stride)
    xd = x.data
    outd = np.empty((c, ho, wo), dtype=xd.dtype)
    argmax = np.empty((c, ho, wo), dtype=np.int64)
    for i in range(ho):
        for j in range(wo):
            window = xd[:, i * stride:i * stride + kernel, j * stride:j * stride + kernel]
            flat = window.reshape(c, -1)
            idx = flat.argmax(axis=1)
            argmax[:, i, j] = idx
            outd[:, i, j] = flat[np.arange(c), idx]
    out = Tensor(outd)

    def bwd(g):
        dx = np.zeros_like(xd)
        for i in range(ho):
            for j in range(wo):
                idx = argmax[:, i, j]
                di, dj = np.unravel_index(idx, (kernel, kernel))
                dx[np.arange(c), i * stride + di, j * stride + dj] += g[:, i, j]
        return (dx,)

    return record("maxpool2d", (x,), out, bwd)


def meanpool(x):
    """Average over all spatial positions, one value per channel."""
    if x.data.ndim != 3:
        raise ShapeError(f"meanpool: input must be c x h x w, got {tuple(x.shape)}")
    c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g[:, None, None] * inv, (c, h, w)).astype(x.dtype, copy=True),)

    return record("meanpool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _analytic_grads(f, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    return [p.grad.copy() for p in params]


def grad_check(f, params, epsilon=1e-5, coords_per_param=None, rng=None,
               floor=1e-8):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``params`` (a list of
    requires_grad tensors, conventionally float64).  For each parameter,
    either every coordinate or ``coords_per_param`` sampled coordinates
    are perturbed by ``epsilon``.  The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; ``floor``
    turns the check into an absolute one for near-zero gradients, where the
    difference quotient bottoms out at roundoff noise (about
    ``eps * |f| / epsilon``), so it should sit well above that.
    """
    result = grad_check_report(f, params, epsilon=epsilon,
                               coords_per_param=coords_per_param, rng=rng,
                               floor=floor)
    return result.max_rel_error


class GradCheckResult:
    """Per-parameter worst relative errors from a grad_check run."""

    def __init__(self, entries):
        self.entries = entries  # list of (name, worst_rel_error, n_coords)
        self.max_rel_error = max((e[1] for e in entries), default=0.0)

    def __iter__(self):
        return iter(self.entries)


def grad_check_report(f, params, epsilon=1e-5, coords_per_param=None, rng=None,
                      floor=1e-8):
    if epsilon <= 0:
        raise GraphError("grad_check: epsilon must be positive")
    if floor <= 0:
        raise GraphError("grad_check: floor must be positive")
    params = list(params)
    analytic = _analytic_grads(f, params)

    entries = []
    for p, a in zip(params, analytic):
        n = p.size
        if coords_per_param is None or n <= coords_per_param:
            coords = np.arange(n)
        else:
            if rng is None:
                coords = np.linspace(0, n - 1, coords_per_param).astype(np.int64)
            else:
                coords = rng.permutation(n)[:coords_per_param]
        flat = p.data.reshape(-1)
        worst = 0.0
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + epsilon
            hi = f().item()
            flat[idx] = original - epsilon
            lo = f().item()
            flat[idx] = original
            numeric = (hi - lo) / (2.0 * epsilon)
            ana = float(a.reshape(-1)[idx])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), floor)
            if rel > worst:
                worst = rel
        entries.append((p.name or f"param{len(entries)}", worst, len(coords)))
    return GradCheckResult(entries)
