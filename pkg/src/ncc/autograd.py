"""Minimal reverse-mode autodiff on numpy arrays.

Everything is float64. A Tape records one computation; Tensors carry an
optional node id into the tape that produced them. Constants (no tape) flow
through ops without recording, so a forward pass built purely from constants
costs nothing beyond the numpy kernels.

The op set is exactly what the losses and networks in this package need:
dense matmul, elementwise arithmetic with row broadcasting, relu, reductions,
row l2 normalization, 1-d batchnorm with running statistics, a max-shifted
logsumexp, column concat / off-diagonal extraction (for the prototype loss),
and slicing/reshape (for flat-parameter-vector gradient checks).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "Gradients", "BNState", "tensor",
    "matmul", "transpose", "add", "sub", "mul", "scale", "relu",
    "sum_", "mean", "l2_normalize", "logsumexp", "batchnorm1d",
    "mse_rowwise", "concat_cols", "offdiag", "slice1d", "reshape",
    "detach", "grad_check",
]


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 0 and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


class Tensor:
    """A float64 array plus an optional (tape, node) pair.

    node is None for constants; such tensors never receive gradients.
    Data is shared, not copied: mutating an input array after recording a
    tape but before calling backward() invalidates the gradients.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"


def tensor(x) -> Tensor:
    """Lift an array (or Tensor) to a constant Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Topologically ordered record of one differentiable computation."""

    def __init__(self):
        self._nodes = []  # list of (parents tuple, backward fn or None)

    def __len__(self):
        return len(self._nodes)

    def _record(self, parents, backward) -> int:
        self._nodes.append((parents, backward))
        return len(self._nodes) - 1

    def watch(self, x) -> Tensor:
        """Register an array as a differentiable leaf on this tape."""
        data = x.data if isinstance(x, Tensor) else x
        node = self._record((), None)
        return Tensor(data, self, node)

    def backward(self, root: Tensor) -> "Gradients":
        """Reverse sweep from a scalar root; visits each node at most once."""
        if root.tape is not self or root.node is None:
            raise ValueError("backward root is not recorded on this tape")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        adj = [None] * len(self._nodes)
        adj[root.node] = np.ones_like(root.data)

        def accum(node_id, contribution):
            if adj[node_id] is None:
                adj[node_id] = contribution.copy() if contribution.base is not None else contribution
            else:
                adj[node_id] = adj[node_id] + contribution

        for i in range(root.node, -1, -1):
            g = adj[i]
            if g is None:
                continue
            _, back = self._nodes[i]
            if back is not None:
                back(g, accum)
        return Gradients(self, adj)


class Gradients:
    """Adjoints from one backward sweep, indexed by Tensor."""

    def __init__(self, tape, adj):
        self._tape = tape
        self._adj = adj

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            raise KeyError("tensor is not on the tape this backward pass ran over")
        g = self._adj[t.node]
        if g is None:
            return np.zeros_like(t.data)
        return np.reshape(g, t.data.shape)


def _merged_tape(*tensors):
    tape = None
    for t in tensors:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _emit(data, parents_tensors, backward):
    tape = _merged_tape(*parents_tensors)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node for t in parents_tensors if t.node is not None)
    node = tape._record(parents, backward)
    return Tensor(data, tape, node)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def back(g, accum):
        if a.node is not None:
            accum(a.node, g @ bd.T)
        if b.node is not None:
            accum(b.node, ad.T @ g)

    return _emit(out, (a, b), back)


def transpose(x) -> Tensor:
    x = tensor(x)
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")

    def back(g, accum):
        accum(x.node, g.T)

    return _emit(x.data.T.copy(), (x,), back)


def _binary_elementwise(a, b, fwd, back_a, back_b, name):
    a, b = tensor(a), tensor(b)
    # same shape, or b a vector broadcast across rows of a
    if a.shape != b.shape:
        if not (a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not align")
    broadcast = a.shape != b.shape
    out = fwd(a.data, b.data)

    def back(g, accum):
        if a.node is not None:
            accum(a.node, back_a(g, a.data, b.data))
        if b.node is not None:
            gb = back_b(g, a.data, b.data)
            if broadcast:
                gb = gb.sum(axis=0)
            accum(b.node, gb)

    return _emit(out, (a, b), back)


def add(a, b) -> Tensor:
    return _binary_elementwise(
        a, b, lambda x, y: x + y,
        lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary_elementwise(
        a, b, lambda x, y: x - y,
        lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary_elementwise(
        a, b, lambda x, y: x * y,
        lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def scale(x, c: float) -> Tensor:
    x = tensor(x)
    c = float(c)

    def back(g, accum):
        accum(x.node, g * c)

    return _emit(x.data * c, (x,), back)


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0

    def back(g, accum):
        accum(x.node, g * mask)

    return _emit(x.data * mask, (x,), back)


def sum_(x, axis=None) -> Tensor:
    x = tensor(x)
    if axis is not None and x.data.ndim != 2:
        raise ValueError("axis reductions are defined for 2-d tensors")
    out = x.data.sum(axis=axis)

    def back(g, accum):
        if axis is None:
            accum(x.node, np.broadcast_to(g, x.shape).copy() if np.ndim(g) == 0
                  else np.full(x.shape, float(g)))
        elif axis == 0:
            accum(x.node, np.broadcast_to(g[None, :], x.shape))
        else:
            accum(x.node, np.broadcast_to(g[:, None], x.shape))

    return _emit(out, (x,), back)


def mean(x, axis=None) -> Tensor:
    x = tensor(x)
    if axis is None:
        n = x.data.size
    else:
        if x.data.ndim != 2:
            raise ValueError("axis reductions are defined for 2-d tensors")
        n = x.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty reduction axis")
    return scale(sum_(x, axis=axis), 1.0 / n)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Row-wise x / max(||x||, eps). Rows at exactly zero stay zero."""
    x = tensor(x)
    if x.data.ndim != 2:
        raise ValueError("l2_normalize expects an n x d tensor")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    out = x.data / denom
    u = out

    def back(g, accum):
        # rows above the floor: (I - u u^T)/||x||; rows at the floor: 1/eps
        small = norms <= eps
        dot = (g * u).sum(axis=1, keepdims=True)
        gx = (g - u * dot) / denom
        if small.any():
            gx = np.where(small, g / eps, gx)
        accum(x.node, gx)

    return _emit(out, (x,), back)


def logsumexp(x, axis=None) -> Tensor:
    """Max-shifted log-sum-exp; gradient is the softmax of x."""
    x = tensor(x)
    if x.data.ndim == 1:
        if axis not in (None, 0):
            raise ValueError("1-d logsumexp reduces over axis 0")
        if x.data.size == 0:
            raise ValueError("logsumexp over an empty vector")
        m = x.data.max()
        out = m + np.log(np.exp(x.data - m).sum())
        soft = np.exp(x.data - out)

        def back(g, accum):
            accum(x.node, soft * g)

        return _emit(out, (x,), back)
    if x.data.ndim != 2 or axis not in (0, 1):
        raise ValueError("logsumexp expects a 1-d tensor or a 2-d tensor with axis 0 or 1")
    if x.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    out_keep = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    soft = np.exp(x.data - out_keep)
    out = np.squeeze(out_keep, axis=axis)

    def back(g, accum):
        accum(x.node, soft * np.expand_dims(g, axis))

    return _emit(out, (x,), back)


class BNState:
    """Running statistics and hyperparameters for one batchnorm layer."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def copy(self) -> "BNState":
        out = BNState(len(self.running_mean), self.momentum, self.eps)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batchnorm1d(x, gamma, beta, state: BNState, training: bool) -> Tensor:
    """Per-feature batchnorm. Training mode uses (biased) batch statistics
    and folds them into the running estimates; eval mode uses the running
    estimates and is batch-size independent."""
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    if x.data.ndim != 2:
        raise ValueError("batchnorm1d expects an n x d tensor")
    n, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("batchnorm1d scale/shift must have one entry per feature")
    if training:
        if n < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def back(g, accum):
        if beta.node is not None:
            accum(beta.node, g.sum(axis=0))
        if gamma.node is not None:
            accum(gamma.node, (g * xhat).sum(axis=0))
        if x.node is not None:
            dxhat = g * gamma.data
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=0)
                            - xhat * (dxhat * xhat).mean(axis=0))
            else:
                gx = dxhat * inv
            accum(x.node, gx)

    return _emit(out, (x, gamma, beta), back)


def mse_rowwise(a, b) -> Tensor:
    """Mean over rows of the squared euclidean row distance."""
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"mse_rowwise expects matching n x d tensors, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n == 0:
        raise ValueError("mse_rowwise over an empty batch")
    diff = a.data - b.data
    out = np.asarray((diff * diff).sum(axis=1).mean())

    def back(g, accum):
        gd = (2.0 / n) * float(g) * diff
        if a.node is not None:
            accum(a.node, gd)
        if b.node is not None:
            accum(b.node, -gd)

    return _emit(out, (a, b), back)


def concat_cols(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError("concat_cols expects 2-d tensors with equal row counts")
    na = a.shape[1]

    def back(g, accum):
        if a.node is not None:
            accum(a.node, g[:, :na])
        if b.node is not None:
            accum(b.node, g[:, na:])

    return _emit(np.hstack([a.data, b.data]), (a, b), back)


def offdiag(x) -> Tensor:
    """Drop the diagonal of a square matrix, giving k x (k-1)."""
    x = tensor(x)
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError("offdiag expects a square matrix")
    k = x.shape[0]
    keep = ~np.eye(k, dtype=bool)
    out = x.data[keep].reshape(k, k - 1)

    def back(g, accum):
        gx = np.zeros((k, k))
        gx[keep] = g.ravel()
        accum(x.node, gx)

    return _emit(out, (x,), back)


def slice1d(x, start: int, stop: int) -> Tensor:
    x = tensor(x)
    if x.data.ndim != 1:
        raise ValueError("slice1d expects a 1-d tensor")
    if not (0 <= start <= stop <= x.data.size):
        raise ValueError(f"slice [{start}:{stop}] out of range for size {x.data.size}")

    def back(g, accum):
        gx = np.zeros(x.data.size)
        gx[start:stop] = g
        accum(x.node, gx)

    return _emit(x.data[start:stop].copy(), (x,), back)


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    shape = tuple(shape)

    def back(g, accum):
        accum(x.node, g.reshape(x.data.shape))

    return _emit(x.data.reshape(shape).copy(), (x,), back)


def detach(x) -> Tensor:
    """Constant view of x's value; contributes zero gradient."""
    x = tensor(x)
    return Tensor(x.data)


def grad_check(fn, x, h: float = 1e-5) -> float:
    """Max over components of |analytic - central difference| / max(1, |analytic|).

    fn must map one Tensor to a scalar Tensor and be a pure function of the
    value (batchnorm running-stat side effects are fine; they do not feed
    back into training-mode outputs).
    """
    x = _as_array(x)
    tape = Tape()
    xt = tape.watch(x)
    y = fn(xt)
    if y.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = tape.backward(y)[xt].ravel()

    flat = x.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = float(fn(Tensor(bumped.reshape(x.shape))).data)
        bumped[i] = flat[i] - h
        lo = float(fn(Tensor(bumped.reshape(x.shape))).data)
        fd[i] = (hi - lo) / (2 * h)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
