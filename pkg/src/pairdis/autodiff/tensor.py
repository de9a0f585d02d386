"""Minimal reverse-mode tensor engine on numpy.

Single-threaded and deterministic: graphs are built eagerly, backward walks a
fixed topological order, and gradient accumulation happens in declaration
order. Float64 is the gradient-checking mode; float32 is allowed for training
throughput. Non-finite values are trapped where they can originate (exp, log,
div, sqrt, pow) and surface as NonFiniteError instead of propagating NaNs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class GraphError(RuntimeError):
    """Graph contract violation (e.g. backward from a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN/Inf from finite inputs."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data) -> np.ndarray:
    a = np.asarray(data)
    if a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float64)
    return a


def _guard(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return a


class _quiet(np.errstate):
    """Suppress numpy runtime warnings inside guarded ops; _guard traps instead."""

    def __init__(self):
        super().__init__(all="ignore")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A node in the computation graph: numpy payload plus reverse rule."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._vjp = None

    # internal constructor for op outputs
    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t.name = None
        t._parents = parents if t.requires_grad else ()
        t._vjp = vjp if t.requires_grad else None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # ---- graph traversal ----

    def _toposort(self) -> list:
        """Iterative DFS postorder over parents; deterministic for a fixed graph."""
        order, seen, stack = [], set(), [(self, False)]
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

    def backward(self) -> None:
        """Reverse accumulation from a scalar output.

        Overwrites .grad on every reachable tensor with requires_grad; tensors
        that only feed constant subgraphs are skipped.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a graph with no differentiable leaves")
        order = self._toposort()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._vjp is None:
                continue
            parts = node._vjp(g)
            for parent, pg in zip(node._parents, parts):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # ---- elementwise arithmetic ----

    def _const_like(self, value) -> "Tensor":
        return Tensor(np.asarray(value, dtype=self.data.dtype))

    def _binary(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else self._const_like(other)

    def __add__(self, other):
        o = self._binary(other)
        out = self.data + o.data
        return Tensor._node(out, (self, o), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(g, o.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._binary(other)
        out = self.data - o.data
        return Tensor._node(out, (self, o), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)))

    def __rsub__(self, other):
        return self._binary(other).__sub__(self)

    def __mul__(self, other):
        o = self._binary(other)
        out = self.data * o.data
        return Tensor._node(out, (self, o), lambda g: (
            _unbroadcast(g * o.data, self.shape), _unbroadcast(g * self.data, o.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._binary(other)
        with _quiet():
            out = _guard(self.data / o.data, "div")
        return Tensor._node(out, (self, o), lambda g: (
            _unbroadcast(g / o.data, self.shape),
            _unbroadcast(-g * self.data / (o.data * o.data), o.shape)))

    def __rtruediv__(self, other):
        return self._binary(other).__truediv__(self)

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("exponent must be a python scalar")
        pf = float(p)
        with _quiet():
            out = _guard(self.data ** pf, "pow")
        x = self.data
        return Tensor._node(out, (self,), lambda g: (g * pf * x ** (pf - 1.0),))

    def __matmul__(self, other):
        o = self._binary(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {self.shape} @ {o.shape}")
        if self.shape[1] != o.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {self.shape} @ {o.shape}")
        out = self.data @ o.data
        return Tensor._node(out, (self, o), lambda g: (g @ o.data.T, self.data.T @ g))

    # ---- elementwise functions ----

    def exp(self):
        with _quiet():
            out = _guard(np.exp(self.data), "exp")
        return Tensor._node(out, (self,), lambda g: (g * out,))

    def log(self):
        if np.any(self.data <= 0):
            raise NonFiniteError("log of non-positive value")
        out = np.log(self.data)
        x = self.data
        return Tensor._node(out, (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sqrt(self):
        with _quiet():
            out = _guard(np.sqrt(self.data), "sqrt")
        return Tensor._node(out, (self,), lambda g: (g / (2.0 * out),))

    def square(self):
        x = self.data
        return Tensor._node(x * x, (self,), lambda g: (g * (2.0 * x),))

    def abs(self):
        x = self.data
        return Tensor._node(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def relu(self):
        x = self.data
        return Tensor._node(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),))

    # ---- reductions and shape ops ----

    @staticmethod
    def _norm_axes(axis, ndim) -> tuple:
        if axis is None:
            return tuple(range(ndim))
        if isinstance(axis, int):
            axis = (axis,)
        return tuple(a % ndim for a in axis)

    def sum(self, axis=None, keepdims: bool = False):
        axes = Tensor._norm_axes(axis, self.data.ndim)
        out = self.data.sum(axis=axes, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            gk = g if keepdims or not axes else np.expand_dims(g, axes)
            return (np.broadcast_to(gk, shape).copy(),)

        return Tensor._node(np.asarray(out), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        axes = Tensor._norm_axes(axis, self.data.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        out = self.data.mean(axis=axes, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            gk = g if keepdims or not axes else np.expand_dims(g, axes)
            return (np.broadcast_to(gk / count, shape).copy(),)

        return Tensor._node(np.asarray(out), (self,), vjp)

    def max(self, axis: int, keepdims: bool = False):
        """Max over one axis; backward routes to the first argmax (row-major ties)."""
        ax = axis % self.data.ndim
        out = self.data.max(axis=ax, keepdims=keepdims)
        idx = np.argmax(self.data, axis=ax, keepdims=True)
        shape = self.shape

        def vjp(g):
            gk = g if keepdims else np.expand_dims(g, ax)
            z = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(z, idx, gk, axis=ax)
            return (z,)

        return Tensor._node(out, (self,), vjp)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self.data.reshape(shape)
        return Tensor._node(out, (self,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._node(out, tuple(ts), vjp)


# ---- composed helpers (exact, built from primitives) ----

def sigmoid(x: Tensor) -> Tensor:
    # 0.5*(tanh(x/2)+1) is the overflow-safe logistic
    return (x * 0.5).tanh() * 0.5 + 0.5


def maximum_const(x: Tensor, c: float) -> Tensor:
    """max(x, c) with gradient 1 where x > c, else 0."""
    return (x - c).relu() + c


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ShapeError(f"clamp bounds out of order: [{lo}, {hi}]")
    return (x - lo).relu() - (x - hi).relu() + lo


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on row vectors: x @ w (+ b)."""
    out = x @ w
    return out if b is None else out + b


# ---- convolution family (NCHW, valid padding, stride 1) ----

def _gather_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix (C*kh*kw, B*Ho*Wo) built from k*k fast slice copies."""
    B, C, H, W = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel ({kh},{kw}) larger than input ({H},{W})")
    out = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    xT = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            out[:, i, j] = xT[:, :, i:i + Ho, j:j + Wo]
    return out.reshape(C * kh * kw, B * Ho * Wo)


def _chan_major(a: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> contiguous (C, B*H*W)."""
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def _to_nchw(out2: np.ndarray, B: int, O: int, Ho: int, Wo: int) -> np.ndarray:
    """(O, B*Ho*Wo) -> contiguous (B,O,Ho,Wo)."""
    return np.ascontiguousarray(out2.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))


def _corr_gather(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation, valid padding: x (B,C,H,W) with w (O,C,kh,kw)."""
    O, C, kh, kw = w.shape
    B, _, H, W = x.shape
    out2 = w.reshape(O, -1) @ _gather_cols(x, kh, kw)
    return _to_nchw(out2, B, O, H - kh + 1, W - kw + 1)


def _corr_scatter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Spatially growing correlation: x (B,Cs,H,W), w (Cs,Cd,kh,kw).

    out[b,d,y+i,x+j] += x[b,s,y,x] * w[s,d,i,j]; one GEMM then k*k slice adds.
    This is both the transposed-conv forward and the conv input gradient.
    """
    B, Cs, H, W = x.shape
    _, Cd, kh, kw = w.shape
    contrib = (w.reshape(Cs, -1).T @ _chan_major(x)).reshape(Cd, kh, kw, B, H, W)
    out = np.zeros((Cd, B, H + kh - 1, W + kw - 1), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + H, j:j + W] += contrib[:, i, j]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, valid padding, stride 1. w is (O, C, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    O, C, kh, kw = w.shape
    B, _, H, W = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    cols = _gather_cols(x.data, kh, kw)  # kept for the weight gradient
    out = _to_nchw(w.data.reshape(O, -1) @ cols, B, O, Ho, Wo)
    wd = w.data

    def vjp(g):
        dx = _corr_scatter(g, wd)  # wd maps O -> C in the adjoint direction
        dw = (_chan_major(g) @ cols.T).reshape(O, C, kh, kw)
        return (dx, dw)

    y = Tensor._node(out, (x, w), vjp)
    if b is not None:
        if b.shape != (O,):
            raise ShapeError(f"conv2d bias shape {b.shape}, expected ({O},)")
        y = y + b.reshape(1, O, 1, 1)
    return y


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Adjoint of valid conv2d (spatial dims grow by k-1). w is (C_in, C_out, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape} vs kernel {w.shape}")
    Ci, Co, kh, kw = w.shape
    B, _, H, W = x.shape
    out = _corr_scatter(x.data, w.data)
    xd, wd = x.data, w.data

    def vjp(g):
        # both grads consume the same patch matrix of g
        gcols = _gather_cols(g, kh, kw)  # (Co*kh*kw, B*H*W)
        dx = _to_nchw(wd.reshape(Ci, -1) @ gcols, B, Ci, H, W)
        dw = (_chan_major(xd) @ gcols.T).reshape(Ci, Co, kh, kw)
        return (dx, dw)

    y = Tensor._node(out, (x, w), vjp)
    if b is not None:
        if b.shape != (Co,):
            raise ShapeError(f"conv2d_transpose bias shape {b.shape}, expected ({Co},)")
        y = y + b.reshape(1, Co, 1, 1)
    return y


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route to the first window position (row-major)."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {(H, W)}")
    Ho, Wo = H // 2, W // 2
    win = x.data.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def vjp(g):
        z = np.zeros((B, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(z, idx, g[..., None], axis=-1)  # windows are disjoint
        return (z.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return Tensor._node(np.ascontiguousarray(out), (x,), vjp)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return Tensor._node(out, (x,), vjp)
