"""Dense float tensors with reverse-mode automatic differentiation.

A small, auditable engine: operations executed while a :class:`Tape` is
active are recorded as entries (input node ids, output node id, backward
rule) in topological order; ``Tape.backward`` walks the entries once in
reverse and accumulates gradients into the participating leaves.

Deliberate restrictions, so every backward rule stays checkable by hand:

- float32 by default (float64 allowed, used mainly by numeric test oracles);
- no broadcasting except scalar-with-tensor (a python number or a size-1
  tensor) and the dedicated per-channel ops;
- convolutions are stride-1 with "same" zero padding.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

Array = np.ndarray

_TAPE_STACK: list["Tape"] = []


def current_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _TapeEntry:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn")

    def __init__(self, op: str, input_ids: tuple, output_id: int,
                 backward_fn: Callable[[Array], Sequence[Optional[Array]]]):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on a scalar loss exactly once. A second backward on the
    same tape raises :class:`TapeError` instead of silently corrupting
    gradients.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._next_id = 0
        self._leaves: dict[int, "Tensor"] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _node_id(self, t: "Tensor") -> int:
        """Assign (once) and return this tensor's id on the tape."""
        if t.node_id is None or t._tape is not self:
            t.node_id = self._new_id()
            t._tape = self
            if t.requires_grad:
                self._leaves[t.node_id] = t
        return t.node_id

    def record(self, op: str, inputs: Sequence["Tensor"], output: "Tensor",
               backward_fn: Callable[[Array], Sequence[Optional[Array]]]):
        input_ids = tuple(self._node_id(t) for t in inputs)
        output.node_id = self._new_id()
        output._tape = self
        self.entries.append(_TapeEntry(op, input_ids, output.node_id, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``.grad`` on every reachable requires-grad leaf."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward call; "
                            "re-record the forward pass before differentiating again")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("backward target is detached from this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True

        grads: dict[int, Array] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output_id, None)
            if g is None:
                continue
            contribs = entry.backward_fn(g)
            for nid, contrib in zip(entry.input_ids, contribs):
                if contrib is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + contrib
                else:
                    grads[nid] = contrib
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is not None:
                leaf.grad = g.astype(leaf.data.dtype, copy=False) if g.dtype != leaf.data.dtype else g


class Tensor:
    """Dense N-d float array, optionally carrying a gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data: Array = arr
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def check_finite(self, context: str = "tensor") -> "Tensor":
        """Barrier: raise if data (or grad) holds NaN/Inf, else pass through."""
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in {context}")
        if self.grad is not None and not np.isfinite(self.grad).all():
            raise NonFiniteError(f"non-finite gradient in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    # -- method-style unaries/reductions -------------------------------------

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.data.dtype), dtype=ref.data.dtype)


def _record(op: str, inputs: Sequence[Tensor], out_data: Array,
            backward_fn: Callable[[Array], Sequence[Optional[Array]]]) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(
        t.requires_grad or (t._tape is tape and t.node_id is not None) for t in inputs
    )
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = track
    out.node_id = None
    out._tape = None
    if track:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _is_scalar_tensor(t: Tensor) -> bool:
    return t.data.size == 1


def _sum_to_scalar_shape(g: Array, shape: tuple) -> Array:
    return np.sum(g).reshape(shape) if g.shape != shape else g


# -- elementwise binary ops ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _record("add", [a], a.data + c, lambda g: [g])
    if a.shape == b.shape:
        return _record("add", [a, b], a.data + b.data, lambda g: [g, g])
    if _is_scalar_tensor(b):
        return _record("add", [a, b], a.data + b.data,
                       lambda g: [g, _sum_to_scalar_shape(g, b.shape)])
    if _is_scalar_tensor(a):
        return _record("add", [a, b], a.data + b.data,
                       lambda g: [_sum_to_scalar_shape(g, a.shape), g])
    raise ShapeError(f"add: operand shapes {a.shape} and {b.shape} differ "
                     "(only scalar-tensor broadcasting is supported)")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _record("sub", [a], a.data - c, lambda g: [g])
    if a.shape == b.shape:
        return _record("sub", [a, b], a.data - b.data, lambda g: [g, -g])
    if _is_scalar_tensor(b):
        return _record("sub", [a, b], a.data - b.data,
                       lambda g: [g, _sum_to_scalar_shape(-g, b.shape)])
    if _is_scalar_tensor(a):
        return _record("sub", [a, b], a.data - b.data,
                       lambda g: [_sum_to_scalar_shape(g, a.shape), -g])
    raise ShapeError(f"sub: operand shapes {a.shape} and {b.shape} differ "
                     "(only scalar-tensor broadcasting is supported)")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _record("mul", [a], a.data * c, lambda g: [g * c])
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _record("mul", [a, b], ad * bd, lambda g: [g * bd, g * ad])
    if _is_scalar_tensor(b):
        ad, bd = a.data, b.data
        return _record("mul", [a, b], ad * bd,
                       lambda g: [g * bd, _sum_to_scalar_shape(g * ad, b.shape)])
    if _is_scalar_tensor(a):
        ad, bd = a.data, b.data
        return _record("mul", [a, b], ad * bd,
                       lambda g: [_sum_to_scalar_shape(g * bd, a.shape), g * ad])
    raise ShapeError(f"mul: operand shapes {a.shape} and {b.shape} differ "
                     "(only scalar-tensor broadcasting is supported)")


# -- elementwise unary ops ----------------------------------------------------


def neg(a: Tensor) -> Tensor:
    return _record("neg", [a], -a.data, lambda g: [-g])


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # subgradient 0 at exactly 0
    return _record("abs", [a], np.abs(a.data), lambda g: [g * sign])


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record("tanh", [a], t, lambda g: [g * (1.0 - t * t)])


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _record("exp", [a], e, lambda g: [g * e])


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record("log", [a], np.log(ad), lambda g: [g / ad])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", [a], np.where(mask, a.data, 0), lambda g: [g * mask])


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) via logaddexp, gradient is the logistic sigmoid
    out = np.logaddexp(a.data.dtype.type(0), a.data)
    sig = np.exp(-np.logaddexp(a.data.dtype.type(0), -a.data))
    return _record("softplus", [a], out.astype(a.data.dtype, copy=False),
                   lambda g: [g * sig])


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", [a, b], ad @ bd,
                   lambda g: [g @ bd.T, ad.T @ g])


def diag(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError(f"diag: expects a vector, got shape {v.shape}")
    return _record("diag", [v], np.diag(v.data),
                   lambda g: [np.diagonal(g).copy()])


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 'same' zero-padded convolution.

    x: (N, H, W, Cin), w: (kh, kw, Cin, Cout) with odd kh, kw.
    Implemented as a sum of shifted GEMMs; the backward rules mirror the
    same shift loop, so input and weight gradients stay auditable.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x must be (N,H,W,Cin) and w (kh,kw,Cin,Cout), "
                         f"got {x.shape} and {w.shape}")
    n, h, wth, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd for 'same' padding, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xd, wd = x.data, w.data
    acc_dtype = np.result_type(xd, wd)
    xp = np.zeros((n, h + 2 * ph, wth + 2 * pw, cin), dtype=xd.dtype)
    xp[:, ph:ph + h, pw:pw + wth, :] = xd

    out = np.zeros((n, h, wth, cout), dtype=acc_dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + h, j:j + wth, :].reshape(-1, cin)
            out += (patch @ wd[i, j]).reshape(n, h, wth, cout)

    def backward(g: Array):
        gp = np.zeros((n, h + 2 * ph, wth + 2 * pw, cin), dtype=g.dtype)
        dw = np.zeros_like(wd, dtype=g.dtype)
        gflat = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + h, j:j + wth, :].reshape(-1, cin)
                dw[i, j] = patch.T @ gflat
                gp[:, i:i + h, j:j + wth, :] += (gflat @ wd[i, j].T).reshape(n, h, wth, cin)
        dx = gp[:, ph:ph + h, pw:pw + wth, :]
        return [dx, dw]

    return _record("conv2d", [x, w], out, backward)


# -- reductions ----------------------------------------------------------------


def _normalize_axis(axis, ndim: int) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: Array, shape: tuple, axis: Optional[tuple]) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    keep = list(g.shape)
    for a in sorted(axis):
        keep.insert(a, 1)
    return np.broadcast_to(g.reshape(keep), shape)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    ax = _normalize_axis(axis, a.data.ndim)
    shape = a.shape
    out = np.sum(a.data, axis=ax)
    return _record("sum", [a], np.asarray(out, dtype=a.data.dtype),
                   lambda g: [_expand_reduced(g, shape, ax).astype(a.data.dtype, copy=False)])


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    ax = _normalize_axis(axis, a.data.ndim)
    shape = a.shape
    count = a.data.size if ax is None else int(np.prod([shape[i] for i in ax]))
    out = np.mean(a.data, axis=ax)
    scale = 1.0 / count
    return _record("mean", [a], np.asarray(out, dtype=a.data.dtype),
                   lambda g: [(_expand_reduced(g, shape, ax) * scale).astype(a.data.dtype, copy=False)])


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}")
    return _record("reshape", [a], a.data.reshape(shape),
                   lambda g: [g.reshape(orig)])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", [a], np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: [np.ascontiguousarray(g.transpose(inv))])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}] exceeds axis {axis} "
                         f"of shape {a.shape}")
    sl = tuple(slice(None) if i != axis else slice(start, start + length)
               for i in range(a.data.ndim))
    shape = a.shape

    def backward(g: Array):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return [full]

    return _record("narrow", [a], np.ascontiguousarray(a.data[sl]), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no operands")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors:
        if t.data.ndim != ndim:
            raise ShapeError("concat: operand ranks differ")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array):
        pieces = []
        for k in range(len(sizes)):
            sl = tuple(slice(None) if i != axis else slice(offsets[k], offsets[k + 1])
                       for i in range(ndim))
            pieces.append(np.ascontiguousarray(g[sl]))
        return pieces

    return _record("concat", list(tensors), out, backward)


# -- per-channel affine (last-axis broadcast with explicit backward) -------------


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x[..., c] by s[c]; gradient for s sums over leading axes."""
    if s.data.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise ShapeError(f"scale_channels: x {x.shape} vs scale {s.shape}")
    xd, sd = x.data, s.data
    lead = tuple(range(x.data.ndim - 1))
    return _record("scale_channels", [x, s], xd * sd,
                   lambda g: [g * sd, np.sum(g * xd, axis=lead)])


def shift_channels(x: Tensor, b: Tensor) -> Tensor:
    """Add b[c] to x[..., c]; gradient for b sums over leading axes."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"shift_channels: x {x.shape} vs shift {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _record("shift_channels", [x, b], x.data + b.data,
                   lambda g: [g, np.sum(g, axis=lead)])


# -- Adam -----------------------------------------------------------------------


class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}


class Adam:
    """Standard Adam over named parameter tensors (reads .grad, writes .data)."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ShapeError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.state = AdamState(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        st = self.state
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {p.data.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"adam: non-finite gradient for parameter {name!r}")
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (st.lr * m_hat / (np.sqrt(v_hat) + st.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm
