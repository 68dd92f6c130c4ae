"""Dense tensors with define-by-run reverse-mode differentiation, plus Adam.

Every differentiable computation in the package goes through the primitives
here. A :class:`Tape` records primitive applications while it is active;
:func:`backward` replays the recording in reverse exactly once.

Arrays carry a leading batch axis almost everywhere; "vectors" in the model
are ``(B, d)`` and sequences ``(B, L, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_FILL = -1e9

_tapes: list["Tape"] = []


class Tensor:
    """An ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_derived")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._derived = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; primitives applied inside the ``with`` block
    to tensors that require grad are appended in execution order, which is
    a topological order by construction.
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def custom_op(data, inputs, backward):
    """Wrap ``data`` as the output of a primitive over ``inputs``.

    ``backward(g)`` must return one gradient (or None) per input, each shaped
    like that input. Recording happens only when a tape is active and at
    least one input requires grad.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._derived = True
    out.requires_grad = False
    if _tapes:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                _tapes[-1].records.append((out, inputs, backward))
                break
    return out


def custom_op_multi(datas, inputs, backward):
    """Like :func:`custom_op` for primitives with several outputs.

    ``backward`` receives one gradient per output (zeros for outputs that
    did not reach the loss).
    """
    outs = tuple(custom_op(d, (), None) for d in datas)
    if _tapes and any(t.requires_grad for t in inputs):
        for o in outs:
            o.requires_grad = True
        _tapes[-1].records.append((outs, inputs, backward))
    return outs


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward; run forward again")
    tape.consumed = True
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        if type(out) is tuple:
            gs = [pending.pop(id(o), None) for o in out]
            if all(g is None for g in gs):
                continue
            g = [np.zeros_like(o.data) if gi is None else gi for o, gi in zip(out, gs)]
        else:
            g = pending.pop(id(out), None)
            if g is None:
                continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._derived:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype)
            else:
                t.grad += gi
    tape.records = []


def check_finite(t, what):
    data = t.data if isinstance(t, Tensor) else t
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values in {what}")


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=dtype)
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._derived = False
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.data.shape, b.data.shape
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.data.shape, b.data.shape
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x):
    xd = x.data
    return custom_op(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def tanh(x):
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def elu(x):
    xd = x.data
    e = np.exp(np.minimum(xd, 0.0))
    y = np.maximum(xd, 0.0) + (e - 1.0)
    return custom_op(y, (x,), lambda g: (g * e,))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None):
    shape = x.data.shape
    y = np.asarray(x.data.sum(axis=axis))

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(y, (x,), bwd)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- structure

def matmul(a, b):
    """Matrix product ``a @ b``.

    ``b`` may be 2-D with ``a`` of any rank >= 1 (the last axis of ``a``
    contracts), or both may be 3-D with a shared leading batch extent.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim not in (2, 3) or ad.shape[-1] != bd.shape[-2] or (
            bd.ndim == 3 and (ad.ndim != 3 or ad.shape[0] != bd.shape[0])):
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    y = ad @ bd
    if bd.ndim == 2:
        def bwd(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
            return ga, gb
    else:
        def bwd(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g
    return custom_op(y, (a, b), bwd)


def linear(x, w, b=None):
    """Affine map over the last axis: ``x @ w + b``."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear dimension mismatch: {xd.shape} @ {wd.shape}")
    y = xd @ wd
    if b is None:
        def bwd(g):
            return g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, wd.shape[1])
        return custom_op(y, (x, w), bwd)
    y += b.data

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[1])
        return g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2, g2.sum(axis=0)
    return custom_op(y, (x, w, b), bwd)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    arrays = [t.data for t in tensors]
    nd = arrays[0].ndim
    ax = axis % nd
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != nd or any(a.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat shape mismatch along axis {axis}: "
                             f"{[x.shape for x in arrays]}")
    cuts = np.cumsum([a.shape[ax] for a in arrays])[:-1]
    return custom_op(np.concatenate(arrays, axis=ax), tuple(tensors),
                     lambda g: np.split(g, cuts, axis=ax))


def reshape(x, shape):
    old = x.data.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def expand(x, shape):
    """Broadcast ``x`` to ``shape`` (numpy broadcasting rules)."""
    old = x.data.shape
    return custom_op(np.broadcast_to(x.data, shape).copy(), (x,),
                     lambda g: (_unbroadcast(g, old),))


def getitem(x, index):
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return custom_op(x.data[index], (x,), bwd)


def take(x, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate on the way back."""
    idx = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (full,)

    return custom_op(np.take(x.data, idx, axis=axis), (x,), bwd)


# ---------------------------------------------------------------- attention

def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("empty attention support")
    keep = mask.astype(logits.data.dtype)
    z = logits.data * keep + (1.0 - keep) * MASK_FILL
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z) * keep
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return custom_op(s, (logits,), bwd)


def attend(weights, values):
    """Weighted sum over time: ``(B, L) x (B, L, d) -> (B, d)``."""
    w, v = weights.data, values.data
    y = (w[:, None, :] @ v)[:, 0, :]

    def bwd(g):
        gw = (v @ g[:, :, None])[:, :, 0]
        gv = w[:, :, None] * g[:, None, :]
        return gw, gv

    return custom_op(y, (weights, values), bwd)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameter registry backed by one flat buffer.

    Each parameter's ``data`` and ``grad`` are views into ``flat`` and
    ``flat_grad`` so the optimizer updates everything in a few vector ops.
    Registration order is preserved and is the serialization order.
    """

    def __init__(self, shapes, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        sizes = [int(np.prod(s)) for s in shapes.values()]
        self.flat = np.zeros(int(np.sum(sizes)), dtype=self.dtype)
        self.flat_grad = np.zeros_like(self.flat)
        self.tensors = {}
        self._offsets = {}
        off = 0
        for (name, shape), n in zip(shapes.items(), sizes):
            t = Tensor.__new__(Tensor)
            t.data = self.flat[off:off + n].reshape(shape)
            t.grad = self.flat_grad[off:off + n].reshape(shape)
            t.name = name
            t.requires_grad = True
            t._derived = False
            self.tensors[name] = t
            self._offsets[name] = (off, off + n)
            off += n

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def numel(self):
        return self.flat.size

    def zero_grad(self):
        self.flat_grad[...] = 0.0

    def name_at(self, flat_index):
        for name, (lo, hi) in self._offsets.items():
            if lo <= flat_index < hi:
                return name
        raise IndexError(flat_index)

    def slice_of(self, name):
        lo, hi = self._offsets[name]
        return slice(lo, hi)

    def arrays(self):
        return {name: t.data for name, t in self.tensors.items()}

    def load(self, arrays):
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self.tensors.items():
            src = np.asarray(arrays[name])
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data[...] = src


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), **hyper)


def adam_step(params, state):
    """One bias-corrected Adam update of ``params`` from its accumulated grads."""
    g = params.flat_grad
    if state.m.shape != g.shape or state.v.shape != g.shape:
        raise ValueError("Adam moments are not congruent with the parameters")
    bad = ~np.isfinite(g)
    if bad.any():
        name = params.name_at(int(np.flatnonzero(bad)[0]))
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    params.flat -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype, copy=False)
