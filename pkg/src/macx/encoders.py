"""Bidirectional LSTM encoders producing knowledge bases, contextual words and
question/answer vectors.

Each direction has hidden width ``d // 2`` so a row of the bidirectional
output is exactly ``d`` wide. Gate blocks are laid out ``[input | forget |
cell | output]`` along the last axis of the fused weight matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MODALITY_TAGS = ("question", "answer", "V", "T", "Ac")


@dataclass
class FeatureSequence:
    """One stream of per-timestep feature vectors with a validity mask."""

    modality: str
    features: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"empty sequence for modality {self.modality!r}")
        if self.mask is None:
            self.mask = np.ones(self.features.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.features.shape[0],):
            raise ValueError("mask length does not match sequence length")
        if not self.mask.any():
            raise ValueError(f"sequence for modality {self.modality!r} has no valid step")

    @property
    def length(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    @property
    def valid_length(self):
        return int(self.mask.sum())


@dataclass
class KnowledgeBase:
    """Encoded sequence ``K`` of shape ``(B, L, d)`` plus its mask."""

    keys: Tensor
    mask: np.ndarray
    modality: str = ""


@dataclass
class QueryEncoding:
    words: Tensor          # contextual words O, (B, S, d)
    mask: np.ndarray       # (B, S)
    vector: Tensor         # q, (B, d)


@dataclass
class AnswerEncoding:
    vector: Tensor         # (B, d)
    correct: np.ndarray = field(default=None)


@dataclass
class LstmParams:
    fwd_wx: Tensor
    fwd_wh: Tensor
    fwd_b: Tensor
    bwd_wx: Tensor
    bwd_wh: Tensor
    bwd_b: Tensor

    @property
    def hidden(self):
        return self.fwd_wh.shape[0]

    @property
    def input_width(self):
        return self.fwd_wx.shape[0]

    @classmethod
    def from_store(cls, store, prefix):
        return cls(*(store[f"{prefix}.{d}.{w}"] for d in ("fwd", "bwd") for w in ("Wx", "Wh", "b")))

    def swapped(self):
        return LstmParams(self.bwd_wx, self.bwd_wh, self.bwd_b, self.fwd_wx, self.fwd_wh, self.fwd_b)


def lstm_shapes(prefix, d_in, d):
    if d % 2:
        raise ValueError(f"model width d must be even, got {d}")
    h = d // 2
    shapes = {}
    for direction in ("fwd", "bwd"):
        shapes[f"{prefix}.{direction}.Wx"] = (d_in, 4 * h)
        shapes[f"{prefix}.{direction}.Wh"] = (h, 4 * h)
        shapes[f"{prefix}.{direction}.b"] = (4 * h,)
    return shapes


def lstm_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM recurrence step built from tape primitives.

    Works on a single vector or on a batch (leading axes are carried).
    """
    h = wh.shape[0]
    if x.shape[-1] != wx.shape[0] or h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise ValueError(f"lstm_step width mismatch: x {x.shape}, h {h_prev.shape}, "
                         f"c {c_prev.shape}, Wx {wx.shape}, Wh {wh.shape}")
    z = nx.linear(x, wx, b) + nx.matmul(h_prev, wh)
    i = nx.sigmoid(z[..., :h])
    f = nx.sigmoid(z[..., h:2 * h])
    g = nx.tanh(z[..., 2 * h:3 * h])
    o = nx.sigmoid(z[..., 3 * h:])
    c = f * c_prev + i * g
    return o * nx.tanh(c), c


def lstm_scan(xp, mask, wh, reverse=False):
    """Run one LSTM direction over precomputed input projections.

    ``xp`` is ``(B, L, 4h)`` (``x_t @ Wx + b``), ``mask`` is ``(B, L)``.
    Masked steps leave the carried state untouched and emit a zero row, so
    right-padding never changes the valid outputs. Returns ``(B, L, h)``.
    """
    return lstm_scan_many([xp], [mask], [wh], [reverse])[0]


def lstm_scan_many(xps, masks, whs, reverse):
    """Run several independent LSTM directions in lockstep.

    One primitive with hand-written backpropagation through time. Groups may
    differ in batch size and length: larger groups are cut into row chunks
    of the smallest group's size, and reversed groups are time-flipped into
    a common frame, where their padding becomes leading masked steps.
    """
    h = whs[0].shape[0]
    dtype = xps[0].data.dtype
    dims = [x.shape[:2] for x in xps]
    Bm = min(b for b, _ in dims)
    Lm = max(n for _, n in dims)
    chunks = [(k, lo, min(lo + Bm, b)) for k, (b, _) in enumerate(dims) for lo in range(0, b, Bm)]
    G = len(chunks)
    Z = np.zeros((G, Bm, Lm, 4 * h), dtype=dtype)
    M = np.zeros((G, Bm, Lm, 1), dtype=dtype)
    for c, (k, lo, hi) in enumerate(chunks):
        n = dims[k][1]
        Z[c, :hi - lo, :n] = xps[k].data[lo:hi]
        M[c, :hi - lo, :n, 0] = masks[k][lo:hi]
        if reverse[k]:
            Z[c] = Z[c, :, ::-1]
            M[c] = M[c, :, ::-1]
    W = np.stack([whs[k].data for k, _, _ in chunks])
    WT = W.transpose(0, 2, 1)
    H = np.zeros((G, Bm, Lm, h), dtype=dtype)      # state entering each step
    C = np.zeros((G, Bm, Lm, h), dtype=dtype)
    A = np.empty((G, Bm, Lm, 4 * h), dtype=dtype)  # gate activations [i|f|g|o]
    TC = np.empty((G, Bm, Lm, h), dtype=dtype)
    out = np.empty((G, Bm, Lm, h), dtype=dtype)
    hs = np.zeros((G, Bm, h), dtype=dtype)
    cs = np.zeros((G, Bm, h), dtype=dtype)
    for t in range(Lm):
        H[:, :, t] = hs
        C[:, :, t] = cs
        z = Z[:, :, t] + hs @ W
        a = A[:, :, t]
        np.tanh(z, out=a)
        a[..., :2 * h] = 0.5 + 0.5 * np.tanh(0.5 * z[..., :2 * h])
        a[..., 3 * h:] = 0.5 + 0.5 * np.tanh(0.5 * z[..., 3 * h:])
        i, f, g, o = a[..., :h], a[..., h:2 * h], a[..., 2 * h:3 * h], a[..., 3 * h:]
        c_new = f * cs + i * g
        tc = np.tanh(c_new)
        TC[:, :, t] = tc
        h_new = o * tc
        mt = M[:, :, t]
        out[:, :, t] = mt * h_new
        keep = 1.0 - mt
        cs = mt * c_new + keep * cs
        hs = mt * h_new + keep * hs

    def unpack(arr, k):
        b, n = dims[k]
        full = np.empty((b, n) + arr.shape[3:], dtype=dtype)
        for c, (kc, lo, hi) in enumerate(chunks):
            if kc == k:
                part = arr[c, :, ::-1] if reverse[k] else arr[c]
                full[lo:hi] = part[:hi - lo, :n]
        return full

    results = [unpack(out, k) for k in range(len(xps))]

    def bwd(gouts):
        GO = np.zeros((G, Bm, Lm, h), dtype=dtype)
        for c, (k, lo, hi) in enumerate(chunks):
            GO[c, :hi - lo, :dims[k][1]] = gouts[k][lo:hi]
            if reverse[k]:
                GO[c] = GO[c, :, ::-1]
        dZ = np.empty_like(Z)
        dh = np.zeros((G, Bm, h), dtype=dtype)
        dc = np.zeros((G, Bm, h), dtype=dtype)
        for t in range(Lm - 1, -1, -1):
            a, tc, c_prev, mt = A[:, :, t], TC[:, :, t], C[:, :, t], M[:, :, t]
            i, f, g, o = a[..., :h], a[..., h:2 * h], a[..., 2 * h:3 * h], a[..., 3 * h:]
            keep = 1.0 - mt
            dh_new = mt * (dh + GO[:, :, t])
            dc_new = mt * dc + dh_new * o * (1.0 - tc * tc)
            dz = dZ[:, :, t]
            dz[..., :h] = dc_new * g * i * (1.0 - i)
            dz[..., h:2 * h] = dc_new * c_prev * f * (1.0 - f)
            dz[..., 2 * h:3 * h] = dc_new * i * (1.0 - g * g)
            dz[..., 3 * h:] = dh_new * tc * o * (1.0 - o)
            dh = dz @ WT + keep * dh
            dc = dc_new * f + keep * dc
        dW_chunks = H.reshape(G, Bm * Lm, h).transpose(0, 2, 1) @ dZ.reshape(G, Bm * Lm, 4 * h)
        dW = [np.zeros_like(w.data) for w in whs]
        for c, (k, _, _) in enumerate(chunks):
            dW[k] += dW_chunks[c]
        return [unpack(dZ, k) for k in range(len(xps))] + dW

    return nx.custom_op_multi(results, (*xps, *whs), bwd)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def encode_many(items):
    """Bidirectionally encode several ``(x, mask, LstmParams)`` streams at once.

    Returns one ``(rows, final)`` per item: rows ``(B, L, d)`` with padded
    rows zero, and final ``(B, d)`` = the last valid forward state joined
    with the backward state at the first valid step.
    """
    xps, masks, whs, rev, meta = [], [], [], [], []
    for x, mask, params in items:
        mask = np.asarray(mask, dtype=bool)
        x = _as_tensor(x, params.fwd_wx.dtype)
        if x.ndim != 3 or x.shape[:2] != mask.shape:
            raise ValueError(f"features {x.shape} and mask {mask.shape} disagree")
        if x.shape[-1] != params.input_width:
            raise ValueError(f"input width {x.shape[-1]} does not match encoder width {params.input_width}")
        if x.shape[1] < 1:
            raise ValueError("empty sequence")
        if not mask.any(axis=1).all():
            raise ValueError("sequence with no valid step")
        xps += [nx.linear(x, params.fwd_wx, params.fwd_b), nx.linear(x, params.bwd_wx, params.bwd_b)]
        masks += [mask, mask]
        whs += [params.fwd_wh, params.bwd_wh]
        rev += [False, True]
        meta.append(mask)
    outs = lstm_scan_many(xps, masks, whs, rev)
    results = []
    for k, mask in enumerate(meta):
        fwd, bwd = outs[2 * k], outs[2 * k + 1]
        B, L = mask.shape
        batch = np.arange(B)
        last = L - 1 - np.argmax(mask[:, ::-1], axis=1)
        first = np.argmax(mask, axis=1)
        rows = nx.concat([fwd, bwd], axis=-1)
        final = nx.concat([fwd[batch, last], bwd[batch, first]], axis=-1)
        results.append((rows, final))
    return results


def encode_sequences(x, mask, params):
    """Batched bidirectional encoding of one stream; see :func:`encode_many`."""
    return encode_many([(x, mask, params)])[0]


def _single(seq):
    return seq.features[None], seq.mask[None]


def encode_bidirectional(seq, params):
    """Encode one modality stream into its knowledge base."""
    x, mask = _single(seq)
    rows, _ = encode_sequences(x, mask, params)
    return KnowledgeBase(rows, mask, seq.modality)


def encode_question(seq, params):
    x, mask = _single(seq)
    rows, final = encode_sequences(x, mask, params)
    return QueryEncoding(rows, mask, final)


def encode_answer(seq, params, correct=None):
    x, mask = _single(seq)
    _, final = encode_sequences(x, mask, params)
    return AnswerEncoding(final, None if correct is None else np.asarray([correct]))
