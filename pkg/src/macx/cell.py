"""The MAC-X reasoning cell.

One step attends over the question words to form a control vector, reads
each modality's knowledge base in parallel with that control and the shared
previous memory, fuses the per-modality reads with one affine map and
writes the result into memory.

Parameter naming under a prefix ``P``::

    P.c0, P.m0                      learned initial control / memory
    P.ctrl.q.{i}.W/b                per-step question transform (or .q.0 if shared)
    P.ctrl.cq.W/b                   [c_prev, q_i] -> d, ELU
    P.ctrl.c.w                      d -> 1 logit
    P.read.{j}.m.W/b, .k.W/b        memory / knowledge projections
    P.read.{j}.mk.W/b               [f_m(m) * f_k(k), k] -> d, ELU
    P.read.{j}.r.w                  d -> 1 logit
    P.fuse.W/b                      [r_V, r_T, r_Ac] -> d (absent when unfused)
    P.write.W/b                     [m_prev, r] -> d

Logit layers carry no bias: a constant shift is invisible to softmax.
Weights are stored input-major (``x @ W``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MODALITIES = ("V", "T", "Ac")


@dataclass
class CellState:
    control: Tensor
    memory: Tensor
    step: int = 0


@dataclass
class ReadParams:
    m_w: Tensor
    m_b: Tensor
    k_w: Tensor
    k_b: Tensor
    mk_w: Tensor
    mk_b: Tensor
    r_w: Tensor


@dataclass
class ReadOutputs:
    reads: dict
    attention: dict


class CellParams:
    """View of the cell's tensors inside a :class:`~macx.numerics.ParamStore`."""

    def __init__(self, store, prefix, modalities, steps, share_fq=False, fused=True):
        self.prefix = prefix
        self.modalities = tuple(modalities)
        self.steps = steps
        self.share_fq = share_fq
        g = lambda name: store[f"{prefix}.{name}"]
        self.c0, self.m0 = g("c0"), g("m0")
        nq = 1 if share_fq else steps
        self.fq = [(g(f"ctrl.q.{i}.W"), g(f"ctrl.q.{i}.b")) for i in range(nq)]
        self.cq_w, self.cq_b = g("ctrl.cq.W"), g("ctrl.cq.b")
        self.c_w = g("ctrl.c.w")
        self.read = {
            j: ReadParams(*(g(f"read.{j}.{n}") for n in ("m.W", "m.b", "k.W", "k.b", "mk.W", "mk.b", "r.w")))
            for j in self.modalities
        }
        self.fuse_w = g("fuse.W") if fused else None
        self.fuse_b = g("fuse.b") if fused else None
        self.write_w, self.write_b = g("write.W"), g("write.b")

    @property
    def width(self):
        return self.c0.shape[0]

    @staticmethod
    def shapes(prefix, d, modalities, steps, share_fq=False, fused=True):
        s = {f"{prefix}.c0": (d,), f"{prefix}.m0": (d,)}
        for i in range(1 if share_fq else steps):
            s[f"{prefix}.ctrl.q.{i}.W"] = (d, d)
            s[f"{prefix}.ctrl.q.{i}.b"] = (d,)
        s[f"{prefix}.ctrl.cq.W"] = (2 * d, d)
        s[f"{prefix}.ctrl.cq.b"] = (d,)
        s[f"{prefix}.ctrl.c.w"] = (d, 1)
        for j in modalities:
            r = f"{prefix}.read.{j}"
            s.update({f"{r}.m.W": (d, d), f"{r}.m.b": (d,), f"{r}.k.W": (d, d), f"{r}.k.b": (d,),
                      f"{r}.mk.W": (2 * d, d), f"{r}.mk.b": (d,), f"{r}.r.w": (d, 1)})
        if fused:
            s[f"{prefix}.fuse.W"] = (len(modalities) * d, d)
            s[f"{prefix}.fuse.b"] = (d,)
        s[f"{prefix}.write.W"] = (2 * d, d)
        s[f"{prefix}.write.b"] = (d,)
        return s


def _check_width(x, d, what):
    if x.shape[-1] != d:
        raise ValueError(f"{what} has width {x.shape[-1]}, expected {d}")


def initial_state(params, batch):
    d = params.width
    return CellState(nx.expand(params.c0, (batch, d)), nx.expand(params.m0, (batch, d)), 0)


def control_unit(c_prev, q, words, words_mask, step, params):
    """Attend over contextual question words; returns ``(c_i, attention)``.

    ``step`` is 1-based. The new control is the attention-weighted sum of
    the word rows themselves.
    """
    if not 1 <= step <= params.steps:
        raise ValueError(f"reasoning step {step} outside 1..{params.steps}")
    d = params.width
    _check_width(q, d, "question vector")
    _check_width(words, d, "contextual words")
    fq_w, fq_b = params.fq[0 if params.share_fq else step - 1]
    q_i = nx.linear(q, fq_w, fq_b)
    cq = nx.elu(nx.linear(nx.concat([c_prev, q_i], axis=-1), params.cq_w, params.cq_b))
    B, S = words_mask.shape
    inter = nx.reshape(cq, (B, 1, d)) * words
    logits = nx.reshape(nx.linear(inter, params.c_w), (B, S))
    attn = nx.masked_softmax(logits, words_mask)
    return nx.attend(attn, words), attn


@dataclass
class ProjectedKnowledge:
    """Step-independent parts of a read: ``f_k(K)`` and the ``K`` half of ``f_mk``."""

    keys: Tensor      # f_k(K), (B, L, d)
    direct: Tensor    # K @ W_mk[d:] + b_mk, (B, L, d)
    inter_w: Tensor   # W_mk[:d], applied to the interaction term


def project_knowledge(kb, rp):
    """Precompute what a read needs from ``kb`` independently of the step."""
    d = rp.m_w.shape[0]
    return ProjectedKnowledge(nx.linear(kb.keys, rp.k_w, rp.k_b),
                              nx.linear(kb.keys, rp.mk_w[d:], rp.mk_b),
                              rp.mk_w[:d])


def read_unit(m_prev, kb, c, rp, projected=None):
    """Temporal read over one knowledge base; returns ``(r, attention)``.

    Attention weights are computed from the interaction features but applied
    to the original knowledge rows. ``W_mk [f_m(m) * f_k(k), k]`` is evaluated
    as two products so the ``k`` half can be reused across steps.
    """
    d = rp.m_w.shape[0]
    _check_width(m_prev, d, "memory")
    _check_width(kb.keys, d, "knowledge base")
    _check_width(c, d, "control")
    B, L = kb.mask.shape
    pk = project_knowledge(kb, rp) if projected is None else projected
    fm = nx.linear(m_prev, rp.m_w, rp.m_b)
    prod = nx.reshape(fm, (B, 1, d)) * pk.keys
    info = nx.elu(nx.matmul(prod, pk.inter_w) + pk.direct)
    logits = nx.reshape(nx.linear(nx.reshape(c, (B, 1, d)) * info, rp.r_w), (B, L))
    attn = nx.masked_softmax(logits, kb.mask)
    return nx.attend(attn, kb.keys), attn


def fuse(reads, params):
    """Affine map of the concatenated per-modality reads (no nonlinearity)."""
    d = params.width
    for r in reads:
        _check_width(r, d, "read vector")
    if not reads or len(reads) * d != params.fuse_w.shape[0]:
        raise ValueError(f"fusion expects {params.fuse_w.shape[0] // d} reads, got {len(reads)}")
    return nx.linear(nx.concat(reads, axis=-1), params.fuse_w, params.fuse_b)


def write_unit(m_prev, r, params):
    d = params.width
    _check_width(m_prev, d, "memory")
    _check_width(r, d, "fused read")
    return nx.linear(nx.concat([m_prev, r], axis=-1), params.write_w, params.write_b)


def cell_step(state, q, words, words_mask, kbs, params, projected=None):
    """Advance one reasoning step.

    ``kbs`` maps modality tag to :class:`~macx.encoders.KnowledgeBase`; all
    reads see the same control and the same previous memory. Returns the
    new state, the per-modality reads with their attention maps, and the
    control attention.
    """
    if state.step >= params.steps:
        raise ValueError(f"cell already ran {state.step} of {params.steps} steps")
    step = state.step + 1
    c, c_attn = control_unit(state.control, q, words, words_mask, step, params)
    reads, attns = {}, {}
    for j in params.modalities:
        pj = None if projected is None else projected[j]
        reads[j], attns[j] = read_unit(state.memory, kbs[j], c, params.read[j], pj)
    ordered = [reads[j] for j in params.modalities]
    if params.fuse_w is None:
        if len(ordered) != 1:
            raise ValueError("an unfused cell takes exactly one modality")
        r = ordered[0]
    else:
        r = fuse(ordered, params)
    m = write_unit(state.memory, r, params)
    return CellState(c, m, step), ReadOutputs(reads, attns), c_attn


def rollout(q, words, words_mask, kbs, params):
    """Run all steps; returns final memory and per-step attention traces.

    Each trace entry is ``{"control": (B, S), "V": (B, L_V), ...}`` as arrays.
    """
    B = words_mask.shape[0]
    state = initial_state(params, B)
    projected = {j: project_knowledge(kbs[j], params.read[j]) for j in params.modalities}
    trace = []
    for _ in range(params.steps):
        state, outs, c_attn = cell_step(state, q, words, words_mask, kbs, params, projected)
        entry = {"control": c_attn.data}
        entry.update({j: a.data for j, a in outs.attention.items()})
        trace.append(entry)
    return state.memory, trace


def glorot(rng, shape, dtype):
    fan_in, fan_out = shape[0], shape[-1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
