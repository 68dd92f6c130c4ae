"""Finite-difference verification of the analytic gradients of the full model.

The model under test runs in 64-bit. Central differences (``h = 1e-5``) are
evaluated on an identical copy in the widest native float, so their rounding
noise sits far below the 1e-8 floor of the relative error; in plain 64-bit
that noise is about 1e-10 absolute, larger than some legitimately tiny
gradient entries (for example biases whose effect on a softmax is a pure
shift).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cell import MODALITIES
from .model import FUSION_MODES, HEAD_MODES, MacX, ModelConfig, composite_loss, init_params
from .numerics import Tape, backward
from .synthdata import SyntheticSpec, generate_dataset

STEP = 1e-5
TOLERANCE = 1e-4
ERROR_FLOOR = 1e-8
COMBOS = tuple((head, fusion) for head in HEAD_MODES for fusion in FUSION_MODES)
_WEIGHTS = ("W", "Wx", "Wh", "w", "W1", "W2")


@dataclass
class GradcheckResult:
    head: str
    fusion: str
    max_rel_error: float
    worst_param: str
    entries: int
    seconds: float
    per_param: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def relative_error(a, b, floor=ERROR_FLOOR):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tiny_problem(seed=0):
    """Three instances with sequences of at most 6 steps and questions of at most 5 words."""
    lengths = {j: (2, 6) for j in MODALITIES}
    spec = SyntheticSpec(task="xor3", instance_count=3, seed=seed, noise=1.0,
                         widths={j: 3 for j in MODALITIES}, lengths=lengths,
                         question_width=3, question_length=(2, 5),
                         answer_width=3, answer_length=(1, 3))
    data = generate_dataset(spec)
    return data, data.a2_pairs()[::6]


def test_point(config, seed=0):
    """Parameters away from the near-uniform-attention regime of a fresh init.

    Weights are scaled up and every bias and initial state is jittered, so
    each path of the graph carries a gradient far above finite-difference
    noise.
    """
    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 2])
    for name, t in params.items():
        if name.rsplit(".", 1)[-1] in _WEIGHTS:
            t.data[...] *= 1.5
        else:
            t.data[...] += rng.normal(0.0, 0.3, t.shape)
    return params


def _stage(name):
    if name.startswith("enc."):
        return "encode"
    if name.startswith(("cell.", "late_fuse.")):
        return "reason"
    return "head"


def _staged_loss(model, inputs, stage, cache):
    question, streams, answers, rows = inputs
    if stage == "encode":
        enc = model.encode(question, streams, answers)
    else:
        enc = cache["enc"]
    ctx = cache["ctx"] if stage == "head" else model.reason(enc)[0]
    y = model.head(ctx, enc.answers, rows)
    half = len(rows) // 2
    return composite_loss(y[:half], y[half:]).data


def check_model(head, fusion, seed=0, h=STEP):
    """Compare every parameter entry's analytic gradient with central differences."""
    t0 = time.perf_counter()
    data, pairs = tiny_problem(seed)
    config = ModelConfig(p=2, d=8, head=head, fusion=fusion, precision="float64").with_widths(data.widths)
    model = MacX(config, test_point(config, seed))
    inputs = model.pair_inputs(data, pairs)
    model.params.zero_grad()
    with Tape() as tape:
        y, _ = model.forward_batch(*inputs)
        half = len(pairs)
        loss = composite_loss(y[:half], y[half:])
    backward(loss, tape)
    analytic = model.params.flat_grad.copy()

    ref_config = replace(config, precision="extended")
    ref = MacX(ref_config, init_params(ref_config, seed))
    ref.params.flat[...] = model.params.flat
    ref_inputs = ref.pair_inputs(data, pairs)
    enc = ref.encode(*ref_inputs[:3])
    cache = {"enc": enc, "ctx": ref.reason(enc)[0]}
    flat = ref.params.flat
    numeric = np.empty_like(analytic)
    for name in ref.params:
        stage = _stage(name)
        sl = ref.params.slice_of(name)
        for k in range(sl.start, sl.stop):
            x = flat[k]
            flat[k] = x + h
            up = _staged_loss(ref, ref_inputs, stage, cache)
            flat[k] = x - h
            down = _staged_loss(ref, ref_inputs, stage, cache)
            flat[k] = x
            numeric[k] = (up - down) / (2 * h)
    rel = relative_error(analytic, numeric)
    per_param = {name: float(rel[model.params.slice_of(name)].max()) for name in model.params}
    worst = max(per_param, key=per_param.get)
    return GradcheckResult(head, fusion, per_param[worst], worst, rel.size, time.perf_counter() - t0, per_param)


def run_gradcheck(seed=0):
    return [check_model(head, fusion, seed) for head, fusion in COMBOS]
