"""Mini-batch training on answer pairs and batched evaluation."""

from __future__ import annotations

import logging
import time

import numpy as np

from .model import MacX, composite_loss, init_params, metrics_from_scores
from .numerics import AdamState, Tape, adam_step, backward

log = logging.getLogger(__name__)


def evaluate(model, data, batch_size=32):
    """Score every candidate of every question; returns metrics plus the scores."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    chunks = []
    for start in range(0, len(data), batch_size):
        rows = np.arange(start, min(start + batch_size, len(data)))
        scores, _ = model.score_questions(data, rows)
        chunks.append(scores)
    scores = np.concatenate(chunks)
    report = metrics_from_scores(scores, data.correct)
    report["scores"] = scores
    return report


def train(config, train_set, val_set, seed, batch_size=32, lr=1e-3, epochs=10, eval_batch_size=64):
    """Train on every (correct, incorrect) pair of ``train_set`` each epoch.

    Returns ``(model, history)``; the model holds the parameters of the epoch
    with the best validation A2 (earliest on ties, last epoch without a
    validation set). Initialization, pair order and updates all derive from
    ``seed``.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if not config.input_widths:
        config = config.with_widths(train_set.widths)
    model = MacX(config, init_params(config, seed))
    params = model.params
    opt = AdamState.for_params(params, lr=lr)
    pairs = train_set.a2_pairs()
    order_rng = np.random.default_rng([seed, 1])
    history = []
    best_a2, best_flat = -1.0, params.flat.copy()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(pairs))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(pairs), batch_size)):
            batch = pairs[order[start:start + batch_size]]
            params.zero_grad()
            with Tape() as tape:
                y1, y2 = model.pair_scores(train_set, batch)
                loss = composite_loss(y1, y2)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss, tape)
            adam_step(params, opt)
            total += value * len(batch)
            seen += len(batch)
        row = {"epoch": epoch, "loss": total / seen}
        if val_set is not None and len(val_set):
            rep = evaluate(model, val_set, eval_batch_size)
            row.update(val_a2=rep["a2"], val_a4=rep["a4"])
            if rep["a2"] > best_a2:
                best_a2, best_flat = rep["a2"], params.flat.copy()
        else:
            best_flat = params.flat.copy()
        history.append(row)
        log.info("epoch %d loss %.4f val_a2 %s (%.1fs)", epoch, row["loss"], row.get("val_a2"),
                 time.perf_counter() - t0)
    params.flat[...] = best_flat
    return model, history
