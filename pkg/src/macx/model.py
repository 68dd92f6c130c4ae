"""End-to-end MAC-X: encoders, recurrent reasoning, answer scoring and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .cell import MODALITIES, CellParams, glorot, rollout
from .data import QADataset
from .encoders import KnowledgeBase, LstmParams, encode_many, lstm_shapes

FUSION_MODES = ("mid", "late")
HEAD_MODES = ("affine", "two-layer")
PRECISIONS = {"float32": np.float32, "float64": np.float64,
              # widest native float; reference arithmetic for finite-difference checks
              "extended": np.longdouble}


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``modalities`` may be empty: that is the answers-only baseline, which
    scores each candidate from its own encoding alone.
    """

    p: int = 12
    d: int = 512
    modalities: tuple = MODALITIES
    fusion: str = "mid"
    head: str = "two-layer"
    precision: str = "float32"
    share_fq: bool = False
    input_widths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.modalities = tuple(j for j in MODALITIES if j in set(self.modalities))
        self.validate()

    def validate(self):
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.d < 2 or self.d % 2:
            raise ValueError(f"d must be a positive even number, got {self.d}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")

    @property
    def answers_only(self):
        return not self.modalities

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def with_widths(self, widths):
        return replace(self, input_widths=dict(widths))


def param_shapes(config):
    d, w = config.d, config.input_widths
    needed = ["answer"] if config.answers_only else ["question", "answer", *config.modalities]
    missing = [k for k in needed if k not in w]
    if missing:
        raise ValueError(f"input widths missing for {missing}")
    shapes = {}
    for stream in needed:
        shapes.update(lstm_shapes(f"enc.{stream}", w[stream], d))
    if not config.answers_only:
        if config.fusion == "mid":
            shapes.update(CellParams.shapes("cell", d, config.modalities, config.p, config.share_fq))
        else:
            for j in config.modalities:
                shapes.update(CellParams.shapes(f"cell.{j}", d, (j,), config.p, config.share_fq, fused=False))
            shapes["late_fuse.W"] = (len(config.modalities) * d, d)
            shapes["late_fuse.b"] = (d,)
    width = d if config.answers_only else 3 * d
    if config.head == "affine":
        shapes["head.W"] = (width, 1)
        shapes["head.b"] = (1,)
    else:
        shapes.update({"head.W1": (width, d), "head.b1": (d,), "head.W2": (d, 1), "head.b2": (1,)})
    return shapes


def init_params(config, seed):
    """Glorot-uniform weights, zero biases and initial states, forget bias 1."""
    store = nx.ParamStore(param_shapes(config), config.dtype)
    rng = np.random.default_rng(seed)
    h = config.d // 2
    for name, t in store.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("W", "Wx", "Wh", "w", "W1", "W2"):
            t.data[...] = glorot(rng, t.shape, config.dtype)
        elif name.startswith("enc.") and leaf == "b":
            t.data[h:2 * h] = 1.0
    return store


@dataclass
class Encoded:
    """Outputs of the fused encoder pass."""

    answers: object
    question: object = None
    words: object = None
    words_mask: np.ndarray = None
    kbs: dict = None


@dataclass
class Prediction:
    scores: np.ndarray
    trace: list


class MacX:
    """A configured model bound to its parameter store."""

    def __init__(self, config, params):
        self.config = config
        self.params = params
        expected = param_shapes(config)
        if list(expected) != list(params) or any(params[n].shape != s for n, s in expected.items()):
            raise ValueError("parameter store does not match the model configuration")
        enc_streams = ["answer"] if config.answers_only else ["question", "answer", *config.modalities]
        self.encoders = {s: LstmParams.from_store(params, f"enc.{s}") for s in enc_streams}
        if config.answers_only:
            self.cells = {}
        elif config.fusion == "mid":
            self.cells = {"mid": CellParams(params, "cell", config.modalities, config.p, config.share_fq)}
        else:
            self.cells = {j: CellParams(params, f"cell.{j}", (j,), config.p, config.share_fq, fused=False)
                          for j in config.modalities}

    @classmethod
    def create(cls, config, seed=0):
        return cls(config, init_params(config, seed))

    def _cast(self, x):
        return np.asarray(x, dtype=self.config.dtype)

    def encode(self, question, streams, answers):
        """Run every encoder in one fused recurrent pass.

        ``question`` and ``answers`` are ``(x, mask)``; ``streams`` maps
        modality to ``(x, mask)``. The question and modalities are ignored
        by the answers-only model.
        """
        cfg = self.config
        items = [(self._cast(answers[0]), answers[1], self.encoders["answer"])]
        if not cfg.answers_only:
            missing = [j for j in cfg.modalities if j not in streams]
            if missing:
                raise KeyError(f"instance lacks enabled modalities {missing}")
            items.append((self._cast(question[0]), question[1], self.encoders["question"]))
            items += [(self._cast(streams[j][0]), streams[j][1], self.encoders[j]) for j in cfg.modalities]
        out = encode_many(items)
        enc = Encoded(answers=out[0][1])
        if not cfg.answers_only:
            enc.words, enc.question = out[1]
            enc.words_mask = np.asarray(question[1], dtype=bool)
            enc.kbs = {j: KnowledgeBase(keys, np.asarray(streams[j][1], dtype=bool), j)
                       for j, (keys, _) in zip(cfg.modalities, out[2:])}
        return enc

    def reason(self, enc):
        """Roll the cell(s) for ``p`` steps; returns ``(ctx, trace)``.

        ``ctx = [q, m_p]`` has shape ``(B, 2d)``; the answers-only model
        returns ``(None, [])``.
        """
        cfg = self.config
        if cfg.answers_only:
            return None, []
        q, words, wmask = enc.question, enc.words, enc.words_mask
        if cfg.fusion == "mid":
            memory, trace = rollout(q, words, wmask, enc.kbs, self.cells["mid"])
        else:
            finals, traces = [], []
            for j in cfg.modalities:
                m_j, t_j = rollout(q, words, wmask, {j: enc.kbs[j]}, self.cells[j])
                finals.append(m_j)
                traces.append(t_j)
            memory = nx.linear(nx.concat(finals, axis=-1), self.params["late_fuse.W"], self.params["late_fuse.b"])
            trace = _merge_late_traces(traces, cfg.modalities)
        return nx.concat([q, memory], axis=-1), trace

    def head(self, ctx, a, rows=None):
        """Score answer vectors ``a``; answer ``n`` pairs with context row ``rows[n]``."""
        if ctx is None:
            feats = a
        else:
            if rows is not None:
                ctx = nx.take(ctx, rows, axis=0)
            feats = nx.concat([ctx, a], axis=-1)
        p = self.params
        if self.config.head == "affine":
            y = nx.linear(feats, p["head.W"], p["head.b"])
        else:
            hidden = nx.elu(nx.linear(feats, p["head.W1"], p["head.b1"]))
            y = nx.linear(hidden, p["head.W2"], p["head.b2"])
        y = nx.reshape(y, (y.shape[0],))
        nx.check_finite(y, "answer scores")
        return y

    def forward_batch(self, question, streams, answers, rows):
        """Scores for ``answers`` where answer ``n`` belongs to question ``rows[n]``."""
        enc = self.encode(question, streams, answers)
        ctx, trace = self.reason(enc)
        return self.head(ctx, enc.answers, rows), trace

    def score_questions(self, data, rows):
        """Scores for every candidate of questions ``rows``: ``(len(rows), K)``."""
        rows = np.asarray(rows, dtype=np.int64)
        K = data.n_candidates
        answers = data.candidate_batch(np.repeat(rows, K), np.tile(np.arange(K), len(rows)))
        y, trace = self.forward_batch(*self.inputs(data, rows), answers, np.repeat(np.arange(len(rows)), K))
        return y.data.reshape(len(rows), K), trace

    def inputs(self, data, rows):
        """Question and modality batches for dataset ``rows``."""
        if self.config.answers_only:
            return None, {}
        return data.question_batch(rows), {j: data.stream_batch(j, rows) for j in self.config.modalities}

    def pair_inputs(self, data, pairs):
        """Encoder inputs and context rows for (question, correct, incorrect) triples."""
        rows, ci, wi = pairs[:, 0], pairs[:, 1], pairs[:, 2]
        B = len(rows)
        answers = data.candidate_batch(np.concatenate([rows, rows]), np.concatenate([ci, wi]))
        question, streams = self.inputs(data, rows)
        return question, streams, answers, np.concatenate([np.arange(B), np.arange(B)])

    def pair_scores(self, data, pairs):
        """``(y1, y2)`` tensors for (question, correct, incorrect) triples."""
        y, _ = self.forward_batch(*self.pair_inputs(data, pairs))
        B = len(pairs)
        return y[:B], y[B:]

    def predict(self, instance):
        data = QADataset.from_instances([instance])
        scores, trace = self.score_questions(data, [0])
        return Prediction(scores[0], [{k: v[0] for k, v in step.items()} for step in trace])


def _merge_late_traces(traces, modalities):
    merged = []
    for i in range(len(traces[0])):
        entry = {}
        for j, t in zip(modalities, traces):
            entry[f"control.{j}"] = t[i]["control"]
            entry[j] = t[i][j]
        merged.append(entry)
    return merged


def forward(instance, params, config):
    """Score every candidate of one instance with the configured fusion mode."""
    return MacX(config, params).predict(instance)


def forward_late_fusion(instance, params, config):
    if config.fusion != "late":
        config = replace(config, fusion="late")
    return MacX(config, params).predict(instance)


def composite_loss(y1, y2):
    """``(mean(y1) - 1)^2 + mean(y2)^2`` over the batch."""
    if y1.shape[0] == 0 or y1.shape != y2.shape:
        raise ValueError(f"composite loss needs equal non-empty batches, got {y1.shape} and {y2.shape}")
    return nx.square(nx.mean(y1) - 1.0) + nx.square(nx.mean(y2))


def enumerate_a2_pairs(correct):
    """(correct, incorrect) index pairs, correct-major."""
    correct = np.asarray(correct, dtype=bool)
    good, bad = np.flatnonzero(correct), np.flatnonzero(~correct)
    if good.size == 0 or bad.size == 0:
        raise ValueError("need at least one correct and one incorrect candidate")
    return [(int(c), int(w)) for c in good for w in bad]


def enumerate_a4_combinations(correct):
    """One combination per correct candidate: it plus every incorrect one."""
    correct = np.asarray(correct, dtype=bool)
    good, bad = np.flatnonzero(correct), np.flatnonzero(~correct)
    if good.size == 0 or bad.size == 0:
        raise ValueError("malformed combination: need a correct and an incorrect candidate")
    return [(int(c), tuple(int(w) for w in bad)) for c in good]


def accuracy_a2(y1, y2):
    """Fraction of pairs whose correct score is strictly greater."""
    y1, y2 = np.asarray(y1), np.asarray(y2)
    if y1.size == 0 or y1.shape != y2.shape:
        raise ValueError("accuracy_a2 needs equal non-empty score arrays")
    return float(np.mean(y1 > y2))


def accuracy_a4(scores, correct):
    """Fraction of combinations where the correct candidate is the unique maximum.

    ``scores`` and ``correct`` are ``(N, K)`` per-question arrays.
    """
    scores, correct = np.asarray(scores), np.asarray(correct, dtype=bool)
    if scores.size == 0:
        raise ValueError("accuracy_a4 needs at least one question")
    hits = total = 0
    for s, c in zip(scores, correct):
        for good, bad in enumerate_a4_combinations(c):
            hits += bool(s[good] > s[list(bad)].max())
            total += 1
    return hits / total


def metrics_from_scores(scores, correct):
    pairs = [(n, c, w) for n in range(len(correct)) for c, w in enumerate_a2_pairs(correct[n])]
    pairs = np.asarray(pairs)
    y1 = scores[pairs[:, 0], pairs[:, 1]]
    y2 = scores[pairs[:, 0], pairs[:, 2]]
    return {"a2": accuracy_a2(y1, y2), "a4": accuracy_a4(scores, correct),
            "a2_count": len(pairs), "a4_count": int(correct.sum())}
