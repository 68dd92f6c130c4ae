"""Question-answer instances and their padded, batch-ready dataset form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell import MODALITIES
from .encoders import FeatureSequence


@dataclass
class QAInstance:
    question: FeatureSequence
    candidates: list
    correct: np.ndarray
    modalities: dict
    latent: dict = field(default=None, repr=False)
    index: int = -1

    def __post_init__(self):
        self.correct = np.asarray(self.correct, dtype=bool)
        if len(self.candidates) != self.correct.size:
            raise ValueError("one correctness flag per candidate is required")
        if not self.correct.any() or self.correct.all():
            raise ValueError("an instance needs at least one correct and one incorrect candidate")


def _pad(seqs):
    L = max(s.length for s in seqs)
    out = np.zeros((len(seqs), L, seqs[0].width))
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for n, s in enumerate(seqs):
        if s.width != seqs[0].width:
            raise ValueError("feature width varies within one stream")
        if not s.mask[:s.valid_length].all():
            raise ValueError("only right-padded masks can be stored")
        out[n, :s.length] = s.features
        lengths[n] = s.valid_length
    return out, lengths


def lengths_to_mask(lengths, L):
    return np.arange(L)[None, :] < np.asarray(lengths)[:, None]


class QADataset:
    """Instances stored as right-padded arrays with per-row valid lengths.

    Streams: ``question`` (N, S, dq); ``candidates`` (N, K, La, da);
    and one (N, L_j, d_j) array per modality present.
    """

    def __init__(self, question, question_len, candidates, candidate_len, correct, streams, index=None):
        self.question = np.asarray(question)
        self.question_len = np.asarray(question_len, dtype=np.int64)
        self.candidates = np.asarray(candidates)
        self.candidate_len = np.asarray(candidate_len, dtype=np.int64)
        self.correct = np.asarray(correct, dtype=bool)
        self.streams = {j: (np.asarray(x), np.asarray(n, dtype=np.int64)) for j, (x, n) in streams.items()}
        n = len(self.question)
        self.index = np.arange(n) if index is None else np.asarray(index, dtype=np.int64)
        if (self.candidates.shape[:2] != self.correct.shape or self.candidate_len.shape != self.correct.shape
                or self.correct.shape[0] != n or any(len(x) != n for x, _ in self.streams.values())):
            raise ValueError("dataset arrays disagree on the instance count")

    @classmethod
    def from_instances(cls, instances):
        instances = list(instances)
        if not instances:
            raise ValueError("no instances")
        q, qn = _pad([i.question for i in instances])
        K = len(instances[0].candidates)
        if any(len(i.candidates) != K for i in instances):
            raise ValueError("candidate count varies across instances")
        flat, flat_len = _pad([c for i in instances for c in i.candidates])
        cands = flat.reshape(len(instances), K, *flat.shape[1:])
        cand_len = flat_len.reshape(len(instances), K)
        correct = np.stack([i.correct for i in instances])
        keys = [j for j in MODALITIES if j in instances[0].modalities]
        streams = {j: _pad([i.modalities[j] for i in instances]) for j in keys}
        return cls(q, qn, cands, cand_len, correct, streams, [i.index for i in instances])

    def __len__(self):
        return len(self.question)

    @property
    def n_candidates(self):
        return self.correct.shape[1]

    @property
    def widths(self):
        w = {"question": self.question.shape[-1], "answer": self.candidates.shape[-1]}
        w.update({j: x.shape[-1] for j, (x, _) in self.streams.items()})
        return w

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        streams = {j: (x[idx], n[idx]) for j, (x, n) in self.streams.items()}
        return QADataset(self.question[idx], self.question_len[idx], self.candidates[idx],
                         self.candidate_len[idx], self.correct[idx], streams, self.index[idx])

    @staticmethod
    def _trim(x, lengths):
        L = max(int(lengths.max()), 1)
        return x[:, :L], lengths_to_mask(lengths, L)

    def question_batch(self, rows):
        return self._trim(self.question[rows], self.question_len[rows])

    def stream_batch(self, modality, rows):
        x, n = self.streams[modality]
        return self._trim(x[rows], n[rows])

    def candidate_batch(self, rows, cand):
        """Candidates ``cand[k]`` of question ``rows[k]``."""
        return self._trim(self.candidates[rows, cand], self.candidate_len[rows, cand])

    def instance(self, i):
        seq = lambda tag, x, n: FeatureSequence(tag, x[:n])
        return QAInstance(
            question=seq("question", self.question[i], self.question_len[i]),
            candidates=[seq("answer", self.candidates[i, k], self.candidate_len[i, k])
                        for k in range(self.n_candidates)],
            correct=self.correct[i].copy(),
            modalities={j: seq(j, x[i], n[i]) for j, (x, n) in self.streams.items()},
            index=int(self.index[i]),
        )

    def a2_pairs(self):
        """All (question, correct, incorrect) index triples, question-major."""
        out = []
        for n in range(len(self)):
            c = np.flatnonzero(self.correct[n])
            w = np.flatnonzero(~self.correct[n])
            for ci in c:
                for wi in w:
                    out.append((n, ci, wi))
        return np.asarray(out, dtype=np.int64).reshape(-1, 3)

    def to_arrays(self):
        """Model-visible content as named arrays (integers stored as float64)."""
        arrays = {
            "index": self.index.astype(np.float64),
            "question.features": self.question,
            "question.lengths": self.question_len.astype(np.float64),
            "candidates.features": self.candidates,
            "candidates.lengths": self.candidate_len.astype(np.float64),
            "candidates.correct": self.correct.astype(np.float64),
        }
        for j, (x, n) in self.streams.items():
            arrays[f"{j}.features"] = x
            arrays[f"{j}.lengths"] = n.astype(np.float64)
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        try:
            streams = {j: (arrays[f"{j}.features"], arrays[f"{j}.lengths"].astype(np.int64))
                       for j in MODALITIES if f"{j}.features" in arrays}
            return cls(arrays["question.features"], arrays["question.lengths"].astype(np.int64),
                       arrays["candidates.features"], arrays["candidates.lengths"].astype(np.int64),
                       arrays["candidates.correct"] > 0.5, streams, arrays["index"].astype(np.int64))
        except KeyError as exc:
            raise ValueError(f"bundle is not a dataset: missing array {exc}") from None
