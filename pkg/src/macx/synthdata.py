"""Synthetic multimodal multiple-choice tasks.

Each instance hides one bit per modality. A bit is written into its
modality's sequence at one random timestep as a unit pattern vector (one
pattern per bit value); every timestep also carries Gaussian noise. The
candidates state a one-bit claim: correct candidates state the task's
target, incorrect ones its negation.

Tasks
    xor3    target = b_V ^ b_T ^ b_Ac (no single modality is informative)
    conj2   target = b_V & b_T (acoustic stream is a distractor)
    copy    target = b_V
    biased  target as xor3, but candidates also carry a marker that is more
            frequent on correct answers, so answer text alone beats chance

Randomness is counter-based (Philox keyed by seed and task, counter by
instance index), so an instance depends only on ``(spec, index)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .cell import MODALITIES
from .data import QADataset, QAInstance
from .encoders import FeatureSequence

TASKS = ("xor3", "conj2", "copy", "biased")

_INSTANCE_STREAM = 0
_PATTERN_STREAM = 1
_SPLIT_STREAM = 2


@dataclass
class SyntheticSpec:
    task: str = "xor3"
    instance_count: int = 1000
    seed: int = 0
    noise: float = 0.05
    widths: dict = field(default_factory=lambda: {j: 8 for j in MODALITIES})
    lengths: dict = field(default_factory=lambda: {j: (4, 8) for j in MODALITIES})
    question_width: int = 8
    question_length: tuple = (3, 5)
    answer_width: int = 8
    answer_length: tuple = (2, 4)
    n_correct: int = 4
    n_incorrect: int = 3
    leak: float = 0.75

    def __post_init__(self):
        self.widths = {j: int(self.widths[j]) for j in MODALITIES}
        self.lengths = {j: tuple(int(v) for v in self.lengths[j]) for j in MODALITIES}
        self.question_length = tuple(int(v) for v in self.question_length)
        self.answer_length = tuple(int(v) for v in self.answer_length)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for what, (lo, hi) in [*self.lengths.items(), ("question", self.question_length),
                               ("answer", self.answer_length)]:
            if not 1 <= lo <= hi:
                raise ValueError(f"length range for {what} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if min(self.widths.values()) < 2 or self.answer_width < 3 or self.question_width < 1:
            raise ValueError("modality widths must be >= 2 and the answer width >= 3")
        if self.n_correct < 1 or self.n_incorrect < 1:
            raise ValueError("need at least one correct and one incorrect candidate")
        if self.noise < 0 or self.instance_count < 1:
            raise ValueError("noise must be >= 0 and instance_count >= 1")
        if not 0.0 <= self.leak <= 1.0:
            raise ValueError("leak must lie in [0, 1]")

    def items(self):
        """Flat ``key -> str`` view, stable across runs (manifest and hashing)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "widths":
                out.update({f"width.{j}": str(v[j]) for j in MODALITIES})
            elif f.name == "lengths":
                out.update({f"length.{j}": f"{v[j][0]}-{v[j][1]}" for j in MODALITIES})
            elif isinstance(v, tuple):
                out[f.name] = f"{v[0]}-{v[1]}"
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_items(cls, items):
        known = {f.name: f for f in fields(cls)}
        kw, widths, lengths = {}, {}, {}
        rng = lambda s: tuple(int(x) for x in s.split("-"))
        for key, val in items.items():
            if key.startswith("width."):
                widths[key[6:]] = int(val)
            elif key.startswith("length."):
                lengths[key[7:]] = rng(val)
            elif key in ("question_length", "answer_length"):
                kw[key] = rng(val)
            elif key in ("noise", "leak"):
                kw[key] = float(val)
            elif key == "task":
                kw[key] = val
            elif key in known:
                kw[key] = int(val)
            else:
                raise KeyError(f"unknown synthetic spec key {key!r}")
        if widths:
            kw["widths"] = widths
        if lengths:
            kw["lengths"] = lengths
        return cls(**kw)

    def digest(self):
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.items().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _rng(spec, index, stream):
    key = [spec.seed % 2 ** 64, TASKS.index(spec.task)]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, index, stream]))


def _orthonormal(rng, width, count):
    q, r = np.linalg.qr(rng.standard_normal((width, count)))
    return (q * np.sign(np.diag(r))).T


@dataclass
class Patterns:
    bits: dict      # modality -> (2, width): row b is the pattern for bit value b
    claims: np.ndarray   # (2, answer_width)
    marker: np.ndarray   # (answer_width,)
    words: np.ndarray    # (max question length, question_width)


def make_patterns(spec):
    rng = _rng(spec, 0, _PATTERN_STREAM)
    bits = {j: _orthonormal(rng, spec.widths[j], 2) for j in MODALITIES}
    answer = _orthonormal(rng, spec.answer_width, 3)
    words = rng.standard_normal((spec.question_length[1], spec.question_width))
    words /= np.linalg.norm(words, axis=1, keepdims=True)
    return Patterns(bits, answer[:2], answer[2], words)


def target_of(task, bits):
    b_v, b_t, b_ac = (int(bits[j]) for j in MODALITIES)
    if task in ("xor3", "biased"):
        return b_v ^ b_t ^ b_ac
    if task == "conj2":
        return b_v & b_t
    return b_v


def generate_instance(spec, index, patterns=None):
    if not 0 <= index < spec.instance_count:
        raise IndexError(f"instance index {index} outside 0..{spec.instance_count - 1}")
    pats = patterns or make_patterns(spec)
    rng = _rng(spec, index, _INSTANCE_STREAM)
    draw_len = lambda lo_hi: int(rng.integers(lo_hi[0], lo_hi[1] + 1))
    bits = {j: int(b) for j, b in zip(MODALITIES, rng.integers(0, 2, size=3))}
    target = target_of(spec.task, bits)

    streams, positions = {}, {}
    for j in MODALITIES:
        L = draw_len(spec.lengths[j])
        x = spec.noise * rng.standard_normal((L, spec.widths[j]))
        t = int(rng.integers(L))
        x[t] += pats.bits[j][bits[j]]
        streams[j] = FeatureSequence(j, x)
        positions[j] = t

    S = draw_len(spec.question_length)
    question = FeatureSequence("question", pats.words[:S] + spec.noise * rng.standard_normal((S, spec.question_width)))

    n_total = spec.n_correct + spec.n_incorrect
    correct = np.zeros(n_total, dtype=bool)
    correct[rng.permutation(n_total)[:spec.n_correct]] = True
    candidates, marked = [], []
    for k in range(n_total):
        La = draw_len(spec.answer_length)
        x = spec.noise * rng.standard_normal((La, spec.answer_width))
        claim = target if correct[k] else 1 - target
        x[int(rng.integers(La))] += pats.claims[claim]
        rate = spec.leak if correct[k] else 1.0 - spec.leak
        mark = spec.task == "biased" and rng.random() < rate
        if mark:
            x[int(rng.integers(La))] += pats.marker
        marked.append(bool(mark))
        candidates.append(FeatureSequence("answer", x))

    latent = {"bits": bits, "target": target, "positions": positions, "marked": marked}
    return QAInstance(question, candidates, correct, streams, latent=latent, index=index)


def generate(spec):
    pats = make_patterns(spec)
    return [generate_instance(spec, i, pats) for i in range(spec.instance_count)]


def generate_dataset(spec):
    return QADataset.from_instances(generate(spec))


def split_counts(n, train_fraction):
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train fraction must lie in (0, 1], got {train_fraction}")
    n_train = int(round(train_fraction * n))
    if train_fraction < 1.0 and not 0 < n_train < n:
        raise ValueError(f"fraction {train_fraction} of {n} groups leaves one side empty")
    return n_train, n - n_train


def split(dataset, train_fraction, seed):
    """Seeded shuffle, then prefix split; each instance is its own group."""
    n_train, _ = split_counts(len(dataset), train_fraction)
    rng = np.random.Generator(np.random.Philox(key=[seed % 2 ** 64, 0], counter=[0, 0, 0, _SPLIT_STREAM]))
    order = rng.permutation(len(dataset))
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))
