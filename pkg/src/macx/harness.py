"""Run configuration, checkpoints, dataset directories, ablations and traces."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .bundle import BundleError, atomic_write_bytes, read_bundle, write_bundle
from .cell import MODALITIES
from .data import QADataset
from .model import FUSION_MODES, HEAD_MODES, PRECISIONS, MacX, ModelConfig, param_shapes
from .numerics import ParamStore
from .synthdata import SyntheticSpec, generate_dataset, split
from .train import evaluate, train

log = logging.getLogger(__name__)

STREAMS = ("question", "answer", *MODALITIES)
CHECKPOINT_FORMAT = 1


class ConfigError(ValueError):
    """A configuration value is unknown or invalid; the message names the key."""


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_modalities(text):
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    mods = tuple(m.strip() for m in text.split(","))
    bad = [m for m in mods if m not in MODALITIES]
    if bad:
        raise ValueError(f"unknown modalities {bad}; choose from {MODALITIES}")
    return mods


def _parse_seeds(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else tuple(int(s) for s in text.split(","))


@dataclass
class RunConfig:
    """Everything one training or ablation invocation needs."""

    p: int = 12
    d: int = 512
    modalities: tuple = MODALITIES
    fusion: str = "mid"
    head: str = "two-layer"
    precision: str = "float32"
    share_fq: bool = False
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 10
    runs: int = 5
    seeds: tuple = None
    match_budget: bool = True
    eval_batch_size: int = 64
    data: str = ""
    output: str = ""

    def __post_init__(self):
        self.modalities = tuple(j for j in MODALITIES if j in set(self.modalities))
        if self.seeds is not None:
            self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self):
        checks = [
            ("p", self.p >= 1, "must be >= 1"),
            ("d", self.d >= 2 and self.d % 2 == 0, "must be a positive even number"),
            ("fusion", self.fusion in FUSION_MODES, f"must be one of {FUSION_MODES}"),
            ("head", self.head in HEAD_MODES, f"must be one of {HEAD_MODES}"),
            ("precision", self.precision in ("float32", "float64"), "must be float32 or float64"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("eval_batch_size", self.eval_batch_size >= 1, "must be >= 1"),
            ("lr", np.isfinite(self.lr) and self.lr >= 0, "must be finite and >= 0"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("runs", self.runs >= 1, "must be >= 1"),
            ("seeds", self.seeds is None or len(self.seeds) == self.runs,
             f"must list exactly runs={self.runs} seeds"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"{key}: {why}, got {getattr(self, key)!r}")

    @property
    def seed_list(self):
        return self.seeds if self.seeds is not None else tuple(range(self.runs))

    def model_config(self, widths=None, **overrides):
        base = dict(p=self.p, d=self.d, modalities=self.modalities, fusion=self.fusion, head=self.head,
                    precision=self.precision, share_fq=self.share_fq, input_widths=dict(widths or {}))
        base.update(overrides)
        return ModelConfig(**base)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "modalities":
                v = ",".join(v) or "none"
            elif f.name == "seeds":
                v = ",".join(str(s) for s in self.seed_list)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "p": int, "d": int, "batch_size": int, "epochs": int, "runs": int, "eval_batch_size": int,
    "lr": float, "share_fq": _parse_bool, "match_budget": _parse_bool,
    "modalities": _parse_modalities, "seeds": _parse_seeds,
    "fusion": str.strip, "head": str.strip, "precision": str.strip, "data": str.strip, "output": str.strip,
}


def parse_config(text, source="<config>"):
    """Parse ``key=value`` lines; ``#`` starts a comment. Absent keys take defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{key}: unknown configuration key ({source}:{lineno})")
        if key in values:
            raise ConfigError(f"{key}: given twice ({source}:{lineno})")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {val!r}: {exc}") from None
    return RunConfig(**values)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ------------------------------------------------------------- checkpoints


def checkpoint_arrays(model, seed):
    cfg = model.config
    if cfg.precision not in ("float32", "float64"):
        raise CheckpointError(f"cannot store {cfg.precision} parameters")
    meta = [CHECKPOINT_FORMAT, cfg.p, cfg.d, *(float(j in cfg.modalities) for j in MODALITIES),
            FUSION_MODES.index(cfg.fusion), HEAD_MODES.index(cfg.head),
            list(PRECISIONS).index(cfg.precision), seed, float(cfg.share_fq)]
    widths = [cfg.input_widths.get(s, 0) for s in STREAMS]
    arrays = dict(model.params.arrays())
    arrays["__meta__"] = np.asarray(meta, dtype=np.float64)
    arrays["__widths__"] = np.asarray(widths, dtype=np.float64)
    return arrays


def save_checkpoint(path, model, seed):
    write_bundle(checkpoint_arrays(model, seed), path)


def model_from_arrays(arrays):
    """Rebuild a model from checkpoint arrays; returns ``(model, seed)``."""
    try:
        meta = [int(v) for v in arrays["__meta__"]]
        widths = arrays["__widths__"]
    except KeyError:
        raise CheckpointError("bundle is not a checkpoint: no metadata") from None
    if len(meta) != 11 or meta[0] != CHECKPOINT_FORMAT:
        raise CheckpointError("unsupported checkpoint metadata")
    _, p, d, mv, mt, mac, fusion, head, precision, seed, share = meta
    mods = tuple(j for j, on in zip(MODALITIES, (mv, mt, mac)) if on)
    config = ModelConfig(p=p, d=d, modalities=mods, fusion=FUSION_MODES[fusion], head=HEAD_MODES[head],
                         precision=list(PRECISIONS)[precision], share_fq=bool(share),
                         input_widths={s: int(w) for s, w in zip(STREAMS, widths) if w > 0})
    params = {k: v for k, v in arrays.items() if not k.startswith("__")}
    expected = param_shapes(config)
    if list(params) != list(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointError("checkpoint parameters do not match its configuration")
    store = ParamStore(expected, config.dtype)
    store.load(params)
    return MacX(config, store), seed


def load_checkpoint(path):
    return model_from_arrays(read_bundle(path))


# ---------------------------------------------------------------- datasets


def write_dataset_dir(out_dir, spec, train_fraction=0.8, split_seed=0):
    """Generate, split and store a synthetic dataset; returns ``(train, val)``."""
    data = generate_dataset(spec)
    train_set, val_set = split(data, train_fraction, split_seed)
    os.makedirs(out_dir, exist_ok=True)
    write_bundle(train_set.to_arrays(), os.path.join(out_dir, "train.macx"))
    if len(val_set):
        write_bundle(val_set.to_arrays(), os.path.join(out_dir, "val.macx"))
    manifest = dict(spec.items())
    manifest.update(train_count=len(train_set), val_count=len(val_set), train_fraction=repr(train_fraction),
                    split_seed=split_seed, spec_hash=spec.digest())
    write_text(os.path.join(out_dir, "manifest.txt"), "".join(f"{k}={v}\n" for k, v in manifest.items()))
    return train_set, val_set


def read_manifest(data_dir):
    out = {}
    with open(os.path.join(data_dir, "manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                key, val = line.rstrip("\n").split("=", 1)
                out[key] = val
    return out


def spec_from_manifest(manifest):
    skip = {"train_count", "val_count", "train_fraction", "split_seed", "spec_hash"}
    return SyntheticSpec.from_items({k: v for k, v in manifest.items() if k not in skip})


def load_split(data_dir, name):
    path = os.path.join(data_dir, f"{name}.macx")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {name} split in {data_dir}")
    return QADataset.from_arrays(read_bundle(path))


# ------------------------------------------------------------------- runs


@dataclass
class RunResult:
    subset: tuple
    fusion: str
    seed: int
    d: int
    n_params: int
    a2: float
    a4: float
    a2_count: int
    a4_count: int
    history: list = field(default_factory=list, repr=False)


def count_params(config):
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


def budget_matched_width(reference, fusion):
    """Even width ``d`` whose ``fusion`` variant has the closest parameter count to ``reference``."""
    target = count_params(reference)
    best = None
    for d in range(2, 2 * reference.d + 1, 2):
        gap = abs(count_params(replace(reference, fusion=fusion, d=d)) - target)
        if best is None or gap < best[0]:
            best = (gap, d)
    return best[1]


def run_one(run, train_set, val_set, seed, modalities=None, fusion=None, d=None):
    """Train one configuration and evaluate its best checkpoint on ``val_set``."""
    mods = run.modalities if modalities is None else tuple(modalities)
    config = run.model_config(train_set.widths, modalities=mods, fusion=fusion or run.fusion,
                              d=d or run.d)
    model, history = train(config, train_set, val_set, seed, batch_size=run.batch_size, lr=run.lr,
                           epochs=run.epochs, eval_batch_size=run.eval_batch_size)
    rep = evaluate(model, val_set, run.eval_batch_size)
    return model, RunResult(config.modalities, config.fusion, seed, config.d, count_params(config),
                            rep["a2"], rep["a4"], rep["a2_count"], rep["a4_count"], history)


ABLATION_SUBSETS = (("V",), ("T",), ("Ac",), MODALITIES)


def ablation_grid(run):
    """``(subset, fusion)`` cells: each subset with mid fusion, plus late fusion on all modalities."""
    return [(s, "mid") for s in ABLATION_SUBSETS] + [(MODALITIES, "late")]


def run_ablation(run, train_set, val_set, on_result=None):
    """Train and evaluate every grid cell for every seed; returns the raw results.

    With ``run.match_budget`` the late-fusion cell uses the width whose
    parameter count is closest to the full mid-fusion model's.
    ``on_result(model, result)`` is called after each run.
    """
    if val_set is None or len(val_set) == 0:
        raise ValueError("ablation needs a non-empty validation split")
    results = []
    mid_full = run.model_config(train_set.widths, modalities=MODALITIES, fusion="mid")
    for subset, fusion in ablation_grid(run):
        d = run.d
        if fusion == "late" and run.match_budget:
            d = budget_matched_width(mid_full, "late")
        for seed in run.seed_list:
            try:
                model, res = run_one(run, train_set, val_set, seed, subset, fusion, d)
            except Exception as exc:
                raise RuntimeError(f"ablation run failed: subset={','.join(subset)} fusion={fusion} "
                                   f"seed={seed}: {exc}") from exc
            log.info("%s %s seed %d: A2 %.4f A4 %.4f", ",".join(subset), fusion, seed, res.a2, res.a4)
            results.append(res)
            if on_result is not None:
                on_result(model, res)
    return results


def summarize(results):
    """Group raw results by (subset, fusion); mean and std (ddof=1, only for >= 2 runs)."""
    groups = {}
    for r in results:
        groups.setdefault((r.subset, r.fusion), []).append(r)
    rows = []
    for (subset, fusion), rs in groups.items():
        a2 = np.array([r.a2 for r in rs])
        a4 = np.array([r.a4 for r in rs])
        multi = len(rs) >= 2
        rows.append({"modalities": "+".join(subset), "fusion": fusion, "d": rs[0].d, "params": rs[0].n_params,
                     "runs": len(rs), "a2_mean": a2.mean(), "a2_std": a2.std(ddof=1) if multi else None,
                     "a4_mean": a4.mean(), "a4_std": a4.std(ddof=1) if multi else None})
    return rows


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if row[k] is None else (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                    for k in header])
    return buf.getvalue()


TABLE_HEADER = ("modalities", "fusion", "d", "params", "runs", "a2_mean", "a2_std", "a4_mean", "a4_std")
RAW_HEADER = ("modalities", "fusion", "seed", "d", "params", "a2", "a4", "a2_count", "a4_count")


def ablation_tables(results):
    """Modality table (mid fusion rows) and fusion table (full-modality rows) as CSV text."""
    rows = summarize(results)
    full = "+".join(MODALITIES)
    table1 = [r for r in rows if r["fusion"] == "mid"]
    table2 = [r for r in rows if r["modalities"] == full]
    raw = [{"modalities": "+".join(r.subset), "fusion": r.fusion, "seed": r.seed, "d": r.d,
            "params": r.n_params, "a2": r.a2, "a4": r.a4, "a2_count": r.a2_count, "a4_count": r.a4_count}
           for r in results]
    return _csv(TABLE_HEADER, table1), _csv(TABLE_HEADER, table2), _csv(RAW_HEADER, raw)


def history_csv(history):
    header = ("epoch", "loss", "val_a2", "val_a4")
    return _csv(header, [{k: row.get(k) for k in header} for row in history])


# ------------------------------------------------------------------ traces


def emit_trace(model, data, index, scores_only=False):
    """Per-step attention maps and candidate scores for one dataset row, as text.

    Rows are comma-separated: ``control,step,<weights>`` for each step,
    ``read,step,<modality>,<weights>`` for each step and modality (late
    fusion traces carry one control row per modality), then
    ``score,<candidate>,<correct>,<score>``. Weights cover valid positions only.
    """
    if not 0 <= index < len(data):
        raise IndexError(f"row {index} outside 0..{len(data) - 1}")
    for j in model.config.modalities:
        if j not in data.streams:
            raise KeyError(f"dataset lacks modality {j} required by the checkpoint")
    scores, trace = model.score_questions(data, [index])
    lengths = {"control": int(data.question_len[index])}
    lengths.update({j: int(data.streams[j][1][index]) for j in model.config.modalities})
    fmt = lambda ws: ",".join(f"{w:.9g}" for w in ws)
    lines = [f"# row={index} instance={int(data.index[index])} p={model.config.p} fusion={model.config.fusion}"]
    for step, entry in enumerate(trace, 1):
        for key, attn in entry.items():
            if key == "control" or key.startswith("control."):
                tag = "" if key == "control" else "," + key.split(".", 1)[1]
                lines.append(f"control,{step}{tag},{fmt(attn[0, :lengths['control']])}")
        for j in model.config.modalities:
            lines.append(f"read,{step},{j},{fmt(entry[j][0, :lengths[j]])}")
    for k, (s, c) in enumerate(zip(scores[0], data.correct[index])):
        lines.append(f"score,{k},{int(c)},{s:.9g}")
    return "\n".join(lines) + "\n"


def parse_trace(text):
    """Inverse of :func:`emit_trace`: ``{"control": [...], "read": [...], "score": [...]}``."""
    out = {"control": [], "read": [], "score": []}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        kind, *rest = line.split(",")
        if kind == "control":
            if len(rest) > 1 and rest[1] in MODALITIES:
                out["control"].append((int(rest[0]), rest[1], np.array(rest[2:], dtype=float)))
            else:
                out["control"].append((int(rest[0]), None, np.array(rest[1:], dtype=float)))
        elif kind == "read":
            out["read"].append((int(rest[0]), rest[1], np.array(rest[2:], dtype=float)))
        elif kind == "score":
            out["score"].append((int(rest[0]), bool(int(rest[1])), float(rest[2])))
        else:
            raise ValueError(f"unknown trace row kind {kind!r}")
    return out


__all__ = [
    "BundleError", "CheckpointError", "ConfigError", "RunConfig", "RunResult", "ablation_tables",
    "budget_matched_width", "emit_trace", "history_csv", "load_checkpoint", "load_config", "load_split",
    "model_from_arrays", "parse_config", "parse_trace", "read_manifest", "run_ablation", "run_one",
    "save_checkpoint", "spec_from_manifest", "summarize", "write_dataset_dir", "write_text",
]
