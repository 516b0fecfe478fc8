"""Paired baseline/RA sweeps over K, the cross-attention grid, or train fraction."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .encoder import EncoderConfig
from .evaluator import binned_macro_f1, f1_scores
from .ra_model import CrossAttentionConfig
from .retrieval import build_repository
from .text_data import Corpus, label_frequencies
from .trainer import TrainConfig, evaluate_split, train_ra, train_vanilla

log = logging.getLogger(__name__)

AXES = ("k", "ca", "fraction")
SPLITS = ("dev", "test")
METRICS = ("micro_f1", "macro_f1")


class SweepError(RuntimeError):
    pass


def parse_axis_value(axis: str, text: str):
    """``k`` takes integers, ``ca`` takes ``LAYERSxHEADS``, ``fraction`` a float in (0, 1]."""
    text = str(text).strip()
    try:
        if axis == "k":
            value = int(text)
            if value < 1:
                raise ValueError
            return value
        if axis == "ca":
            layers, heads = (int(p) for p in text.lower().split("x"))
            CrossAttentionConfig(ca_layers=layers, ca_heads=heads)
            return layers, heads
        if axis == "fraction":
            value = float(text)
            if not 0 < value <= 1:
                raise ValueError
            return value
    except ValueError:
        raise ValueError(f"invalid value {text!r} for sweep axis {axis!r}") from None
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")


def format_axis_value(value) -> str:
    if isinstance(value, tuple):
        return f"{value[0]}x{value[1]}"
    return f"{value:g}" if isinstance(value, float) else str(value)


@dataclass
class SweepRow:
    axis: str
    axis_value: object
    seed: int
    scores: dict[str, float]
    phase1_best_epoch: int
    phase2_best_epoch: int
    baseline_bins: list[float | None] = field(default_factory=list)
    ra_bins: list[float | None] = field(default_factory=list)
    # trained objects, kept only when the sweep is asked to
    models: dict | None = field(default=None, repr=False, compare=False)

    def gain(self, split: str = "test", metric: str = "macro_f1") -> float:
        return self.scores[f"ra_{split}_{metric}"] - self.scores[f"baseline_{split}_{metric}"]

    def flat(self) -> dict:
        out = {"axis": self.axis, "axis_value": format_axis_value(self.axis_value), "seed": self.seed,
               "phase1_best_epoch": self.phase1_best_epoch, "phase2_best_epoch": self.phase2_best_epoch}
        out.update(self.scores)
        for split in SPLITS:
            out[f"gain_{split}_macro_f1"] = self.gain(split)
        return out


@dataclass
class SweepResult:
    axis: str
    values: list
    seeds: list[int]
    rows: list[SweepRow]

    def cell(self, value, seed) -> SweepRow:
        for r in self.rows:
            if r.axis_value == value and r.seed == seed:
                return r
        raise KeyError((value, seed))

    def numeric_columns(self) -> list[str]:
        flat = self.rows[0].flat()
        return [k for k, v in flat.items() if k not in ("axis", "axis_value", "seed") and not isinstance(v, str)]

    def aggregates(self) -> list[dict]:
        """Mean and population std over seeds, one row per axis value."""
        out = []
        for value in self.values:
            cells = [r.flat() for r in self.rows if r.axis_value == value]
            row = {"axis": self.axis, "axis_value": format_axis_value(value), "n_seeds": len(cells)}
            for col in self.numeric_columns():
                xs = np.array([c[col] for c in cells], dtype=np.float64)
                row[f"{col}_mean"] = float(xs.mean())
                row[f"{col}_std"] = float(xs.std())
            out.append(row)
        return out

    def mean_gain(self, value, split: str = "test") -> float:
        return float(np.mean([r.gain(split) for r in self.rows if r.axis_value == value]))

    def long_rows(self) -> list[dict]:
        rows = []
        for r in self.rows:
            for split in SPLITS:
                for model in ("baseline", "ra"):
                    for metric in METRICS:
                        rows.append({"axis_value": format_axis_value(r.axis_value), "seed": r.seed, "split": split,
                                     "metric": f"{model}_{metric}", "value": r.scores[f"{model}_{split}_{metric}"]})
                rows.append({"axis_value": format_axis_value(r.axis_value), "seed": r.seed, "split": split,
                             "metric": "gain_macro_f1", "value": r.gain(split)})
        return rows

    def write(self, out_dir, prefix: str = "sweep") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"rows": out / f"{prefix}.csv", "summary": out / f"{prefix}_summary.csv",
                 "long": out / f"{prefix}_long.csv"}
        _write_dicts(paths["rows"], [r.flat() for r in self.rows])
        _write_dicts(paths["summary"], self.aggregates())
        _write_dicts(paths["long"], self.long_rows(), ["axis_value", "seed", "split", "metric", "value"])
        return paths


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _write_dicts(path, rows, columns=None) -> None:
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _bins(pred, freqs, n_bins):
    return binned_macro_f1(pred, freqs, n_bins).macro_f1


def sweep(axis: str, values, corpus: Corpus | Callable[[int], Corpus], seeds, train_config: TrainConfig,
          ca_config: CrossAttentionConfig = CrossAttentionConfig(), encoder_config: EncoderConfig | None = None,
          n_bins: int = 5, ra_dropout: float | None = None, on_cell=None, keep_models: bool = False) -> SweepResult:
    """Run phase one and phase two for every (value, seed) and score both on dev and test.

    ``corpus`` may be a callable ``seed -> Corpus`` when each seed draws
    its own data.  On the ``k`` and ``ca`` axes phase one is trained once
    per seed and reused; on ``fraction`` both phases are retrained.
    ``keep_models`` attaches the corpus, both models and the repository to
    each row.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    values = [v if not isinstance(v, str) else parse_axis_value(axis, v) for v in values]
    if not values or not list(seeds):
        raise ValueError("a sweep needs at least one value and one seed")
    seeds = list(seeds)
    rows = []
    phase1: dict[tuple, tuple] = {}

    def phase_one(seed, fraction):
        key = (seed, fraction)
        if key not in phase1:
            base = corpus(seed) if callable(corpus) else corpus
            data = base.subsample_train(fraction, seed)
            cfg = replace(train_config, seed=seed)
            model, tlog = train_vanilla(cfg, data, encoder_config)
            repo = build_repository(model, data)
            scores = {}
            for split in SPLITS:
                s = f1_scores(evaluate_split(model, data.split(split), cfg.eval_batch_size))
                scores[f"baseline_{split}_micro_f1"] = s.micro_f1
                scores[f"baseline_{split}_macro_f1"] = s.macro_f1
            freqs = label_frequencies(data)
            bins = _bins(evaluate_split(model, data.test, cfg.eval_batch_size), freqs, n_bins)
            if axis == "fraction":
                phase1.clear()  # each fraction is used once per seed
            phase1[key] = (data, model, tlog, repo, scores, freqs, bins)
        return phase1[key]

    for seed in seeds:
        for value in values:
            try:
                fraction = value if axis == "fraction" else 1.0
                data, vanilla, tlog1, repo, base_scores, freqs, base_bins = phase_one(seed, fraction)
                ca = ca_config
                if axis == "k":
                    ca = replace(ca_config, k=value)
                elif axis == "ca":
                    ca = replace(ca_config, ca_layers=value[0], ca_heads=value[1])
                cfg = replace(train_config, seed=seed)
                ra, tlog2 = train_ra(cfg, data, repo, vanilla, ca, dropout=ra_dropout)
                scores = dict(base_scores)
                for split in SPLITS:
                    s = f1_scores(evaluate_split(ra, data.split(split), cfg.eval_batch_size, repository=repo))
                    scores[f"ra_{split}_micro_f1"] = s.micro_f1
                    scores[f"ra_{split}_macro_f1"] = s.macro_f1
                ra_bins = _bins(evaluate_split(ra, data.test, cfg.eval_batch_size, repository=repo), freqs, n_bins)
            except Exception as exc:
                raise SweepError(f"sweep cell {axis}={format_axis_value(value)} seed={seed} failed: {exc}") from exc
            row = SweepRow(axis, value, seed, scores, tlog1.best_epoch, tlog2.best_epoch, base_bins, ra_bins)
            if keep_models:
                row.models = {"corpus": data, "vanilla": vanilla, "repository": repo, "ra": ra,
                              "phase1_log": tlog1, "phase2_log": tlog2}
            log.info("sweep %s=%s seed %d gain %.4f", axis, format_axis_value(value), seed, row.gain())
            rows.append(row)
            if on_cell is not None:
                on_cell(row)
    return SweepResult(axis, values, seeds, rows)
