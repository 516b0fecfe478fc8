"""Micro/macro-F1, frequency-binned macro-F1 and the sweep harness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

THRESHOLD = 0.5


@dataclass
class PredictionSet:
    probabilities: np.ndarray
    gold: np.ndarray
    threshold: float = THRESHOLD

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities)
        self.gold = np.asarray(self.gold).astype(bool)
        if self.probabilities.shape != self.gold.shape or self.gold.ndim != 2:
            raise ValueError(
                f"predictions {self.probabilities.shape} and gold {self.gold.shape} must be equal (docs, labels) arrays"
            )

    @property
    def decisions(self) -> np.ndarray:
        return self.probabilities > self.threshold

    @classmethod
    def from_decisions(cls, decisions, gold) -> "PredictionSet":
        return cls(np.asarray(decisions, dtype=np.float64), gold)


@dataclass
class F1Scores:
    micro_f1: float
    macro_f1: float
    per_label_f1: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f1_scores(predictions: PredictionSet) -> F1Scores:
    """F1 = 2TP / (2TP + FP + FN), defined as 0 when the denominator is 0."""
    pred = predictions.decisions
    gold = predictions.gold
    tp = (pred & gold).sum(axis=0)
    fp = (pred & ~gold).sum(axis=0)
    fn = (~pred & gold).sum(axis=0)
    per_label = _ratio(2 * tp, 2 * tp + fp + fn)
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = float(_ratio(2 * TP, 2 * TP + FP + FN))
    macro = float(per_label.mean()) if per_label.size else 0.0
    return F1Scores(micro, macro, per_label, _ratio(tp, tp + fp), _ratio(tp, tp + fn))


@dataclass
class FrequencyBins:
    """Labels grouped by train frequency on a log scale.

    ``edges`` has ``n_bins + 1`` increasing values; bin ``i`` covers
    ``[edges[i], edges[i+1])`` with the last bin closed.  Labels unseen in
    training go to the separate ``underflow`` bin.  Empty bins hold None.
    """

    edges: np.ndarray
    members: list[list[int]]
    macro_f1: list[float | None]
    underflow: list[int] = field(default_factory=list)
    underflow_macro_f1: float | None = None

    def populated(self) -> list[int]:
        return [i for i, m in enumerate(self.members) if m]

    def rows(self) -> list[dict]:
        out = []
        if self.underflow:
            out.append({"bin": "zero", "low": 0, "high": 0, "n_labels": len(self.underflow),
                        "macro_f1": self.underflow_macro_f1})
        for i, m in enumerate(self.members):
            out.append({"bin": i, "low": float(self.edges[i]), "high": float(self.edges[i + 1]),
                        "n_labels": len(m), "macro_f1": self.macro_f1[i]})
        return out


def assign_bins(frequencies, n_bins: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Bin index per label (-1 for zero frequency) and the log-spaced edges."""
    if n_bins < 2:
        raise ValueError("bin count must be at least 2")
    f = np.asarray(frequencies, dtype=np.float64)
    pos = f[f > 0]
    if pos.size == 0:
        raise ValueError("all labels have zero train frequency")
    lo, hi = pos.min(), pos.max()
    # a single frequency value still needs strictly increasing edges
    edges = np.geomspace(lo, hi if hi > lo else lo * 10.0, n_bins + 1)
    idx = np.full(f.shape, -1, dtype=np.int64)
    if hi > lo:
        span = math.log(hi) - math.log(lo)
        with np.errstate(divide="ignore"):
            pos_idx = np.floor((np.log(f[f > 0]) - math.log(lo)) / span * n_bins)
        idx[f > 0] = np.clip(pos_idx, 0, n_bins - 1).astype(np.int64)
    else:
        idx[f > 0] = 0
    return idx, edges


def binned_macro_f1(predictions: PredictionSet, frequencies, n_bins: int = 5) -> FrequencyBins:
    """Macro-F1 within log-spaced bins of train label frequency.

    ``frequencies`` is a sequence (or id-keyed mapping) of train counts.
    """
    if isinstance(frequencies, dict):
        frequencies = [frequencies[i] for i in range(len(frequencies))]
    idx, edges = assign_bins(frequencies, n_bins)
    per_label = f1_scores(predictions).per_label_f1
    members = [np.flatnonzero(idx == b).tolist() for b in range(n_bins)]
    scores = [float(per_label[m].mean()) if m else None for m in members]
    under = np.flatnonzero(idx == -1).tolist()
    return FrequencyBins(edges, members, scores, under, float(per_label[under].mean()) if under else None)


@dataclass
class MetricsReport:
    micro_f1: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    per_label_f1: np.ndarray
    bins: FrequencyBins | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, predictions: PredictionSet, frequencies=None, n_bins: int = 5, **metadata) -> "MetricsReport":
        s = f1_scores(predictions)
        bins = binned_macro_f1(predictions, frequencies, n_bins) if frequencies is not None else None
        return cls(s.micro_f1, s.macro_f1, s.precision, s.recall, s.per_label_f1, bins, dict(metadata))

    def write(self, out_dir, label_names=None, prefix: str = "") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / f"{prefix}metrics.csv", "per_label": out / f"{prefix}per_label.csv"}
        with open(paths["metrics"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["micro_f1", f"{self.micro_f1:.6f}"])
            w.writerow(["macro_f1", f"{self.macro_f1:.6f}"])
            for k, v in sorted(self.metadata.items()):
                w.writerow([k, v])
        names = label_names or [str(i) for i in range(len(self.per_label_f1))]
        with open(paths["per_label"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "precision", "recall", "f1"])
            for name, p, r, f in zip(names, self.precision, self.recall, self.per_label_f1):
                w.writerow([name, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
        if self.bins is not None:
            paths["bins"] = out / f"{prefix}bins.csv"
            with open(paths["bins"], "w", newline="") as fh:
                w = csv.DictWriter(fh, ["bin", "low", "high", "n_labels", "macro_f1"], lineterminator="\n")
                w.writeheader()
                for row in self.bins.rows():
                    row = dict(row)
                    row["macro_f1"] = "" if row["macro_f1"] is None else f"{row['macro_f1']:.6f}"
                    if isinstance(row["low"], float):
                        row["low"], row["high"] = f"{row['low']:.4f}", f"{row['high']:.4f}"
                    w.writerow(row)
        return paths
