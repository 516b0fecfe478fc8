"""Figures written next to the CSV reports (headless Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluator import FrequencyBins  # noqa: E402
from .sweep import SweepResult, format_axis_value  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "svg.hashsalt": "ramlc",
}
# fixed metadata keeps repeated renders byte-identical
PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def _bin_labels(bins: FrequencyBins) -> list[str]:
    return [f"{bins.edges[i]:.0f}-{bins.edges[i + 1]:.0f}" for i in range(len(bins.members))]


def plot_bins(reports: dict[str, FrequencyBins], path, title: str = "") -> None:
    """Grouped bars of macro-F1 per train-frequency bin, one group per model."""
    names = list(reports)
    first = reports[names[0]]
    x = np.arange(len(first.members))
    width = 0.8 / len(names)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, name in enumerate(names):
            scores = [np.nan if s is None else s for s in reports[name].macro_f1]
            ax.bar(x + (j - (len(names) - 1) / 2) * width, scores, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(_bin_labels(first))
        ax.set_xlabel("train label frequency (log bins)")
        ax.set_ylabel("macro-F1")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend()
        _save(fig, path)


def plot_sweep(result: SweepResult, path, split: str = "test") -> None:
    """Baseline and RA macro-F1 (left) and their gain (right) over the axis values, mean +/- std."""
    labels = [format_axis_value(v) for v in result.values]
    x = np.arange(len(labels))

    def stats(value_of):
        arr = np.array([[value_of(r) for r in result.rows if r.axis_value == v] for v in result.values])
        return arr.mean(axis=1), arr.std(axis=1)

    with plt.rc_context({**STYLE, "figure.figsize": (8, 3.2)}):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        for name in ("baseline", "ra"):
            m, s = stats(lambda r: r.scores[f"{name}_{split}_macro_f1"])
            ax1.errorbar(x, m, yerr=s, marker="o", capsize=3, label="RA" if name == "ra" else "baseline")
        ax1.set_ylabel(f"{split} macro-F1")
        m, s = stats(lambda r: r.gain(split))
        ax2.errorbar(x, m, yerr=s, marker="s", capsize=3, color="C2")
        ax2.axhline(0.0, color="0.5", lw=0.8)
        ax2.set_ylabel("RA - baseline")
        for ax in (ax1, ax2):
            ax.set_xticks(x)
            ax.set_xticklabels(labels)
            ax.set_xlabel({"k": "K (retrieved neighbors)", "ca": "CA layers x heads",
                           "fraction": "train fraction"}[result.axis])
        ax1.legend()
        _save(fig, path)


def plot_train_log(logs: dict, path) -> None:
    """Dev macro-F1 per epoch for one or more TrainLogs, best epoch marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, tlog in logs.items():
            epochs = [e["epoch"] for e in tlog.epochs]
            ax.plot(epochs, [e["dev_macro_f1"] for e in tlog.epochs], label=name)
            if tlog.best_epoch:
                ax.plot([tlog.best_epoch], [tlog.best["dev_macro_f1"]], "k.", ms=6)
        ax.set_xlabel("epoch")
        ax.set_ylabel("dev macro-F1")
        ax.legend()
        _save(fig, path)
