"""Command-line pipeline: generate-data, train-vanilla, build-repo, train-ra, evaluate,
label-overlap and sweep.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 runtime failure.
Every command writes ``run_manifest.json`` into its output directory, on
failure too.  Settings resolve as CLI flag > environment > config file >
built-in default; the only environment variable is RAMLC_SEED.

Heavy imports happen inside the commands so ``--threads`` can cap the
BLAS pools before numpy loads.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

ENV_SEED = "RAMLC_SEED"
MANIFEST = "run_manifest.json"
DEFAULT_OUT_DIR = "out"

log = logging.getLogger("ramlc")


class UsageError(Exception):
    pass


# name -> (type, default); every resolvable setting lives here
SETTINGS = {
    "seed": (int, 0),
    "threads": (int, 1),
    # synthetic data
    "n_labels": (int, 50),
    "zipf_exponent": (float, 1.2),
    "n_train": (int, 2000),
    "n_dev": (int, 250),
    "n_test": (int, 250),
    "n_unlabeled": (int, 0),
    "signal_strength": (float, 0.3),
    "vocab_size": (int, 1200),
    # encoder
    "dim": (int, 64),
    "enc_layers": (int, 2),
    "enc_heads": (int, 4),
    "ffn_dim": (int, 128),
    "max_seq_len": (int, 256),
    "dropout": (float, 0.1),
    # optimization
    "learning_rate": (float, 3e-4),
    "batch_size": (int, 16),
    "max_epochs": (int, 50),
    "patience": (int, 5),
    # retrieval augmentation
    "k": (int, 4),
    "ca_layers": (int, 2),
    "ca_heads": (int, 2),
    "neighbor_mode": (str, "text"),
    "ra_dropout": (float, None),
    # evaluation
    "bins": (int, 5),
    "split": (str, "test"),
}

SYNTH_KEYS = ("n_labels", "zipf_exponent", "n_train", "n_dev", "n_test", "n_unlabeled", "signal_strength",
              "vocab_size")
ENCODER_KEYS = ("dim", "enc_layers", "enc_heads", "ffn_dim", "max_seq_len", "dropout")
TRAIN_KEYS = ("learning_rate", "batch_size", "max_epochs", "patience")
CA_KEYS = ("k", "ca_layers", "ca_heads", "neighbor_mode")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise UsageError(f"{path}:{n}: unknown setting {key!r}")
        out[key] = value
    return out


def _convert(key: str, value):
    kind, _ = SETTINGS[key]
    if value is None or isinstance(value, kind):
        return value
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"setting {key!r}: cannot interpret {value!r} as {kind.__name__}") from None


def resolve_settings(args: argparse.Namespace, keys, environ=None) -> dict:
    """Apply CLI > environment > config file > default for each key."""
    environ = os.environ if environ is None else environ
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        cli = getattr(args, key, None)
        if cli is not None:
            out[key] = _convert(key, cli)
        elif key == "seed" and environ.get(ENV_SEED, "").strip():
            out[key] = _convert(key, environ[ENV_SEED].strip())
        elif key in from_file:
            out[key] = _convert(key, from_file[key])
        else:
            out[key] = SETTINGS[key][1]
    return out


def file_digest(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        # manifests carry timestamps, so they are not part of a directory's content hash
        for child in sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST):
            h.update(str(child.relative_to(p)).encode("utf-8"))
            h.update(child.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def cap_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# argument parsing


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="key = value settings file")
    g.add_argument("--seed", type=int, help=f"random seed (env {ENV_SEED})")
    g.add_argument("--out-dir", default=DEFAULT_OUT_DIR, help=f"output directory (default: {DEFAULT_OUT_DIR})")
    g.add_argument("--threads", type=int, help="cap on numeric worker threads (default 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _encoder_flags(p) -> None:
    g = p.add_argument_group("encoder")
    g.add_argument("--dim", type=int)
    g.add_argument("--enc-layers", type=int)
    g.add_argument("--enc-heads", type=int)
    g.add_argument("--ffn-dim", type=int)
    g.add_argument("--max-seq-len", type=int)
    g.add_argument("--dropout", type=float)


def _train_flags(p) -> None:
    g = p.add_argument_group("optimization")
    g.add_argument("--learning-rate", "--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--finetune-schedule", action="store_true",
                   help="use lr 3e-5, batch 32, 100 epochs unless flags say otherwise")


def _ca_flags(p) -> None:
    g = p.add_argument_group("retrieval augmentation")
    g.add_argument("--k", type=int, help="retrieved neighbors (default 4)")
    g.add_argument("--ca-layers", type=int, help="cross-attention blocks (default 2)")
    g.add_argument("--ca-heads", type=int, help="cross-attention heads (default 2)")
    g.add_argument("--neighbor-mode", choices=["text", "labels", "text+labels"])
    g.add_argument("--ra-dropout", type=float, help="phase-two dropout (default: phase-one rate)")


def build_parser() -> Parser:
    parser = Parser(prog="ramlc", description="Retrieval-augmented multi-label text classification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    p = sub.add_parser("generate-data", help="write a synthetic Zipfian corpus")
    _common(p)
    g = p.add_argument_group("synthetic corpus")
    g.add_argument("--n-labels", type=int)
    g.add_argument("--zipf-exponent", type=float)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-dev", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--n-unlabeled", type=int)
    g.add_argument("--signal-strength", type=float)
    g.add_argument("--vocab-size", type=int)

    p = sub.add_parser("train-vanilla", help="phase one: encoder plus sigmoid heads")
    _common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    _encoder_flags(p)
    _train_flags(p)

    p = sub.add_parser("build-repo", help="cache phase-one document vectors")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="phase-one checkpoint")
    p.add_argument("--include-unlabeled", action="store_true", help="also cache the unlabeled pool")

    p = sub.add_parser("train-ra", help="phase two: cross-attention over retrieved neighbors")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="phase-one checkpoint")
    p.add_argument("--repository", required=True, help="repository file from build-repo")
    _ca_flags(p)
    _train_flags(p)

    p = sub.add_parser("evaluate", help="micro/macro-F1 and frequency-binned macro-F1")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repository", help="required for retrieval-augmented checkpoints")
    p.add_argument("--baseline", help="optional phase-one checkpoint to compare against")
    p.add_argument("--split", choices=["dev", "test"])
    p.add_argument("--bins", type=int, help="log-spaced frequency bins (default 5)")

    p = sub.add_parser("label-overlap", help="label overlap of retrieved neighbors vs random retrieval")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="phase-one checkpoint")
    p.add_argument("--repository", help="defaults to building one from the checkpoint")
    p.add_argument("--k", type=int)

    p = sub.add_parser("sweep", help="paired baseline/RA runs over K, CA grid or train fraction")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, choices=["k", "ca", "fraction"])
    p.add_argument("--values", help="comma list; defaults: k 2,4,8,16; ca 1x1,2x2,4x4; fraction 0.25,0.5,1")
    p.add_argument("--seeds", help="comma list of seeds (default: the resolved seed)")
    p.add_argument("--bins", type=int)
    _encoder_flags(p)
    _ca_flags(p)
    _train_flags(p)
    return parser


SWEEP_DEFAULTS = {"k": "2,4,8,16", "ca": "1x1,2x2,4x4", "fraction": "0.25,0.5,1"}


# ---------------------------------------------------------------------------
# commands


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _train_config(cfg: dict, args):
    from .trainer import TrainConfig

    values = {k: cfg[k] for k in TRAIN_KEYS}
    if args.finetune_schedule:
        schedule = TrainConfig.finetuning()
        for key in ("learning_rate", "batch_size", "max_epochs"):
            if getattr(args, key, None) is None:
                values[key] = getattr(schedule, key)
    return TrainConfig(seed=cfg["seed"], **values)


def _load_data(path, max_seq_len=None):
    from .text_data import load_corpus

    return load_corpus(_need(path, "corpus directory"), max_seq_len=max_seq_len or 256)


def cmd_generate_data(args, cfg, run) -> None:
    from .text_data import SynthParams, synth_generate, write_corpus

    params = SynthParams(seed=cfg["seed"], **{k: cfg[k] for k in SYNTH_KEYS})
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    corpus = synth_generate(params)
    out = Path(args.out_dir)
    write_corpus(corpus, out)
    run.artifact("corpus", out)
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} documents, "
          f"{corpus.n_labels} labels to {out}")


def cmd_train_vanilla(args, cfg, run) -> None:
    from .checkpoint import save_checkpoint
    from .encoder import EncoderConfig
    from .plotting import plot_train_log
    from .trainer import train_vanilla

    run.input("data", args.data)
    corpus = _load_data(args.data, cfg["max_seq_len"])
    enc = EncoderConfig(vocab_size=len(corpus.vocab), **{k: cfg[k] for k in ENCODER_KEYS})
    model, tlog = train_vanilla(_train_config(cfg, args), corpus, enc)
    out = Path(args.out_dir)
    ckpt, csv_path, fig = out / "vanilla.ckpt", out / "vanilla_log.csv", out / "vanilla_log.png"
    save_checkpoint(model, ckpt)
    tlog.write_csv(csv_path)
    plot_train_log({"phase one": tlog}, fig)
    for name, p in (("checkpoint", ckpt), ("train_log", csv_path), ("train_log_figure", fig)):
        run.artifact(name, p)
    run.extra["best_epoch"] = tlog.best_epoch
    run.extra["stop_reason"] = tlog.stop_reason
    best = tlog.best
    print(f"best epoch {tlog.best_epoch}: dev micro-F1 {best['dev_micro_f1']:.4f} "
          f"macro-F1 {best['dev_macro_f1']:.4f} ({tlog.stop_reason})")


def cmd_build_repo(args, cfg, run) -> None:
    from .checkpoint import load_checkpoint
    from .retrieval import build_repository

    run.input("data", args.data)
    run.input("checkpoint", args.checkpoint)
    model = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    corpus = _load_data(args.data, model.config.max_seq_len)
    if args.include_unlabeled and not corpus.unlabeled:
        log.warning("corpus has no unlabeled pool; repository holds the train split only")
    repo = build_repository(model, corpus, include_unlabeled=args.include_unlabeled)
    path = Path(args.out_dir) / "repository.bin"
    repo.save(path)
    run.artifact("repository", path)
    print(f"cached {len(repo)} documents (dim {repo.dim}) in {path}")


def cmd_train_ra(args, cfg, run) -> None:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .plotting import plot_train_log
    from .ra_model import CrossAttentionConfig
    from .retrieval import Repository
    from .trainer import train_ra

    for name in ("data", "checkpoint", "repository"):
        run.input(name, getattr(args, name))
    vanilla = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    repo = Repository.load(_need(args.repository, "repository"))
    corpus = _load_data(args.data, vanilla.config.max_seq_len)
    try:
        ca = CrossAttentionConfig(**{k: cfg[k] for k in CA_KEYS})
        ca.validate(vanilla.config.dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, tlog = train_ra(_train_config(cfg, args), corpus, repo, vanilla, ca, dropout=cfg["ra_dropout"])
    out = Path(args.out_dir)
    ckpt, csv_path, fig = out / "ra.ckpt", out / "ra_log.csv", out / "ra_log.png"
    save_checkpoint(model, ckpt)
    tlog.write_csv(csv_path)
    plot_train_log({"phase two": tlog}, fig)
    for name, p in (("checkpoint", ckpt), ("train_log", csv_path), ("train_log_figure", fig)):
        run.artifact(name, p)
    run.extra["best_epoch"] = tlog.best_epoch
    run.extra["stop_reason"] = tlog.stop_reason
    best = tlog.best
    print(f"best epoch {tlog.best_epoch}: dev micro-F1 {best['dev_micro_f1']:.4f} "
          f"macro-F1 {best['dev_macro_f1']:.4f} ({tlog.stop_reason})")


def cmd_evaluate(args, cfg, run) -> None:
    from .checkpoint import load_checkpoint
    from .evaluator import MetricsReport
    from .plotting import plot_bins
    from .retrieval import Repository
    from .text_data import label_frequencies
    from .trainer import evaluate_split

    run.input("data", args.data)
    run.input("checkpoint", args.checkpoint)
    model = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    corpus = _load_data(args.data, model.config.max_seq_len)
    kwargs = {}
    if model.phase == "ra":
        if not args.repository:
            raise UsageError("evaluate: a retrieval-augmented checkpoint needs --repository")
        run.input("repository", args.repository)
        kwargs["repository"] = Repository.load(_need(args.repository, "repository"))
    if cfg["bins"] < 2:
        raise UsageError("--bins must be at least 2")
    docs = corpus.split(cfg["split"])
    freqs = label_frequencies(corpus)
    meta = {"phase": model.phase, "split": cfg["split"], "documents": len(docs)}
    report = MetricsReport.build(evaluate_split(model, docs, **kwargs), freqs, cfg["bins"], **meta)
    out = Path(args.out_dir)
    for name, p in report.write(out, corpus.labels).items():
        run.artifact(name, p)
    shown = {"vanilla": "baseline", "ra": "RA"}
    panels = {shown[model.phase]: report.bins}
    if args.baseline:
        run.input("baseline", args.baseline)
        base = load_checkpoint(_need(args.baseline, "baseline checkpoint"))
        base_report = MetricsReport.build(evaluate_split(base, docs), freqs, cfg["bins"], phase=base.phase,
                                          split=cfg["split"], documents=len(docs))
        for name, p in base_report.write(out, corpus.labels, prefix="baseline_").items():
            run.artifact(f"baseline_{name}", p)
        panels = {"baseline": base_report.bins, shown[model.phase]: report.bins}
    fig = out / "bins.png"
    plot_bins(panels, fig, title=f"{cfg['split']} macro-F1 by train label frequency")
    run.artifact("bins_figure", fig)
    run.extra.update({"micro_f1": report.micro_f1, "macro_f1": report.macro_f1})
    print(f"{cfg['split']}: micro-F1 {report.micro_f1:.4f} macro-F1 {report.macro_f1:.4f}")


def cmd_label_overlap(args, cfg, run) -> None:
    import csv

    from .checkpoint import load_checkpoint
    from .retrieval import Repository, build_repository, model_label_overlap, random_label_overlap

    run.input("data", args.data)
    run.input("checkpoint", args.checkpoint)
    model = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    if model.phase != "vanilla":
        raise UsageError("label-overlap expects a phase-one checkpoint")
    corpus = _load_data(args.data, model.config.max_seq_len)
    if args.repository:
        run.input("repository", args.repository)
        repo = Repository.load(_need(args.repository, "repository"))
    else:
        repo = build_repository(model, corpus)
    k = cfg["k"]
    trained = model_label_overlap(model, corpus, repo, k)
    rand = random_label_overlap(corpus.train, repo, k, seed=cfg["seed"])
    path = Path(args.out_dir) / "label_overlap.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "retrieval", "label_overlap"])
        w.writerow([k, "trained", f"{trained:.6f}"])
        w.writerow([k, "random", f"{rand:.6f}"])
    run.artifact("label_overlap", path)
    run.extra.update({"label_overlap": trained, "random_label_overlap": rand})
    print(f"LO@{k}: trained {trained:.4f} random {rand:.4f}")


def cmd_sweep(args, cfg, run) -> None:
    from .encoder import EncoderConfig
    from .plotting import plot_sweep
    from .ra_model import CrossAttentionConfig
    from .sweep import parse_axis_value, sweep

    run.input("data", args.data)
    corpus = _load_data(args.data, cfg["max_seq_len"])
    try:
        values = [parse_axis_value(args.axis, v) for v in (args.values or SWEEP_DEFAULTS[args.axis]).split(",")]
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
        ca = CrossAttentionConfig(**{k: cfg[k] for k in CA_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    enc = EncoderConfig(vocab_size=len(corpus.vocab), **{k: cfg[k] for k in ENCODER_KEYS})
    result = sweep(args.axis, values, corpus, seeds, _train_config(cfg, args), ca, enc, n_bins=cfg["bins"],
                   ra_dropout=cfg["ra_dropout"])
    out = Path(args.out_dir)
    for name, p in result.write(out).items():
        run.artifact(name, p)
    fig = out / "sweep.png"
    plot_sweep(result, fig)
    run.artifact("sweep_figure", fig)
    run.extra["seeds"] = seeds
    for row in result.aggregates():
        print(f"{args.axis}={row['axis_value']}: test macro-F1 gain "
              f"{row['gain_test_macro_f1_mean']:+.4f} +/- {row['gain_test_macro_f1_std']:.4f}")


COMMANDS = {
    "generate-data": (cmd_generate_data, ("seed", "threads") + SYNTH_KEYS),
    "train-vanilla": (cmd_train_vanilla, ("seed", "threads") + ENCODER_KEYS + TRAIN_KEYS),
    "build-repo": (cmd_build_repo, ("seed", "threads")),
    "train-ra": (cmd_train_ra, ("seed", "threads") + TRAIN_KEYS + CA_KEYS + ("ra_dropout",)),
    "evaluate": (cmd_evaluate, ("seed", "threads", "bins", "split")),
    "label-overlap": (cmd_label_overlap, ("seed", "threads", "k")),
    "sweep": (cmd_sweep, ("seed", "threads", "bins", "ra_dropout") + ENCODER_KEYS + TRAIN_KEYS + CA_KEYS),
}


# ---------------------------------------------------------------------------
# manifest and dispatch


class Run:
    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = argv
        self.config: dict = {}
        self.inputs: dict[str, dict] = {}
        self.artifacts: dict[str, str] = {}
        self.extra: dict = {}
        self.started = time.time()

    def input(self, name: str, path) -> None:
        p = Path(path)
        self.inputs[name] = {"path": str(p), "sha256": file_digest(p) if p.exists() else None}

    def artifact(self, name: str, path) -> None:
        self.artifacts[name] = str(path)

    def write(self, out_dir, status: str, error: str | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        end = time.time()
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "error": error,
            "seed": self.config.get("seed"),
            "config": self.config,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "results": self.extra,
            "timings": {"started": self.started, "finished": end, "wall_seconds": end - self.started},
        }
        path = out / MANIFEST
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _explicit_out_dir(argv) -> str | None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--out-dir")
    try:
        ns, _ = pre.parse_known_args(argv)
    except SystemExit:
        return None
    return ns.out_dir


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((a for a in argv if a in COMMANDS), "")
    run = Run(command, argv)
    # a recognised command gets a failure manifest even if its flags do not parse
    out_dir = _explicit_out_dir(argv) or (DEFAULT_OUT_DIR if command else None)
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if not args.command:
            raise UsageError(parser.format_usage() + "ramlc: error: a command is required")
        out_dir = args.out_dir
        func, keys = COMMANDS[args.command]
        cfg = resolve_settings(args, keys)
        run.config = cfg
        cap_threads(cfg["threads"])
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        func(args, cfg, run)
    except UsageError as exc:
        msg = str(exc)
        if "usage:" not in msg:
            msg = f"{parser.format_usage()}ramlc: error: {msg}"
        print(msg, file=sys.stderr)
        _write_failure(run, out_dir, "usage-error", str(exc))
        return 1
    except Exception as exc:  # runtime failure
        print(f"ramlc {command}: error: {exc}", file=sys.stderr)
        log.debug("%s", traceback.format_exc())
        _write_failure(run, out_dir, "failed", f"{type(exc).__name__}: {exc}")
        return 2
    run.write(out_dir, "ok")
    return 0


def _write_failure(run: Run, out_dir, status: str, reason: str) -> None:
    # without an output directory (unparseable command line) there is nowhere to write
    if not out_dir:
        return
    try:
        run.write(out_dir, status, reason)
    except OSError as exc:
        print(f"ramlc: could not write {MANIFEST}: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
