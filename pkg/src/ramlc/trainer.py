"""Two-phase training loop: Adam on mean BCE with dev macro-F1 early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .encoder import Ctx, EncoderConfig, VanillaClassifier, bce_loss, targets_of
from .evaluator import PredictionSet, f1_scores
from .numerics import ParamStore, Tape, backward
from .ra_model import CrossAttentionConfig, RAClassifier
from .retrieval import Repository, RepositoryError
from .text_data import Corpus

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")

    @classmethod
    def finetuning(cls, **overrides) -> "TrainConfig":
        """Fine-tuning schedule of the original setup: 3e-5, batch 32, 100 epochs."""
        return cls(**{"learning_rate": 3e-5, "batch_size": 32, "max_epochs": 100, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best(self) -> dict:
        return self.epochs[self.best_epoch - 1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "dev_micro_f1", "dev_macro_f1"])
            for e in self.epochs:
                w.writerow([e["epoch"], f"{e['loss']:.8f}", f"{e['dev_micro_f1']:.6f}", f"{e['dev_macro_f1']:.6f}"])


class Adam:
    def __init__(self, params: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, t in self.params.items():
            g = self.params.grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            t.data -= step.astype(t.data.dtype, copy=False)


def evaluate_split(model, docs, batch_size: int = 128, **kwargs) -> PredictionSet:
    probs = model.predict_proba(docs, batch_size=batch_size, **kwargs)
    return PredictionSet(probs, targets_of(docs, model.n_labels, bool))


def fit(model, corpus: Corpus, config: TrainConfig, train_kwargs=None, eval_kwargs=None,
        on_epoch=None) -> TrainLog:
    """Shared loop for both phases; leaves the best-epoch weights in ``model``."""
    train_kwargs = train_kwargs or {}
    eval_kwargs = eval_kwargs or {}
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    n_labels = model.n_labels
    train = corpus.train
    tlog = TrainLog()
    best_score = -np.inf
    best_state = model.params.state()
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(train), config.batch_size)):
            docs = [train[i] for i in order[start:start + config.batch_size]]
            tape = Tape()
            ctx = Ctx(tape, drop_rng, model.config.dropout)
            logits = model.batch_logits(ctx, docs, **train_kwargs)
            loss = bce_loss(logits, targets_of(docs, n_labels, logits.dtype), tape)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.params.zero_grad()
            backward(tape, loss, model.params, accumulate=True)
            opt.step()
            total += value * len(docs)
            count += len(docs)

        scores = f1_scores(evaluate_split(model, corpus.dev, config.eval_batch_size, **eval_kwargs))
        row = {"epoch": epoch, "loss": total / count, "dev_micro_f1": scores.micro_f1,
               "dev_macro_f1": scores.macro_f1}
        tlog.epochs.append(row)
        log.info("epoch %d loss %.4f dev micro %.4f macro %.4f", epoch, row["loss"],
                 scores.micro_f1, scores.macro_f1)
        if on_epoch is not None:
            on_epoch(row)
        if scores.macro_f1 > best_score:
            best_score = scores.macro_f1
            best_state = model.params.state()
            tlog.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                tlog.stop_reason = f"no dev macro-F1 improvement for {config.patience} epochs"
                break
    else:
        tlog.stop_reason = "max epochs reached"

    model.params.load_state(best_state)
    return tlog


def train_vanilla(config: TrainConfig, corpus: Corpus, encoder_config: EncoderConfig | None = None,
                  on_epoch=None) -> tuple[VanillaClassifier, TrainLog]:
    if encoder_config is None:
        encoder_config = EncoderConfig(vocab_size=len(corpus.vocab))
    elif encoder_config.vocab_size != len(corpus.vocab):
        encoder_config = replace(encoder_config, vocab_size=len(corpus.vocab))
    model = VanillaClassifier(encoder_config, corpus.n_labels, corpus.vocab.fingerprint, seed=config.seed)
    tlog = fit(model, corpus, config, on_epoch=on_epoch)
    return model, tlog


def train_ra(config: TrainConfig, corpus: Corpus, repository: Repository, vanilla: VanillaClassifier,
             ca_config: CrossAttentionConfig = CrossAttentionConfig(), exclude_self: bool = True,
             dropout: float | None = None, on_epoch=None) -> tuple[RAClassifier, TrainLog]:
    """Phase two: start from ``vanilla``, retrieve per example on every forward pass.

    ``dropout`` overrides the phase-one rate for this phase only.
    """
    if repository.encoder_fingerprint != vanilla.fingerprint:
        raise RepositoryError("repository fingerprint does not match the phase-one checkpoint")
    model = RAClassifier.from_vanilla(vanilla, ca_config, seed=config.seed)
    if dropout is not None:
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        model.config = replace(model.config, dropout=dropout)
    tlog = fit(
        model, corpus, config,
        train_kwargs={"repository": repository, "exclude_self": exclude_self},
        eval_kwargs={"repository": repository},
        on_epoch=on_epoch,
    )
    return model, tlog
