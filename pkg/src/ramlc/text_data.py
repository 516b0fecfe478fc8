"""Corpora, vocabularies, tokenization and the synthetic Zipfian generator."""
from __future__ import annotations

import functools
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[CLS]")

SPLITS = ("train", "dev", "test")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, punctuation and underscores."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise DataError("vocab must start with the reserved tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise DataError("vocab tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    @classmethod
    def build(cls, texts, min_count: int = 1) -> "Vocab":
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(RESERVED + tuple(w for w in words if w not in RESERVED))

    def encode(self, text: str, max_seq_len: int) -> tuple[int, ...]:
        if max_seq_len < 1:
            raise DataError("max_seq_len must be at least 1")
        ids = [self.id(t) for t in tokenize(text)]
        return (CLS, *ids[: max_seq_len - 1])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


@dataclass(frozen=True, eq=False)
class Document:
    id: str
    text: str
    token_ids: tuple[int, ...]
    labels: frozenset[int]

    def multi_hot(self, n_labels: int, dtype=np.float32) -> np.ndarray:
        v = np.zeros(n_labels, dtype=dtype)
        v[list(self.labels)] = 1
        return v


@dataclass(eq=False)
class Corpus:
    labels: list[str]
    vocab: Vocab
    train: list[Document]
    dev: list[Document]
    test: list[Document]
    unlabeled: list[Document] = field(default_factory=list)
    max_seq_len: int = 256
    name: str = "corpus"

    def __post_init__(self):
        if not self.train:
            raise DataError("train split is empty")
        seen = set()
        for doc in self.all_documents():
            if doc.id in seen:
                raise DataError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)
            if doc.labels and max(doc.labels) >= len(self.labels):
                raise DataError(f"document {doc.id!r} has a label outside the catalog")
            if not doc.token_ids or doc.token_ids[0] != CLS:
                raise DataError(f"document {doc.id!r} does not start with the classification token")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> list[Document]:
        if name == "unlabeled":
            return self.unlabeled
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_documents(self):
        for name in SPLITS:
            yield from getattr(self, name)
        yield from self.unlabeled

    def subsample_train(self, fraction: float, seed: int) -> "Corpus":
        """Keep a seeded random ``fraction`` of the train split; dev/test untouched."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if fraction == 1:
            return self
        n = max(1, int(round(fraction * len(self.train))))
        keep = np.sort(np.random.default_rng(seed).choice(len(self.train), size=n, replace=False))
        return replace(self, train=[self.train[i] for i in keep], name=f"{self.name}@{fraction:g}")

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.labels).encode("utf-8"))
        for doc in self.all_documents():
            h.update(doc.id.encode("utf-8"))
            h.update(np.asarray(doc.token_ids, dtype=np.int64).tobytes())
            h.update(np.asarray(sorted(doc.labels), dtype=np.int64).tobytes())
        return h.hexdigest()


def _read_records(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if (
                not isinstance(rec, dict)
                or not isinstance(rec.get("id"), str)
                or not isinstance(rec.get("text"), str)
                or not isinstance(rec.get("labels"), list)
                or not all(isinstance(x, str) for x in rec["labels"])
            ):
                raise DataError(f"{path}:{lineno}: malformed record, expected id/text/labels")
            records.append(rec)
    return records


def make_documents(records, label_index: dict[str, int], vocab: Vocab, max_seq_len: int, where: str = ""):
    docs = []
    for rec in records:
        ids = set()
        for name in rec["labels"]:
            if name not in label_index:
                raise DataError(f"{where}unknown label {name!r} in document {rec['id']!r}")
            ids.add(label_index[name])
        docs.append(Document(rec["id"], rec["text"], vocab.encode(rec["text"], max_seq_len), frozenset(ids)))
    return docs


def load_corpus(path, vocab: Vocab | None = None, max_seq_len: int = 256) -> Corpus:
    """Read a corpus directory.

    Expected layout: ``labels.txt`` (one label name per line, order defines
    ids), ``train.jsonl``, ``dev.jsonl``, ``test.jsonl`` and optionally
    ``unlabeled.jsonl``.  When ``vocab`` is None one is built from the train
    split only.
    """
    root = Path(path)
    labels = [ln.strip() for ln in (root / "labels.txt").read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(set(labels)) != len(labels):
        raise DataError("label catalog contains duplicates")
    label_index = {name: i for i, name in enumerate(labels)}

    raw = {}
    for name in SPLITS:
        raw[name] = _read_records(root / f"{name}.jsonl")
    if not raw["train"]:
        raise DataError("train split is empty")
    pool_path = root / "unlabeled.jsonl"
    raw["unlabeled"] = _read_records(pool_path) if pool_path.exists() else []
    for rec in raw["unlabeled"]:
        if rec["labels"]:
            raise DataError(f"unlabeled document {rec['id']!r} carries labels")

    if vocab is None:
        vocab = Vocab.build(rec["text"] for rec in raw["train"])
    splits = {
        name: make_documents(recs, label_index, vocab, max_seq_len, where=f"{name}: ")
        for name, recs in raw.items()
    }
    return Corpus(labels, vocab, splits["train"], splits["dev"], splits["test"], splits["unlabeled"],
                  max_seq_len=max_seq_len, name=root.name)


def write_corpus(corpus: Corpus, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.txt").write_text("\n".join(corpus.labels) + "\n", encoding="utf-8")
    parts = {name: getattr(corpus, name) for name in SPLITS}
    if corpus.unlabeled:
        parts["unlabeled"] = corpus.unlabeled
    for name, docs in parts.items():
        with open(root / f"{name}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for doc in docs:
                rec = {"id": doc.id, "text": doc.text, "labels": [corpus.labels[i] for i in sorted(doc.labels)]}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def label_frequencies(corpus: Corpus) -> dict[int, int]:
    """Train-split document count per label id (zero for labels never seen)."""
    counts = dict.fromkeys(range(corpus.n_labels), 0)
    for doc in corpus.train:
        for label in doc.labels:
            counts[label] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthParams:
    n_labels: int = 50
    zipf_exponent: float = 1.2
    n_train: int = 2000
    n_dev: int = 250
    n_test: int = 250
    n_unlabeled: int = 0
    doc_len: tuple[int, int] = (24, 48)
    vocab_size: int = 1200
    pool_size: int = 8
    signal_strength: float = 0.3
    labels_extra_trials: int = 4
    labels_extra_p: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        if self.n_labels < 1:
            raise ValueError("n_labels must be positive")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be positive")
        if min(self.n_train, self.n_dev, self.n_test) < 1 or self.n_unlabeled < 0:
            raise ValueError("split sizes must be at least 1")
        lo, hi = self.doc_len
        if not 1 <= lo <= hi:
            raise ValueError("doc_len must satisfy 1 <= min <= max")
        if self.pool_size < 1:
            raise ValueError("pool_size must be positive")
        if self.vocab_size <= 3 + self.n_labels * self.pool_size:
            raise ValueError("vocab_size must exceed 3 + n_labels * pool_size")
        if not 0 < self.signal_strength <= 1:
            raise ValueError("signal_strength must lie in (0, 1]")
        if not 0 <= self.labels_extra_p <= 1 or self.labels_extra_trials < 0:
            raise ValueError("labels-per-doc parameters out of range")


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


@functools.lru_cache(maxsize=32)
def label_draw_weights(n_labels: int, exponent: float, extra_trials: int, extra_p: float,
                       iterations: int = 60, n_sim: int = 40000) -> np.ndarray:
    """Per-draw label weights whose without-replacement inclusion rates are Zipfian.

    Drawing several distinct labels per document flattens the head of the
    distribution; the weights are rescaled by fixed-point iteration against
    simulated inclusion rates (fixed noise, so the result is deterministic).
    """
    rng = np.random.default_rng(12345)
    ks = np.minimum(n_labels, 1 + rng.binomial(extra_trials, extra_p, size=n_sim))
    gumbel = rng.gumbel(size=(n_sim, n_labels))
    target = zipf_weights(n_labels, exponent) * ks.mean()
    target = np.minimum(target, 1.0)
    rank_of = np.arange(n_labels)[None, :]
    w = zipf_weights(n_labels, exponent)
    for _ in range(iterations):
        keys = np.log(w)[None, :] + gumbel
        order = np.argsort(-keys, axis=1)
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, rank_of.repeat(n_sim, axis=0), axis=1)
        achieved = (ranks < ks[:, None]).mean(axis=0)
        w = w * (target / np.maximum(achieved, 1e-12))
        w = w / w.sum()
    return w


def draw_labels(rng: np.random.Generator, weights: np.ndarray, k: int) -> np.ndarray:
    # Gumbel top-k: same law as successive weighted sampling without replacement
    keys = np.log(weights) + rng.gumbel(size=weights.shape[0])
    return np.sort(np.argpartition(-keys, k - 1)[:k])


def _word(i: int) -> str:
    return f"w{i:05d}"


def synth_generate(params: SynthParams = SynthParams()) -> Corpus:
    """Sample a multi-label corpus whose label marginals follow a Zipf law.

    Label ``l`` (rank ``l + 1``) owns a disjoint pool of ``pool_size`` word
    types.  A document draws ``1 + Binomial(extra_trials, extra_p)`` distinct
    labels with Zipf weights; each of its tokens comes, with probability
    ``signal_strength``, from the pool of one of its labels and otherwise
    from the shared background vocabulary.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    L = params.n_labels
    n_pool_words = L * params.pool_size
    n_background = params.vocab_size - 3 - n_pool_words
    weights = label_draw_weights(L, params.zipf_exponent, params.labels_extra_trials, params.labels_extra_p)
    labels = [f"label_{i:03d}" for i in range(L)]

    def sample_doc(idx: str, labelled: bool):
        k = min(L, 1 + rng.binomial(params.labels_extra_trials, params.labels_extra_p))
        chosen = draw_labels(rng, weights, k)
        n_tok = int(rng.integers(params.doc_len[0], params.doc_len[1] + 1))
        from_pool = rng.random(n_tok) < params.signal_strength
        which = chosen[rng.integers(0, k, size=n_tok)]
        pool_tok = which * params.pool_size + rng.integers(0, params.pool_size, size=n_tok)
        bg_tok = n_pool_words + rng.integers(0, n_background, size=n_tok)
        toks = np.where(from_pool, pool_tok, bg_tok)
        text = " ".join(_word(int(t)) for t in toks)
        return {"id": idx, "text": text, "labels": [labels[i] for i in chosen] if labelled else []}

    raw = {}
    for name, n in (("train", params.n_train), ("dev", params.n_dev), ("test", params.n_test),
                    ("unlabeled", params.n_unlabeled)):
        raw[name] = [sample_doc(f"{name}-{i:06d}", name != "unlabeled") for i in range(n)]

    vocab = Vocab.build(rec["text"] for rec in raw["train"])
    max_seq_len = max(256, params.doc_len[1] + 1)
    index = {name: i for i, name in enumerate(labels)}
    docs = {name: make_documents(recs, index, vocab, max_seq_len) for name, recs in raw.items()}
    return Corpus(labels, vocab, docs["train"], docs["dev"], docs["test"], docs["unlabeled"],
                  max_seq_len=max_seq_len, name=f"synth-s{params.seed}")
