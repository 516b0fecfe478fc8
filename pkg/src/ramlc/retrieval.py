"""Static repository of cached document vectors with exact cosine top-K."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .text_data import Corpus, Document

REPO_MAGIC = b"RAMLREPO"
REPO_VERSION = 1


class RepositoryError(ValueError):
    pass


class NeighborMode(str, enum.Enum):
    TEXT = "text"
    LABELS = "labels"
    TEXT_LABELS = "text+labels"

    @property
    def needs_labels(self) -> bool:
        return self is not NeighborMode.TEXT

    @classmethod
    def parse(cls, value) -> "NeighborMode":
        if isinstance(value, cls):
            return value
        aliases = {"textlabels": "text+labels", "text_labels": "text+labels"}
        return cls(aliases.get(str(value).lower(), str(value).lower()))


@dataclass(frozen=True, eq=False)
class RepositoryEntry:
    id: str
    vector: np.ndarray
    key: np.ndarray
    labels: np.ndarray | None


def _rowwise_dot(a: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """``a @ b_t`` summed one coordinate at a time in float64.

    BLAS kernels may round a row differently depending on where it falls in
    the tiling, which would break exact ties between equal vectors.  A fixed
    per-coordinate order gives every entry the same sequence of operations.
    """
    out = np.zeros((a.shape[0], b_t.shape[1]))
    for j in range(a.shape[1]):
        out += a[:, j:j + 1] * b_t[j]
    return out


def _row_norms(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        sq += x[:, j] * x[:, j]
    return np.sqrt(sq)


class Repository:
    """Cached phase-one document vectors, ordered by document id.

    ``raw`` keeps the encoder outputs the model attends over; ``keys`` holds
    unit-normalized copies used only for ranking.
    """

    def __init__(self, ids, raw, labels, has_labels, encoder_fingerprint: str,
                 corpus_id: str = "", includes_unlabeled: bool = False, keys=None):
        ids = list(ids)
        raw = np.asarray(raw, dtype=np.float32)
        if raw.ndim != 2 or raw.shape[0] != len(ids):
            raise RepositoryError("raw vectors must be (entries, dim)")
        if len(set(ids)) != len(ids):
            raise RepositoryError("repository ids must be unique")
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self.ids = [ids[i] for i in order]
        self.raw = raw[order]
        self.labels = np.asarray(labels, dtype=np.uint8)[order]
        self.has_labels = np.asarray(has_labels, dtype=bool)[order]
        if keys is None:
            norms = _row_norms(self.raw)
            bad = np.flatnonzero(norms == 0)
            if bad.size:
                raise RepositoryError(f"document {self.ids[bad[0]]!r} has a zero representation")
            keys = self.raw / norms[:, None]
        else:
            keys = np.asarray(keys)[order]
        self.keys = np.asarray(keys, dtype=np.float32)
        self._keys64_t = np.ascontiguousarray(self.keys.T, dtype=np.float64)
        self.index = {doc_id: i for i, doc_id in enumerate(self.ids)}
        self.encoder_fingerprint = encoder_fingerprint
        self.corpus_id = corpus_id
        self.includes_unlabeled = includes_unlabeled

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.raw.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def __getitem__(self, i: int) -> RepositoryEntry:
        return RepositoryEntry(self.ids[i], self.raw[i], self.keys[i],
                               self.labels[i] if self.has_labels[i] else None)

    def entry(self, doc_id: str) -> RepositoryEntry:
        return self[self.index[doc_id]]

    # -- queries ------------------------------------------------------------

    def similarities(self, queries) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise RepositoryError(f"query width {q.shape[1]} does not match repository dim {self.dim}")
        norms = _row_norms(q)
        if (norms == 0).any():
            raise RepositoryError("query vector is zero")
        return _rowwise_dot(q / norms[:, None], self._keys64_t)

    def search(self, queries, k: int, exclude_ids=None) -> tuple[np.ndarray, np.ndarray]:
        """Top-``k`` entry indices for each query row.

        Returns ``(indices, valid)``, both (queries, min(k, len)); ``valid``
        is False where exclusion left fewer than ``k`` candidates.
        """
        if k < 1:
            raise RepositoryError("K must be at least 1")
        if len(self) == 0:
            raise RepositoryError("repository is empty")
        sims = self.similarities(queries)
        n_q = sims.shape[0]
        if exclude_ids is not None:
            for row, doc_id in enumerate(exclude_ids):
                j = self.index.get(doc_id) if doc_id is not None else None
                if j is not None:
                    sims[row, j] = -np.inf
        width = min(k, len(self))
        # entries are id-sorted, so a stable sort on -similarity breaks ties by id
        order = np.argsort(-sims, axis=1, kind="stable")[:, :width]
        valid = np.isfinite(np.take_along_axis(sims, order, axis=1))
        return order, valid.reshape(n_q, width)

    def topk(self, query, k: int, exclude_id: str | None = None) -> list[tuple[RepositoryEntry, float]]:
        query = np.asarray(query)
        if query.shape != (self.dim,):
            raise RepositoryError(f"query must have shape ({self.dim},), got {query.shape}")
        idx, valid = self.search(query[None, :], k, [exclude_id])
        sims = self.similarities(query[None, :])[0]
        return [(self[i], float(sims[i])) for i, ok in zip(idx[0], valid[0]) if ok]

    # -- serialization --------------------------------------------------------

    def save(self, path) -> None:
        """Binary layout (little-endian):

        magic ``RAMLREPO``, u32 version, u32 dim, u32 entries, u32 labels,
        u8 flags (bit0 = includes unlabeled), then length-prefixed (u16)
        UTF-8 strings for the encoder fingerprint and corpus id.  Each entry:
        u16 id length + id bytes, f32[dim] raw vector, f32[dim] key, u8
        has-labels, and if set a ceil(labels/8)-byte bitmap (bit i of the
        little-endian bit order marks label i).
        """
        with open(path, "wb") as fh:
            fh.write(REPO_MAGIC)
            fh.write(struct.pack("<IIIIB", REPO_VERSION, self.dim, len(self), self.n_labels,
                                 int(self.includes_unlabeled)))
            for s in (self.encoder_fingerprint, self.corpus_id):
                b = s.encode("utf-8")
                fh.write(struct.pack("<H", len(b)) + b)
            for i, doc_id in enumerate(self.ids):
                b = doc_id.encode("utf-8")
                fh.write(struct.pack("<H", len(b)) + b)
                fh.write(self.raw[i].astype("<f4").tobytes())
                fh.write(self.keys[i].astype("<f4").tobytes())
                fh.write(struct.pack("<B", int(self.has_labels[i])))
                if self.has_labels[i]:
                    fh.write(np.packbits(self.labels[i], bitorder="little").tobytes())

    @classmethod
    def load(cls, path) -> "Repository":
        buf = Path(path).read_bytes()
        if buf[:8] != REPO_MAGIC:
            raise RepositoryError(f"{path}: not a repository file")
        pos = 8
        version, dim, count, n_labels, flags = struct.unpack_from("<IIIIB", buf, pos)
        pos += struct.calcsize("<IIIIB")
        if version != REPO_VERSION:
            raise RepositoryError(f"{path}: unsupported repository version {version}")

        def read_str():
            nonlocal pos
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            s = buf[pos:pos + n].decode("utf-8")
            pos += n
            return s

        fingerprint, corpus_id = read_str(), read_str()
        nbytes = (n_labels + 7) // 8
        ids, raw, keys = [], np.zeros((count, dim), np.float32), np.zeros((count, dim), np.float32)
        labels = np.zeros((count, n_labels), np.uint8)
        has = np.zeros(count, bool)
        for i in range(count):
            ids.append(read_str())
            raw[i] = np.frombuffer(buf, "<f4", dim, pos)
            pos += 4 * dim
            keys[i] = np.frombuffer(buf, "<f4", dim, pos)
            pos += 4 * dim
            has[i] = buf[pos]
            pos += 1
            if has[i]:
                bits = np.frombuffer(buf, np.uint8, nbytes, pos)
                labels[i] = np.unpackbits(bits, count=n_labels, bitorder="little")
                pos += nbytes
        return cls(ids, raw, labels, has, fingerprint, corpus_id, bool(flags & 1), keys=keys)


def build_repository(model, corpus: Corpus, include_unlabeled: bool = False, batch_size: int = 64) -> Repository:
    """Encode the train split (plus the unlabeled pool if asked) with a phase-one model."""
    if getattr(model, "phase", None) != "vanilla":
        raise RepositoryError("repository must be built from a phase-one (vanilla) model")
    if model.vocab_fingerprint and model.vocab_fingerprint != corpus.vocab.fingerprint:
        raise RepositoryError("vocab fingerprint of the corpus does not match the model")
    docs: list[Document] = list(corpus.train)
    if include_unlabeled:
        docs += corpus.unlabeled
    raw = model.encode_many(docs, batch_size)
    labels = np.zeros((len(docs), corpus.n_labels), np.uint8)
    has = np.zeros(len(docs), bool)
    for i, d in enumerate(docs):
        if d.labels:
            labels[i, list(d.labels)] = 1
            has[i] = True
    try:
        return Repository([d.id for d in docs], raw, labels, has, model.fingerprint,
                          corpus.name, include_unlabeled)
    except RepositoryError as exc:
        raise RepositoryError(f"degenerate encoder: {exc}") from None


def neighbor_representation(entry: RepositoryEntry, mode, projection=None) -> np.ndarray:
    """Vector handed to cross-attention for one retrieved entry.

    ``projection`` is the (L, dim) matrix for label mode or the
    (dim + L, dim) matrix for text+labels mode.
    """
    mode = NeighborMode.parse(mode)
    if mode is NeighborMode.TEXT:
        return entry.vector
    if entry.labels is None:
        raise RepositoryError(f"entry {entry.id!r} has no labels; mode {mode.value!r} needs them")
    proj = np.asarray(projection)
    hot = entry.labels.astype(proj.dtype)
    x = hot if mode is NeighborMode.LABELS else np.concatenate([entry.vector.astype(proj.dtype), hot])
    if proj.shape[0] != x.shape[0]:
        raise RepositoryError(f"projection expects inputs of width {proj.shape[0]}, got {x.shape[0]}")
    return x @ proj


def overlap_ratio(a: frozenset, b: frozenset) -> float:
    return len(a & b) / min(len(a), len(b))


def label_overlap(train_docs, repository: Repository, k: int, query_vectors) -> float:
    """Mean over train documents of the mean normalized label overlap with their top-K.

    ``query_vectors`` holds one encoder output per train document (row
    aligned).  The document itself is excluded from its own neighbor set.
    """
    if any(not d.labels for d in train_docs):
        empty = next(d.id for d in train_docs if not d.labels)
        raise RepositoryError(f"document {empty!r} has an empty label set")
    idx, valid = repository.search(np.asarray(query_vectors), k, [d.id for d in train_docs])
    total = 0.0
    for doc, row, ok in zip(train_docs, idx, valid):
        li = doc.labels
        acc = 0.0
        for j in row[ok]:
            lj = frozenset(np.flatnonzero(repository.labels[j]).tolist())
            if not repository.has_labels[j]:
                raise RepositoryError(f"neighbor {repository.ids[j]!r} is unlabeled")
            acc += overlap_ratio(li, lj)
        total += acc / k
    return total / len(train_docs)


def random_label_overlap(train_docs, repository: Repository, k: int, seed: int = 0) -> float:
    """Label overlap when each document gets K uniformly random other entries."""
    rng = np.random.default_rng(seed)
    labelled = np.flatnonzero(repository.has_labels)
    total = 0.0
    for doc in train_docs:
        self_idx = repository.index.get(doc.id)
        pool = labelled[labelled != self_idx] if self_idx is not None else labelled
        picks = rng.choice(pool, size=min(k, pool.size), replace=False)
        acc = sum(overlap_ratio(doc.labels, frozenset(np.flatnonzero(repository.labels[j]).tolist()))
                  for j in picks)
        total += acc / k
    return total / len(train_docs)


def model_label_overlap(model, corpus: Corpus, repository: Repository, k: int = 4) -> float:
    queries = model.encode_many(corpus.train)
    return label_overlap(corpus.train, repository, k, queries)
