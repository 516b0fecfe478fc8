"""Phase-two model: cross-attention over retrieved neighbors, fused into the input vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import Ctx, EncoderConfig, VanillaClassifier, attention, init_attention, layer_norm
from .numerics import ParamStore, ShapeError, Tensor
from .retrieval import NeighborMode, Repository, RepositoryError
from .text_data import Document


@dataclass(frozen=True)
class CrossAttentionConfig:
    ca_layers: int = 2
    ca_heads: int = 2
    k: int = 4
    neighbor_mode: NeighborMode = NeighborMode.TEXT

    def __post_init__(self):
        object.__setattr__(self, "neighbor_mode", NeighborMode.parse(self.neighbor_mode))
        if self.ca_layers < 1 or self.ca_heads < 1:
            raise ValueError("ca_layers and ca_heads must be positive")
        if self.k < 1:
            raise ValueError("K must be at least 1")

    def validate(self, dim: int) -> None:
        if dim % self.ca_heads:
            raise ValueError(f"dim {dim} is not divisible by ca_heads {self.ca_heads}")

    def to_dict(self) -> dict:
        return {"ca_layers": self.ca_layers, "ca_heads": self.ca_heads, "k": self.k,
                "neighbor_mode": self.neighbor_mode.value}


class RAClassifier(VanillaClassifier):
    """Vanilla encoder and heads plus cross-attention blocks and a fusion norm.

    Each cross-attention block is pre-norm: ``h <- h + Wo MHA(LN(h), N)``
    with the single query row ``h`` starting at the encoder output and
    ``N`` the neighbor vectors.  ``Wo`` starts at zero, so a fresh model
    computes ``LN(E(x))`` whatever it retrieves.
    """

    phase = "ra"

    def __init__(self, config: EncoderConfig, n_labels: int, ca_config: CrossAttentionConfig,
                 source_fingerprint: str, vocab_fingerprint: str = "", params: ParamStore | None = None,
                 seed: int = 0, dtype=np.float32):
        ca_config.validate(config.dim)
        self.ca_config = ca_config
        self.source_fingerprint = source_fingerprint
        super().__init__(config, n_labels, vocab_fingerprint, params=params, seed=seed, dtype=dtype)

    @classmethod
    def from_vanilla(cls, vanilla: VanillaClassifier, ca_config: CrossAttentionConfig,
                     seed: int = 0) -> "RAClassifier":
        if vanilla.phase != "vanilla":
            raise ValueError("phase-two models start from a phase-one checkpoint")
        ca_config.validate(vanilla.config.dim)
        params = vanilla.params.copy()
        add_ra_params(params, vanilla.config.dim, vanilla.n_labels, ca_config, seed)
        return cls(vanilla.config, vanilla.n_labels, ca_config, vanilla.fingerprint,
                   vanilla.vocab_fingerprint, params=params)

    def init_params(self, config, n_labels, seed, dtype=np.float32):  # type: ignore[override]
        params = VanillaClassifier.init_params(config, n_labels, seed, dtype)
        add_ra_params(params, config.dim, n_labels, self.ca_config, seed)
        return params

    # -- pieces ---------------------------------------------------------------

    def check_repository(self, repository: Repository) -> None:
        if len(repository) == 0:
            raise RepositoryError("repository is empty")
        if repository.encoder_fingerprint != self.source_fingerprint:
            raise RepositoryError("repository was not built by this model's phase-one encoder")
        if repository.dim != self.config.dim:
            raise RepositoryError(f"repository dim {repository.dim} != model dim {self.config.dim}")

    def neighbor_inputs(self, ctx: Ctx, repository: Repository, idx: np.ndarray) -> Tensor:
        """(B, K, dim) neighbor vectors for an index array from ``Repository.search``."""
        mode = self.ca_config.neighbor_mode
        dtype = self.params.dtype
        if mode is NeighborMode.TEXT:
            return Tensor(repository.raw[idx].astype(dtype, copy=False))
        if not repository.has_labels[idx].all():
            bad = repository.ids[idx.reshape(-1)[~repository.has_labels[idx].reshape(-1)][0]]
            raise RepositoryError(f"entry {bad!r} has no labels; mode {mode.value!r} needs them")
        hot = Tensor(repository.labels[idx].astype(dtype))
        if mode is NeighborMode.TEXT_LABELS:
            hot = ctx("concat", Tensor(repository.raw[idx].astype(dtype, copy=False)), hot, axis=-1)
        return ctx("matmul", hot, self.params["nbr.proj"])

    def cross_attend(self, ctx: Ctx, query: Tensor, neighbors: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Context vector (B, dim): final query state minus the initial query."""
        B, D = query.shape
        if len(neighbors.shape) != 3:
            raise ShapeError(f"cross_attend: neighbors must be (B, K, dim), got {neighbors.shape}")
        if neighbors.shape[0] != B or neighbors.shape[2] != D:
            raise ShapeError(f"cross_attend: neighbors {neighbors.shape} do not match query {query.shape}")
        if neighbors.shape[1] < 1:
            raise ShapeError("cross_attend: at least one neighbor is required")
        p = self.params
        h0 = ctx("reshape", query, shape=(B, 1, D))
        h = h0
        for b in range(self.ca_config.ca_layers):
            pre = f"ca.{b}"
            hn = layer_norm(ctx, h, p[f"{pre}.ln.gain"], p[f"{pre}.ln.bias"])
            a = attention(ctx, p, f"{pre}.attn", hn, neighbors, self.ca_config.ca_heads, mask)
            h = ctx("add", h, ctx.drop(a))
        return ctx("reshape", ctx("sub", h, h0), shape=(B, D))

    def fuse(self, ctx: Ctx, dvec: Tensor, context: Tensor) -> Tensor:
        if dvec.shape != context.shape:
            raise ShapeError(f"fuse: {dvec.shape} vs {context.shape}")
        return layer_norm(ctx, ctx("add", dvec, context), self.params["fuse.ln.gain"], self.params["fuse.ln.bias"])

    def batch_logits(self, ctx: Ctx, docs, repository: Repository = None, k: int | None = None,
                     exclude_self: bool = False, neighbor_override=None) -> Tensor:
        if repository is None:
            raise RepositoryError("a repository is required for retrieval-augmented inference")
        self.check_repository(repository)
        k = k or self.ca_config.k
        dvec = self.encode_docs(ctx, docs)
        # hard retrieval on the live query: ranking carries no gradient
        exclude = [d.id for d in docs] if exclude_self else None
        if neighbor_override is not None:
            idx = np.asarray(neighbor_override)
            valid = np.ones(idx.shape, bool)
        else:
            idx, valid = repository.search(dvec.data, k, exclude)
        neighbors = self.neighbor_inputs(ctx, repository, idx)
        context = self.cross_attend(ctx, dvec, neighbors, None if valid.all() else valid)
        return self.head_logits(ctx, self.fuse(ctx, dvec, context))


    def predict_proba(self, docs, batch_size: int = 64, neighbor_override=None, **kwargs) -> np.ndarray:
        """As for the vanilla model; ``neighbor_override`` rows follow ``docs`` and are split with them."""
        if neighbor_override is None:
            return super().predict_proba(docs, batch_size, **kwargs)
        override = np.asarray(neighbor_override)
        if override.ndim != 2 or len(override) != len(docs):
            raise ShapeError(f"neighbor_override must be (documents, K), got {override.shape}")
        out = np.zeros((len(docs), self.n_labels), dtype=self.params.dtype)
        ctx = Ctx()
        for start in range(0, len(docs), batch_size):
            chunk = docs[start:start + batch_size]
            logits = self.batch_logits(ctx, chunk, neighbor_override=override[start:start + len(chunk)], **kwargs)
            out[start:start + len(chunk)] = ctx("sigmoid", logits).data
        return out


def add_ra_params(params: ParamStore, dim: int, n_labels: int, ca: CrossAttentionConfig, seed: int) -> None:
    rng = np.random.default_rng(seed + 7919)
    for b in range(ca.ca_layers):
        pre = f"ca.{b}"
        params.add(f"{pre}.ln.gain", np.ones(dim))
        params.add(f"{pre}.ln.bias", np.zeros(dim))
        init_attention(params, f"{pre}.attn", dim, rng, zero_output=True)
    params.add("fuse.ln.gain", np.ones(dim))
    params.add("fuse.ln.bias", np.zeros(dim))
    if ca.neighbor_mode is NeighborMode.LABELS:
        params.add("nbr.proj", rng.normal(0, 1.0, (n_labels, dim)))
    elif ca.neighbor_mode is NeighborMode.TEXT_LABELS:
        params.add("nbr.proj", rng.normal(0, (dim + n_labels) ** -0.5, (dim + n_labels, dim)))


def cross_attend(model: RAClassifier, query, neighbors) -> np.ndarray:
    """Context vector for a single query (dim,) over neighbors (K, dim)."""
    q = np.asarray(query, dtype=model.params.dtype)
    n = np.asarray(neighbors, dtype=model.params.dtype)
    if q.shape != (model.config.dim,):
        raise ShapeError(f"cross_attend: query must be ({model.config.dim},), got {q.shape}")
    if n.ndim != 2 or n.shape[1] != model.config.dim:
        raise ShapeError(f"cross_attend: neighbors must be (K, {model.config.dim}), got {n.shape}")
    if n.shape[0] == 0:
        raise ShapeError("cross_attend: at least one neighbor is required")
    return model.cross_attend(Ctx(), Tensor(q[None]), Tensor(n[None])).data[0]


def fuse(model: RAClassifier, dvec, context) -> np.ndarray:
    d = np.asarray(dvec, dtype=model.params.dtype)
    c = np.asarray(context, dtype=model.params.dtype)
    if d.shape != (model.config.dim,) or c.shape != d.shape:
        raise ShapeError(f"fuse: expected two ({model.config.dim},) vectors, got {d.shape} and {c.shape}")
    return model.fuse(Ctx(), Tensor(d), Tensor(c)).data


def ra_forward(model: RAClassifier, repository: Repository, document: Document, k: int | None = None,
               exclude_self: bool = False) -> np.ndarray:
    """Label probabilities (L,) for one document, evaluation mode."""
    if k is not None and k < 1:
        raise ValueError("K must be at least 1")
    ctx = Ctx()
    logits = model.batch_logits(ctx, [document], repository=repository, k=k, exclude_self=exclude_self)
    return ctx("sigmoid", logits).data[0]


def random_neighbor_proba(model: RAClassifier, repository: Repository, docs, k: int | None = None,
                          seed: int = 0, batch_size: int = 64) -> np.ndarray:
    """Probabilities with each document's K neighbors replaced by uniform random entries.

    Ablation only: comparing against ``predict_proba`` shows how much the
    trained model depends on what retrieval returns.
    """
    k = min(k or model.ca_config.k, len(repository))
    rng = np.random.default_rng(seed)
    picks = np.stack([rng.choice(len(repository), size=k, replace=False) for _ in docs])
    return model.predict_proba(docs, batch_size, repository=repository, neighbor_override=picks)
