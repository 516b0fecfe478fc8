"""Phase-one model: transformer document encoder plus per-label sigmoid heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass
import hashlib

import numpy as np

from .numerics import ParamStore, ShapeError, Tape, Tensor, apply
from .text_data import CLS, PAD, Document


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "dim", "enc_layers", "enc_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.enc_heads:
            raise ValueError(f"dim {self.dim} is not divisible by enc_heads {self.enc_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class Ctx:
    """Per-forward state: the tape (None for inference) and a dropout RNG."""

    __slots__ = ("tape", "rng", "dropout")

    def __init__(self, tape: Tape | None = None, rng: np.random.Generator | None = None, dropout: float = 0.0):
        self.tape = tape
        self.rng = rng
        self.dropout = dropout if rng is not None else 0.0

    def __call__(self, prim, *inputs, **attrs) -> Tensor:
        return apply(prim, inputs, self.tape, **attrs)

    def drop(self, x: Tensor) -> Tensor:
        if not self.dropout:
            return x
        keep = 1.0 - self.dropout
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return self("mul", x, Tensor(mask))


# ---------------------------------------------------------------------------
# building blocks shared with the retrieval-augmented model


def linear(ctx: Ctx, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ctx("matmul", x, w)
    return ctx("add", y, b) if b is not None else y


def layer_norm(ctx: Ctx, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ctx("layer_norm", x, gain, bias)


def plain_norm(ctx: Ctx, x: Tensor) -> Tensor:
    d = x.shape[-1]
    return ctx("layer_norm", x, Tensor(np.ones(d, x.dtype)), Tensor(np.zeros(d, x.dtype)))


def init_attention(params: ParamStore, prefix: str, dim: int, rng: np.random.Generator,
                   zero_output: bool = False, out_scale: float = 1.0) -> None:
    std = dim**-0.5
    params.add(f"{prefix}.wq", rng.normal(0, std, (dim, dim)))
    params.add(f"{prefix}.bq", np.zeros(dim))
    params.add(f"{prefix}.wkv", rng.normal(0, std, (dim, 2 * dim)))
    # no key bias: softmax is shift invariant, so it would never receive a gradient
    params.add(f"{prefix}.bv", np.zeros(dim))
    wo = np.zeros((dim, dim)) if zero_output else rng.normal(0, std * out_scale, (dim, dim))
    params.add(f"{prefix}.wo", wo)
    params.add(f"{prefix}.bo", np.zeros(dim))


def attention(ctx: Ctx, params: ParamStore, prefix: str, xq: Tensor, xkv: Tensor, heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``xq`` is (B, Tq, D), ``xkv`` is (B, Tk, D); ``mask`` is an optional
    boolean (B, Tk) array marking valid keys.
    """
    B, Tq, D = xq.shape
    Tk = xkv.shape[1]
    dh = D // heads
    q = linear(ctx, xq, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    q = ctx("transpose", ctx("reshape", q, shape=(B, Tq, heads, dh)), axes=(0, 2, 1, 3))
    bv = params[f"{prefix}.bv"]
    kv = linear(ctx, xkv, params[f"{prefix}.wkv"], ctx("concat", Tensor(np.zeros(D, bv.dtype)), bv, axis=0))
    kv = ctx("reshape", kv, shape=(B, Tk, 2, heads, dh))
    k_t = ctx("transpose", ctx("take", kv, axis=2, index=0), axes=(0, 2, 3, 1))
    v = ctx("transpose", ctx("take", kv, axis=2, index=1), axes=(0, 2, 1, 3))
    scores = ctx("scale", ctx("matmul", q, k_t), factor=1.0 / np.sqrt(dh))
    if mask is not None:
        bias = np.where(mask, 0.0, -1e9).astype(scores.dtype)[:, None, None, :]
        scores = ctx("add", scores, Tensor(bias))
    weights = ctx("softmax", scores)
    out = ctx("matmul", weights, v)
    out = ctx("reshape", ctx("transpose", out, axes=(0, 2, 1, 3)), shape=(B, Tq, D))
    return linear(ctx, out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


# ---------------------------------------------------------------------------


def pad_batch(docs, max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = [len(d.token_ids) for d in docs]
    if min(lengths) < 1:
        raise ShapeError("documents must contain at least the classification token")
    if max(lengths) > max_seq_len:
        raise ShapeError(f"sequence of length {max(lengths)} exceeds max_seq_len {max_seq_len}")
    T = max(lengths)
    ids = np.full((len(docs), T), PAD, dtype=np.int64)
    for i, d in enumerate(docs):
        ids[i, : len(d.token_ids)] = d.token_ids
    return ids, ids != PAD


def targets_of(docs, n_labels: int, dtype=np.float32) -> np.ndarray:
    y = np.zeros((len(docs), n_labels), dtype=dtype)
    for i, d in enumerate(docs):
        y[i, list(d.labels)] = 1
    return y


class VanillaClassifier:
    """Embeddings, pre-norm transformer blocks, CLS pooling and L sigmoid heads.

    The pooled state passes through a parameter-free layer norm, so document
    vectors are standardized per row; any gain/bias is absorbed by the heads.
    """

    phase = "vanilla"

    def __init__(self, config: EncoderConfig, n_labels: int, vocab_fingerprint: str = "",
                 params: ParamStore | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.n_labels = n_labels
        self.vocab_fingerprint = vocab_fingerprint
        self.params = params if params is not None else self.init_params(config, n_labels, seed, dtype)

    @staticmethod
    def init_params(config: EncoderConfig, n_labels: int, seed: int, dtype=np.float32) -> ParamStore:
        rng = np.random.default_rng(seed)
        D, F = config.dim, config.ffn_dim
        p = ParamStore(dtype)
        p.add("embed.tokens", rng.normal(0, 0.5, (config.vocab_size, D)))
        p.add("embed.positions", rng.normal(0, 0.1, (config.max_seq_len, D)))
        resid = 1.0 / np.sqrt(2 * config.enc_layers)
        for i in range(config.enc_layers):
            pre = f"enc.{i}"
            p.add(f"{pre}.ln1.gain", np.ones(D))
            p.add(f"{pre}.ln1.bias", np.zeros(D))
            init_attention(p, f"{pre}.attn", D, rng, out_scale=resid)
            p.add(f"{pre}.ln2.gain", np.ones(D))
            p.add(f"{pre}.ln2.bias", np.zeros(D))
            p.add(f"{pre}.ffn.w1", rng.normal(0, D**-0.5, (D, F)))
            p.add(f"{pre}.ffn.b1", np.zeros(F))
            p.add(f"{pre}.ffn.w2", rng.normal(0, F**-0.5 * resid, (F, D)))
            p.add(f"{pre}.ffn.b2", np.zeros(D))
        p.add("head.weight", rng.normal(0, D**-0.5, (D, n_labels)))
        p.add("head.bias", np.full(n_labels, -2.0))
        return p

    # -- fingerprints -------------------------------------------------------

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith(("embed.", "enc."))]

    @property
    def fingerprint(self) -> str:
        """Hash of the encoder weights; identifies the repository encoder."""
        h = hashlib.sha256()
        for name in self.encoder_param_names():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def encode_ids(self, ctx: Ctx, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        cfg, p = self.config, self.params
        B, T = ids.shape
        if T > cfg.max_seq_len:
            raise ShapeError(f"sequence of length {T} exceeds max_seq_len {cfg.max_seq_len}")
        x = ctx("add", ctx("embedding", p["embed.tokens"], ids=ids),
                ctx("embedding", p["embed.positions"], ids=np.arange(T)))
        x = ctx.drop(x)
        for i in range(cfg.enc_layers):
            pre = f"enc.{i}"
            h = layer_norm(ctx, x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
            if i == cfg.enc_layers - 1:
                # only the CLS row is read out after the last block
                x = ctx("take", x, axis=1, index=slice(0, 1))
                hq = ctx("take", h, axis=1, index=slice(0, 1))
            else:
                hq = h
            a = attention(ctx, p, f"{pre}.attn", hq, h, cfg.enc_heads, mask)
            x = ctx("add", x, ctx.drop(a))
            h = layer_norm(ctx, x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
            f = linear(ctx, ctx("gelu", linear(ctx, h, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"])),
                       p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
            x = ctx("add", x, ctx.drop(f))
        return plain_norm(ctx, ctx("take", x, axis=1, index=0))

    def encode_docs(self, ctx: Ctx, docs) -> Tensor:
        ids, mask = pad_batch(docs, self.config.max_seq_len)
        return self.encode_ids(ctx, ids, mask)

    def head_logits(self, ctx: Ctx, dvec: Tensor) -> Tensor:
        if dvec.shape[-1] != self.config.dim:
            raise ShapeError(f"classify: expected vectors of width {self.config.dim}, got {dvec.shape}")
        return linear(ctx, dvec, self.params["head.weight"], self.params["head.bias"])

    def batch_logits(self, ctx: Ctx, docs, **_) -> Tensor:
        return self.head_logits(ctx, self.encode_docs(ctx, docs))

    def predict_proba(self, docs, batch_size: int = 64, **kwargs) -> np.ndarray:
        out = np.zeros((len(docs), self.n_labels), dtype=self.params.dtype)
        ctx = Ctx()
        for start in range(0, len(docs), batch_size):
            chunk = docs[start:start + batch_size]
            out[start:start + len(chunk)] = ctx("sigmoid", self.batch_logits(ctx, chunk, **kwargs)).data
        return out

    def encode_many(self, docs, batch_size: int = 64) -> np.ndarray:
        out = np.zeros((len(docs), self.config.dim), dtype=self.params.dtype)
        ctx = Ctx()
        for start in range(0, len(docs), batch_size):
            chunk = docs[start:start + batch_size]
            out[start:start + len(chunk)] = self.encode_docs(ctx, chunk).data
        return out


def encode(model: VanillaClassifier, document: Document) -> np.ndarray:
    """Document vector at the CLS position, evaluation mode."""
    if not document.token_ids or document.token_ids[0] != CLS:
        raise ShapeError("document must start with the classification token")
    return model.encode_docs(Ctx(), [document]).data[0]


def classify(model: VanillaClassifier, dvec) -> np.ndarray:
    dvec = np.asarray(dvec, dtype=model.params.dtype)
    if dvec.shape != (model.config.dim,):
        raise ShapeError(f"classify: expected dvec of shape ({model.config.dim},), got {dvec.shape}")
    ctx = Ctx()
    return ctx("sigmoid", model.head_logits(ctx, Tensor(dvec))).data


def bce_loss(logits, targets, tape: Tape | None = None, from_probabilities: bool = False) -> Tensor:
    """Mean binary cross-entropy over all entries, computed from logits.

    With ``from_probabilities`` the inputs are converted to logits first
    (clipped away from 0 and 1).
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if not np.isin(t, (0, 1)).all():
        raise ValueError("targets must be 0 or 1")
    if from_probabilities:
        p = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
        p = np.clip(p, 1e-12, 1 - 1e-12)
        logits = Tensor(np.log(p) - np.log1p(-p))
    z = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    return apply("bce_logits", (z, Tensor(t.astype(z.dtype))), tape)
