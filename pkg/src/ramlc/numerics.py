"""Dense tensors with a recording tape and reverse-mode differentiation.

Every differentiable operation the models use goes through :func:`apply`,
which evaluates a registered primitive on numpy arrays and, when a
:class:`Tape` is supplied, appends a record so :func:`backward` can later
walk the computation in reverse.  Passing ``tape=None`` gives a plain
forward pass with no bookkeeping (used for inference).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    pass


class UnsupportedPrimitiveError(KeyError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} dtype={self.dtype}>"


@dataclass
class Record:
    prim: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    saved: Any


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> list[np.ndarray]:
        """Re-run every record forward from its recorded inputs."""
        outs = []
        for rec in self.records:
            prim = PRIMITIVES[rec.prim]
            out, _ = prim.forward([t.data for t in rec.inputs], rec.attrs)
            outs.append(out)
        return outs


class ParamStore:
    """Named parameters plus a gradient buffer for each."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            t = self._params[k]
            if v.shape != t.data.shape:
                raise ShapeError(f"parameter {k!r}: expected {t.data.shape}, got {v.shape}")
            t.data = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, t in self._params.items():
            out.add(k, t.data)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._params.values())


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[[list, dict], tuple[np.ndarray, Any]]
    backward: Callable[[np.ndarray, list, np.ndarray, Any, dict], list]
    check: Callable[[list, dict], None] | None = None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, backward, check=None):
    PRIMITIVES[name] = Primitive(name, forward, backward, check)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name):
    def check(xs, attrs):
        try:
            np.broadcast_shapes(*(x.shape for x in xs))
        except ValueError:
            raise ShapeError(
                f"{name}: cannot broadcast extents {' and '.join(str(x.shape) for x in xs)}"
            ) from None
    return check


_register(
    "add",
    lambda xs, a: (xs[0] + xs[1], None),
    lambda g, xs, out, s, a: [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)],
    _check_broadcast("add"),
)
_register(
    "sub",
    lambda xs, a: (xs[0] - xs[1], None),
    lambda g, xs, out, s, a: [_unbroadcast(g, xs[0].shape), -_unbroadcast(g, xs[1].shape)],
    _check_broadcast("sub"),
)
_register(
    "mul",
    lambda xs, a: (xs[0] * xs[1], None),
    lambda g, xs, out, s, a: [
        _unbroadcast(g * xs[1], xs[0].shape),
        _unbroadcast(g * xs[0], xs[1].shape),
    ],
    _check_broadcast("mul"),
)
_register(
    "scale",
    lambda xs, a: (xs[0] * xs[0].dtype.type(a["factor"]), None),
    lambda g, xs, out, s, a: [g * g.dtype.type(a["factor"])],
)


def _matmul_check(xs, attrs):
    a, b = xs
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 1 and >= 2, got {a.shape} and {b.shape}")
    if a.ndim == 1 and b.ndim != 2:
        raise ShapeError(f"matmul: vector operand needs a 2-d right operand, got {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None


def _matmul_forward(xs, attrs):
    a, b = xs
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:]), None
    return a @ b, None


def _matmul_backward(g, xs, out, s, attrs):
    a, b = xs
    if a.ndim == 1:
        return [g @ b.T, np.outer(a, g)]
    if a.ndim > 2 and b.ndim == 2:
        g2 = g.reshape(-1, g.shape[-1])
        return [(g2 @ b.T).reshape(a.shape), a.reshape(-1, a.shape[-1]).T @ g2]
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return [ga, gb]


_register("matmul", _matmul_forward, _matmul_backward, _matmul_check)


def _sigmoid(x):
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


_register(
    "sigmoid",
    lambda xs, a: (_sigmoid(xs[0]), None),
    lambda g, xs, out, s, a: [g * out * (1 - out)],
)


def _softmax_forward(xs, attrs):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


_register(
    "softmax",
    _softmax_forward,
    lambda g, xs, out, s, a: [out * (g - (g * out).sum(axis=-1, keepdims=True))],
)

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_forward(xs, attrs):
    x = xs[0]
    c = x.dtype.type(_GELU_C)
    inner = c * (x + x.dtype.type(0.044715) * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1 + t), t


def _gelu_backward(g, xs, out, t, attrs):
    x = xs[0]
    c = x.dtype.type(_GELU_C)
    dinner = c * (1 + x.dtype.type(3 * 0.044715) * (x * x))
    return [g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner)]


_register("gelu", _gelu_forward, _gelu_backward)


LN_EPS = 1e-5


def _ln_check(xs, attrs):
    x, gain, bias = xs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape} and {bias.shape}"
        )


def _ln_forward(xs, attrs):
    x, gain, bias = xs
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + x.dtype.type(attrs.get("eps", LN_EPS)))
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _ln_backward(g, xs, out, saved, attrs):
    x, gain, bias = xs
    xhat, inv = saved
    gx_hat = g * gain
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
    )
    red = tuple(range(g.ndim - 1))
    return [gx, (g * xhat).sum(axis=red), g.sum(axis=red)]


_register("layer_norm", _ln_forward, _ln_backward, _ln_check)


def _embed_check(xs, attrs):
    table = xs[0]
    ids = np.asarray(attrs["ids"])
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")


def _embed_backward(g, xs, out, s, attrs):
    table = xs[0]
    ids = np.asarray(attrs["ids"]).reshape(-1)
    gt = np.zeros_like(table)
    np.add.at(gt, ids, g.reshape(-1, table.shape[1]))
    return [gt]


_register(
    "embedding",
    lambda xs, a: (xs[0][np.asarray(a["ids"])], None),
    _embed_backward,
    _embed_check,
)


def _concat_check(xs, attrs):
    axis = attrs.get("axis", -1)
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref):
            raise ShapeError(f"concat: rank mismatch {tuple(ref)} vs {tuple(other)}")
        ax = axis % len(ref)
        if other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: extents {tuple(ref)} and {tuple(other)} differ off axis {axis}")


def _concat_backward(g, xs, out, s, attrs):
    axis = attrs.get("axis", -1)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return np.split(g, cuts, axis=axis)


_register(
    "concat",
    lambda xs, a: (np.concatenate(xs, axis=a.get("axis", -1)), None),
    _concat_backward,
    _concat_check,
)


def _reduce_backward(mean):
    def backward(g, xs, out, s, attrs):
        x = xs[0]
        axis = attrs.get("axis")
        if axis is None:
            n = x.size
            gx = np.broadcast_to(g, x.shape)
        else:
            n = x.shape[axis]
            gx = np.broadcast_to(np.expand_dims(g, axis), x.shape)
        if mean:
            gx = gx / x.dtype.type(n)
        return [np.array(gx, dtype=x.dtype)]
    return backward


_register(
    "mean",
    lambda xs, a: (np.asarray(xs[0].mean(axis=a.get("axis")), dtype=xs[0].dtype), None),
    _reduce_backward(True),
)
_register(
    "sum",
    lambda xs, a: (np.asarray(xs[0].sum(axis=a.get("axis")), dtype=xs[0].dtype), None),
    _reduce_backward(False),
)

_register(
    "reshape",
    lambda xs, a: (xs[0].reshape(a["shape"]), None),
    lambda g, xs, out, s, a: [g.reshape(xs[0].shape)],
)
_register(
    "transpose",
    lambda xs, a: (np.transpose(xs[0], a["axes"]), None),
    lambda g, xs, out, s, a: [np.transpose(g, np.argsort(a["axes"]))],
)


def _take_backward(g, xs, out, s, attrs):
    gx = np.zeros_like(xs[0])
    idx = [slice(None)] * xs[0].ndim
    idx[attrs["axis"]] = attrs["index"]
    gx[tuple(idx)] = g
    return [gx]


def _take_forward(xs, attrs):
    idx = [slice(None)] * xs[0].ndim
    idx[attrs["axis"]] = attrs["index"]
    return xs[0][tuple(idx)], None


# index is an int (drops the axis) or a slice (keeps it)
_register("take", _take_forward, _take_backward)


def _bce_check(xs, attrs):
    z, t = xs
    if z.shape != t.shape:
        raise ShapeError(f"bce_logits: logits {z.shape} vs targets {t.shape}")


def _bce_forward(xs, attrs):
    z, t = xs
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return np.asarray(loss.mean(), dtype=z.dtype), None


def _bce_backward(g, xs, out, s, attrs):
    z, t = xs
    gz = g * (_sigmoid(z) - t) / z.dtype.type(z.size)
    return [gz, None]


_register("bce_logits", _bce_forward, _bce_backward, _bce_check)


# ---------------------------------------------------------------------------


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def apply(primitive: str, inputs, tape: Tape | None = None, **attrs) -> Tensor:
    """Evaluate ``primitive`` on ``inputs``; record it on ``tape`` if given."""
    try:
        prim = PRIMITIVES[primitive]
    except KeyError:
        raise UnsupportedPrimitiveError(f"unsupported primitive {primitive!r}") from None
    inputs = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in inputs]
    if prim.check is not None:
        prim.check(arrays, attrs)
    out_data, saved = prim.forward(arrays, attrs)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None:
        tape.records.append(Record(primitive, inputs, out, attrs, saved))
    return out


def backward(tape: Tape, loss: Tensor, params: ParamStore, accumulate: bool = False) -> ParamStore:
    """Fill ``params.grads`` with d(loss)/d(param).

    Unless ``accumulate`` is set the gradient buffers are zeroed first, so
    parameters the loss does not reach end up with zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not any(rec.output is loss for rec in reversed(tape.records)):
        raise ValueError("backward: loss was not produced on this tape")
    if not accumulate:
        params.zero_grad()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[rec.prim]
        in_grads = prim.backward(g, [t.data for t in rec.inputs], rec.output.data, rec.saved, rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    for name, t in params.items():
        g = grads.get(id(t))
        if g is not None:
            params.grads[name] += g
    return params


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    forward_fn: Callable[[ParamStore, Tape | None], Tensor],
    params: ParamStore,
    probe_count: int = 10,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``forward_fn(params, tape)`` must return a scalar loss and be a pure
    function of the parameter values.  ``probe_count`` coordinates are
    sampled per parameter (all of them if the parameter is smaller).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    first = forward_fn(params, None).data.copy()
    second = forward_fn(params, None).data.copy()
    if not np.array_equal(first, second):
        raise NonDeterministicError("forward function returned different losses for identical parameters")

    tape = Tape()
    loss = forward_fn(params, tape)
    backward(tape, loss, params)
    analytic = {k: g.copy() for k, g in params.grads.items()}

    rng = np.random.default_rng(seed)
    report = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= probe_count else rng.choice(n, size=probe_count, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            up, down = orig + step, orig - step
            flat[i] = up
            lp = float(forward_fn(params, None).data)
            flat[i] = down
            lm = float(forward_fn(params, None).data)
            flat[i] = orig
            # divide by the step actually represented, not the nominal 2 * step
            numeric = (lp - lm) / (float(flat.dtype.type(up)) - float(flat.dtype.type(down)))
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        report[name] = worst
    return GradCheckReport(report, tolerance)
