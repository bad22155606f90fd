"""A small reverse-mode autodiff kernel over 2-D float64 numpy arrays.

Only the operations the candidate matcher needs are provided. Every op records
a closure computing its vector-Jacobian product; `backward` walks the tape in
reverse topological order. Recording is skipped inside `no_grad()` and when no
input requires a gradient, which keeps inference cheap.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

_RECORDING = True
# when a list, relu appends its activation mask (used to detect kink crossings)
_MASK_LOG: list | None = None


class GraphError(RuntimeError):
    """Raised when backward is requested on a value with no recorded graph."""


@contextlib.contextmanager
def no_grad():
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _MASK_LOG is not None:
        _MASK_LOG.append(mask.tobytes())
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), vjp)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    w = e / tot
    return _result(out, (a,), lambda g: (g * w,))


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def gather(a: Tensor, rows, cols) -> Tensor:
    """Pick entries a[rows[k], cols[k]] into a flat vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _result(a.data[rows, cols], (a,), vjp)


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),))


def log_sinkhorn(z: Tensor, log_mu: np.ndarray, log_nu: np.ndarray, iters: int) -> Tensor:
    """Entropic normalisation of log-scores `z` towards row/column marginals.

    Alternates u = log_mu - LSE_j(z + v) and v = log_nu - LSE_i(z + u) and
    returns z + u + v (log of the transport plan). The marginals are
    constants. Backward replays the stored softmax weights in reverse.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    zd = z.data
    if not np.all(np.isfinite(zd)):
        raise ValueError("non-finite scores")
    log_mu = np.asarray(log_mu, dtype=np.float64)
    log_nu = np.asarray(log_nu, dtype=np.float64)
    v = np.zeros(zd.shape[1])
    u = np.zeros(zd.shape[0])
    record = _RECORDING and z.requires_grad
    row_w, col_w = [], []
    for _ in range(iters):
        t = zd + v[None, :]
        m = t.max(axis=1, keepdims=True)
        e = np.exp(t - m)
        s = e.sum(axis=1, keepdims=True)
        u = log_mu - (m + np.log(s))[:, 0]
        if record:
            row_w.append(e / s)
        t = zd + u[:, None]
        m = t.max(axis=0, keepdims=True)
        e = np.exp(t - m)
        s = e.sum(axis=0, keepdims=True)
        v = log_nu - (m + np.log(s))[0]
        if record:
            col_w.append(e / s)
    out = zd + u[:, None] + v[None, :]

    def vjp(g):
        dz = g.copy()
        du = g.sum(axis=1)
        dv = g.sum(axis=0)
        for k in range(iters - 1, -1, -1):
            w = col_w[k]
            dz -= dv[None, :] * w
            du = du - (w * dv[None, :]).sum(axis=1)
            r = row_w[k]
            dz -= du[:, None] * r
            dv = -(r * du[:, None]).sum(axis=0)
            du = np.zeros_like(du)
        return (dz,)

    return _result(out, (z,), vjp)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed=1.0) -> None:
    """Accumulate d(seed . loss)/dx into `.grad` of every tensor that requires it."""
    if not loss.requires_grad:
        raise GraphError("no graph recorded for this value")
    loss.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), loss.shape).copy()
    for node in reversed(_topo(loss)):
        if node._vjp is None or node.grad is None:
            continue
        for p, g in zip(node._parents, node._vjp(node.grad)):
            if not p.requires_grad:
                continue
            p.grad = g.copy() if p.grad is None else p.grad + g
        if node is not loss:
            # intermediate grads are not needed once propagated
            node.grad = None if node._parents else node.grad


# ---------------------------------------------------------------- layers


@dataclass
class MlpParams:
    """Fully connected layers; weights are (in, out), biases (1, out)."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight and at least one layer")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if np.shape(w0)[1] != np.shape(w1)[0]:
                raise ValueError("layer widths do not chain")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return np.shape(self.weights[0])[0]

    @property
    def out_width(self) -> int:
        return np.shape(self.weights[-1])[1]

    def named(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_named(cls, d: Mapping) -> "MlpParams":
        n = len(d) // 2
        return cls([d[f"w{i}"] for i in range(n)], [d[f"b{i}"] for i in range(n)])

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator) -> "MlpParams":
        ws, bs = [], []
        for a, b in zip(widths, widths[1:]):
            ws.append(rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)))
            bs.append(np.zeros((1, b)))
        return cls(ws, bs)


@dataclass
class AttentionParams:
    """Single-head projections. Keys carry no bias: softmax over keys is
    invariant to it, so its gradient is identically zero."""

    wq: object
    bq: object
    wk: object
    wv: object
    bv: object
    wo: object
    bo: object

    FIELDS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")

    def __post_init__(self):
        d = np.shape(self.wq)[0]
        for name in ("wq", "wk", "wv", "wo"):
            if np.shape(getattr(self, name)) != (d, d):
                raise ValueError(f"{name} must be square {d}x{d}")

    @property
    def width(self) -> int:
        return np.shape(self.wq)[0]

    def named(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_named(cls, d: Mapping) -> "AttentionParams":
        return cls(**{f: d[f] for f in cls.FIELDS})

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, out_scale: float = 1.0) -> "AttentionParams":
        s = 1.0 / math.sqrt(d)
        return cls(
            rng.normal(0, s, (d, d)), np.zeros((1, d)),
            rng.normal(0, s, (d, d)),
            rng.normal(0, s, (d, d)), np.zeros((1, d)),
            rng.normal(0, s * out_scale, (d, d)), np.zeros((1, d)),
        )


def linear(x: Tensor, w, b=None) -> Tensor:
    y = matmul(as_tensor(x), as_tensor(w))
    return y if b is None else add(y, as_tensor(b))


def mlp_forward(p: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] != p.in_width:
        raise ValueError(f"input width {x.shape[1]} != {p.in_width}")
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        x = linear(x, w, b)
        if i < last:
            x = relu(x)
    return x


def attention_forward(p: AttentionParams, queries_from, keys_values_from, return_weights=False):
    """Single-head scaled dot-product attention followed by the output projection."""
    xq, xkv = as_tensor(queries_from), as_tensor(keys_values_from)
    d = p.width
    if xq.shape[1] != d or xkv.shape[1] != d:
        raise ValueError(f"attention inputs must have width {d}")
    if xkv.shape[0] == 0:
        # nothing to attend to: no message
        out = Tensor(np.zeros((xq.shape[0], d)))
        return (out, np.zeros((xq.shape[0], 0))) if return_weights else out
    q = linear(xq, p.wq, p.bq)
    k = linear(xkv, p.wk)
    v = linear(xkv, p.wv, p.bv)
    w = softmax(mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d)), axis=1)
    out = linear(matmul(w, v), p.wo, p.bo)
    return (out, w.data) if return_weights else out


# ---------------------------------------------------------------- verification


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def _eval_logged(f, arrays) -> tuple[float, list]:
    global _MASK_LOG
    _MASK_LOG = []
    try:
        with no_grad():
            val = float(f({k: Tensor(v) for k, v in arrays.items()}).data)
        return val, _MASK_LOG
    finally:
        _MASK_LOG = None


def grad_check_report(f, params, eps: float = 1e-4, skip_kinks: bool = False) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences entry by entry.

    With `skip_kinks`, entries whose +/-eps stencil changes any relu activation
    pattern are skipped: the function is not differentiable inside the stencil.
    """
    leaves = {k: param(v) for k, v in params.items()}
    out = f(leaves)
    if out.requires_grad:
        backward(out)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, ref_masks = _eval_logged(f, base)
    worst, checked, skipped = 0.0, 0, 0
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            hi, hi_masks = _eval_logged(f, base)
            arr[idx] = orig - eps
            lo, lo_masks = _eval_logged(f, base)
            arr[idx] = orig
            if skip_kinks and not (hi_masks == ref_masks == lo_masks):
                skipped += 1
                continue
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, checked, skipped)


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    skip_kinks: bool = False,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f` maps a dict of tensors to a scalar tensor and must be deterministic.
    Relative error per entry is |a - n| / max(1e-8, |a| + |n|).
    """
    return grad_check_report(f, params, eps, skip_kinks).max_rel_error


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Return (new_params, new_state); inputs are left untouched."""
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {k}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    """JSON header line followed by the little-endian float64 payload, keys sorted."""
    names = sorted(params)
    head = dict(header or {})
    head["params"] = [[k, list(np.shape(params[k]))] for k in names]
    blob = b"".join(np.ascontiguousarray(params[k], dtype="<f8").tobytes() for k in names)
    text = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(text + b"\n")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    (size,) = struct.unpack("<Q", raw[nl + 1 : nl + 9])
    blob = raw[nl + 9 :]
    if len(blob) != size:
        raise ValueError(f"checkpoint payload truncated: {len(blob)} of {size} bytes")
    params, off = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return header, params
