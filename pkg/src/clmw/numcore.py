"""Dense-tensor numeric core: reverse-mode autodiff and an AdamW optimizer.

Tensors wrap numpy arrays (float64 by default, float32 optional). Operations
executed inside a `Tape` context record backward rules; `backward()` replays
the tape once in reverse and accumulates gradients into leaf tensors' `.grad`
buffers. Accumulation across calls is an ordered sum, so micro-batch
gradient accumulation is bitwise reproducible.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_tapes = _TapeStack()


def _active_tape():
    return _tapes.stack[-1] if _tapes.stack else None


class Tensor:
    """A dense array, optionally tracked for gradients.

    Leaf tensors created with requires_grad=True accumulate gradients in
    `.grad`; intermediate tensors carry a `node` pointing at their tape entry.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"tracked={self.node is not None or self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs, vjp):
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.stack.pop()
        return False

    def _record(self, out: Tensor, inputs, vjp):
        node = _Node(inputs, vjp)
        out.node = node
        self.nodes.append(node)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape) -> bool:
    return t.requires_grad or (t.node is not None)


def _make(out_data, inputs, vjp) -> Tensor:
    """Wrap an op result; record it when a tape is active and any input is live."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor reached by the tape."""
    if loss.data.shape != ():
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        return  # loss does not depend on any tracked tensor
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if inp.requires_grad and inp.node is None:
                inp.grad += gi
            elif inp.node is not None:
                key = id(inp.node)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g.T,)

    return _make(a.data.T, (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[:, start:stop]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (a,), vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[start:stop]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(out, (a,), vjp)


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def vjp(g):
        grads = []
        pos = 0
        for w in widths:
            grads.append(g[:, pos:pos + w])
            pos += w
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    return _make(a.data.sum(), (a,), vjp)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out = norm * gamma.data + beta.data
    n = a.data.shape[-1]

    def vjp(g):
        dgamma = _unbroadcast(g * norm, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        dnorm = g * gamma.data
        dx = inv_std * (dnorm
                        - dnorm.mean(axis=-1, keepdims=True)
                        - norm * (dnorm * norm).sum(axis=-1, keepdims=True) / n)
        return (dx, dgamma, dbeta)

    return _make(out, (a, gamma, beta), vjp)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * a.data ** 2) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), vjp)


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeMismatch(f"ids must be a 1-D index array, got shape {ids.shape}")
    out = table.data[ids]

    def vjp(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids, g)
        return (dtable,)

    return _make(out, (table,), vjp)


def gather_rows(a, row_idx, col_idx) -> Tensor:
    """Pick a[row_idx[i], col_idx[i]] for each i; returns a 1-D tensor."""
    a = _as_tensor(a)
    row_idx = np.asarray(row_idx, dtype=np.int64)
    col_idx = np.asarray(col_idx, dtype=np.int64)
    out = a.data[row_idx, col_idx]

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (row_idx, col_idx), g)
        return (da,)

    return _make(out, (a,), vjp)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; a no-op when p == 0."""
    a = _as_tensor(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


def cross_entropy_masked(logits, target_ids, mask_rows, normalize: bool = True) -> Tensor:
    """Cross-entropy of targets at the masked rows of a (rows, vocab) logit matrix.

    mask_rows lists the row indices that contribute. With normalize=True the
    result is the mean NLL over masked rows, otherwise the sum (useful for
    gradient accumulation where the caller divides by the global mask count).
    """
    logits = _as_tensor(logits)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    mask_rows = np.asarray(mask_rows, dtype=np.int64)
    if len(mask_rows) == 0:
        raise ShapeMismatch("cross_entropy_masked needs at least one masked row")
    if len(target_ids) != len(mask_rows):
        raise ShapeMismatch(
            f"{len(target_ids)} targets vs {len(mask_rows)} masked rows")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[mask_rows, target_ids]
    denom = float(len(mask_rows)) if normalize else 1.0
    out = nll.sum() / denom

    def vjp(g):
        dlogits = np.zeros_like(logits.data)
        sm = np.exp(logp[mask_rows])
        sm[np.arange(len(mask_rows)), target_ids] -= 1.0
        dlogits[mask_rows] = sm * (float(g) / denom)
        return (dlogits,)

    return _make(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# parameter storage and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named flat storage of leaf tensors, with binary checkpointing."""

    def __init__(self, dtype=None):
        self.dtype = dtype if dtype is not None else DEFAULT_DTYPE
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def clone(self) -> "ParamStore":
        other = ParamStore(dtype=self.dtype)
        for name, t in self._params.items():
            other.add(name, t.data.copy())
        return other

    def save(self, path, meta: dict | None = None):
        """Write a one-line JSON header followed by the raw parameter bytes."""
        header = {
            "dtype": np.dtype(self.dtype).name,
            "names": list(self._params),
            "shapes": {k: list(v.data.shape) for k, v in self._params.items()},
        }
        if meta:
            header["meta"] = meta
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for t in self._params.values():
                fh.write(np.ascontiguousarray(t.data).tobytes())

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            dtype = np.dtype(header["dtype"])
            store = cls(dtype=dtype)
            for name in header["names"]:
                shape = tuple(header["shapes"][name])
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(n * dtype.itemsize)
                arr = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
                store.add(name, arr)
        return store, header.get("meta", {})


@dataclass
class AdamWState:
    """Per-parameter moments and step counter for decoupled weight decay Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray]) -> None:
    """One AdamW update, in place on the parameter data.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"grad shape {g.shape} vs param shape {p.data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data[...] = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) \
            - state.lr * state.weight_decay * p.data


class AdamW:
    """Optimizer facade over a ParamStore, reading gradients from `.grad`."""

    def __init__(self, store: ParamStore, lr=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.store = store
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1],
                                eps=eps, weight_decay=weight_decay)

    def step(self, grad_scale: float = 1.0, skip: set[str] | None = None):
        params = {}
        grads = {}
        for name, t in self.store.items():
            if skip and name in skip:
                continue
            params[name] = t
            grads[name] = t.grad * grad_scale if grad_scale != 1.0 else t.grad
        adamw_step(self.state, params, grads)

    def zero_grad(self):
        self.store.zero_grad()
