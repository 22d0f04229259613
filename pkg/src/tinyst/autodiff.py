"""Reverse-mode automatic differentiation over dense numpy tensors.

The computation graph is implicit: every operation records its parent
tensors and a closure that maps the output gradient to parent gradients.
``backward`` walks that DAG once, in reverse topological order, and a
graph is consumed by the walk (a second backward on the same loss is an
error). Only the primitives the transformer models need are provided;
shapes are explicit and mismatches fail loudly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense real tensor with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward pass")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            _accumulate(node, g)
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._backward_fn = None
    loss._consumed = True


def gradients(loss: Tensor, params: dict) -> dict:
    """Return a name -> gradient array map for the given parameters."""
    for p in params.values():
        p.zero_grad()
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)

        def bwd_s(g):
            return (g,)

        return _make(a.data + b, (a,), bwd_s)
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)

        def bwd_s(g):
            return (g * b,)

        return _make(a.data * b, (a,), bwd_s)
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _make(out, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd)


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {weight.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = weight.data[ids]

    def bwd(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (dw,)

    return _make(out, (weight,), bwd)


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-d convolution along time. x: (B,T,Cin), w: (K,Cin,Cout), b: (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {x.shape} vs kernel {w.shape}")
    k = w.shape[0]
    t_in = x.shape[1]
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ValueError(f"conv1d input too short: T={t_in} with kernel {k}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    patches = xp[:, idx, :]  # (B, T_out, K, Cin)
    out = np.tensordot(patches, w.data, axes=([2, 3], [0, 1]))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bwd(g):
        dw = np.tensordot(patches, g, axes=([0, 1], [0, 1]))
        dpatches = np.tensordot(g, w.data, axes=([2], [2]))  # (B, T_out, K, Cin)
        dxp = np.zeros_like(xp)
        np.add.at(dxp, (slice(None), idx), dpatches)
        dx = dxp[:, padding:padding + t_in, :] if padding else dxp
        if b is not None:
            return dx, dw, g.sum(axis=(0, 1))
        return dx, dw

    return _make(out, tuple(parents), bwd)


def conv1d_output_length(t_in: int, kernel: int, stride: int, padding: int) -> int:
    return (t_in + 2 * padding - kernel) // stride + 1


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(out, (x,), bwd)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (constant)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)

    def bwd(g):
        return (np.where(mask, 0.0, g),)

    return _make(out, (x,), bwd)


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or no rng is supplied."""
    x = as_tensor(x)
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bwd)


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bwd)


def tensor_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis), 1.0 / n)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax on a plain array (no grad)."""
    x = np.asarray(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets: np.ndarray, pad_id: int | None = None,
                  label_smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross entropy averaged over non-padding targets.

    The smoothed target distribution is (1-eps) * one_hot + eps / V.
    Raises if the loss comes out non-finite, which is where NaNs in the
    forward pass surface.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"cross_entropy shape mismatch: logits {logits.shape} vs targets {targets.shape}"
        )
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    valid = np.ones(tgt.shape, dtype=bool) if pad_id is None else tgt != pad_id
    n_valid = max(int(valid.sum()), 1)
    safe_tgt = np.where(valid, tgt, 0)

    logp = log_softmax(flat, axis=-1)
    nll = -logp[np.arange(len(tgt)), safe_tgt]
    smooth = -logp.mean(axis=-1)
    eps = label_smoothing
    per_tok = (1.0 - eps) * nll + eps * smooth
    loss = float((per_tok * valid).sum() / n_valid)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite training loss (NaN/Inf reached the loss)")

    def bwd(g):
        p = np.exp(logp)
        q = np.full_like(p, eps / vocab)
        q[np.arange(len(tgt)), safe_tgt] += 1.0 - eps
        d = (p - q) * valid[:, None] * (float(g) / n_valid)
        return (d.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray],
               eps: float = 1e-5, seed: int = 0) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to one Tensor; the check contracts the output with
    a fixed random weighting to obtain a scalar. Inputs must be float64.
    Returns the max relative error over all input entries (denominator
    floored at 1 so finite-difference noise on near-zero entries does not
    dominate).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = None

    def scalar_loss(*arrs):
        nonlocal probe
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        out = fn(*ts)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return tensor_sum(mul(out, probe)), ts

    loss, ts = scalar_loss(*arrays)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    max_err = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                lp, _ = scalar_loss(*arrays)
            flat[j] = orig - eps
            with no_grad():
                lm, _ = scalar_loss(*arrays)
            flat[j] = orig
            num[j] = (lp.item() - lm.item()) / (2 * eps)
        num = num.reshape(a.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(num), np.abs(analytic[i])))
        err = np.abs(analytic[i] - num) / denom
        max_err = max(max_err, float(err.max()) if err.size else 0.0)
    return max_err
