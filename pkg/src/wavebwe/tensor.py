"""Dense tensors with tape-ordered reverse-mode gradients.

Only the kernels the WaveNet needs are provided. Every op computes in the
dtype of its inputs, so a graph built from float64 parameters runs entirely
in float64; the gradient checker relies on this to evaluate a 64-bit shadow
of the float32 model.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class BackwardError(RuntimeError):
    """Raised when backward is requested for a value with no recorded forward."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents, backward):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Parameter(Tensor):
    """A trainable tensor with its gradient and Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.dims})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad or p._node is not None for p in parents):
        out._node = _Node(tuple(parents), backward)
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto whatever is already stored, so two calls without a
    reset double them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got dims {loss.dims}")
    if loss._node is None and not loss.requires_grad:
        raise BackwardError("no forward pass was recorded for this value")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t._node.parents)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss._node is None:
        leaves[id(loss)] = loss
    for t in sorted(nodes.values(), key=lambda t: t._node.seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._node.backward(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not _needs(p):
                continue
            if p._node is None:
                leaves[id(p)] = p
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ValueError(f"{op}: dims mismatch {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def gated_activation(a: Tensor, b: Tensor | None = None) -> Tensor:
    """tanh(a) * sigmoid(b), elementwise.

    With ``b`` omitted, ``a`` holds the filter half and the gate half side by
    side in its last axis.
    """
    if b is None:
        half = a.dims[-1] // 2
        if a.dims[-1] != 2 * half:
            raise ValueError(f"gated_activation: cannot split {a.dims[-1]} channels in half")
        ta = np.tanh(a.data[..., :half])
        sb = _sigmoid(a.data[..., half:])

        def grad_fused(g):
            return np.concatenate([g * sb * (1.0 - ta * ta), g * ta * sb * (1.0 - sb)], axis=-1),

        return _record(ta * sb, (a,), grad_fused)

    _check_same(a, b, "gated_activation")
    ta = np.tanh(a.data)
    sb = _sigmoid(b.data)

    def grad(g):
        return g * sb * (1.0 - ta * ta), g * ta * sb * (1.0 - sb)

    return _record(ta * sb, (a, b), grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(tensors)
    sizes = [t.dims[axis] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, parts, grad)


def total(a: Tensor) -> Tensor:
    s = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _record(s, (a,), lambda g: (np.broadcast_to(g, a.dims).astype(a.data.dtype),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.data.size)


def repeat_rows(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the time (first) axis."""
    if factor == 1:
        return a
    out = np.repeat(a.data, factor, axis=0)

    def grad(g):
        return (g.reshape(a.dims[0], factor, *a.dims[1:]).sum(axis=1),)

    return _record(out, (a,), grad)


# ---------------------------------------------------------------- convolution


def _tap_offsets(kernel: int, dilation: int, causal: bool) -> list[int]:
    # tap k reads input[t + offset_k]; causal taps only look back
    shift = 0 if causal else dilation * ((kernel - 1) // 2)
    return [shift - dilation * k for k in range(kernel)]


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1, causal: bool = True) -> Tensor:
    """Dilated 1-D convolution over time.

    ``x`` is [T, Cin], ``w`` is [K, Cin, Cout]. In causal mode output row t
    sees input rows t, t-d, ..., t-(K-1)d; the non-causal mode centres the
    taps. Out-of-range taps read zero; output length equals input length.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d expects x [T, Cin] and w [K, Cin, Cout], got {x.dims}, {w.dims}")
    T, cin = x.dims
    K, wcin, cout = w.dims
    if wcin != cin:
        raise ValueError(f"conv1d: input has {cin} channels, weights expect {wcin}")
    if b is not None and b.dims != (cout,):
        raise ValueError(f"conv1d: bias dims {b.dims} do not match {cout} output channels")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")

    offsets = _tap_offsets(K, dilation, causal)
    left = max(0, -min(offsets))
    right = max(0, max(offsets))
    dtype = np.result_type(x.data, w.data)
    w2 = w.data.reshape(K * cin, cout)
    if K == 1 and left == right == 0:
        cols = x.data
    else:
        xp = np.zeros((T + left + right, cin), dtype=dtype)
        xp[left:left + T] = x.data
        # im2col: one GEMM over all taps
        cols = np.concatenate([xp[left + off:left + off + T] for off in offsets], axis=1)
    out = cols @ w2
    if b is not None:
        out += b.data

    def grad(g):
        gx = gw = None
        if _needs(x):
            gcols = g @ w2.T
            if K == 1 and left == right == 0:
                gx = gcols
            else:
                gxp = np.zeros((T + left + right, cin), dtype=gcols.dtype)
                for k, off in enumerate(offsets):
                    gxp[left + off:left + off + T] += gcols[:, k * cin:(k + 1) * cin]
                gx = gxp[left:left + T]
        if _needs(w):
            gw = (cols.T @ g).reshape(K, cin, cout)
        gb = g.sum(axis=0, dtype=np.float64).astype(dtype) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, grad)


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Fractionally-strided convolution: [T, Cin] -> [T*stride, Cout].

    Input row t contributes ``x[t] @ w[k]`` to output row ``t*stride + k``;
    rows past T*stride are cropped.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d_transpose expects x [T, Cin] and w [K, Cin, Cout], got {x.dims}, {w.dims}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T, cin = x.dims
    K, wcin, cout = w.dims
    if wcin != cin:
        raise ValueError(f"conv1d_transpose: input has {cin} channels, weights expect {wcin}")
    if b is not None and b.dims != (cout,):
        raise ValueError(f"conv1d_transpose: bias dims {b.dims} do not match {cout} output channels")

    n_out = T * stride
    full = max(n_out, (T - 1) * stride + K)
    dtype = np.result_type(x.data, w.data)
    acc = np.zeros((full, cout), dtype=dtype)
    for k in range(K):
        acc[k:k + stride * T:stride] += x.data @ w.data[k]
    out = acc[:n_out]
    if b is not None:
        out = out + b.data

    def grad(g):
        gfull = np.zeros((full, cout), dtype=g.dtype)
        gfull[:n_out] = g
        gx = np.zeros((T, cin), dtype=dtype) if _needs(x) else None
        gw = np.empty_like(w.data, dtype=dtype) if _needs(w) else None
        for k in range(K):
            rows = gfull[k:k + stride * T:stride]
            if gx is not None:
                gx += rows @ w.data[k].T
            if gw is not None:
                gw[k] = x.data.T @ rows
        gb = g.sum(axis=0, dtype=np.float64).astype(dtype) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, grad)


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be non-negative")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


def adam_step(params: Iterable[Parameter], config: AdamConfig, step: int) -> None:
    """One bias-corrected Adam update; clears the gradients afterwards."""
    if step < 1:
        raise ValueError(f"Adam step counter starts at 1, got {step}")
    bc1 = 1.0 - config.beta1 ** step
    bc2 = 1.0 - config.beta2 ** step
    for p in params:
        if p.grad is None:
            g = np.zeros(p.dims, dtype=np.float64)
        else:
            g = p.grad.astype(np.float64)
        m = config.beta1 * p.adam_m.astype(np.float64) + (1.0 - config.beta1) * g
        v = config.beta2 * p.adam_v.astype(np.float64) + (1.0 - config.beta2) * g * g
        update = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        p.adam_m = m.astype(p.data.dtype)
        p.adam_v = v.astype(p.data.dtype)
        if config.learning_rate != 0.0:
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params: Iterable[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(sq)


# ---------------------------------------------------------------- checking


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-3,
    max_checks: int | None = 32,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare analytic gradients against central differences in float64.

    Every tensor in ``tensors`` is temporarily promoted to float64 so the
    whole graph runs in double precision. For each tensor, up to
    ``max_checks`` randomly chosen elements are perturbed by ``±eps``. The
    returned value per tensor is ||analytic - numeric|| / max(||analytic||,
    ||numeric||) over the checked elements (0 when both vanish).
    """
    rng = rng or np.random.default_rng(0)
    saved = [(t.data, t.grad, t.requires_grad) for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
            t.grad = None
            t.requires_grad = True
        loss = loss_fn()
        backward(loss)
        analytic = [np.zeros(t.dims) if t.grad is None else t.grad.copy() for t in tensors]

        report = {}
        with no_grad():
            for i, t in enumerate(tensors):
                flat = t.data.reshape(-1)
                n = flat.size
                idx = np.arange(n) if max_checks is None or n <= max_checks else rng.choice(n, max_checks, replace=False)
                numeric = np.empty(idx.size)
                for j, e in enumerate(idx):
                    orig = flat[e]
                    flat[e] = orig + eps
                    up = float(loss_fn().data)
                    flat[e] = orig - eps
                    down = float(loss_fn().data)
                    flat[e] = orig
                    numeric[j] = (up - down) / (2 * eps)
                a = analytic[i].reshape(-1)[idx]
                denom = max(np.linalg.norm(a), np.linalg.norm(numeric))
                name = getattr(t, "name", None) or f"tensor{i}"
                report[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(a - numeric) / denom)
        return report
    finally:
        for t, (data, grad, req) in zip(tensors, saved):
            t.data, t.grad, t.requires_grad = data, grad, req
