"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds a node holding its parents and a closure that maps the
upstream gradient to per-parent gradients.  ``Tensor.backward`` walks the
graph in reverse topological order.  Only leaves (tensors created with
``requires_grad=True``) keep a ``.grad``; intermediate gradients are dropped
once propagated.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError

_GRAD_ENABLED = True

NEG_INF = -np.inf


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self.data.size != 1 and grad is None:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,))


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def tmin(x: Tensor, axis: int) -> Tensor:
    """Minimum along ``axis``; ties resolve to the lowest index."""
    x = as_tensor(x)
    idx = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (x,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., k] and a 2-D ``b`` of shape [k, m]."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(out, (a, b), back)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        y = add(y, b)
    return y


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (x,), back)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)

    return _node(n, (x,), back)


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax of ``logits + mask`` over the last axis.

    ``mask`` holds 0 or -inf.  A row that is entirely -inf falls back to the
    unmasked softmax for that row.
    """
    logits = as_tensor(logits)
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        dead = np.all(np.isneginf(mask), axis=-1, keepdims=True)
        z = z + np.where(dead, 0.0, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (logits,), back)


def log_softmax(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(y, (logits,), back)


def masked_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Single-head scaled dot-product attention with an additive {0, -inf} mask."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.data.ndim != 2 or K.data.ndim != 2 or V.data.ndim != 2:
        raise DimensionError(f"attention expects 2-D inputs, got {Q.shape}, {K.shape}, {V.shape}")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise DimensionError(f"attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if mask is not None and np.shape(mask) != (Q.shape[0], K.shape[0]):
        raise DimensionError(f"attention mask shape {np.shape(mask)} != {(Q.shape[0], K.shape[0])}")
    scores = mul(matmul(Q, transpose(K)), 1.0 / math.sqrt(Q.shape[1]))
    return matmul(masked_softmax(scores, mask), V)


def token_attention(x: Tensor, tokens: np.ndarray, Wq: Tensor, Wk: Tensor, Wv: Tensor,
                    mask: np.ndarray | None = None) -> Tensor:
    """``masked_attention(x Wq, tokens Wk, tokens Wv, mask)`` for constant tokens.

    Evaluated as ``softmax((x Wq Wk^T) tokens^T / sqrt(d)) tokens Wv`` so the
    large [cells, C] projections are never formed.
    """
    x = as_tensor(x)
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or x.data.ndim != 2 or tokens.shape[1] != Wk.shape[0] or x.shape[1] != Wq.shape[0]:
        raise DimensionError(f"token attention shape mismatch: x{x.shape} tokens{tokens.shape} "
                             f"Wq{Wq.shape} Wk{Wk.shape}")
    if mask is not None and np.shape(mask) != (x.shape[0], tokens.shape[0]):
        raise DimensionError(f"attention mask shape {np.shape(mask)} != {(x.shape[0], tokens.shape[0])}")
    qk = matmul(matmul(x, Wq), transpose(Wk))
    scores = mul(matmul(qk, Tensor(tokens.T)), 1.0 / math.sqrt(Wq.shape[1]))
    return matmul(matmul(masked_softmax(scores, mask), Tensor(tokens)), Wv)


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]], activation="relu") -> Tensor:
    """Linear layers with ``activation`` between them; the last layer is left linear."""
    if not layers:
        raise ConfigError("mlp needs at least one (W, b) layer")
    act = _ACTIVATIONS[activation] if isinstance(activation, str) else activation
    h = as_tensor(x)
    for i, (W, b) in enumerate(layers):
        h = linear(h, W, b)
        if i < len(layers) - 1:
            h = act(h)
    return h


# ---------------------------------------------------------------- parameters


CHECKPOINT_HEADER = "vecmap-params v1"


class ParameterStore:
    """Named learnable tensors, initialized from a per-name seeded RNG.

    Each parameter draws from ``default_rng([seed, crc32(name)])`` so its
    value is independent of registration order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, shape: Sequence[int], init: str = "uniform",
               fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            rng = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
            bound = 1.0 / math.sqrt(fan_in if fan_in is not None else shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "identity":
            data = np.eye(shape[0], shape[1])
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.names()]

    def parameters(self) -> list[Tensor]:
        return [self._params[k] for k in self.names()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise FormatError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            if self._params[k].shape != np.shape(v):
                raise FormatError(f"shape mismatch for {k}: {self._params[k].shape} vs {np.shape(v)}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def save(self, path: str | Path) -> None:
        """Text checkpoint: header, seed, then one ``name<TAB>shape<TAB>values`` line each."""
        lines = [CHECKPOINT_HEADER, f"seed\t{self.seed}", f"count\t{len(self)}"]
        for name, t in self.items():
            shape = ",".join(str(s) for s in t.shape)
            values = " ".join(repr(float(v)) for v in t.data.reshape(-1))
            lines.append(f"{name}\t{shape}\t{values}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def read_checkpoint(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or text[0] != CHECKPOINT_HEADER:
            raise FormatError(f"{path}: not a {CHECKPOINT_HEADER!r} checkpoint")
        seed = int(text[1].split("\t")[1])
        count = int(text[2].split("\t")[1])
        state = {}
        for line in text[3:3 + count]:
            name, shape, values = line.split("\t")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            arr = np.array([float(v) for v in values.split()], dtype=np.float64)
            state[name] = arr.reshape(dims)
        if len(state) != count:
            raise FormatError(f"{path}: expected {count} parameters, read {len(state)}")
        return seed, state


class SGD:
    """Gradient descent with momentum and optional global-norm clipping."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        """Apply one update; returns the gradient norm before clipping."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        total = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(total):
            raise NumericError("non-finite gradient norm")
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total
        for p, g, v in zip(self.params, grads, self._velocity):
            v *= self.momentum
            v += scale * g
            p.data -= self.lr * v
        return total


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    coordinates.  With ``max_coords`` set, a seeded random subset of each
    parameter's coordinates is checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("f returned a non-finite value")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("f returned a non-finite value under perturbation")
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
    return worst
