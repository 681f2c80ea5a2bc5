"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the denoiser needs are provided: broadcasting add/mul,
matmul, 3x3 convolution (NHWC, zero padding), SiLU, sigmoid, spatial mean,
embedding gather and mean-squared error. Each op records a closure that
pushes the output gradient to its parents; ``Tensor.backward`` walks the
graph in reverse topological order and then frees it.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: float | np.ndarray = 1.0) -> None:
        if self._backward is None:
            raise GraphError("backward() called without a recorded forward graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.broadcast_to(np.asarray(grad, self.data.dtype), self.shape).copy()}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in topo:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _node(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def spatial_mean(a: Tensor) -> Tensor:
    """Mean over H and W of an NHWC tensor, giving ``(B, C)``."""
    _, h, w, _ = a.shape
    return _node(
        a.data.mean(axis=(1, 2)),
        (a,),
        lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), a.shape),),
    )


def channel_bias(h: Tensor, bias: Tensor) -> Tensor:
    """Add a per-sample, per-channel ``(B, C)`` bias to an NHWC tensor."""
    b = bias.shape[0]
    return add(h, reshape(bias, (b, 1, 1, bias.shape[1])))


def embedding_mean(table: Tensor, token_lists: Sequence[Sequence[int]]) -> Tensor:
    """Mean of embedding rows per token list; empty lists give a zero vector."""
    flat = np.array([t for toks in token_lists for t in toks], dtype=np.intp)
    pool = np.zeros((len(token_lists), len(flat)), dtype=table.data.dtype)
    k = 0
    for i, toks in enumerate(token_lists):
        if toks:
            pool[i, k : k + len(toks)] = 1.0 / len(toks)
        k += len(toks)
    rows = table.data[flat]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, pool.T @ g)
        return (gt,)

    return _node(pool @ rows, (table,), backward)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-size 3x3 convolution. ``x``: (B,H,W,Cin), ``w``: (3,3,Cin,Cout), ``b``: (Cout,)."""
    bsz, h, wd, cin = x.shape
    cout = w.shape[-1]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [(i, j) for i in range(3) for j in range(3)]
    cols = np.concatenate([xp[:, i : i + h, j : j + wd, :] for i, j in taps], axis=-1)
    cols = cols.reshape(bsz * h * wd, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = (cols @ wmat + b.data).reshape(bsz, h, wd, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if _needs_grad(x):
            dcols = (g2 @ wmat.T).reshape(bsz, h, wd, 9, cin)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for k, (i, j) in enumerate(taps):
                gxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, k, :]
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gw, gb

    return _node(out, (x, w, b), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; ``target`` is a constant."""
    target = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - target
    n = diff.size
    return _node(np.array(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,))


def per_sample_mse(pred: Tensor, target) -> Tensor:
    """Mean squared error per leading-axis sample, giving shape ``(B,)``."""
    target = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - target
    per = diff[0].size
    axes = tuple(range(1, diff.ndim))
    return _node(
        np.mean(diff * diff, axis=axes),
        (pred,),
        lambda g: (g.reshape((-1,) + (1,) * len(axes)) * 2.0 * diff / per,),
    )


def weighted_sum(a: Tensor, weights) -> Tensor:
    w = np.asarray(weights, dtype=a.data.dtype)
    return _node(np.array(np.sum(a.data * w)), (a,), lambda g: (g * w,))


# --------------------------------------------------------------------------- optimization


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return total


class Adam:
    """Bias-corrected adaptive-moment optimizer over a name -> Tensor mapping."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise GraphError(f"no gradient for parameters: {', '.join(missing)}")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Coordinates are sampled uniformly (with a fixed seed) over all parameters.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    names = list(params)
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        k = names[i]
        idx = np.unravel_index(int(flat - offsets[i]), params[k].shape)
        p = params[k].data
        orig = p[idx]
        p[idx] = orig + eps
        up = float(loss_fn().data)
        p[idx] = orig - eps
        down = float(loss_fn().data)
        p[idx] = orig
        numeric = (up - down) / (2 * eps)
        a = float(analytic[k][idx])
        denom = max(abs(a), abs(numeric))
        if denom > 1e-12:
            worst = max(worst, abs(a - numeric) / denom)
    for p in params.values():
        p.zero_grad()
    return worst
