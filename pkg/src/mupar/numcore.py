"""Dense float64 tensors with a small reverse-mode tape over a fixed kernel set.

Every kernel returns a new :class:`Tensor` whose ``_backward`` closure pushes
the upstream gradient into its parents. Gradients accumulate (``+=``) so a
tensor used twice, e.g. tied embeddings, collects both contributions.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this tensor through the tape."""
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        }
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# random numbers


class SeededRng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Philox draws depend only on the key and the counter, so two generators with
    the same key produce the same sequence regardless of what other streams did.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def spawn(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self.generator.uniform(low, high, size=shape)


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a string (FNV-1a)."""
    h = 0xCBF29CE484222325
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def gaussian_init(shape, mean: float, variance: float, rng: SeededRng) -> Tensor:
    if variance < 0:
        raise ValueError(f"variance must be nonnegative, got {variance}")
    shape = tuple(int(s) for s in shape)
    if variance == 0:
        return Tensor(np.full(shape, float(mean)), requires_grad=True)
    data = rng.normal(shape)
    data *= np.sqrt(variance)
    if mean:
        data += mean
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return [(a, g @ B.T), (b, A.T @ g)]

    return _result(A @ B, (a, b), backward)


def linear(x: Tensor, w: Tensor, scale: float = 1.0) -> Tensor:
    """``scale * x @ w.T`` with ``w`` stored as (fan_out, fan_in); any leading dims on ``x``."""
    X, W = x.data, w.data
    if W.ndim != 2 or X.shape[-1] != W.shape[1]:
        raise ShapeError(f"cannot apply weight {W.shape} to input {X.shape}")
    lead = X.shape[:-1]
    X2 = X.reshape(-1, X.shape[-1])
    out = X2 @ W.T
    if scale != 1.0:
        out *= scale

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        if scale != 1.0:
            g2 = g2 * scale
        gx = (g2 @ W).reshape(X.shape) if _needs_grad(x) else None
        gw = g2.T @ X2 if _needs_grad(w) else None
        return [(x, gx), (w, gw)]

    return _result(out.reshape(*lead, W.shape[0]), (x, w), backward)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: [(x, g * c)])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)])


def bias_add(x: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias {b.shape} does not match last axis of {x.shape}")

    def backward(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0)
        return [(x, g), (b, gb * scale if scale != 1.0 else gb)]

    return _result(x.data + scale * b.data, (x, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: [(x, g * mask)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: [(x, g * (1.0 - y * y))])


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity}


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, gain_scale: float = 1.0, bias_scale: float = 1.0) -> Tensor:
    """Normalize over the last axis; eps is fixed and not width-scaled."""
    X = x.data
    d = X.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm params must have shape ({d},)")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    G = gain_scale * gain.data
    out = xhat * G + bias_scale * bias.data

    def backward(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0) * gain_scale
        gb = g.reshape(-1, d).sum(axis=0) * bias_scale
        gxhat = g * G
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return [(x, gx), (gain, gg), (bias, gb)]

    return _result(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray, scale: float = 1.0) -> Tensor:
    """Gather columns of a (width, vocab) table: returns ``scale * table[:, ids]`` moved to the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    W = table.data
    if W.ndim != 2:
        raise ShapeError("embedding table must be 2-D (width, vocab)")
    if ids.size and (ids.min() < 0 or ids.max() >= W.shape[1]):
        raise IndexError("token id out of range")
    out = W.T[ids]
    if scale != 1.0:
        out = out * scale

    def backward(g):
        gt = np.zeros((W.shape[1], W.shape[0]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, W.shape[0]))
        return [(table, gt.T * scale if scale != 1.0 else gt.T)]

    return _result(out, (table,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy over all leading positions; logits' last axis is the class axis."""
    Z = logits.data
    k = Z.shape[-1]
    Z2 = Z.reshape(-1, k)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != Z2.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {Z2.shape[0]} rows of logits")
    zmax = Z2.max(axis=1, keepdims=True)
    shifted = Z2 - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(t.shape[0])
    loss = -logp[rows, t].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= g / t.shape[0]
        return [(logits, p.reshape(Z.shape))]

    return _result(np.array(loss), (logits,), backward)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Half mean squared error."""
    Y = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - Y
    n = diff.size
    return _result(np.array(0.5 * np.mean(diff * diff)), (pred,), lambda g: [(pred, g * diff / n)])


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, n_head: int, logit_scale: float,
                         causal: bool = True, capture: dict | None = None) -> Tensor:
    """Multi-head attention on (B, T, H*d) inputs; logits are ``logit_scale * q.k``.

    When ``capture`` is given, the unmasked logits land in ``capture['logits']``
    with shape (B, H, T, T).
    """
    Q, K, V = q.data, k.data, v.data
    B, T, HQ = Q.shape
    if K.shape != Q.shape or V.shape[:2] != (B, T) or HQ % n_head or V.shape[2] % n_head:
        raise ShapeError(f"inconsistent attention shapes {Q.shape}, {K.shape}, {V.shape}")
    dk, dv = HQ // n_head, V.shape[2] // n_head
    Qh = Q.reshape(B, T, n_head, dk).transpose(0, 2, 1, 3)
    Kh = K.reshape(B, T, n_head, dk).transpose(0, 2, 1, 3)
    Vh = V.reshape(B, T, n_head, dv).transpose(0, 2, 1, 3)
    S = logit_scale * (Qh @ Kh.transpose(0, 1, 3, 2))
    if capture is not None:
        capture["logits"] = S
    if causal:
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        S = np.where(mask, -np.inf, S)
    S = S - S.max(axis=-1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=-1, keepdims=True)
    O = P @ Vh
    out = O.transpose(0, 2, 1, 3).reshape(B, T, n_head * dv)

    def backward(g):
        gO = g.reshape(B, T, n_head, dv).transpose(0, 2, 1, 3)
        gV = P.transpose(0, 1, 3, 2) @ gO
        gP = gO @ Vh.transpose(0, 1, 3, 2)
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True))
        gS *= logit_scale
        gQ = gS @ Kh
        gK = gS.transpose(0, 1, 3, 2) @ Qh
        merge = lambda a, d: a.transpose(0, 2, 1, 3).reshape(B, T, n_head * d)
        return [(q, merge(gQ, dk)), (k, merge(gK, dk)), (v, merge(gV, dv))]

    return _result(out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)`` in the 2-norm; ``floor`` guards the all-zero case."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / denom
