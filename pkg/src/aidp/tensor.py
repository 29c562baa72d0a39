"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable primitive is a module-level function that returns a new
:class:`Tensor` carrying a closure that maps the output gradient to parent
gradients.  The tape is implicit in the parent links and is rebuilt on every
forward pass.

Example:
    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = tsum(mul(x, x))
    >>> grads = backward(loss)
    >>> x.grad.tolist()
    [[2.0, 4.0]]
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

_counter = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Constructing a Tensor from external data validates that every value is
    finite.  Tensors produced by primitives skip that check.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data contains NaN or Inf")
        self._init(arr, requires_grad, "leaf", (), None)

    def _init(self, data, requires_grad, op, parents, backward_fn):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents: Tuple[Tensor, ...] = parents
        self._backward: Optional[BackwardFn] = backward_fn
        self._id = next(_counter)

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Tuple["Tensor", ...], backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        rg = any(p.requires_grad for p in parents)
        out._init(data, rg, op, parents if rg else (), backward_fn if rg else None)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Run reverse-mode differentiation from a scalar ``loss``.

    Gradients of every reachable leaf with ``requires_grad`` are written to
    ``leaf.grad`` (overwriting earlier values) and also returned as a map.
    Intermediate nodes appear in the returned map but keep ``grad=None``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    nodes: Dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: Dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    # ids are assigned in creation order, so descending id is a valid reverse topological order
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.get(nid)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg

    out: Dict[Tensor, np.ndarray] = {}
    for nid, node in nodes.items():
        g = grads.get(nid, np.zeros_like(node.data))
        out[node] = g
        if node._backward is None:
            node.grad = g
    return out


def grad_of(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray) -> Tuple[float, np.ndarray]:
    """Value and gradient of ``loss_fn`` at the array ``x``."""
    xt = Tensor._result(np.asarray(x, dtype=np.float64), "leaf", (), None)
    xt.requires_grad = True
    loss = loss_fn(xt)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    backward(loss)
    g = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return float(loss.data.reshape(())), g


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor._result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor._result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, "scale", (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.array(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise DomainError(f"clamp bounds reversed: {lo} > {hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel/feature axis by default)."""
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, "concat", tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, in] and weight [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def bwd(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._result(xd @ wd.T + bias.data, "affine", (x, weight, bias), bwd)


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x [N,C,H,W], weight [O,C,kh,kw] -> [N,O,Ho,Wo]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise DomainError("conv2d: stride must be >= 1 and padding >= 0")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); cols: (c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return Tensor._result(np.ascontiguousarray(out), "conv2d", (x, weight, bias), bwd)


def global_average_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool: expected rank-4 input, got shape {x.shape}")
    hw = x.shape[2] * x.shape[3]
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], shape).copy(),)

    return Tensor._result(x.data.mean(axis=(2, 3)), "gap", (x,), bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logit: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logit) against soft targets in [0,1]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if logit.ndim != 1 or t.shape != logit.shape:
        raise ShapeError(f"bce_with_logits: logit {logit.shape} and target {t.shape} must be equal rank-1")
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise DomainError("bce_with_logits: targets must lie in [0, 1]")
    z = logit.data
    n = z.shape[0]
    # -t log s(z) - (1-t) log(1-s(z)) = softplus(z) - t z
    loss = np.mean(_softplus(z) - t * z) if n else 0.0

    def bwd(g):
        return ((_sigmoid(z) - t) * (g / n),)

    return Tensor._result(np.array(loss), "bce", (logit,), bwd)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} and labels {y.shape} mismatch")
    y = y.astype(np.int64)
    n, k = logits.shape
    if np.any(y < 0) or np.any(y >= k):
        raise DomainError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lsm[rows, y].mean() if n else 0.0

    def bwd(g):
        p = np.exp(lsm)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return Tensor._result(np.array(loss), "softmax_ce", (logits,), bwd)


# ---------------------------------------------------------------------------
# oracles and optimisation
# ---------------------------------------------------------------------------


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if not h > 0:
        raise DomainError("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    state: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One SGD step with heavy-ball momentum and L2 weight decay.

    ``g <- g + wd*theta; v <- m*v + g; theta <- theta - lr*v``.  Returns new
    parameter and velocity dicts; the inputs are left untouched.
    """
    state = {} if state is None else state
    new_params, new_state = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"sgd_step: grad for {name!r} has shape {g.shape}, param {theta.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ShapeError(f"sgd_step: velocity for {name!r} has shape {v.shape}, param {theta.shape}")
        g = g + weight_decay * theta
        v = momentum * v + g
        new_params[name] = theta - lr * v
        new_state[name] = v
    return new_params, new_state


def parameters(named: Iterable[Tuple[str, np.ndarray]], requires_grad: bool) -> Dict[str, Tensor]:
    """Wrap named arrays as leaf tensors for one forward pass."""
    out = {}
    for name, arr in named:
        t = Tensor._result(arr, "param", (), None)
        t.requires_grad = requires_grad
        out[name] = t
    return out


def constant(arr: np.ndarray) -> Tensor:
    """Wrap an already validated array as a non-differentiable leaf."""
    return Tensor._result(np.asarray(arr, dtype=np.float64), "const", (), None)


def leaf(arr: np.ndarray) -> Tensor:
    """Wrap an already validated array as a differentiable leaf."""
    t = constant(arr)
    t.requires_grad = True
    return t


def sign(a: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) == 0."""
    return np.sign(a)


__all__: List[str] = [
    "Tensor",
    "add",
    "affine",
    "as_tensor",
    "backward",
    "bce_with_logits",
    "clamp",
    "concat",
    "constant",
    "conv2d",
    "finite_difference_gradient",
    "global_average_pool",
    "grad_of",
    "leaf",
    "mul",
    "parameters",
    "relu",
    "scale",
    "sgd_step",
    "sigmoid",
    "sign",
    "softmax_cross_entropy",
    "sub",
    "tsum",
]
