"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure accumulating gradients into them. ``backward`` walks the recorded
graph in reverse topological order. The graph is rebuilt on every forward
pass; nothing is cached between batches.

Only what the ranking model needs is provided: affine maps, a batched
matmul for attention, elementwise activations, reductions, gathers and
a handful of shape ops. There is no broadcasting except the trailing
bias add inside :func:`affine`.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64


class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable[[], None] | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; most graph nodes never see a gradient
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=DTYPE), requires_grad=True, name=name)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _node(values: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    live = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=live, _parents=parents if live else ())


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- linear ----------------------------------------------------------------

def affine(W: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x`` for a vector, or ``x @ W.T`` row-wise when x has leading dims."""
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: W{W.shape} incompatible with x{x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias{b.shape} incompatible with W{W.shape}")
    d, k = W.shape
    values = x.values @ W.values.T
    if b is not None:
        values = values + b.values
    parents = (W, x) if b is None else (W, x, b)
    out = _node(values, parents)

    def _backward():
        g2 = out.grad.reshape(-1, d)
        if W.requires_grad:
            W.grad += g2.T @ x.values.reshape(-1, k)
        if x.requires_grad:
            x.grad += out.grad @ W.values
        if b is not None and b.requires_grad:
            b.grad += g2.sum(axis=0)

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over identical leading dims (no broadcasting)."""
    if (a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    out = _node(a.values @ b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a.grad += out.grad @ np.swapaxes(b.values, -1, -2)
        if b.requires_grad:
            b.grad += np.swapaxes(a.values, -1, -2) @ out.grad

    out._backward = _backward
    return out


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = _node(a.values + b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a.grad += out.grad
        if b.requires_grad:
            b.grad += out.grad

    out._backward = _backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = _node(a.values - b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a.grad += out.grad
        if b.requires_grad:
            b.grad -= out.grad

    out._backward = _backward
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. ``b`` may be a Tensor or a constant array of the same shape."""
    if not isinstance(b, Tensor):
        mask = np.asarray(b, dtype=DTYPE)
        if mask.shape != a.shape:
            raise DimensionError(f"mul: shapes {a.shape} and {mask.shape} differ")
        out = _node(a.values * mask, (a,))

        def _backward_const():
            a.grad += out.grad * mask

        out._backward = _backward_const
        return out

    _check_same_shape("mul", a, b)
    out = _node(a.values * b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a.grad += out.grad * b.values
        if b.requires_grad:
            b.grad += out.grad * a.values

    out._backward = _backward
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _node(x.values * c, (x,))

    def _backward():
        x.grad += out.grad * c

    out._backward = _backward
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = _node(x.values + c, (x,))

    def _backward():
        x.grad += out.grad

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    active = x.values > 0
    out = _node(np.where(active, x.values, 0.0), (x,))

    def _backward():
        x.grad += out.grad * active

    out._backward = _backward
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return _sigmoid_from(v, np.exp(-np.abs(v)))


def _sigmoid_from(v: np.ndarray, e: np.ndarray) -> np.ndarray:
    # e = exp(-|v|); stable on both tails
    r = 1.0 / (1.0 + e)
    return np.where(v >= 0, r, e * r)


def _softplus_parts(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.exp(-np.abs(v))
    return np.maximum(v, 0.0) + np.log1p(e), e


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    out = _node(s, (x,))

    def _backward():
        x.grad += out.grad * s * (1.0 - s)

    out._backward = _backward
    return out


def softplus(x: Tensor) -> Tensor:
    values, e = _softplus_parts(x.values)
    out = _node(values, (x,))

    def _backward():
        x.grad += out.grad * _sigmoid_from(x.values, e)

    out._backward = _backward
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` computed as ``-softplus(-x)``."""
    values, e = _softplus_parts(-x.values)
    out = _node(-values, (x,))

    def _backward():
        x.grad += out.grad * _sigmoid_from(-x.values, e)

    out._backward = _backward
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NumericError("log of a non-positive value")
    out = _node(np.log(x.values), (x,))

    def _backward():
        x.grad += out.grad / x.values

    out._backward = _backward
    return out


ACTIVATIONS = {"relu": relu, "softplus": softplus, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise ``x / max(||x||, eps)`` along the last axis."""
    if eps <= 0:
        raise ContractError("l2_normalize needs eps > 0")
    norm = np.sqrt(np.sum(x.values * x.values, axis=-1, keepdims=True))
    guarded = norm <= eps
    denom = np.where(guarded, eps, norm)
    y = x.values / denom
    out = _node(y, (x,))

    def _backward():
        g = out.grad
        radial = np.sum(g * y, axis=-1, keepdims=True)
        # below the guard the map is linear: x / eps
        x.grad += np.where(guarded, g / denom, (g - y * radial) / denom)

    out._backward = _backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _node(y, (x,))

    def _backward():
        g = out.grad
        x.grad += y * (g - np.sum(g * y, axis=axis, keepdims=True))

    out._backward = _backward
    return out


class _StopGradTape:
    """Records stop_grad outputs, or replays recorded ones as constants."""

    def __init__(self):
        self.mode: str | None = None
        self.values: list[np.ndarray] = []
        self.cursor = 0


_TAPE = _StopGradTape()


@contextmanager
def _stop_grad_mode(mode: str):
    if _TAPE.mode is not None:
        raise ContractError("grad_check calls cannot be nested")
    _TAPE.mode, _TAPE.cursor = mode, 0
    if mode == "record":
        _TAPE.values = []
    try:
        yield
        if mode == "replay" and _TAPE.cursor != len(_TAPE.values):
            raise ContractError("objective built a different graph under perturbation")
    finally:
        _TAPE.mode = None


def stop_grad(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks every gradient in the backward pass."""
    if _TAPE.mode == "record":
        _TAPE.values.append(x.values.copy())
    elif _TAPE.mode == "replay":
        if _TAPE.cursor >= len(_TAPE.values) or _TAPE.values[_TAPE.cursor].shape != x.shape:
            raise ContractError("objective built a different graph under perturbation")
        frozen = _TAPE.values[_TAPE.cursor]
        _TAPE.cursor += 1
        return Tensor(frozen, requires_grad=False)
    return Tensor(x.values, requires_grad=False)


# -- reductions and shape ops ---------------------------------------------

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = _node(np.sum(x.values, axis=axis), (x,))

    def _backward():
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        x.grad += np.broadcast_to(g, x.shape)

    out._backward = _backward
    return out


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.values.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.intp)
    out = _node(np.take(x.values, index, axis=axis), (x,))

    def _backward():
        if axis == 0:
            np.add.at(x.grad, index, out.grad)
        else:
            moved = np.moveaxis(x.grad, axis, 0)
            np.add.at(moved, index, np.moveaxis(out.grad, axis, 0))

    out._backward = _backward
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [p.values for p in parts]
    values = np.concatenate(arrays, axis=axis)
    out = _node(values, tuple(parts))
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def _backward():
        for p, g in zip(parts, np.split(out.grad, cuts, axis=axis)):
            if p.requires_grad:
                p.grad += g

    out._backward = _backward
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = np.stack([p.values for p in parts], axis=axis)
    out = _node(values, tuple(parts))

    def _backward():
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.grad += np.take(out.grad, i, axis=axis)

    out._backward = _backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(x.values.reshape(shape), (x,))

    def _backward():
        x.grad += out.grad.reshape(x.shape)

    out._backward = _backward
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = _node(np.transpose(x.values, axes), (x,))

    def _backward():
        x.grad += np.transpose(out.grad, inverse)

    out._backward = _backward
    return out


# -- driver ----------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable live tensor."""
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad += 1.0
    for node in reversed(_topological_order(loss)):
        if node._backward is not None:
            node._backward()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph from the current parameter values on each
    call. With ``max_coords`` set, each parameter is checked on a seeded
    random subset of that many coordinates.

    Stop-gradient outputs are held at their unperturbed values while
    differencing, so the numeric side differentiates the same surrogate
    function the tape does. A parameter reached only through stop_grad then
    has a zero gradient on both sides.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]")
    zero_grads(params)
    with _stop_grad_mode("record"):
        loss = f()

    def f_frozen() -> float:
        with _stop_grad_mode("replay"):
            return f().item()

    if not np.isfinite(loss.values).all():
        raise NumericError("objective is not finite")
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            up = f_frozen()
            flat[i] = saved - eps
            down = f_frozen()
            flat[i] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"objective not finite near coordinate {i} of {p.name}")
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    zero_grads(params)
    return worst


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"adam: grad {g.shape} vs param {params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a name -> Tensor mapping, reading each tensor's ``grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.first_moment[name] = np.zeros_like(p.values)
            self.state.second_moment[name] = np.zeros_like(p.values)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    def step(self) -> None:
        adam_step({n: p.values for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items()}, self.state)
