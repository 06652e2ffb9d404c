# tools/gradkit.py - Reverse-mode differentiation for the fixed set of training ops
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import ContractError, PoisonedGradientError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class Tensor:
    """Value on the tape. Leaves created with requires_grad accumulate .grad"""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward_fn: Optional[Callable] = None, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf; the optimizer updates .value in place"""

    def __init__(self, value, name: Optional[str] = None):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


TensorLike = Union[Tensor, np.ndarray, float]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise and linear-algebra ops

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), backward_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), backward_fn)


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        return (g * factor,)

    return _node(a.value * factor, (a,), backward_fn)


def affine(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W.T + b for x of shape (..., in), W of shape (out, in)"""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"affine expects input width {weight.shape[1]}, got {x.shape[-1]}")
    value = x.value @ weight.value.T
    if bias is not None:
        value = value + bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.value.reshape(-1, weight.shape[1])
        grads = [g @ weight.value, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(value, parents, backward_fn)


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0

    def backward_fn(g):
        return (g * mask,)

    return _node(np.where(mask, x.value, 0.0), (x,), backward_fn)


def linear_map(x: TensorLike, matrix: TensorLike) -> Tensor:
    """Apply a square matrix to row vectors: x @ K.T"""
    x, matrix = as_tensor(x), as_tensor(matrix)
    if x.shape[-1] != matrix.shape[1]:
        raise ContractError(f"linear_map width mismatch: {x.shape[-1]} vs {matrix.shape[1]}")

    def backward_fn(g):
        g2 = g.reshape(-1, matrix.shape[0])
        x2 = x.value.reshape(-1, matrix.shape[1])
        return g @ matrix.value, g2.T @ x2

    return _node(x.value @ matrix.value.T, (x, matrix), backward_fn)


def matrix_power_apply(matrix: TensorLike, z: TensorLike, power: int) -> Tensor:
    """K^l z by repeated multiplication so the gradient is exact"""
    if power < 0:
        raise ContractError("matrix power must be non-negative")
    out = as_tensor(z)
    for _ in range(power):
        out = linear_map(out, matrix)
    return out


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].value.ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward_fn)


def slice_axis(x: TensorLike, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros_like(x.value)
        full[index] = g
        return (full,)

    return _node(x.value[index], (x,), backward_fn)


def reshape(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _node(x.value.reshape(shape), (x,), backward_fn)


def stop_gradient(x: TensorLike) -> Tensor:
    return Tensor(as_tensor(x).value.copy())


# Reductions and losses

def sum_squares(x: TensorLike) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (2.0 * g * x.value,)

    return _node(np.sum(x.value * x.value), (x,), backward_fn)


def total(x: TensorLike) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.sum(x.value), (x,), backward_fn)


def mean(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return scale(total(x), 1.0 / x.size)


def cosine_similarity(a: TensorLike, b: TensorLike) -> Tensor:
    """<a, b> / (|a| |b|) over all entries"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"cosine similarity shape mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.value))
    nb = float(np.linalg.norm(b.value))
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine similarity of a zero-norm vector")
    cos = float(np.sum(a.value * b.value)) / (na * nb)

    def backward_fn(g):
        ga = g * (b.value / (na * nb) - cos * a.value / (na * na))
        gb = g * (a.value / (na * nb) - cos * b.value / (nb * nb))
        return ga, gb

    return _node(np.asarray(cos), (a, b), backward_fn)


# Convolutions (NCHW layout)

def conv2d(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight (out, in, kh, kw)"""
    x = as_tensor(x)
    n, c, h, w = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ContractError(f"conv2d expects {c_w} input channels, got {c}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    out = np.zeros((n, o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("nchw,oc->nohw", xp[window(i, j)], weight.value[:, :, i, j])
    if bias is not None:
        out += bias.value[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.value)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[window(i, j)])
                gxp[window(i, j)] += np.einsum("nohw,oc->nchw", g, weight.value[:, :, i, j])
        grads = [gxp[:, :, padding:padding + h, padding:padding + w], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, backward_fn)


def conv_transpose2d(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of conv2d, weight (in, out, kh, kw)"""
    x = as_tensor(x)
    n, c, h, w = x.shape
    c_w, o, kh, kw = weight.shape
    if c != c_w:
        raise ContractError(f"conv_transpose2d expects {c_w} input channels, got {c}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    full_shape = (n, o, (h - 1) * stride + kh + output_padding, (w - 1) * stride + kw + output_padding)

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (h - 1) + 1, stride),
                slice(j, j + stride * (w - 1) + 1, stride))

    crop = (slice(None), slice(None), slice(padding, padding + ho), slice(padding, padding + wo))
    full = np.zeros(full_shape)
    for i in range(kh):
        for j in range(kw):
            full[window(i, j)] += np.einsum("nchw,co->nohw", x.value, weight.value[:, :, i, j])
    out = full[crop].copy()
    if bias is not None:
        out += bias.value[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gfull = np.zeros(full_shape)
        gfull[crop] = g
        gx = np.zeros_like(x.value)
        gw = np.zeros_like(weight.value)
        for i in range(kh):
            for j in range(kw):
                gx += np.einsum("nohw,co->nchw", gfull[window(i, j)], weight.value[:, :, i, j])
                gw[:, :, i, j] = np.einsum("nchw,nohw->co", x.value, gfull[window(i, j)])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, backward_fn)


# Backward pass

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every leaf that requires it"""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.backward_fn is None:
            node.accumulate(grad)
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def finite_diff_check(params: Sequence[Parameter], loss_fn: Callable[[], Tensor],
                      eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)"""
    if eps <= 0:
        raise ContractError("finite-difference step must be positive")
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = float(loss_fn().value)
            flat[i] = original - eps
            f_minus = float(loss_fn().value)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, abs(grad_flat[i] - numeric) / max(1.0, abs(numeric)))
    return worst


# Optimisation

class ParamGroup:
    """Parameters sharing one learning rate"""

    def __init__(self, name: str, params: Sequence[Parameter], learning_rate: float):
        if learning_rate <= 0:
            raise ContractError(f"learning rate of group '{name}' must be positive")
        self.name = name
        self.params = list(params)
        self.learning_rate = float(learning_rate)

    @property
    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.value.reshape(-1) for p in self.params])

    def grads(self) -> List[np.ndarray]:
        return [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]


class OptimizerState:
    """First/second moment accumulators aligned with the groups' parameters"""

    def __init__(self, groups: Sequence[ParamGroup]):
        seen = set()
        for group in groups:
            for p in group.params:
                if id(p) in seen:
                    raise ContractError(f"parameter shared between groups (group '{group.name}')")
                seen.add(id(p))
        self.step = 0
        self.first_moment = [[np.zeros_like(p.value) for p in g.params] for g in groups]
        self.second_moment = [[np.zeros_like(p.value) for p in g.params] for g in groups]


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    """Scale all gradients by max_norm / norm when their joint norm exceeds max_norm"""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm * (1.0 + 1e-12):
        return [np.array(g, copy=True) for g in grads]
    factor = max_norm / norm
    return [g * factor for g in grads]


def optimizer_step(state: OptimizerState, groups: Sequence[ParamGroup],
                   grads: Sequence[Sequence[np.ndarray]]) -> None:
    """Bias-corrected adaptive-moment update, each group at its own rate"""
    if len(grads) != len(groups):
        raise ContractError("gradient groups do not match parameter groups")
    for group, group_grads in zip(groups, grads):
        if len(group_grads) != len(group.params):
            raise ContractError(f"gradient count mismatch in group '{group.name}'")
        for p, g in zip(group.params, group_grads):
            if g.shape != p.value.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
            if np.isnan(g).any():
                raise PoisonedGradientError(f"NaN gradient in group '{group.name}'")

    state.step += 1
    correction1 = 1.0 - ADAM_BETA1 ** state.step
    correction2 = 1.0 - ADAM_BETA2 ** state.step
    for gi, (group, group_grads) in enumerate(zip(groups, grads)):
        for pi, (p, g) in enumerate(zip(group.params, group_grads)):
            m = ADAM_BETA1 * state.first_moment[gi][pi] + (1.0 - ADAM_BETA1) * g
            v = ADAM_BETA2 * state.second_moment[gi][pi] + (1.0 - ADAM_BETA2) * g * g
            state.first_moment[gi][pi] = m
            state.second_moment[gi][pi] = v
            p.value -= group.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPSILON)


class AdamOptimizer:
    """Parameter groups plus their moment state; gradients read from .grad"""

    def __init__(self, groups: Sequence[ParamGroup], clip_max_norm: Optional[float] = None):
        self.groups = list(groups)
        self.state = OptimizerState(self.groups)
        self.clip_max_norm = clip_max_norm

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.zero_grad()

    def step(self) -> float:
        """Clip (when configured) and update; returns the pre-clip global norm"""
        grads = [group.grads() for group in self.groups]
        flat = [g for group_grads in grads for g in group_grads]
        norm = global_norm(flat)
        if self.clip_max_norm is not None:
            clipped = iter(clip_global_norm(flat, self.clip_max_norm))
            grads = [[next(clipped) for _ in group_grads] for group_grads in grads]
        optimizer_step(self.state, self.groups, grads)
        return norm

    def decay_learning_rates(self, factor: float):
        for group in self.groups:
            group.learning_rate *= factor
