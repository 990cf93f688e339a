"""
Reverse-Mode Automatic Differentiation
Dense float64 tensors with a define-by-run backward graph

Features:
- Tensor wrapper over numpy arrays with gradient buffers
- Registered primitives, each with a closed-form backward rule
- Broadcasting-aware gradients (summed back to the operand shape)
- NaN detection at every primitive, reported with the primitive's name
- ParamSet: ordered, uniquely named parameter collections
- value_and_grad: evaluate a scalar function and its exact gradients

The graph is rebuilt on every evaluation. A backward pass visits every node
once in topological order; leaf gradients accumulate across passes until
zero_grad() is called, intermediate gradients are reset at the start of
each pass.
"""

import logging
import math
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_ndtr

logger = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ============================================================================
# ERRORS
# ============================================================================

class ShapeMismatchError(ValueError):
    """Operand shapes cannot be combined by a primitive"""


class NumericFaultError(ArithmeticError):
    """A primitive produced NaN in its forward pass"""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"NaN produced by primitive '{op}'")


# ============================================================================
# TENSOR
# ============================================================================

_PRIMITIVES: Dict[str, Callable] = {}


def primitive(name: str):
    """Register a differentiable primitive under `name`"""
    def register(fn):
        _PRIMITIVES[name] = fn
        return fn
    return register


def primitives() -> FrozenSet[str]:
    """Names of every registered primitive"""
    return frozenset(_PRIMITIVES)


class Tensor:
    """Dense float64 array with an optional gradient buffer and graph record"""

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # ------------------------------------------------------------------
    # Basic properties
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    # ------------------------------------------------------------------
    # Backward pass
    # ------------------------------------------------------------------
    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable leaf's grad buffer"""
        if self.data.size != 1:
            raise ShapeMismatchError(f"backward() needs a scalar output, got shape {self.shape}")

        order = _topological_order(self)
        for node in order:
            if not node.is_leaf:
                node.grad = None
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over the graph; each node appears exactly once"""
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
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatchError(f"{op}: cannot broadcast shapes {list(shapes)}") from exc


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if np.isnan(data).any():
        raise NumericFaultError(op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ============================================================================
# ELEMENTWISE PRIMITIVES
# ============================================================================

@primitive("add")
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _node("add", a.data + b.data, (a, b), lambda g: (g, g))


@primitive("sub")
def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


@primitive("mul")
def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


@primitive("div")
def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data
    return _node("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


@primitive("neg")
def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


@primitive("exp")
def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


@primitive("log")
def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node("log", out, (a,), lambda g: (g / a.data,))


@primitive("sqrt")
def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


@primitive("square")
def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


@primitive("silu")
def silu(a: TensorLike) -> Tensor:
    """x * sigmoid(x)"""
    a = as_tensor(a)
    s = expit(a.data)
    out = a.data * s
    return _node("silu", out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


@primitive("softplus")
def softplus(a: TensorLike, beta: float = 1.0) -> Tensor:
    """log(1 + exp(beta * x)) / beta"""
    if beta <= 0:
        raise ValueError(f"softplus beta must be positive, got {beta}")
    a = as_tensor(a)
    out = np.logaddexp(0.0, beta * a.data) / beta
    return _node("softplus", out, (a,), lambda g: (g * expit(beta * a.data),))


@primitive("gaussian_log_density")
def gaussian_log_density(x: TensorLike, mean: TensorLike, scale: TensorLike) -> Tensor:
    """Elementwise log N(x; mean, scale^2), normalization included"""
    x, mean, scale = as_tensor(x), as_tensor(mean), as_tensor(scale)
    _broadcast_shape("gaussian_log_density", x.shape, mean.shape, scale.shape)
    diff = x.data - mean.data
    var = scale.data * scale.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -0.5 * diff * diff / var - np.log(scale.data) - LOG_SQRT_2PI

    def backward(g):
        d_mean = g * diff / var
        d_scale = g * (diff * diff / (var * scale.data) - 1.0 / scale.data)
        return (-d_mean, d_mean, d_scale)

    return _node("gaussian_log_density", out, (x, mean, scale), backward)


def _log_normal_mass(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """log(Phi(upper) - Phi(lower)) evaluated on whichever tail is smaller"""
    flip = lower > 0
    hi = np.where(flip, -lower, upper)
    lo = np.where(flip, -upper, lower)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_hi = log_ndtr(hi)
        log_lo = log_ndtr(lo)
        return log_hi + np.log1p(-np.exp(log_lo - log_hi))


@primitive("discretized_gaussian_log_mass")
def discretized_gaussian_log_mass(x: np.ndarray,
                                  mean: TensorLike,
                                  scale: TensorLike,
                                  half_width: float,
                                  low: float = 0.0,
                                  high: float = 1.0,
                                  floor: float = 1e-12) -> Tuple[Tensor, int]:
    """
    Elementwise log Gaussian mass of the bin [x - h, x + h]

    The lowest bin (x <= low) integrates from -inf and the highest
    (x >= high) to +inf. Masses below `floor` are clamped to log(floor)
    and receive no gradient; the number of clamped entries is returned.
    """
    mean, scale = as_tensor(mean), as_tensor(scale)
    x = np.asarray(x, dtype=np.float64)
    _broadcast_shape("discretized_gaussian_log_mass", x.shape, mean.shape, scale.shape)

    sigma = scale.data
    upper = np.where(x >= high - 0.5 * half_width, np.inf, (x + half_width - mean.data) / sigma)
    lower = np.where(x <= low + 0.5 * half_width, -np.inf, (x - half_width - mean.data) / sigma)
    log_mass = _log_normal_mass(upper, lower)

    log_floor = math.log(floor)
    floored = ~(log_mass > log_floor)
    out = np.where(floored, log_floor, log_mass)

    def backward(g):
        with np.errstate(over="ignore", invalid="ignore"):
            r_upper = np.exp(-0.5 * upper * upper - LOG_SQRT_2PI - out)
            r_lower = np.exp(-0.5 * lower * lower - LOG_SQRT_2PI - out)
            u_term = np.where(np.isfinite(upper), upper * r_upper, 0.0)
            l_term = np.where(np.isfinite(lower), lower * r_lower, 0.0)
        r_upper = np.where(np.isfinite(upper), r_upper, 0.0)
        r_lower = np.where(np.isfinite(lower), r_lower, 0.0)
        d_mean = np.where(floored, 0.0, -(r_upper - r_lower) / sigma)
        d_scale = np.where(floored, 0.0, -(u_term - l_term) / sigma)
        return (g * d_mean, g * d_scale)

    return _node("discretized_gaussian_log_mass", out, (mean, scale), backward), int(floored.sum())


# ============================================================================
# LINEAR ALGEBRA, REDUCTIONS AND SHAPE PRIMITIVES
# ============================================================================

@primitive("matmul")
def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise ShapeMismatchError(f"matmul: unsupported operand ranks {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeMismatchError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return (g @ b.data.T, a.data.T @ g)
        if b.ndim == 1:
            return (np.outer(g, b.data), a.data.T @ g)
        return (b.data @ g, np.outer(a.data, g))

    return _node("matmul", a.data @ b.data, (a, b), backward)


@primitive("broadcast")
def broadcast_to(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"broadcast: cannot broadcast {a.shape} to {shape}") from exc
    return _node("broadcast", out, (a,), lambda g: (g,))


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@primitive("sum")
def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node("sum", out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


@primitive("mean")
def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0
    return _node("mean", out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


@primitive("reshape")
def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


@primitive("slice")
def take(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeMismatchError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node("slice", out, (a,), backward)


@primitive("concat")
def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ============================================================================
# PARAMETER SETS
# ============================================================================

class ParamSet(dict):
    """
    Ordered map of parameter name -> Tensor

    Iteration follows insertion order, so two sets built by the same code
    iterate identically. Names are unique; `add` refuses duplicates.
    """

    def add(self, name: str, value: TensorLike) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name '{name}'")
        tensor = as_tensor(value)
        self[name] = tensor
        return tensor

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParamSet":
        params = cls()
        for name, array in arrays.items():
            params.add(name, Tensor(array))
        return params

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def detached(self, requires_grad: bool = False) -> "ParamSet":
        return ParamSet((name, t.detach(requires_grad)) for name, t in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((name, Tensor(np.zeros_like(t.data))) for name, t in self.items())

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet((name, t) for name, t in self.items() if name.startswith(prefix))

    def merged(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet(self.items())
        for name, t in other.items():
            out.add(name, t)
        return out

    def check_compatible(self, other: "ParamSet"):
        if list(self.keys()) != list(other.keys()):
            raise ShapeMismatchError("parameter sets have different names or order")
        for name, t in self.items():
            if t.shape != other[name].shape:
                raise ShapeMismatchError(f"parameter '{name}': shape {t.shape} vs {other[name].shape}")

    def combine(self, other: "ParamSet", a: float = 1.0, b: float = 1.0) -> "ParamSet":
        """Elementwise a*self + b*other"""
        self.check_compatible(other)
        return ParamSet((name, Tensor(a * t.data + b * other[name].data)) for name, t in self.items())

    def scaled(self, factor: float) -> "ParamSet":
        return ParamSet((name, Tensor(factor * t.data)) for name, t in self.items())

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(t.data * t.data)) for t in self.values())))

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.values()))

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.values())


# ============================================================================
# GRADIENT EVALUATION
# ============================================================================

def value_and_grad(f: Callable, inputs: Union[ParamSet, Sequence[TensorLike]]):
    """
    Evaluate scalar `f` and its exact reverse-mode gradient

    With a ParamSet, `f` receives a ParamSet of fresh leaf tensors and the
    gradients come back as a ParamSet with the same names. With a sequence,
    `f` receives the leaves positionally and gradients come back as a list.
    The caller's tensors are never modified.
    """
    if isinstance(inputs, ParamSet):
        leaves = inputs.detached(requires_grad=True)
        out = f(leaves)
        leaf_list = list(leaves.values())
    else:
        leaf_list = [as_tensor(t).detach(requires_grad=True) for t in inputs]
        out = f(*leaf_list)

    if not isinstance(out, Tensor):
        raise ShapeMismatchError("value_and_grad: function must return a Tensor")
    if out.data.size != 1:
        raise ShapeMismatchError(f"value_and_grad: output must be scalar, got shape {out.shape}")

    if out.requires_grad:
        out.backward()
    grads = [Tensor(leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for leaf in leaf_list]

    value = out.item()
    if isinstance(inputs, ParamSet):
        return value, ParamSet(zip(inputs.keys(), grads))
    return value, grads


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar `f` at `x`"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        f_plus = f(x)
        flat[i] = original - eps
        f_minus = f(x)
        flat[i] = original
        grad_flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
