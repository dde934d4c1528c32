"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every primitive application; append order is
execution order, so one reverse sweep computes all adjoints. Complex values
are carried as paired real tensors (see :mod:`pinchbeam.cplx`); the only
non-holomorphic op the pipeline needs is ``|z|^2 = re^2 + im^2``.

Gradient conventions: ``max_with_scalar`` and ``relu`` use subgradient 0 at
the kink. Tests and gradient checks keep inputs away from kinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidConfigError, SingularityError


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


class Tape:
    """Append-only record of forward operations.

    Node i's inputs always precede it, so ``backward`` is a single reverse
    iteration over the node list (deterministic accumulation order).
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.ops: list[str] = []
        self.meta: list = []  # op-specific extras (e.g. clamp thresholds)
        self.param_slots: list[tuple[str, int]] = []  # (store name, node idx)

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, value: np.ndarray, parents: tuple[int, ...],
              vjp: Callable | None, op: str, meta=None) -> Var:
        self.values.append(np.asarray(value, dtype=np.float64))
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.ops.append(op)
        self.meta.append(meta)
        return Var(self, len(self.values) - 1)

    def constant(self, value) -> Var:
        """Leaf node; receives an adjoint but propagates nowhere."""
        return self._push(np.asarray(value, dtype=np.float64), (), None, "const")

    def param(self, store: "ParameterStore", name: str) -> Var:
        """Leaf bound to a named parameter; ``backward_into`` routes its adjoint."""
        v = self.constant(store.values[name])
        self.param_slots.append((name, v.idx))
        return v

    def backward(self, loss: Var) -> list[np.ndarray | None]:
        """Adjoint of ``loss`` w.r.t. every node; None for unreachable nodes."""
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.values)
        grads[loss.idx] = np.ones_like(self.values[loss.idx])
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None or self.vjps[i] is None:
                continue
            for p, pg in zip(self.parents[i], self.vjps[i](g)):
                if pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        return grads


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _pair(a, b) -> tuple[Var, Var, Tape]:
    if isinstance(a, Var):
        tape = a.tape
    elif isinstance(b, Var):
        tape = b.tape
    else:
        raise TypeError("at least one operand must be a Var")
    return _lift(a, tape), _lift(b, tape), tape


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Var:
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._push(av + bv, (a.idx, b.idx), vjp, "add")


def sub(a, b) -> Var:
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._push(av - bv, (a.idx, b.idx), vjp, "sub")


def mul(a, b) -> Var:
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._push(av * bv, (a.idx, b.idx), vjp, "mul")


def div(a, b) -> Var:
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * av / bv, bv.shape)

    return tape._push(av / bv, (a.idx, b.idx), vjp, "div")


def neg(a: Var) -> Var:
    return scalar_scale(a, -1.0)


def scalar_scale(a: Var, c: float) -> Var:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return a.tape._push(a.value * c, (a.idx,), vjp, "scalar_scale")


def matmul(a, b) -> Var:
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs >= 2-D operands, got {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape._push(av @ bv, (a.idx, b.idx), vjp, "matmul")


def solve(a: Var, b: Var) -> Var:
    """X with A @ X = B for square A (stacked); differentiable in A and B."""
    av, bv = a.value, b.value
    if av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != av.shape[-2] \
            or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"bad solve shapes {av.shape}, {bv.shape}")
    try:
        x = np.linalg.solve(av, bv)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"singular linear system: {exc}") from exc
    at = np.swapaxes(av, -1, -2)

    def vjp(g):
        gb = np.linalg.solve(at, g)
        ga = -gb @ np.swapaxes(x, -1, -2)
        return ga, gb

    return a.tape._push(x, (a.idx, b.idx), vjp, "solve")


def concat(parts: Sequence[Var], axis: int) -> Var:
    tape = parts[0].tape
    vals = [p.value for p in parts]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push(np.concatenate(vals, axis=axis),
                      tuple(p.idx for p in parts), vjp, "concat")


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.value.shape

    def vjp(g):
        return (g.reshape(old),)

    return a.tape._push(a.value.reshape(shape), (a.idx,), vjp, "reshape")


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return a.tape._push(a.value.transpose(axes), (a.idx,), vjp, "transpose")


def transpose_last2(a: Var) -> Var:
    nd = a.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return transpose(a, axes)


def slice_axis(a: Var, axis: int, start: int, stop: int) -> Var:
    nd = a.ndim
    axis = axis % nd
    sl = tuple(slice(None) if i != axis else slice(start, stop) for i in range(nd))
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return a.tape._push(a.value[sl], (a.idx,), vjp, "slice_axis")


def broadcast_to(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.value.shape

    def vjp(g):
        return (_unbroadcast(g, old),)

    return a.tape._push(np.broadcast_to(a.value, shape).copy(), (a.idx,), vjp,
                        "broadcast_to")


def _norm_axis(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


def sum_axis(a: Var, axis, keepdims: bool = False) -> Var:
    axes = _norm_axis(axis)
    shape = a.value.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push(a.value.sum(axis=axes, keepdims=keepdims), (a.idx,), vjp,
                        "sum_axis")


def mean_axis(a: Var, axis, keepdims: bool = False) -> Var:
    axes = _norm_axis(axis)
    shape = a.value.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape._push(a.value.mean(axis=axes, keepdims=keepdims), (a.idx,), vjp,
                        "mean_axis")


def max_with_scalar(a: Var, s: float) -> Var:
    mask = a.value > s  # subgradient 0 at the kink

    def vjp(g):
        return (g * mask,)

    return a.tape._push(np.maximum(a.value, s), (a.idx,), vjp, "max_with_scalar",
                        meta=float(s))


def relu(a: Var) -> Var:
    return max_with_scalar(a, 0.0)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    y = _stable_sigmoid(a.value)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return a.tape._push(y, (a.idx,), vjp, "sigmoid")


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return a.tape._push(y, (a.idx,), vjp, "tanh")


def softplus(a: Var) -> Var:
    av = a.value

    def vjp(g):
        return (g * _stable_sigmoid(av),)

    return a.tape._push(np.logaddexp(0.0, av), (a.idx,), vjp, "softplus")


def log(a: Var) -> Var:
    av = a.value
    if np.any(av <= 0.0):
        raise ValueError("log of non-positive value")

    def vjp(g):
        return (g / av,)

    return a.tape._push(np.log(av), (a.idx,), vjp, "log")


def log1p(a: Var) -> Var:
    av = a.value
    if np.any(av <= -1.0):
        raise ValueError("log1p of value <= -1")

    def vjp(g):
        return (g / (1.0 + av),)

    return a.tape._push(np.log1p(av), (a.idx,), vjp, "log1p")


def square(a: Var) -> Var:
    av = a.value

    def vjp(g):
        return (2.0 * av * g,)

    return a.tape._push(av * av, (a.idx,), vjp, "square")


def sqrt(a: Var) -> Var:
    av = a.value
    if np.any(av < 0.0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(av)

    def vjp(g):
        return (0.5 * g / y,)

    return a.tape._push(y, (a.idx,), vjp, "sqrt")


def sin(a: Var) -> Var:
    av = a.value

    def vjp(g):
        return (g * np.cos(av),)

    return a.tape._push(np.sin(av), (a.idx,), vjp, "sin")


def cos(a: Var) -> Var:
    av = a.value

    def vjp(g):
        return (-g * np.sin(av),)

    return a.tape._push(np.cos(av), (a.idx,), vjp, "cos")


def complex_abs2(re: Var, im: Var) -> Var:
    rv, iv = re.value, im.value

    def vjp(g):
        return 2.0 * rv * g, 2.0 * iv * g

    return re.tape._push(rv * rv + iv * iv, (re.idx, im.idx), vjp, "complex_abs2")


# ---------------------------------------------------------------------------
# parameter storage


class ParameterStore:
    """Named float64 arrays with matching gradient slots.

    Iteration everywhere is lexicographic by name, which makes optimizer
    updates and serialization order deterministic. Entries added with
    ``trainable=False`` are frozen constants (serialized, never updated,
    skipped by gradient checks).
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        if not trainable:
            self._frozen.add(name)

    def names(self) -> list[str]:
        return sorted(self.values)

    def trainable_names(self) -> list[str]:
        return [n for n in sorted(self.values) if n not in self._frozen]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.values.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def scale_grads(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name in self.names():
            out.add(name, self.values[name].copy(),
                    trainable=name not in self._frozen)
        return out

    def entries(self) -> list[dict]:
        """Sorted JSON-ready entries: name, shape, flat decimal values."""
        return [{"name": n,
                 "shape": list(self.values[n].shape),
                 "values": self.values[n].ravel().tolist()}
                for n in self.names()]

    @classmethod
    def from_entries(cls, entries: Iterable[dict],
                     frozen: Iterable[str] = ()) -> "ParameterStore":
        frozen = set(frozen)
        store = cls()
        for e in entries:
            store.add(e["name"], np.asarray(e["values"], dtype=np.float64)
                      .reshape(e["shape"]), trainable=e["name"] not in frozen)
        return store


def backward_into(store: ParameterStore, loss: Var) -> None:
    """Zero the store's gradients, then accumulate d(loss)/d(theta).

    Parameters never touched by the tape keep an exactly-zero gradient; a
    parameter bound more than once receives the sum of its slot adjoints.
    """
    store.zero_grads()
    grads = loss.tape.backward(loss)
    for name, idx in loss.tape.param_slots:
        g = grads[idx]
        if g is not None:
            store.grads[name] += g


# ---------------------------------------------------------------------------
# fully-connected building block


_ACTIVATIONS = {
    "identity": lambda v: v,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


@dataclass(frozen=True)
class FnnSpec:
    """Widths (input first) and activations of a fully-connected net."""

    widths: tuple[int, ...]
    activation: str = "relu"
    final_activation: str = "identity"
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise InvalidConfigError("FnnSpec needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise InvalidConfigError(f"widths must be positive, got {self.widths}")
        for act in (self.activation, self.final_activation):
            if act not in _ACTIVATIONS:
                raise InvalidConfigError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_fnn(store: ParameterStore, prefix: str, spec: FnnSpec,
             rng: np.random.Generator) -> None:
    """Glorot-uniform weights, zero biases, named ``{prefix}.W{i}`` / ``.b{i}``."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.W{i}", rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        if spec.has_bias:
            store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def fnn_forward(tape: Tape, spec: FnnSpec, store: ParameterStore, prefix: str,
                x: Var) -> Var:
    """Apply the net along the last axis of ``x``."""
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(
            f"input width {x.shape[-1]} does not match spec width {spec.widths[0]}")
    h = x
    for i in range(spec.n_layers):
        w = tape.param(store, f"{prefix}.W{i}")
        h = matmul(h, w)
        if spec.has_bias:
            h = add(h, tape.param(store, f"{prefix}.b{i}"))
        act = spec.final_activation if i == spec.n_layers - 1 else spec.activation
        h = _ACTIVATIONS[act](h)
    return h


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the store."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore) -> "AdamState":
        s = cls()
        for name in store.names():
            s.m[name] = np.zeros_like(store.values[name])
            s.v[name] = np.zeros_like(store.values[name])
        return s


def adam_step(store: ParameterStore, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from the gradients held in the store."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name in store.trainable_names():
        g = store.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[ParameterStore], Var], store: ParameterStore,
               eps: float = 1e-5) -> float:
    """Worst relative error of reverse-mode vs central finite differences.

    ``fn`` must build a fresh tape and return the scalar loss Var. Relative
    error uses denominator max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise InvalidConfigError(f"eps must be in [1e-7, 1e-4], got {eps}")
    loss = fn(store)
    backward_into(store, loss)
    analytic = {n: store.grads[n].copy() for n in store.trainable_names()}

    worst = 0.0
    for name in store.trainable_names():
        theta = store.values[name]
        flat = theta.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(store).value)
            flat[i] = orig - eps
            f_minus = float(fn(store).value)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError(f"non-finite loss while probing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
