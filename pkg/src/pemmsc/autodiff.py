"""Tape-based reverse-mode differentiation over dense 2-D float64 arrays.

A :class:`Graph` is built fresh for every forward pass. Ops are methods on the
graph; each appends one :class:`Node` to the tape, so the tape order is a valid
topological order and :func:`backward` simply walks it in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """2-D float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensor must be 2-D, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Optional[BackwardFn]


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(mean=np.zeros((1, width)), var=np.ones((1, width)))


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a finite sum implies finite entries; only fall back to the full scan if it is not
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Graph:
    """Define-by-run tape.

    With ``track=False`` ops still compute forward values but record no
    backward closures (evaluation mode).
    """

    def __init__(self, track: bool = True):
        self.track = track
        self.nodes: list[Node] = []

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward_fn: Optional[BackwardFn]) -> Tensor:
        """Append a node computing ``out`` from ``inputs``.

        ``backward_fn`` maps the upstream gradient to one gradient per input
        (``None`` for inputs that receive nothing).
        """
        _check_finite(op, out)
        needs = self.track and any(t.requires_grad for t in inputs)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.requires_grad = needs
        result.grad = None
        result.name = ""
        if needs:
            self.nodes.append(Node(op, tuple(inputs), result, backward_fn))
        return result

    # -- linear algebra -------------------------------------------------
    def matmul(self, a: Tensor, w: Tensor) -> Tensor:
        if a.cols != w.rows:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {w.shape}")
        out = a.data @ w.data

        def back(g):
            return g @ w.data.T, a.data.T @ g

        return self.record("matmul", (a, w), out, back)

    def add_bias(self, a: Tensor, b: Tensor) -> Tensor:
        if b.rows != 1 or b.cols != a.cols:
            raise DimensionError(f"add_bias shape mismatch: {a.shape} + {b.shape}")
        out = a.data + b.data

        def back(g):
            return g, g.sum(axis=0, keepdims=True)

        return self.record("add_bias", (a, b), out, back)

    def linear(self, a: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return self.add_bias(self.matmul(a, w), b)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
        return self.record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")

        def back(g):
            return g * b.data, g * a.data

        return self.record("mul", (a, b), a.data * b.data, back)

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self.record("scale", (a,), a.data * c, lambda g: (g * c,))

    def sum(self, a: Tensor) -> Tensor:
        out = np.array([[a.data.sum()]])
        return self.record("sum", (a,), out, lambda g: (np.full_like(a.data, g[0, 0]),))

    def weighted_sum(self, terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        """Scalar combination sum_i w_i * t_i of 1x1 tensors."""
        if len(terms) != len(weights):
            raise DimensionError("weighted_sum needs one weight per term")
        for t in terms:
            if t.shape != (1, 1):
                raise DimensionError(f"weighted_sum terms must be 1x1, got {t.shape}")
        total = np.zeros((1, 1))
        for t, w in zip(terms, weights):
            total = total + w * t.data

        def back(g):
            return [g * w for w in weights]

        return self.record("weighted_sum", tuple(terms), total, back)

    def concat_cols(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise DimensionError("concat_cols needs at least one part")
        n = parts[0].rows
        for p in parts:
            if p.rows != n:
                raise DimensionError(
                    f"concat_cols row mismatch: {[q.shape for q in parts]}")
        bounds = np.cumsum([0] + [p.cols for p in parts])
        out = np.concatenate([p.data for p in parts], axis=1)

        def back(g):
            return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

        return self.record("concat_cols", tuple(parts), out, back)

    # -- activations ----------------------------------------------------
    def relu(self, a: Tensor) -> Tensor:
        mask = a.data > 0
        return self.record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.data
        # two-branch form: exp never sees a large positive argument
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))

    def softmax_rows(self, a: Tensor) -> Tensor:
        z = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        return self.record("softmax_rows", (a,), y, back)

    def batchnorm(self, a: Tensor, gamma: Tensor, beta: Tensor,
                  state: BatchNormState, train: bool) -> Tensor:
        if gamma.shape != (1, a.cols) or beta.shape != (1, a.cols):
            raise DimensionError(
                f"batchnorm affine shape mismatch: input {a.shape}, "
                f"gamma {gamma.shape}, beta {beta.shape}")
        x = a.data
        n = x.shape[0]
        if train:
            if n < 2:
                raise ContractError(f"batchnorm in train mode needs N >= 2, got N={n}")
            mu = x.mean(axis=0, keepdims=True)
            var = x.var(axis=0, keepdims=True)
            state.mean = (1 - state.momentum) * state.mean + state.momentum * mu
            state.var = (1 - state.momentum) * state.var + state.momentum * var
        else:
            mu, var = state.mean, state.var
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mu) * inv_std
        out = gamma.data * xhat + beta.data

        def back(g):
            dgamma = (g * xhat).sum(axis=0, keepdims=True)
            dbeta = g.sum(axis=0, keepdims=True)
            dxhat = g * gamma.data
            if train:
                dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
            else:
                dx = dxhat * inv_std
            return dx, dgamma, dbeta

        return self.record("batchnorm", (a, gamma, beta), out, back)


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    produced = {id(node.output) for node in graph.nodes}
    leaves: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for t in leaves.values():
        t.grad = np.zeros_like(t.data)
    if id(loss) not in produced:
        if loss.requires_grad:
            loss.grad = np.ones((1, 1))
        return

    adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(graph.nodes):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in leaves:
                t.grad += gi
            elif id(t) in adj:
                adj[id(t)] = adj[id(t)] + gi
            else:
                adj[id(t)] = gi


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update over named parameters; clears grads."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    lr_t = state.learning_rate / corr1
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            v = state.second_moment[name] = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / corr2)
        denom += state.epsilon
        p.data = p.data - lr_t * m / denom
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float
    non_finite: bool = False

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.max_rel_error < self.tolerance


def grad_check(f: Callable[[Graph, Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
               tolerance: float = 1e-4, h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    The error for each input is ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``
    measured in the 2-norm over the checked coordinates; the report keeps the worst.
    The floor stops provably-zero gradients (e.g. a bias feeding batch norm) from
    turning finite-difference round-off into a relative error of 1.
    With ``max_coords`` only a seeded random subset of each input is perturbed.
    """
    rng = np.random.default_rng(seed)
    originals = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
    try:
        g = Graph()
        try:
            loss = f(g, inputs)
        except NonFiniteError:
            return GradCheckReport(float("inf"), [], tolerance, non_finite=True)
        backward(g, loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        def evaluate() -> float:
            return f(Graph(track=False), inputs).item()

        errors = []
        non_finite = False
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            num = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                try:
                    flat[i] = orig + h
                    up = evaluate()
                    flat[i] = orig - h
                    down = evaluate()
                except NonFiniteError:
                    non_finite = True
                    up = down = 0.0
                finally:
                    flat[i] = orig
                num[k] = (up - down) / (2 * h)
            ana = a.reshape(-1)[idx]
            denom = max(np.linalg.norm(ana), np.linalg.norm(num), abs_floor)
            err = float(np.linalg.norm(ana - num) / denom)
            errors.append(err)
            t.grad = None
        return GradCheckReport(max(errors) if errors else 0.0, errors, tolerance, non_finite)
    finally:
        for t, flag in zip(inputs, originals):
            t.requires_grad = flag
