"""Local dense kernels and a minimal reverse-mode tape.

Kernels are pure functions on numpy arrays. The tape is value-agnostic: a
node stores its input Vars and a backward closure, so the same machinery
differentiates graphs of plain arrays and of distributed tensors (gradient
accumulation goes through the value type's `+`).
"""

from __future__ import annotations

import numpy as np


class EngineError(ValueError):
    pass


# -- kernels ------------------------------------------------------------------

def k_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise EngineError(f"mm shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def k_add(a, b):
    if np.shape(a) != np.shape(b):
        raise EngineError(f"add shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return a + b


def k_sub(a, b):
    if np.shape(a) != np.shape(b):
        raise EngineError(f"sub shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return a - b


def k_mul(a, b):
    if np.shape(a) != np.shape(b):
        raise EngineError(f"mul shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return a * b


def k_scale(a, s: float):
    return a * s


def k_relu(a):
    return np.maximum(a, 0)


def k_gt0(a):
    return (a > 0).astype(a.dtype)


def k_transpose(a):
    if a.ndim != 2:
        raise EngineError(f"t expects a 2-d tensor, got {a.shape}")
    return np.ascontiguousarray(a.T)


def k_reshape(a, shape):
    return np.ascontiguousarray(a).reshape(shape)


def k_sum(a):
    return np.asarray(a.sum(), dtype=a.dtype)


def k_sum_div(a, divisor: int):
    # local partial of a global mean: sum of local elements / global count
    return np.asarray(a.sum() / divisor, dtype=a.dtype)


def k_mse(a, b, divisor: int):
    d = a - b
    return np.asarray((d * d).sum() / divisor, dtype=a.dtype)


def k_dropout_apply(a, keep_mask, p: float):
    return a * keep_mask * (1.0 / (1.0 - p))


def k_equal(a, b) -> bool:
    if a.shape != b.shape or a.dtype != b.dtype:
        raise EngineError(f"equal shape/dtype mismatch: {a.shape}/{a.dtype} vs {b.shape}/{b.dtype}")
    return bool(a.tobytes() == b.tobytes())


def k_full(shape, value, dtype):
    return np.full(shape, value, dtype=dtype)


# -- tape ---------------------------------------------------------------------

class Var:
    """A value (numpy array or DTensor) tracked for differentiation."""

    __slots__ = ("value", "requires_grad", "grad", "node")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.node: Node | None = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var(shape={getattr(self.value, 'shape', None)}, grad={self.grad is not None})"


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: list[Var], backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn  # grad_out -> list of grads (or None) per input


_tracing = [True]


class no_grad:
    def __enter__(self):
        _tracing.append(False)

    def __exit__(self, *exc):
        _tracing.pop()
        return False


def tracing_enabled() -> bool:
    return _tracing[-1]


def trace(op: str, out_value, inputs: list[Var], backward_fn) -> Var:
    out = Var(out_value)
    if tracing_enabled() and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        out.node = Node(op, [v for v in inputs], backward_fn)
    return out


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        var, done = stack.pop()
        if done:
            order.append(var)
            continue
        if id(var) in seen or var.node is None:
            continue
        seen.add(id(var))
        stack.append((var, True))
        for inp in var.node.inputs:
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order  # leaves first, root last


def _numel(value) -> int:
    return int(np.prod(value.shape)) if len(value.shape) else 1


def backward(loss: Var, seed_grad=None):
    """Reverse-mode sweep from a scalar loss; accumulates into leaf .grad."""
    if _numel(loss.value) != 1:
        raise EngineError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, object] = {}
    if seed_grad is None:
        seed_grad = _ones_like(loss.value)
    grads[id(loss)] = seed_grad
    order = _toposort(loss)
    with no_grad():
        for var in reversed(order):
            g = grads.pop(id(var), None)
            if g is None or var.node is None:
                continue
            in_grads = var.node.backward_fn(g)
            for inp, ig in zip(var.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = ig if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig


def _ones_like(value):
    if isinstance(value, np.ndarray):
        return np.ones_like(value)
    return value.ones_like()  # DTensor duck type
