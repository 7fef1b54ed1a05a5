"""Differentiable tensor ops that run identically on numpy arrays and
DTensors.

Each op executes eagerly (DTensor inputs go through the dispatcher, numpy
inputs hit the local kernels directly) and registers a backward closure on
the tape. Because the closures are themselves written with these ops, the
same model code doubles as its own single-device reference when fed plain
arrays.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine, rng as rng_mod, runtime as runtime_mod
from .dispatch import dispatch_op
from .dtensor import DTensor, redistribute as dt_redistribute
from .engine import Var, trace
from .placement import Partial, Replicate, ShardSpec, full_view


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def parameter(value, requires_grad: bool = True) -> Var:
    return Var(value, requires_grad=requires_grad)


def _raw(op: str, vals: list, args: dict | None = None):
    """Execute op on raw values (no tape)."""
    args = args or {}
    if any(isinstance(v, DTensor) for v in vals):
        return dispatch_op(op, list(vals), args)
    if op == "mm":
        return engine.k_mm(vals[0], vals[1])
    if op == "add":
        return engine.k_add(vals[0], vals[1])
    if op == "sub":
        return engine.k_sub(vals[0], vals[1])
    if op == "mul":
        return engine.k_mul(vals[0], vals[1])
    if op == "scale":
        return engine.k_scale(vals[0], args["s"])
    if op == "relu":
        return engine.k_relu(vals[0])
    if op == "gt0":
        return engine.k_gt0(vals[0])
    if op == "t":
        return engine.k_transpose(vals[0])
    if op == "reshape":
        return engine.k_reshape(vals[0], tuple(args["shape"]))
    if op == "sum":
        return engine.k_sum(vals[0])
    if op == "mean":
        return engine.k_sum_div(vals[0], math.prod(vals[0].shape))
    raise engine.EngineError(f"unknown raw op {op!r}")


def _scalar_of(value) -> float:
    """Python float of a scalar numpy array or scalar DTensor."""
    if isinstance(value, DTensor):
        from .dtensor import to_global
        return float(to_global(value))
    return float(value)


def _full_like(ref, scalar: float):
    """A tensor of ref's shape filled with scalar; Replicate for DTensors."""
    if isinstance(ref, DTensor):
        spec = ShardSpec(ref.mesh, tuple(Replicate() for _ in range(ref.mesh.ndim)))
        from .dtensor import distribute
        return distribute(np.full(ref.shape, scalar, dtype=ref.dtype), spec)
    return np.full(ref.shape, scalar, dtype=ref.dtype)


def mm(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = _raw("mm", [a.value, b.value])

    def bw(g):
        return (_raw("mm", [g, _raw("t", [b.value])]),
                _raw("mm", [_raw("t", [a.value]), g]))

    return trace("mm", out, [a, b], bw)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = _raw("add", [a.value, b.value])
    return trace("add", out, [a, b], lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = _raw("sub", [a.value, b.value])
    return trace("sub", out, [a, b], lambda g: (g, _raw("scale", [g], {"s": -1.0})))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = _raw("mul", [a.value, b.value])

    def bw(g):
        return (_raw("mul", [g, b.value]), _raw("mul", [g, a.value]))

    return trace("mul", out, [a, b], bw)


def scale(x, s: float) -> Var:
    x = as_var(x)
    out = _raw("scale", [x.value], {"s": s})
    return trace("scale", out, [x], lambda g: (_raw("scale", [g], {"s": s}),))


def relu(x) -> Var:
    x = as_var(x)
    out = _raw("relu", [x.value])

    def bw(g):
        return (_raw("mul", [g, _raw("gt0", [x.value])]),)

    return trace("relu", out, [x], bw)


def transpose(x) -> Var:
    x = as_var(x)
    out = _raw("t", [x.value])
    return trace("t", out, [x], lambda g: (_raw("t", [g]),))


def reshape(x, shape) -> Var:
    x = as_var(x)
    src_shape = tuple(x.value.shape)
    out = _raw("reshape", [x.value], {"shape": tuple(shape)})
    return trace("reshape", out, [x],
                 lambda g: (_raw("reshape", [g], {"shape": src_shape}),))


def tensor_sum(x) -> Var:
    x = as_var(x)
    out = _raw("sum", [x.value])

    def bw(g):
        return (_full_like(x.value, _scalar_of(g)),)

    return trace("sum", out, [x], bw)


def mean(x) -> Var:
    x = as_var(x)
    n = math.prod(x.value.shape)
    out = _raw("mean", [x.value])

    def bw(g):
        return (_full_like(x.value, _scalar_of(g) / n),)

    return trace("mean", out, [x], bw)


def mse(pred, target) -> Var:
    d = sub(pred, target)
    return mean(mul(d, d))


def dropout(x, p: float) -> Var:
    """Elementwise zeroing with keep probability 1-p and 1/(1-p) rescale.

    The mask comes from one logical global draw, so any sharding of x
    produces the same merged output for a given generator state."""
    x = as_var(x)
    if p == 0.0:
        return x
    rt = runtime_mod.current()
    if isinstance(x.value, DTensor):
        args = {"p": p}
        out = dispatch_op("dropout", [x.value], args)
        mask = args["_mask"]
    else:
        view = full_view(tuple(x.value.shape))
        mask = rng_mod.dropout_mask_local(view, rt.rng, p, dtype=x.value.dtype)
        rt.rng.advance(math.prod(x.value.shape))
        out = engine.k_dropout_apply(x.value, mask, p)

    def bw(g):
        return (_raw("scale", [_raw("mul", [g, mask])], {"s": 1.0 / (1.0 - p)}),)

    return trace("dropout", out, [x], bw)


def redistribute(x, dst: ShardSpec, grad_spec: ShardSpec | None = None) -> Var:
    """Traced placement change. The backward rule sends the incoming gradient
    to grad_spec when given, else to the source placement with Partial
    flipped to Replicate (a Partial forward value carries a replicated
    gradient)."""
    x = as_var(x)
    if not isinstance(x.value, DTensor):
        return x  # single-device run: placements are a no-op
    src_spec = x.value.meta.spec
    rt = runtime_mod.current()
    out = dt_redistribute(x.value, dst, rt.ledger)

    if grad_spec is None:
        grad_spec = ShardSpec(
            src_spec.mesh,
            tuple(Replicate() if isinstance(p, Partial) else p
                  for p in src_spec.placements),
        )

    def bw(g):
        if isinstance(g, DTensor) and g.meta.spec != grad_spec:
            return (dt_redistribute(g, grad_spec, rt.ledger),)
        return (g,)

    return trace("redistribute", out, [x], bw)
