"""A small module tree with named parameters, deferred initialization, and
hook points for plan-installed callbacks.

Parameters record their initializer instead of allocating at construction.
Materialization happens later — eagerly for a single-device run, or
shard-locally at parallelize time — and both paths consume the random stream
identically, so the merged distributed weights equal the single-device
weights bitwise.
"""

from __future__ import annotations

import numpy as np

from . import ops, rng as rng_mod, runtime as runtime_mod
from .dispatch import at_site
from .engine import Var
from .placement import ShardSpec


class Parameter:
    """A named weight with a recorded initializer; value filled on demand."""

    def __init__(self, shape: tuple[int, ...], dist: rng_mod.Distribution,
                 dtype=np.float64, requires_grad: bool = True):
        self.shape = tuple(shape)
        self.dist = dist
        self.dtype = np.dtype(dtype)
        self.requires_grad = requires_grad
        self.var: Var | None = None

    @property
    def materialized(self) -> bool:
        return self.var is not None

    def materialize_global(self, state: rng_mod.RngState):
        """Single-device eager init: the full global tensor."""
        value = rng_mod.generate_global(self.shape, state, self.dist, self.dtype)
        self.var = Var(value, requires_grad=self.requires_grad)

    def materialize_sharded(self, spec: ShardSpec, state: rng_mod.RngState):
        """Local-only init: each device fills just its own shard."""
        from .dtensor import DTensor, DTensorMeta
        locals_ = rng_mod.generate_distributed(spec, self.shape, state, self.dist, self.dtype)
        meta = DTensorMeta(self.shape, spec, self.dtype)
        self.var = Var(DTensor(meta, locals_), requires_grad=self.requires_grad)


class Module:
    """Base class: child modules and parameters register via attribute
    assignment; forward hooks installed by a plan run around __call__."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        self._pre_hooks = []
        self._post_hooks = []
        self._overrides = {}
        self._path = ""

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        with at_site(self._path):
            for hook in self._pre_hooks:
                result = hook(self, x)
                if result is not None:
                    x = result
            out = self.forward(x)
            for hook in self._post_hooks:
                result = hook(self, out)
                if result is not None:
                    out = result
        self._overrides.clear()
        return out

    def param_var(self, name: str) -> Var:
        if name in self._overrides:
            return self._overrides[name]
        p = self._params[name]
        if p.var is None:
            raise RuntimeError(f"parameter {name!r} not materialized")
        return p.var

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._modules.items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(sub)

    def named_parameters(self, prefix: str = ""):
        for path, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{path}.{name}" if path else name), p

    def bind_paths(self, prefix: str = ""):
        for path, mod in self.named_modules(prefix):
            mod._path = path

    def tensor_paths(self):
        """Every addressable path: parameters, their grads, and module
        activations (<in>/<out>)."""
        paths = []
        for path, _ in self.named_parameters():
            paths.append(path)
            paths.append(path + ".grad")
        for path, _ in self.named_modules():
            if path:
                paths.append(path + ".<in>")
                paths.append(path + ".<out>")
        return paths

    def materialize(self, state: rng_mod.RngState, init_specs: dict | None = None):
        """Fill all parameters in definition order. init_specs maps parameter
        path -> ShardSpec; unmapped parameters get the full global tensor."""
        init_specs = init_specs or {}
        for path, p in self.named_parameters():
            if p.materialized:
                continue
            spec = init_specs.get(path)
            if spec is None:
                p.materialize_global(state)
            else:
                p.materialize_sharded(spec, state)


class Linear(Module):
    """y = x @ W, no bias; W initialized from a scaled normal."""

    def __init__(self, in_features: int, out_features: int, dtype=np.float64,
                 init_scale: float | None = None):
        super().__init__()
        scale = init_scale if init_scale is not None else (1.0 / np.sqrt(in_features))
        self.weight = Parameter((in_features, out_features),
                                rng_mod.Normal(0.0, scale), dtype=dtype)

    def forward(self, x):
        return ops.mm(x, self.param_var("weight"))


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x):
        return ops.dropout(x, self.p)


class MLP(Module):
    """Linear -> Dropout -> ReLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 dropout_p: float = 0.0, dtype=np.float64, init_scale=None):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, dtype=dtype, init_scale=init_scale)
        self.drop = Dropout(dropout_p)
        self.act = ReLU()
        self.fc2 = Linear(d_hidden, d_out, dtype=dtype, init_scale=init_scale)

    def forward(self, x):
        h = self.fc1(x)
        h = self.drop(h)
        h = self.act(h)
        return self.fc2(h)


def sgd_step(model: Module, lr: float):
    """In-place w -= lr * grad on every parameter with a gradient. A gradient
    whose placement differs from the weight's is moved there first (this is
    where a ZeRO Partial->Shard reduce-scatter would already have happened)."""
    from .dtensor import DTensor, redistribute as dt_redistribute
    from .ops import _raw
    rt = runtime_mod.current()
    for _, p in model.named_parameters():
        var = p.var
        if var is None or var.grad is None:
            continue
        g = var.grad
        if isinstance(g, DTensor) and isinstance(var.value, DTensor):
            if g.meta.spec != var.value.meta.spec:
                g = dt_redistribute(g, var.value.meta.spec, rt.ledger)
        var.value = _raw("sub", [var.value, _raw("scale", [g], {"s": lr})])
        var.grad = None
