"""DTensor operator dispatch: redistribution to a chosen sharding strategy,
rule-based bypass, sharding-propagation cache, and Static Eager elimination.

The dynamic pipeline per op: match bypass rules at entry, look up the
propagation cache, infer (strategy selection + output meta) on a miss,
redistribute inputs to the expected placements, execute the local kernel per
device, and wrap the locals with the propagated metadata. Record mode
additionally logs one step per dispatch so a static plan can replay the run
with zero propagation inferences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import engine, rng as rng_mod, runtime as runtime_mod
from .dtensor import DTensor, DTensorMeta, distribute, redistribute
from .placement import (
    InterleavedShard,
    Partial,
    Placement,
    PlacementError,
    Replicate,
    Shard,
    ShardSpec,
    local_shape_and_offset,
)


class DispatchError(ValueError):
    pass


class NoStrategyError(DispatchError):
    pass


class StaticMetadataMissing(DispatchError):
    pass


# -- dispatch context -----------------------------------------------------------

MODE_DYNAMIC = "dynamic"
MODE_RECORD = "record"
MODE_STATIC = "static"


@dataclass
class StaticStep:
    op: str
    expected_specs: list[ShardSpec]
    out_spec: ShardSpec
    out_shape: tuple[int, ...]
    site: str = ""


@dataclass
class DispatchContext:
    mode: str = MODE_DYNAMIC
    cache_enabled: bool = True
    cache: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    rules: list = field(default_factory=lambda: list(DEFAULT_RULES))
    trace: list[StaticStep] = field(default_factory=list)
    static_plan: list[StaticStep] | None = None
    static_pos: int = 0

    def bump(self, key: str, n: int = 1):
        self.counters[key] = self.counters.get(key, 0) + n

    def reset_counters(self):
        self.counters.clear()

    def reset_cache(self):
        self.cache.clear()

    def begin_static_replay(self, plan: list[StaticStep]):
        self.mode = MODE_STATIC
        self.static_plan = plan
        self.static_pos = 0

    def counter(self, key: str) -> int:
        return self.counters.get(key, 0)


_context: list[DispatchContext] = []


def current_context() -> DispatchContext:
    if not _context:
        _context.append(DispatchContext())
    return _context[-1]


class use_context:
    def __init__(self, ctx: DispatchContext):
        self.ctx = ctx

    def __enter__(self):
        _context.append(self.ctx)
        return self.ctx

    def __exit__(self, *exc):
        _context.pop()
        return False


# current module path, set by the model layer so traces carry call sites
_site: list[str] = [""]


class at_site:
    def __init__(self, path: str):
        self.path = path

    def __enter__(self):
        _site.append(self.path)

    def __exit__(self, *exc):
        _site.pop()
        return False


def current_site() -> str:
    return _site[-1]


# -- operator registry ------------------------------------------------------------

@dataclass(frozen=True)
class OpDef:
    name: str
    arity: int
    shape_rule: object    # (input shapes, args) -> output shape
    kernel: object        # (local arrays, args, device context) -> local array
    pair_rules: object    # (input metas, args) -> list of (input placements, out placement)
    linear: bool = False  # elementwise-linear ops commute with Partial


_OPS: dict[str, OpDef] = {}


def register_op(opdef: OpDef):
    _OPS[opdef.name] = opdef


def _mm_pairs(metas, args):
    return [
        ((Replicate(), Replicate()), Replicate()),
        ((Replicate(), Shard(1)), Shard(1)),
        ((Shard(0), Replicate()), Shard(0)),
        ((Shard(1), Shard(0)), Partial()),
        ((Partial(), Replicate()), Partial()),
        ((Replicate(), Partial()), Partial()),
    ]


def _elementwise_pairs(metas, args, allow_partial: bool):
    ndim = len(metas[0].global_shape)
    pairs = [((Replicate(), Replicate()), Replicate())]
    for d in range(ndim):
        pairs.append(((Shard(d), Shard(d)), Shard(d)))
    if allow_partial:
        pairs.append(((Partial(), Partial()), Partial()))
    # interleaved placements can't be enumerated; accept ones already present
    seen = set()
    for m in metas:
        for p in m.spec.placements:
            if isinstance(p, InterleavedShard) and p not in seen:
                seen.add(p)
                pairs.append(((p, p), p))
    return pairs


def _unary_pairs(metas, args, allow_partial: bool):
    ndim = len(metas[0].global_shape)
    pairs = [((Replicate(),), Replicate())]
    for d in range(ndim):
        pairs.append(((Shard(d),), Shard(d)))
    if allow_partial:
        pairs.append(((Partial(),), Partial()))
    for p in metas[0].spec.placements:
        if isinstance(p, InterleavedShard):
            pairs.append(((p,), p))
    return pairs


def _transpose_pairs(metas, args):
    return [
        ((Replicate(),), Replicate()),
        ((Partial(),), Partial()),
        ((Shard(0),), Shard(1)),
        ((Shard(1),), Shard(0)),
    ]


def _reshape_pairs(metas, args):
    src = metas[0].global_shape
    dst = tuple(args["shape"])
    pairs = [((Replicate(),), Replicate()), ((Partial(),), Partial())]
    # flatten: k-d -> 1-d keeps a dim-0 shard contiguous; a dim-d shard
    # becomes an interleaved shard with prod(src[:d]) groups
    if len(dst) == 1 and len(src) > 1:
        pairs.append(((Shard(0),), Shard(0)))
        for d in range(1, len(src)):
            m = math.prod(src[:d])
            pairs.append(((Shard(d),), InterleavedShard(0, m)))
    # unflatten: 1-d -> k-d, inverse of the above
    if len(src) == 1 and len(dst) > 1:
        pairs.append(((Shard(0),), Shard(0)))
        for d in range(1, len(dst)):
            m = math.prod(dst[:d])
            pairs.append(((InterleavedShard(0, m),), Shard(d)))
    return pairs


def _shape_elementwise(shapes, args):
    if len(set(shapes)) != 1:
        raise DispatchError(f"elementwise shape mismatch: {shapes}")
    return shapes[0]


def _shape_mm(shapes, args):
    (m, k1), (k2, n) = shapes
    if k1 != k2:
        raise DispatchError(f"mm shape mismatch: {shapes}")
    return (m, n)


def _shape_scalar(shapes, args):
    return ()


def _kernel_mean(locals_, args, dev):
    return engine.k_sum_div(locals_[0], dev["global_numel"])


def _kernel_reshape(locals_, args, dev):
    return engine.k_reshape(locals_[0], dev["local_out_shape"])


def _kernel_dropout(locals_, args, dev):
    return engine.k_dropout_apply(locals_[0], dev["mask"], args["p"])


register_op(OpDef("mm", 2, _shape_mm, lambda L, a, d: engine.k_mm(L[0], L[1]), _mm_pairs))
register_op(OpDef("add", 2, _shape_elementwise, lambda L, a, d: engine.k_add(L[0], L[1]),
                  lambda m, a: _elementwise_pairs(m, a, allow_partial=True), linear=True))
register_op(OpDef("sub", 2, _shape_elementwise, lambda L, a, d: engine.k_sub(L[0], L[1]),
                  lambda m, a: _elementwise_pairs(m, a, allow_partial=True), linear=True))
register_op(OpDef("mul", 2, _shape_elementwise, lambda L, a, d: engine.k_mul(L[0], L[1]),
                  lambda m, a: _elementwise_pairs(m, a, allow_partial=False)))
register_op(OpDef("scale", 1, _shape_elementwise, lambda L, a, d: engine.k_scale(L[0], a["s"]),
                  lambda m, a: _unary_pairs(m, a, allow_partial=True), linear=True))
register_op(OpDef("relu", 1, _shape_elementwise, lambda L, a, d: engine.k_relu(L[0]),
                  lambda m, a: _unary_pairs(m, a, allow_partial=False)))
register_op(OpDef("gt0", 1, _shape_elementwise, lambda L, a, d: engine.k_gt0(L[0]),
                  lambda m, a: _unary_pairs(m, a, allow_partial=False)))
register_op(OpDef("t", 1, lambda s, a: (s[0][1], s[0][0]),
                  lambda L, a, d: engine.k_transpose(L[0]), _transpose_pairs))
register_op(OpDef("reshape", 1, lambda s, a: tuple(a["shape"]), _kernel_reshape, _reshape_pairs))
register_op(OpDef("sum", 1, _shape_scalar, lambda L, a, d: engine.k_sum(L[0]),
                  lambda m, a: _reduction_pairs(m), linear=True))
register_op(OpDef("mean", 1, _shape_scalar, _kernel_mean,
                  lambda m, a: _reduction_pairs(m), linear=True))
register_op(OpDef("dropout", 1, _shape_elementwise, _kernel_dropout,
                  lambda m, a: _unary_pairs(m, a, allow_partial=False)))


def _reduction_pairs(metas):
    ndim = len(metas[0].global_shape)
    pairs = [((Replicate(),), Replicate()), ((Partial(),), Partial())]
    for d in range(ndim):
        pairs.append(((Shard(d),), Partial()))
    for p in metas[0].spec.placements:
        if isinstance(p, InterleavedShard):
            pairs.append(((p,), Partial()))
    return pairs


# -- strategy selection -------------------------------------------------------------

_TRANSITION_COST = {
    # (src kind, dst kind) -> multiples of S*(P-1)/P per device
    ("S", "R"): 1,
    ("IS", "R"): 1,
    ("P", "R"): 2,
    ("P", "S"): 1,
    ("P", "IS"): 1,
    ("R", "S"): 0,
    ("R", "IS"): 0,
    ("S", "S"): 1,   # gather + slice
    ("S", "IS"): 1,
    ("IS", "S"): 1,
    ("IS", "IS"): 1,
}


def _kind(p: Placement) -> str:
    if isinstance(p, Shard):
        return "S"
    if isinstance(p, InterleavedShard):
        return "IS"
    if isinstance(p, Partial):
        return "P"
    return "R"


def redistribution_cost(meta: DTensorMeta, dst: ShardSpec) -> Fraction:
    """Approximate per-device bytes to move meta's placement to dst."""
    cost = Fraction(0)
    nbytes = meta.global_numel * meta.dtype.itemsize
    for i, (src_p, dst_p) in enumerate(zip(meta.spec.placements, dst.placements)):
        if src_p == dst_p:
            continue
        P = meta.spec.mesh.sizes[i]
        key = (_kind(src_p), _kind(dst_p))
        if key not in _TRANSITION_COST:
            return Fraction(-1)  # unsupported
        cost += _TRANSITION_COST[key] * Fraction(nbytes * (P - 1), P)
    return cost


def propagate_sharding(op: OpDef, input_metas: list[DTensorMeta], args: dict,
                       ctx: DispatchContext) -> tuple[list[ShardSpec], ShardSpec, tuple[int, ...]]:
    """Select the valid strategy with minimal redistribution byte cost
    (registration order breaks ties) and compute the output metadata."""
    ctx.bump("inferences")
    mesh = input_metas[0].spec.mesh
    for m in input_metas[1:]:
        if m.spec.mesh != mesh:
            raise DispatchError(f"{op.name}: inputs on different meshes")
    out_shape = op.shape_rule([m.global_shape for m in input_metas], args)
    pair_rules = op.pair_rules(input_metas, args)

    best = None
    for combo in itertools.product(pair_rules, repeat=mesh.ndim):
        try:
            in_specs = [
                ShardSpec(mesh, tuple(combo[dim][0][i] for dim in range(mesh.ndim)))
                for i in range(op.arity)
            ]
            out_spec = ShardSpec(mesh, tuple(combo[dim][1] for dim in range(mesh.ndim)))
            for spec, m in zip(in_specs, input_metas):
                spec.validate_for_shape(m.global_shape)
            out_spec.validate_for_shape(out_shape)
        except PlacementError:
            continue
        cost = Fraction(0)
        feasible = True
        for spec, m in zip(in_specs, input_metas):
            c = redistribution_cost(m, spec)
            if c < 0:
                feasible = False
                break
            cost += c
        if not feasible:
            continue
        if best is None or cost < best[0]:
            best = (cost, in_specs, out_spec)
    if best is None:
        raise NoStrategyError(
            f"no valid sharding strategy for {op.name} with inputs "
            f"{[str(m.spec) for m in input_metas]}"
        )
    return best[1], best[2], out_shape


def _cache_key(op: OpDef, input_metas, args) -> tuple:
    shape_args = ()
    if op.name == "reshape":
        shape_args = (tuple(args["shape"]),)
    return (op.name, tuple(m.signature() for m in input_metas), shape_args)


# -- dispatch rules ------------------------------------------------------------------

@dataclass(frozen=True)
class DispatchRule:
    """<op-name, op-kind, input-placement, custom-meta> with literal-or-'*'
    fields, matched first-to-last."""

    op_name: str
    op_kind: str
    input_placement: str
    custom_meta: str
    action: object
    label: str = ""

    def matches(self, op: str, kind_tags: set, placement_tags: set, meta_tags: set) -> bool:
        return (
            (self.op_name == "*" or self.op_name == op)
            and (self.op_kind == "*" or self.op_kind in kind_tags)
            and (self.input_placement == "*" or self.input_placement in placement_tags)
            and (self.custom_meta == "*" or self.custom_meta in meta_tags)
        )


def _placement_tags(inputs: list[DTensor]) -> set:
    tags = set()
    if len(inputs) == 2:
        a, b = inputs
        pa, pb = a.placements, b.placements
        partial_dims = [i for i, p in enumerate(pa) if isinstance(p, Partial)]
        if partial_dims and all(isinstance(pb[i], Replicate) for i in partial_dims) and all(
            pa[i] == pb[i] for i in range(len(pa)) if i not in partial_dims
        ):
            tags.add("partial-replicate")
    return tags


def _rule_equal(op, inputs, args, ctx, rt):
    """Fast local comparison with a plain boolean output; no metadata."""
    a, b = inputs
    if a.meta.spec != b.meta.spec or a.shape != b.shape:
        # fall back: compare merged views without inference
        from .dtensor import to_global
        ga, gb = to_global(a), to_global(b)
        return bool(ga.shape == gb.shape and ga.tobytes() == gb.tobytes())
    return all(engine.k_equal(a.locals[c], b.locals[c]) for c in a.mesh.iter_coords())


def _rule_out_given(op, inputs, args, ctx, rt):
    """Reuse the output placeholder's metadata; skip all inference."""
    out: DTensor = args["out"]
    opdef = _OPS[op]
    dev_common = {"global_numel": inputs[0].meta.global_numel}
    for coord in out.mesh.iter_coords():
        dev = dict(dev_common)
        dev["local_out_shape"] = out.locals[coord].shape
        out.locals[coord] = opdef.kernel([t.locals[coord] for t in inputs], args or {}, dev)
    return out


def _rule_out_partial(op, inputs, args, ctx, rt):
    """Halfway bypass: execute locally on the given inputs and stamp the
    produced locals with Partial on the sharded mesh dims."""
    opdef = _OPS[op]
    mesh = inputs[0].mesh
    out_shape = opdef.shape_rule([t.shape for t in inputs], args or {})
    placements = []
    for i in range(mesh.ndim):
        in_ps = [t.placements[i] for t in inputs]
        if any(p.is_shard_like() for p in in_ps):
            placements.append(Partial())
        else:
            placements.append(in_ps[0])
    out_spec = ShardSpec(mesh, tuple(placements))
    locals_ = {}
    dev = {"global_numel": math.prod(inputs[0].shape)}
    for coord in mesh.iter_coords():
        locals_[coord] = opdef.kernel([t.locals[coord] for t in inputs], args or {}, dev)
    meta = DTensorMeta(out_shape, out_spec, inputs[0].dtype)
    return DTensor(meta, locals_)


def _rule_commfree_add(op, inputs, args, ctx, rt):
    """Communication-free add: convert the Replicate operand into Partial by
    zeroing it on non-first coordinates of each Partial mesh dim, then add
    locally; the output stays Partial."""
    a, b = inputs
    partial_dims = a.meta.spec.partial_mesh_dims()
    locals_ = {}
    for coord in a.mesh.iter_coords():
        bl = b.locals[coord]
        if any(coord[i] != 0 for i in partial_dims):
            bl = np.zeros_like(bl)
        locals_[coord] = engine.k_add(a.locals[coord], bl)
    meta = DTensorMeta(a.shape, a.meta.spec, a.dtype)
    return DTensor(meta, locals_)


DEFAULT_RULES = [
    DispatchRule("equal", "*", "*", "*", _rule_equal, label="equal-bypass"),
    DispatchRule("*", "out-given", "*", "*", _rule_out_given, label="out-given"),
    DispatchRule("*", "*", "*", "out-partial", _rule_out_partial, label="out-partial"),
    DispatchRule("add", "*", "partial-replicate", "*", _rule_commfree_add, label="commfree-add"),
]


def match_rule(rules, op: str, inputs: list[DTensor], args: dict):
    kind_tags = {"out-given"} if args.get("out") is not None else set()
    meta_tags = {args["custom_meta"]} if args.get("custom_meta") else set()
    placement_tags = _placement_tags(inputs)
    for rule in rules:
        if rule.matches(op, kind_tags, placement_tags, meta_tags):
            return rule
    return None


# -- the dispatcher -------------------------------------------------------------------

def dispatch_op(op: str, inputs: list[DTensor], args: dict | None = None,
                ctx: DispatchContext | None = None):
    args = args or {}
    ctx = ctx or current_context()
    rt = runtime_mod.current()

    if any(not isinstance(x, DTensor) for x in inputs):
        # mixed numpy/DTensor operands: lift plain arrays to replicated tensors
        mesh = next(x.meta.spec.mesh for x in inputs if isinstance(x, DTensor))
        repl = ShardSpec(mesh, tuple(Replicate() for _ in mesh.dim_names))
        inputs = [x if isinstance(x, DTensor)
                  else distribute(np.asarray(x), repl)
                  for x in inputs]

    if op == "equal" or args.get("out") is not None or args.get("custom_meta"):
        rule = match_rule(ctx.rules, op, inputs, args)
        if rule is not None:
            ctx.bump(f"rule:{rule.label}")
            return rule.action(op, inputs, args, ctx, rt)

    if ctx.mode == MODE_STATIC:
        return _dispatch_static(op, inputs, args, ctx, rt)

    opdef = _OPS.get(op)
    if opdef is None:
        raise DispatchError(f"unknown op {op!r}")

    # value-level rules (communication-free add, user rules) before inference
    rule = match_rule(ctx.rules, op, inputs, args)
    if rule is not None:
        ctx.bump(f"rule:{rule.label}")
        result = rule.action(op, inputs, args, ctx, rt)
        if result is not None:
            if ctx.mode == MODE_RECORD and isinstance(result, DTensor):
                ctx.trace.append(StaticStep(
                    op, [t.meta.spec for t in inputs], result.meta.spec,
                    result.shape, site=current_site()))
            return result

    key = _cache_key(opdef, [t.meta for t in inputs], args)
    cached = ctx.cache.get(key) if ctx.cache_enabled else None
    if cached is not None:
        ctx.bump("cache_hits")
        expected_specs, out_spec, out_shape = cached
    else:
        if ctx.cache_enabled:
            ctx.bump("cache_misses")
        expected_specs, out_spec, out_shape = propagate_sharding(
            opdef, [t.meta for t in inputs], args, ctx)
        if ctx.cache_enabled:
            ctx.cache[key] = (expected_specs, out_spec, out_shape)

    moved = [
        redistribute(t, spec, rt.ledger) if t.meta.spec != spec else t
        for t, spec in zip(inputs, expected_specs)
    ]
    out = _execute(opdef, moved, args, out_spec, out_shape, rt)
    if ctx.mode == MODE_RECORD:
        ctx.trace.append(StaticStep(
            op, list(expected_specs), out_spec, out_shape, site=current_site()))
    return out


def _execute(opdef: OpDef, inputs: list[DTensor], args: dict, out_spec: ShardSpec,
             out_shape: tuple[int, ...], rt) -> DTensor:
    mesh = out_spec.mesh
    dtype = inputs[0].dtype
    masks = None
    if opdef.name == "dropout":
        # the mask is a slice of one global bernoulli draw over the input's view
        masks = {}
        for coord in mesh.iter_coords():
            view = local_shape_and_offset(inputs[0].meta.spec, inputs[0].shape, coord)
            masks[coord] = rng_mod.dropout_mask_local(view, rt.rng, args["p"], dtype=dtype)
        rt.rng.advance(inputs[0].meta.global_numel)
        # expose the mask so callers (e.g. the autodiff layer) can reuse it
        args["_mask"] = DTensor(
            DTensorMeta(inputs[0].shape, inputs[0].meta.spec, dtype), dict(masks))
    locals_ = {}
    for coord in mesh.iter_coords():
        dev = {"global_numel": inputs[0].meta.global_numel}
        if opdef.name == "reshape":
            out_view = local_shape_and_offset(out_spec, out_shape, coord)
            dev["local_out_shape"] = out_view.local_shape
        if masks is not None:
            dev["mask"] = masks[coord]
        locals_[coord] = opdef.kernel([t.locals[coord] for t in inputs], args, dev)
    out_dtype = locals_[next(iter(locals_))].dtype
    meta = DTensorMeta(tuple(out_shape), out_spec, np.dtype(out_dtype))
    return DTensor(meta, locals_)


def _dispatch_static(op: str, inputs: list[DTensor], args: dict,
                     ctx: DispatchContext, rt) -> DTensor:
    if ctx.static_plan is None or ctx.static_pos >= len(ctx.static_plan):
        raise StaticMetadataMissing(
            f"static plan exhausted at op {op!r}; the trace does not cover this call"
        )
    step = ctx.static_plan[ctx.static_pos]
    if step.op != op:
        raise StaticMetadataMissing(
            f"static plan expected op {step.op!r} but got {op!r} "
            f"(site {step.site or '?'}); the run diverged from the recorded trace"
        )
    ctx.static_pos += 1
    opdef = _OPS[op]
    moved = [
        redistribute(t, spec, rt.ledger) if t.meta.spec != spec else t
        for t, spec in zip(inputs, step.expected_specs)
    ]
    return _execute(opdef, moved, args, step.out_spec, step.out_shape, rt)


def record_static_plan(trace: list[StaticStep]):
    """Turn one recorded iteration into (replayable steps, plan directives).

    Directives name the redistribution each input needs and the placement
    annotations random/stateful ops rely on, keyed by call site."""
    directives: list[str] = []
    for step in trace:
        site = step.site or step.op
        if step.op == "dropout":
            from .placement import format_placements
            directives.append(
                f"annotate {site}.<in> {format_placements(step.expected_specs[0].placements)}"
            )
        for i, spec in enumerate(step.expected_specs):
            from .placement import format_placements
            directives.append(
                f"# {site}:{step.op}:<in>:{i} expects {format_placements(spec.placements)}"
            )
    return list(trace), directives
