"""Sharding plans: a line-oriented DSL, pattern resolution against a module
tree, lowering to hook records (the plan IR), IR optimization, and hook
installation.

Grammar, one directive per line ('#' comments allowed):

    shard <path-pattern> <placement> @<mesh> [init|run]
    redistribute <path> <src>-><dst> @<mesh> [grad <gsrc>-><gdst>]
    annotate <path> <placement> @<mesh>
    factory <path> <placement> @<mesh>

Placements are `R | P | S(d) | IS(d,m)`, comma-joined per mesh dim. Lowered
records print as `path.hook:operand:index:action(args)`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import ops, runtime as runtime_mod
from .mesh import DeviceMesh
from .model import Module, Parameter
from .placement import Partial, Placement, Replicate, ShardSpec, format_placements, parse_placements

PHASE_INIT = "init"
PHASE_RUN = "run"

HOOK_FORWARD_PRE = "forward_pre"
HOOK_FORWARD_POST = "forward_post"
HOOK_BACKWARD_POST = "backward_post"
HOOK_INIT = "init"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class PlanDirective:
    kind: str                     # shard | redistribute | annotate | factory
    pattern: str                  # regular expression over tensor paths
    placements: tuple[Placement, ...] | None
    mesh: str
    phase: str = PHASE_INIT
    src_placements: tuple[Placement, ...] | None = None   # redistribute only
    grad_src: tuple[Placement, ...] | None = None
    grad_dst: tuple[Placement, ...] | None = None


@dataclass
class Plan:
    directives: list[PlanDirective] = field(default_factory=list)

    def shard(self, pattern: str, placement: str, mesh: str, phase: str = PHASE_INIT):
        if phase not in (PHASE_INIT, PHASE_RUN):
            raise PlanError(f"bad phase {phase!r}")
        self.directives.append(PlanDirective(
            "shard", _compile(pattern), parse_placements(placement), mesh, phase))
        return self

    def redistribute(self, path: str, src: str, dst: str, mesh: str,
                     grad: tuple[str, str] | None = None):
        self.directives.append(PlanDirective(
            "redistribute", _compile(path), parse_placements(dst), mesh, PHASE_RUN,
            src_placements=parse_placements(src),
            grad_src=parse_placements(grad[0]) if grad else None,
            grad_dst=parse_placements(grad[1]) if grad else None))
        return self

    def annotate(self, path: str, placement: str, mesh: str):
        self.directives.append(PlanDirective(
            "annotate", _compile(path), parse_placements(placement), mesh, PHASE_RUN))
        return self

    def factory(self, path: str, placement: str, mesh: str):
        self.directives.append(PlanDirective(
            "factory", _compile(path), parse_placements(placement), mesh, PHASE_RUN))
        return self


def _compile(pattern: str) -> str:
    try:
        re.compile(pattern)
    except re.error as exc:
        raise PlanError(f"bad path pattern {pattern!r}: {exc}") from exc
    return pattern


_ARROW = re.compile(r"\s*->\s*")


def parse_plan(text: str) -> Plan:
    plan = Plan()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            _parse_line(plan, line)
        except (PlanError, ValueError) as exc:
            raise PlanError(f"line {lineno}: {exc}") from exc
    return plan


def _parse_line(plan: Plan, line: str):
    parts = line.split()
    kind = parts[0]
    mesh_parts = [p for p in parts if p.startswith("@")]
    if len(mesh_parts) != 1:
        raise PlanError(f"expected exactly one @<mesh>: {line!r}")
    mesh = mesh_parts[0][1:]
    rest = [p for p in parts[1:] if not p.startswith("@")]
    if kind == "shard":
        phase = PHASE_INIT
        if rest and rest[-1] in (PHASE_INIT, PHASE_RUN):
            phase = rest.pop()
        if len(rest) != 2:
            raise PlanError(f"shard needs <pattern> <placement>: {line!r}")
        plan.shard(rest[0], rest[1], mesh, phase)
    elif kind == "redistribute":
        grad = None
        if "grad" in rest:
            i = rest.index("grad")
            gsrc, gdst = _ARROW.split(rest[i + 1])
            grad = (gsrc, gdst)
            rest = rest[:i]
        if len(rest) != 2:
            raise PlanError(f"redistribute needs <path> <src>-><dst>: {line!r}")
        src, dst = _ARROW.split(rest[1])
        plan.redistribute(rest[0], src, dst, mesh, grad=grad)
    elif kind in ("annotate", "factory"):
        if len(rest) != 2:
            raise PlanError(f"{kind} needs <path> <placement>: {line!r}")
        getattr(plan, kind)(rest[0], rest[1], mesh)
    else:
        raise PlanError(f"unknown directive {kind!r}")


def parse_plan_file(path) -> Plan:
    with open(path) as f:
        return parse_plan(f.read())


# -- lowering -------------------------------------------------------------------

@dataclass(frozen=True)
class IRAction:
    operand: str       # "<in>" | "<out>" | parameter name | "weight.grad" ...
    index: int
    kind: str          # redist | annotate | factory | shard
    args: str          # printable argument string, e.g. "S(0)->R"
    payload: tuple = ()  # machine-readable extras for the hook

    def dump(self) -> str:
        return f"{self.operand}:{self.index}:{self.kind}({self.args})"


@dataclass
class IRRecord:
    path: str          # module (or parameter) path owning the hook
    hook: str
    actions: list[IRAction] = field(default_factory=list)

    def dump(self) -> str:
        return "; ".join(f"{self.path}.{self.hook}:{a.dump()}" for a in self.actions)


@dataclass
class PlanIR:
    records: list[IRRecord] = field(default_factory=list)
    init_shards: dict[str, tuple[str, tuple[Placement, ...]]] = field(default_factory=dict)

    def dump(self) -> list[str]:
        lines = []
        for path, (mesh, placements) in sorted(self.init_shards.items()):
            lines.append(f"{path}.init:{path.rsplit('.', 1)[-1]}:0:shard({format_placements(placements)})")
        for rec in self.records:
            lines.extend(f"{rec.path}.{rec.hook}:{a.dump()}" for a in rec.actions)
        return lines


def _split_tensor_path(path: str) -> tuple[str, str]:
    """(owning module path, operand label) for a tensor path."""
    if path.endswith((".<in>", ".<out>")):
        mod, op = path.rsplit(".", 1)
        return mod, op
    if path.endswith(".grad"):
        base = path[: -len(".grad")]
        mod, name = base.rsplit(".", 1) if "." in base else ("", base)
        return mod, f"{name}.grad"
    mod, name = path.rsplit(".", 1) if "." in path else ("", path)
    return mod, name


def lower_and_optimize(plan: Plan, model: Module, strict: bool = True) -> PlanIR:
    """Resolve patterns to concrete tensor paths, translate directives to hook
    records, then fuse per (path, hook), deduplicate identical actions, and
    order actions by operand index (redistributions before annotations on the
    same operand)."""
    model.bind_paths()
    all_paths = model.tensor_paths()
    param_paths = {p for p, _ in model.named_parameters()}
    raw_records: list[IRRecord] = []
    ir = PlanIR()

    for d in plan.directives:
        rx = re.compile(d.pattern)
        matched = [p for p in all_paths if rx.fullmatch(p)]
        if not matched:
            if strict:
                raise PlanError(f"pattern {d.pattern!r} matches no tensor path")
            continue
        for path in matched:
            _lower_one(d, path, path in param_paths, ir, raw_records)

    # fuse + dedup + reorder
    fused: dict[tuple[str, str], IRRecord] = {}
    order: list[tuple[str, str]] = []
    for rec in raw_records:
        key = (rec.path, rec.hook)
        if key not in fused:
            fused[key] = IRRecord(rec.path, rec.hook)
            order.append(key)
        target = fused[key]
        for a in rec.actions:
            if a not in target.actions:
                target.actions.append(a)
    rank = {"redist": 0, "factory": 0, "annotate": 1}
    for key in order:
        rec = fused[key]
        rec.actions.sort(key=lambda a: (a.index, rank.get(a.kind, 2)))
        ir.records.append(rec)
    return ir


def _lower_one(d: PlanDirective, path: str, is_param: bool, ir: PlanIR,
               out: list[IRRecord]):
    mod_path, operand = _split_tensor_path(path)
    if d.kind == "shard":
        if not is_param:
            raise PlanError(f"shard targets a parameter, got {path!r}")
        if d.phase == PHASE_INIT:
            prev = ir.init_shards.get(path)
            if prev is not None and prev != (d.mesh, d.placements):
                raise PlanError(f"conflicting init placements for {path!r}")
            ir.init_shards[path] = (d.mesh, d.placements)
            return
        # run-phase shard: reshard the weight before forward; the gradient
        # flows back to the init placement
        args = f"->{format_placements(d.placements)}"
        out.append(IRRecord(mod_path, HOOK_FORWARD_PRE, [
            IRAction(operand, 0, "redist", args, payload=("param", d.mesh, d.placements))
        ]))
    elif d.kind == "redistribute":
        hook = HOOK_FORWARD_POST if operand == "<out>" else HOOK_FORWARD_PRE
        args = f"{format_placements(d.src_placements)}->{format_placements(d.placements)}"
        payload = ("redist", d.mesh, d.src_placements, d.placements, d.grad_src, d.grad_dst)
        out.append(IRRecord(mod_path, hook, [IRAction(operand, 0, "redist", args, payload)]))
    elif d.kind == "annotate":
        hook = HOOK_BACKWARD_POST if operand.endswith(".grad") else HOOK_FORWARD_PRE
        if operand == "<out>":
            hook = HOOK_FORWARD_POST
        args = format_placements(d.placements)
        out.append(IRRecord(mod_path, hook, [
            IRAction(operand, 0, "annotate", args, payload=("annotate", d.mesh, d.placements))
        ]))
    elif d.kind == "factory":
        hook = HOOK_FORWARD_POST if operand == "<out>" else HOOK_FORWARD_PRE
        out.append(IRRecord(mod_path, hook, [
            IRAction(operand, 0, "factory", format_placements(d.placements),
                     payload=("factory", d.mesh, d.placements))
        ]))


# -- hook installation --------------------------------------------------------------

def parallelize(model: Module, plan: Plan, strict: bool = True) -> Module:
    """Materialize parameters per the plan's init placements and install the
    lowered hooks. With an empty plan the model is unchanged (single-device)."""
    rt = runtime_mod.current()
    ir = lower_and_optimize(plan, model, strict=strict)

    init_specs = {}
    for path, (mesh_name, placements) in ir.init_shards.items():
        mesh = rt.mesh(mesh_name)
        init_specs[path] = ShardSpec(mesh, placements)
    model.materialize(rt.rng, init_specs)

    modules = dict(model.named_modules())
    for rec in ir.records:
        if rec.path not in modules:
            raise PlanError(f"no module at path {rec.path!r}")
        mod = modules[rec.path]
        if rec.hook == HOOK_FORWARD_PRE:
            mod._pre_hooks.append(_make_pre_hook(rec, rt))
        elif rec.hook == HOOK_FORWARD_POST:
            mod._post_hooks.append(_make_post_hook(rec, rt))
        elif rec.hook == HOOK_BACKWARD_POST:
            _install_grad_annotation(mod, rec, rt)
    model._plan_ir = ir
    return model


def _spec(rt, mesh_name, placements) -> ShardSpec:
    return ShardSpec(rt.mesh(mesh_name), placements)


def _make_pre_hook(rec: IRRecord, rt):
    def hook(mod: Module, x):
        for a in rec.actions:
            if a.payload and a.payload[0] == "param":
                _, mesh_name, placements = a.payload
                run_spec = _spec(rt, mesh_name, placements)
                base = mod.param_var(a.operand)
                init_spec = base.value.meta.spec
                mod._overrides[a.operand] = ops.redistribute(
                    base, run_spec, grad_spec=init_spec)
            elif a.payload and a.payload[0] == "redist" and a.operand == "<in>":
                _, mesh_name, _src, dst, gsrc, gdst = a.payload
                grad_spec = _spec(rt, mesh_name, gdst) if gdst else None
                x = ops.redistribute(ops.as_var(x), _spec(rt, mesh_name, dst),
                                     grad_spec=grad_spec)
            elif a.payload and a.payload[0] == "factory" and a.operand == "<in>":
                x = _apply_factory(x, _spec(rt, a.payload[1], a.payload[2]))
            # annotations on inputs are static metadata; nothing to run
        return x
    return hook


def _make_post_hook(rec: IRRecord, rt):
    def hook(mod: Module, out):
        for a in rec.actions:
            if a.operand != "<out>":
                continue
            if a.payload and a.payload[0] == "redist":
                _, mesh_name, _src, dst, gsrc, gdst = a.payload
                grad_spec = _spec(rt, mesh_name, gdst) if gdst else None
                out = ops.redistribute(ops.as_var(out), _spec(rt, mesh_name, dst),
                                       grad_spec=grad_spec)
            elif a.payload and a.payload[0] == "factory":
                out = _apply_factory(out, _spec(rt, a.payload[1], a.payload[2]))
        return out
    return hook


def _apply_factory(value, spec: ShardSpec):
    """Convert a runtime-created plain array into a DTensor."""
    from .dtensor import DTensor, distribute
    var = ops.as_var(value)
    if isinstance(var.value, DTensor):
        return var
    out = ops.as_var(distribute(np.asarray(var.value), spec))
    out.requires_grad = var.requires_grad
    out.node = var.node
    return out


def _install_grad_annotation(mod: Module, rec: IRRecord, rt):
    """Mark parameter gradients as awaiting a pending reduction; the trainer
    picks these up for bucketed/fused reduce after backward."""
    pending = getattr(mod, "_pending_grad_reduce", set())
    for a in rec.actions:
        if a.operand.endswith(".grad"):
            pending.add(a.operand[: -len(".grad")])
    mod._pending_grad_reduce = pending


def pending_grad_params(model: Module):
    """Parameters whose gradients a plan marked as awaiting reduction."""
    out = []
    for path, mod in model.named_modules():
        for name in sorted(getattr(mod, "_pending_grad_reduce", ())):
            p = mod._params.get(name)
            if p is not None:
                out.append((f"{path}.{name}" if path else name, p))
    return out
