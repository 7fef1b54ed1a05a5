"""Scenario runner and report emitter.

Subcommands:
    run          train an MLP scenario under a dispatch mode, emit JSON + CSV
    rng-sweep    distributed-vs-single-device random generation matrix
    consistency  same MLP on a single device vs a mesh; max loss difference
    cost         vanilla vs fused gradient-reduce cost tables
    record-plan  record one training step and print the static-plan directives

A scenario file is line-oriented `key value` text, e.g.::

    mesh tp=4
    layers 16 32 8
    batch 8
    dropout 0.25
    steps 10
    seed 42
    lr 0.05
    plan tp.plan
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, asdict
from fractions import Fraction

import numpy as np

from . import comm, ops, rng as rng_mod, runtime as runtime_mod
from .comm import CollectiveLedger, CostParams, bucketed_grad_reduce, cost_model_eval, fused_nd_grad_reduce
from .dispatch import DispatchContext, MODE_DYNAMIC, MODE_RECORD, record_static_plan, use_context
from .dtensor import DTensor, distribute, to_global
from .engine import backward
from .mesh import create_mesh
from .model import MLP, sgd_step
from .placement import ShardSpec, parse_placements
from .plan import Plan, parse_plan, parallelize
from .rng import RngState


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    mesh: list[tuple[str, int]] = field(default_factory=list)  # [] = single device
    layers: tuple[int, int, int] = (16, 32, 8)
    batch: int = 8
    dropout: float = 0.0
    steps: int = 10
    seed: int = 0
    offset: int = 0
    theta: int = rng_mod.DEFAULT_GLOBAL_THREADS
    dtype: str = "float64"
    mode: str = MODE_DYNAMIC
    cache: bool = True
    bucket_bytes: int = comm.DEFAULT_BUCKET_BYTES
    lr: float = 0.05
    plan_text: str = ""
    input_placement: str = "R"
    data_dist: str = "normal"   # normal | randint (exact-value regime)
    grad_reduce: str = "bucketed"  # bucketed | fused


def parse_mesh_arg(text: str) -> list[tuple[str, int]]:
    """'tp=4' or 'dp=2,tp=2' -> [('dp',2),('tp',2)]; '1' or '' -> single device."""
    text = text.strip()
    if text in ("", "1", "none"):
        return []
    dims = []
    for part in text.split(","):
        name, _, size = part.partition("=")
        if not size:
            raise ScenarioError(f"mesh dim needs name=size, got {part!r}")
        dims.append((name.strip(), int(size)))
    return dims


def load_scenario(path: str) -> Scenario:
    s = Scenario()
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition(" ")
            value = value.strip()
            try:
                _apply_key(s, key, value, base)
            except (ValueError, OSError) as exc:
                raise ScenarioError(f"{path}:{lineno}: {exc}") from exc
    return s


def _apply_key(s: Scenario, key: str, value: str, base: str):
    if key == "mesh":
        s.mesh = parse_mesh_arg(value)
    elif key == "layers":
        parts = tuple(int(v) for v in value.split())
        if len(parts) != 3:
            raise ScenarioError("layers needs: d_in d_hidden d_out")
        s.layers = parts
    elif key == "plan":
        with open(os.path.join(base, value)) as f:
            s.plan_text = f.read()
    elif key in ("batch", "steps", "seed", "offset", "theta", "bucket-bytes"):
        setattr(s, key.replace("-", "_"), int(value))
    elif key in ("dropout", "lr"):
        setattr(s, key, float(value))
    elif key in ("dtype", "mode", "data-dist", "input-placement", "grad-reduce"):
        setattr(s, key.replace("-", "_"), value)
    elif key == "cache":
        s.cache = value.lower() in ("1", "true", "on", "yes")
    else:
        raise ScenarioError(f"unknown scenario key {key!r}")


def _weight_digest(model) -> str:
    h = hashlib.sha256()
    for path, p in model.named_parameters():
        v = p.var.value
        g = to_global(v) if isinstance(v, DTensor) else v
        h.update(path.encode())
        h.update(g.tobytes())
    return h.hexdigest()


def _data_dist(s: Scenario) -> rng_mod.Distribution:
    if s.data_dist == "normal":
        return rng_mod.Normal(0.0, 1.0)
    if s.data_dist == "randint":
        return rng_mod.RandInt(-2, 3)
    raise ScenarioError(f"unknown data-dist {s.data_dist!r}")


def _build(s: Scenario):
    """Fresh runtime + parallelized model for a scenario."""
    meshes = {}
    mesh = None
    if s.mesh:
        mesh = create_mesh([tuple(t) for t in s.mesh], name="mesh")
        for name, _ in s.mesh:
            meshes[name] = mesh if len(s.mesh) > 1 else mesh
        meshes["mesh"] = mesh
    rt = runtime_mod.Runtime(
        rng=RngState(s.seed, s.offset, s.theta),
        ledger=CollectiveLedger(),
        meshes=meshes,
    )
    runtime_mod.set_runtime(rt)
    dtype = np.dtype(s.dtype)
    model = MLP(*s.layers, dropout_p=s.dropout, dtype=dtype)
    if s.data_dist == "randint":
        for _, prm in model.named_parameters():
            prm.dist = rng_mod.RandInt(-2, 3)
    plan = parse_plan(s.plan_text) if s.plan_text else Plan()
    parallelize(model, plan)
    return rt, mesh, model


def _reduce_partial_grads(model, s: Scenario, rt):
    grads, owners = [], []
    for _, p in model.named_parameters():
        g = p.var.grad if p.var is not None else None
        if isinstance(g, DTensor) and g.meta.spec.partial_mesh_dims():
            grads.append(g)
            owners.append(p)
    if not grads:
        return
    if s.grad_reduce == "fused":
        reduced, _ = fused_nd_grad_reduce(grads, s.bucket_bytes, rt.ledger)
    else:
        reduced, _ = bucketed_grad_reduce(grads, s.bucket_bytes, rt.ledger)
    for p, g in zip(owners, reduced):
        p.var.grad = g


def _train(s: Scenario, ctx: DispatchContext):
    """One full training run; returns (losses, model, runtime)."""
    rt, mesh, model = _build(s)
    dtype = np.dtype(s.dtype)
    dist = _data_dist(s)
    data_state = RngState(s.seed ^ 0x5F5E77, 0, s.theta)
    d_in, _, d_out = s.layers
    in_spec = out_spec = None
    if mesh is not None:
        in_spec = ShardSpec(mesh, parse_placements(s.input_placement))
        out_spec = ShardSpec(mesh, parse_placements(
            ",".join("R" for _ in range(mesh.ndim))))
    losses = []
    with use_context(ctx):
        for step in range(s.steps):
            X = rng_mod.generate_global((s.batch, d_in), data_state, dist, dtype)
            T = rng_mod.generate_global((s.batch, d_out), data_state, dist, dtype)
            if mesh is not None:
                x, t = distribute(X, in_spec), distribute(T, out_spec)
            else:
                x, t = X, T
            if ctx.mode == "static":
                ctx.static_pos = 0
            out = model(ops.as_var(x))
            if mesh is not None and isinstance(out.value, DTensor):
                out = ops.redistribute(out, out_spec)
            loss = ops.mse(out, ops.as_var(t))
            backward(loss)
            _reduce_partial_grads(model, s, rt)
            sgd_step(model, s.lr)
            lv = loss.value
            losses.append(float(to_global(lv)) if isinstance(lv, DTensor) else float(lv))
    return losses, model, rt


def run_scenario(s: Scenario):
    """Execute a scenario under its dispatch mode; returns (report, model)."""
    if s.mode == "static":
        # record one step on an identical fresh setup, then replay statically
        rec_ctx = DispatchContext(mode=MODE_RECORD, cache_enabled=s.cache)
        rec_s = Scenario(**{**asdict_scenario(s), "steps": 1, "mode": MODE_RECORD})
        _train(rec_s, rec_ctx)
        ctx = DispatchContext(cache_enabled=s.cache)
        ctx.begin_static_replay(list(rec_ctx.trace))
    else:
        ctx = DispatchContext(mode=s.mode, cache_enabled=s.cache)
    losses, model, rt = _train(s, ctx)

    rng_checks = []
    if s.mesh:
        # merged distributed init must equal the single-device init, bitwise
        dist_probe = Scenario(**{**asdict_scenario(s), "steps": 0})
        _, dist_model, _ = _train(dist_probe, DispatchContext())
        ref_probe = Scenario(**{**asdict_scenario(s), "mesh": [], "steps": 0,
                                "mode": MODE_DYNAMIC, "plan_text": ""})
        _, ref_model, _ = _train(ref_probe, DispatchContext())
        rng_checks.append({
            "check": "init_weights_match_single_device",
            "match": _weight_digest(dist_model) == _weight_digest(ref_model),
        })
    report = {
        "scenario": asdict_scenario(s),
        "losses": losses,
        "weight_digest": _weight_digest(model),
        "rng_checks": rng_checks,
        "dispatch_counters": dict(ctx.counters),
        "ledger": {
            "counts": dict(rt.ledger.counts),
            "total_bytes": str(rt.ledger.total_bytes),
            "modeled_time": str(rt.ledger.modeled_time),
        },
    }
    return report, model, rt, ctx


def asdict_scenario(s: Scenario) -> dict:
    d = asdict(s)
    d["mesh"] = [list(t) for t in s.mesh]
    return d


# -- subcommands ------------------------------------------------------------------

def _emit(report: dict, ledger_csv: str, out: str | None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.json"), "w") as f:
            f.write(text + "\n")
        with open(os.path.join(out, "ledger.csv"), "w") as f:
            f.write(ledger_csv)
    else:
        print(text)


def cmd_run(args) -> int:
    s = load_scenario(args.scenario)
    _apply_overrides(s, args)
    report, model, rt, ctx = run_scenario(s)
    _emit(report, rt.ledger.to_csv(), args.out)
    return 0


def _apply_overrides(s: Scenario, args):
    if args.mode:
        s.mode = args.mode
    if args.mesh is not None:
        s.mesh = parse_mesh_arg(args.mesh)
    if args.plan:
        with open(args.plan) as f:
            s.plan_text = f.read()
    if args.steps is not None:
        s.steps = args.steps
    if args.seed is not None:
        s.seed = args.seed
    if args.theta is not None:
        s.theta = args.theta
    if args.bucket_bytes is not None:
        s.bucket_bytes = args.bucket_bytes


def rng_sweep_cells(sizes=(4096,), mesh_sizes=(1, 2, 4), theta=rng_mod.DEFAULT_GLOBAL_THREADS,
                    seed=0):
    """Yield (cell description, match bool) over dists x shapes x shardings."""
    from .mesh import create_mesh as _cm
    dists = [
        ("uniform", rng_mod.Uniform01()),
        ("normal", rng_mod.Normal(0.0, 1.0)),
        ("randint", rng_mod.RandInt(0, 1 << 31)),
        ("bernoulli", rng_mod.Bernoulli(0.5)),
    ]
    for size in sizes:
        for ndim in (1, 2, 3):
            shape = _power_shape(size, ndim)
            for dist_name, dist in dists:
                ref_state = RngState(seed, 0, theta)
                ref = rng_mod.generate_global(shape, ref_state, dist)
                for P in mesh_sizes:
                    mesh = _cm([("d", P)], name="sweep")
                    for d in range(ndim):
                        spec = ShardSpec(mesh, parse_placements(f"S({d})"))
                        state = RngState(seed, 0, theta)
                        locals_ = rng_mod.generate_distributed(spec, shape, state, dist)
                        merged = to_global(DTensorLike(spec, shape, locals_))
                        match = merged.tobytes() == ref.tobytes() and state.offset == ref_state.offset
                        yield {
                            "dist": dist_name, "shape": "x".join(map(str, shape)),
                            "devices": P, "shard_dim": d, "match": match,
                        }


def DTensorLike(spec, shape, locals_):
    from .dtensor import DTensor, DTensorMeta
    sample = locals_[next(iter(locals_))]
    return DTensor(DTensorMeta(tuple(shape), spec, sample.dtype), locals_)


def _power_shape(numel: int, ndim: int) -> tuple[int, ...]:
    shape = [1] * ndim
    i = 0
    while np.prod(shape) < numel:
        shape[i % ndim] *= 2
        i += 1
    return tuple(int(v) for v in shape)


def cmd_rng_sweep(args) -> int:
    rows = list(rng_sweep_cells(seed=args.seed or 0,
                                theta=args.theta or rng_mod.DEFAULT_GLOBAL_THREADS))
    lines = ["dist,shape,devices,shard_dim,match"]
    lines += [f"{r['dist']},{r['shape']},{r['devices']},{r['shard_dim']},{r['match']}" for r in rows]
    csv = "\n".join(lines) + "\n"
    ok = all(r["match"] for r in rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "rng_sweep.csv"), "w") as f:
            f.write(csv)
    else:
        print(csv, end="")
    print(f"rng-sweep: {len(rows)} cells, all_match={ok}")
    return 0 if ok else 1


def cmd_consistency(args) -> int:
    steps = args.steps if args.steps is not None else 50
    mesh = parse_mesh_arg(args.mesh) if args.mesh else [("tp", 2)]
    base = Scenario(layers=(16, 32, 8), dropout=0.25, steps=steps,
                    seed=args.seed or 42, theta=args.theta or rng_mod.DEFAULT_GLOBAL_THREADS)
    single = Scenario(**{**asdict_scenario(base), "mesh": []})
    tp_size = mesh[-1][1]
    plan = (
        f"shard fc1.weight S(1) @{mesh[-1][0]}\n"
        f"shard fc2.weight S(0) @{mesh[-1][0]}\n"
        f"redistribute fc2.<out> P->R @{mesh[-1][0]}\n"
    ) if tp_size > 1 else ""
    dist = Scenario(**{**asdict_scenario(base), "mesh": mesh, "plan_text": plan})
    r1, *_ = run_scenario(single)
    r2, *_ = run_scenario(dist)
    diffs = [abs(a - b) for a, b in zip(r1["losses"], r2["losses"])]
    report = {
        "steps": steps,
        "mesh": [list(t) for t in mesh],
        "max_loss_diff": max(diffs) if diffs else 0.0,
        "losses_single": r1["losses"],
        "losses_mesh": r2["losses"],
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "consistency.json"), "w") as f:
            f.write(text + "\n")
    print(f"consistency: max loss diff over {steps} steps = {report['max_loss_diff']:.3e}")
    return 0


def cmd_cost(args) -> int:
    tables = []
    for counts in ([2, 2], [8, 8]):
        tv, tf, ratio = cost_model_eval(CostParams(
            payload_bytes=1, transfer_time_per_byte=Fraction(1),
            device_counts=tuple(counts)))
        tables.append((counts, tv, tf, ratio))
    print("P_i        T_vanilla  T_fused    ratio")
    for counts, tv, tf, ratio in tables:
        print(f"{str(counts):<10} {float(tv):<10.6g} {float(tf):<10.6g} {float(ratio):.6g}")
    print()
    print("ratio -> N as P_i grows:")
    for N in (1, 2, 3):
        _, _, ratio = cost_model_eval(CostParams(
            payload_bytes=1, transfer_time_per_byte=Fraction(1),
            device_counts=tuple([1024] * N)))
        print(f"  N={N}: ratio={float(ratio):.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rows = ["P,T_vanilla,T_fused,ratio"]
        rows += [f"\"{c}\",{float(tv)},{float(tf)},{float(r)}" for c, tv, tf, r in tables]
        with open(os.path.join(args.out, "cost.csv"), "w") as f:
            f.write("\n".join(rows) + "\n")
    return 0


def cmd_record_plan(args) -> int:
    s = load_scenario(args.scenario)
    _apply_overrides(s, args)
    s.steps = 1
    s.mode = MODE_RECORD
    ctx = DispatchContext(mode=MODE_RECORD)
    _train(s, ctx)
    steps, directives = record_static_plan(ctx.trace)
    lines = [f"# {len(steps)} dispatches recorded"] + directives
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "static.plan"), "w") as f:
            f.write(text)
    else:
        print(text, end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="spmdsim")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, scenario=False):
        if scenario:
            p.add_argument("scenario", help="scenario file")
        p.add_argument("--mode", choices=["dynamic", "record", "static"])
        p.add_argument("--mesh", help="e.g. tp=4 or dp=2,tp=2; '1' = single device")
        p.add_argument("--plan", help="plan file override")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--theta", type=int)
        p.add_argument("--bucket-bytes", type=int, dest="bucket_bytes")
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("run", help="train a scenario and emit reports"), scenario=True)
    common(sub.add_parser("rng-sweep", help="distributed RNG equivalence matrix"))
    common(sub.add_parser("consistency", help="single-device vs mesh loss difference"))
    common(sub.add_parser("cost", help="gradient-reduce cost tables"))
    common(sub.add_parser("record-plan", help="record a step, print static directives"),
           scenario=True)

    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "rng-sweep": cmd_rng_sweep,
        "consistency": cmd_consistency,
        "cost": cmd_cost,
        "record-plan": cmd_record_plan,
    }
    try:
        return handlers[args.cmd](args)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
