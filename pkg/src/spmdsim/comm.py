"""Deterministic simulated collectives with byte accounting and the analytic
ring cost model.

All reductions run in ascending group-rank order so repeated runs are
bit-identical. Per-device traffic follows the ring model: 2*S*(P-1)/P for
AllReduce, S*(P-1)/P for AllGather and ReduceScatter, with S the full payload
in bytes. Modeled time adds the same expression times the per-byte transfer
time B; the latency term is omitted.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

DEFAULT_BUCKET_BYTES = 65536


class CommError(ValueError):
    pass


@dataclass
class LedgerEntry:
    collective: str
    mesh: str
    dims: str
    payload_bytes: int
    participants: int
    bytes_per_device: Fraction
    modeled_time: Fraction


@dataclass
class CollectiveLedger:
    transfer_time_per_byte: Fraction = Fraction(1)
    entries: list[LedgerEntry] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    def record(self, collective: str, payload_bytes: int, participants: int,
               mesh: str = "", dims: str = "") -> LedgerEntry:
        P = participants
        S = payload_bytes
        factor = 2 if collective == "all_reduce" else 1
        bytes_per_device = Fraction(factor * S * (P - 1), P) if P > 1 else Fraction(0)
        entry = LedgerEntry(
            collective=collective,
            mesh=mesh,
            dims=dims,
            payload_bytes=S,
            participants=P,
            bytes_per_device=bytes_per_device,
            modeled_time=bytes_per_device * self.transfer_time_per_byte,
        )
        self.entries.append(entry)
        self.counts[collective] = self.counts.get(collective, 0) + 1
        return entry

    @property
    def total_bytes(self) -> Fraction:
        return sum((e.bytes_per_device * e.participants for e in self.entries), Fraction(0))

    @property
    def modeled_time(self) -> Fraction:
        return sum((e.modeled_time for e in self.entries), Fraction(0))

    def count(self, collective: str) -> int:
        return self.counts.get(collective, 0)

    def reset(self):
        self.entries.clear()
        self.counts.clear()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["collective", "mesh", "dims", "S_bytes", "P", "bytes_per_device", "T_model"])
        for e in self.entries:
            w.writerow([e.collective, e.mesh, e.dims, e.payload_bytes, e.participants,
                        float(e.bytes_per_device), float(e.modeled_time)])
        return buf.getvalue()


# -- collectives ---------------------------------------------------------------

def all_reduce(buffers: list[np.ndarray], ledger: CollectiveLedger | None = None,
               mesh: str = "", dims: str = "") -> np.ndarray:
    """Sum in ascending group-rank order; every participant gets the result."""
    shapes = {b.shape for b in buffers}
    if len(shapes) != 1:
        raise CommError(f"all_reduce buffer shape mismatch: {shapes}")
    acc = buffers[0].copy()
    for b in buffers[1:]:
        acc += b
    if ledger is not None:
        ledger.record("all_reduce", buffers[0].nbytes, len(buffers), mesh, dims)
    return acc


def all_gather(shards: list[np.ndarray], ledger: CollectiveLedger | None = None,
               mesh: str = "", dims: str = "") -> list[np.ndarray]:
    """Every participant receives the full shard list, in group-rank order."""
    if ledger is not None:
        ledger.record("all_gather", sum(s.nbytes for s in shards), len(shards), mesh, dims)
    return list(shards)


def reduce_scatter(buffers: list[np.ndarray], slicer, ledger: CollectiveLedger | None = None,
                   mesh: str = "", dims: str = "") -> list[np.ndarray]:
    """Sum in ascending group-rank order, then hand participant k the piece
    slicer(summed, k)."""
    shapes = {b.shape for b in buffers}
    if len(shapes) != 1:
        raise CommError(f"reduce_scatter buffer shape mismatch: {shapes}")
    acc = buffers[0].copy()
    for b in buffers[1:]:
        acc += b
    if ledger is not None:
        ledger.record("reduce_scatter", buffers[0].nbytes, len(buffers), mesh, dims)
    return [slicer(acc, k) for k in range(len(buffers))]


# -- bucketed and N-dim fused gradient reduce -----------------------------------

@dataclass
class GradBucket:
    capacity_bytes: int
    members: list = field(default_factory=list)  # DTensor refs
    member_bytes: int = 0

    def fits(self, nbytes: int) -> bool:
        return not self.members or self.member_bytes + nbytes <= self.capacity_bytes


def _pack_buckets(grads, bucket_bytes: int) -> list[GradBucket]:
    """Reverse-creation order, greedy fill; a gradient larger than the bucket
    gets a dedicated bucket."""
    buckets: list[GradBucket] = []
    for g in reversed(grads):
        nbytes = g.local_nbytes_max()
        if not buckets or not buckets[-1].fits(nbytes):
            buckets.append(GradBucket(bucket_bytes))
        buckets[-1].members.append(g)
        buckets[-1].member_bytes += nbytes
    return buckets


def _group_by_partial(grads):
    """Group gradient DTensors by (mesh, tuple of Partial mesh dims)."""
    groups: dict[tuple, list] = {}
    skipped = []
    for g in grads:
        pdims = g.meta.spec.partial_mesh_dims()
        if not pdims:
            skipped.append(g)
            continue
        key = (g.meta.spec.mesh, pdims)
        groups.setdefault(key, []).append(g)
    return groups, skipped


def _reduce_bucket_along_dim(bucket: GradBucket, mesh_dim: int, ledger, rounds: list):
    """Pack member locals into one flat buffer per device, AllReduce along
    each fiber of mesh_dim, unpack, and flip that dim's placement to
    Replicate."""
    from .dtensor import DTensor  # local import: comm must not depend on dtensor at module scope
    from .placement import Replicate

    members: list[DTensor] = bucket.members
    mesh = members[0].meta.spec.mesh
    other = tuple(d for d in range(mesh.ndim) if d != mesh_dim)
    new_locals = {m: {} for m in range(len(members))}
    fibers_done = set()
    for coord in mesh.iter_coords():
        fiber_key = tuple(coord[d] for d in other)
        if fiber_key in fibers_done:
            continue
        fibers_done.add(fiber_key)
        fiber_coords = []
        for k in range(mesh.sizes[mesh_dim]):
            c = list(coord)
            c[mesh_dim] = k
            fiber_coords.append(tuple(c))
        packed = []
        for c in fiber_coords:
            flat = [m.locals[c].reshape(-1) for m in members]
            packed.append(np.concatenate(flat) if flat else np.zeros(0))
        summed = all_reduce(packed, ledger, mesh.name, mesh.dim_names[mesh_dim])
        for c in fiber_coords:
            off = 0
            for mi, m in enumerate(members):
                n = m.locals[c].size
                new_locals[mi][c] = summed[off:off + n].reshape(m.locals[c].shape).copy()
                off += n
    rounds.append(("all_reduce", mesh.name, (mesh.dim_names[mesh_dim],)))
    out = []
    for mi, m in enumerate(members):
        spec = m.meta.spec.with_placement(mesh_dim, Replicate())
        out.append(m.with_spec_and_locals(spec, new_locals[mi]))
    return out


def bucketed_grad_reduce(grads, bucket_bytes: int = DEFAULT_BUCKET_BYTES,
                         ledger: CollectiveLedger | None = None):
    """Per mesh dim: group Partial gradients, pack them into buckets,
    AllReduce each bucket, unpack, flip the dim to Replicate; repeat for all
    Partial dims. Returns (new grads in input order, report).

    The report lists skipped gradients (no Partial dim) and the collective
    rounds issued (one per bucket per dim)."""
    groups, skipped = _group_by_partial(grads)
    result = {id(g): g for g in grads}
    rounds: list = []
    for (mesh, pdims), members in groups.items():
        current = members
        for mesh_dim in pdims:
            buckets = _pack_buckets(current, bucket_bytes)
            updated = []
            for bucket in buckets:
                updated.extend(_reduce_bucket_along_dim(bucket, mesh_dim, ledger, rounds))
            # restore original member order
            by_prev = {id(p): u for p, u in zip(
                [m for b in buckets for m in b.members], updated)}
            current = [by_prev[id(m)] for m in current]
        for before, after in zip(members, current):
            result[id(before)] = after
    report = {"skipped": skipped, "rounds": rounds}
    return [result[id(g)] for g in grads], report


def fused_nd_grad_reduce(grads, bucket_bytes: int = DEFAULT_BUCKET_BYTES,
                         ledger: CollectiveLedger | None = None):
    """Fuse all Partial mesh dims of each group into one flattened dim and
    issue a single (bucketed) AllReduce over the flattened group, then set
    the placements to Replicate on the original mesh."""
    from .placement import Replicate

    groups, skipped = _group_by_partial(grads)
    result = {id(g): g for g in grads}
    rounds: list = []
    for (mesh, pdims), members in groups.items():
        pnames = [mesh.dim_names[d] for d in pdims]
        flat_mesh = mesh.flatten_dims(pnames)
        flat_dim = flat_mesh.dim_names.index("_".join(pnames)) if len(pnames) > 1 else (
            flat_mesh.dim_names.index(pnames[0]))
        other = tuple(d for d in range(flat_mesh.ndim) if d != flat_dim)
        buckets = _pack_buckets(members, bucket_bytes)
        updated_by_prev = {}
        for bucket in buckets:
            new_locals = {mi: {} for mi in range(len(bucket.members))}
            fibers_done = set()
            for fcoord in flat_mesh.iter_coords():
                fiber_key = tuple(fcoord[d] for d in other)
                if fiber_key in fibers_done:
                    continue
                fibers_done.add(fiber_key)
                fiber_coords = []
                for k in range(flat_mesh.sizes[flat_dim]):
                    c = list(fcoord)
                    c[flat_dim] = k
                    fiber_coords.append(tuple(c))
                # flat-mesh coords map to original coords via the shared ranks
                orig_coords = [mesh.coords_of_rank(flat_mesh.rank_at(c)) for c in fiber_coords]
                packed = [
                    np.concatenate([m.locals[oc].reshape(-1) for m in bucket.members])
                    for oc in orig_coords
                ]
                summed = all_reduce(packed, ledger, flat_mesh.name, "+".join(pnames))
                for oc in orig_coords:
                    off = 0
                    for mi, m in enumerate(bucket.members):
                        n = m.locals[oc].size
                        new_locals[mi][oc] = summed[off:off + n].reshape(m.locals[oc].shape).copy()
                        off += n
            rounds.append(("all_reduce", flat_mesh.name, tuple(pnames)))
            for mi, m in enumerate(bucket.members):
                spec = m.meta.spec
                for d in pdims:
                    spec = spec.with_placement(d, Replicate())
                updated_by_prev[id(m)] = m.with_spec_and_locals(spec, new_locals[mi])
        for m in members:
            result[id(m)] = updated_by_prev[id(m)]
    report = {"skipped": skipped, "rounds": rounds}
    return [result[id(g)] for g in grads], report


# -- analytic cost model ---------------------------------------------------------

@dataclass(frozen=True)
class CostParams:
    payload_bytes: int                 # S
    transfer_time_per_byte: Fraction   # B
    device_counts: tuple[int, ...]     # P_i, one per reducing mesh dim

    def __post_init__(self):
        if self.payload_bytes <= 0 or self.transfer_time_per_byte <= 0:
            raise CommError("S and B must be positive")
        if not self.device_counts or any(p < 1 for p in self.device_counts):
            raise CommError("device counts must be >= 1")


def cost_model_eval(params: CostParams) -> tuple[Fraction, Fraction, Fraction]:
    """T_vanilla = 2SB * sum_i (P_i-1)/P_i ; T_fused = 2SB * (prod P_i - 1)/prod P_i.

    Returns (T_vanilla, T_fused, T_vanilla / T_fused) as exact rationals."""
    S = params.payload_bytes
    B = Fraction(params.transfer_time_per_byte)
    two_sb = 2 * S * B
    t_vanilla = two_sb * sum(Fraction(p - 1, p) for p in params.device_counts)
    prod = math.prod(params.device_counts)
    t_fused = two_sb * Fraction(prod - 1, prod)
    ratio = t_vanilla / t_fused if t_fused else Fraction(1)
    return t_vanilla, t_fused, ratio
