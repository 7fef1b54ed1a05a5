"""The distributed tensor: global metadata plus one local per mesh
coordinate, and placement redistribution via simulated collectives.

Per-mesh-dim transitions (processed left to right):
  Shard -> Replicate        AllGather
  Partial -> Replicate      AllReduce
  Partial -> Shard          ReduceScatter
  Replicate -> Shard        local slice, no communication
  Shard(a) -> Shard(b)      AllGather then slice
Transitions into Partial are not public; the communication-free add rule uses
its own internal conversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import comm
from .mesh import DeviceMesh
from .placement import (
    InterleavedShard,
    Partial,
    Placement,
    PlacementError,
    Replicate,
    Shard,
    ShardSpec,
    distribute_local_tensors,
    local_shape_and_offset,
    merge_local_tensors,
    row_major_stride,
)


class RedistributeError(ValueError):
    pass


@dataclass(frozen=True)
class DTensorMeta:
    global_shape: tuple[int, ...]
    spec: ShardSpec
    dtype: np.dtype
    requires_grad: bool = False

    @property
    def global_stride(self) -> tuple[int, ...]:
        return row_major_stride(self.global_shape)

    @property
    def global_numel(self) -> int:
        return math.prod(self.global_shape)

    def signature(self) -> tuple:
        """Hashable shape/placement/dtype signature used by the dispatch cache."""
        return (
            self.global_shape,
            tuple(str(p) for p in self.spec.placements),
            self.spec.mesh.name,
            str(self.dtype),
        )


class DTensor:
    """Global tensor metadata plus a local shard per mesh coordinate."""

    def __init__(self, meta: DTensorMeta, locals_: dict[tuple[int, ...], np.ndarray]):
        self.meta = meta
        self.locals = locals_

    @property
    def shape(self) -> tuple[int, ...]:
        return self.meta.global_shape

    @property
    def dtype(self):
        return self.meta.dtype

    @property
    def mesh(self) -> DeviceMesh:
        return self.meta.spec.mesh

    @property
    def placements(self) -> tuple[Placement, ...]:
        return self.meta.spec.placements

    def local_nbytes_max(self) -> int:
        return max(l.nbytes for l in self.locals.values())

    def with_spec_and_locals(self, spec: ShardSpec, locals_) -> "DTensor":
        return DTensor(replace(self.meta, spec=spec), locals_)

    def map_locals(self, fn) -> "DTensor":
        return DTensor(self.meta, {c: fn(l) for c, l in self.locals.items()})

    def ones_like(self) -> "DTensor":
        spec = self.meta.spec
        for i, p in enumerate(spec.placements):
            if isinstance(p, Partial):
                raise RedistributeError("ones_like undefined for Partial placements")
        return DTensor(
            replace(self.meta, requires_grad=False),
            {c: np.ones_like(l) for c, l in self.locals.items()},
        )

    def __add__(self, other):
        # gradient accumulation path; resolves placement mismatches via dispatch
        from .dispatch import dispatch_op
        if not isinstance(other, DTensor):
            return NotImplemented
        return dispatch_op("add", [self, other])

    def validate(self):
        """Check every local's shape against the spec (replication equality is
        checked by to_global)."""
        for coord in self.mesh.iter_coords():
            view = local_shape_and_offset(self.meta.spec, self.shape, coord)
            got = tuple(self.locals[coord].shape)
            if got != view.local_shape:
                raise PlacementError(
                    f"local at {coord}: shape {got}, expected {view.local_shape}"
                )

    def debug_dump(self) -> str:
        lines = []
        for coord in self.mesh.iter_coords():
            l = self.locals[coord]
            data = np.array2string(l.reshape(-1), separator=",", threshold=64)
            lines.append(f"coord={coord} shape={list(l.shape)} data={data}")
        return "\n".join(lines)

    def __repr__(self):
        return f"DTensor(shape={self.shape}, spec={self.meta.spec}, dtype={self.dtype})"


def distribute(global_tensor: np.ndarray, spec: ShardSpec, requires_grad: bool = False) -> DTensor:
    meta = DTensorMeta(
        global_shape=tuple(global_tensor.shape),
        spec=spec,
        dtype=global_tensor.dtype,
        requires_grad=requires_grad,
    )
    return DTensor(meta, distribute_local_tensors(spec, global_tensor))


def from_locals(locals_: dict, spec: ShardSpec, global_shape: tuple[int, ...]) -> DTensor:
    sample = next(iter(locals_.values()))
    meta = DTensorMeta(tuple(global_shape), spec, sample.dtype)
    t = DTensor(meta, dict(locals_))
    t.validate()
    return t


def to_global(x: DTensor) -> np.ndarray:
    return merge_local_tensors(x.meta.spec, x.meta.global_shape, x.locals)


def _slice_for(spec: ShardSpec, global_shape, coord) -> tuple:
    view = local_shape_and_offset(spec, global_shape, coord)
    return view


def redistribute(x: DTensor, dst: ShardSpec,
                 ledger: comm.CollectiveLedger | None = None) -> DTensor:
    """Move x to placement dst, mesh dim by mesh dim, issuing the collective
    each transition requires. Merging before and after yields the same global
    tensor."""
    if dst.mesh is not x.mesh and dst.mesh != x.mesh:
        raise RedistributeError("redistribute requires the same mesh")
    dst.validate_for_shape(x.shape)
    cur_spec = x.meta.spec
    locals_ = dict(x.locals)
    for i in range(x.mesh.ndim):
        src_p = cur_spec.placements[i]
        dst_p = dst.placements[i]
        if src_p == dst_p:
            continue
        locals_, cur_spec = _transition(locals_, cur_spec, i, dst_p, x.shape, ledger)
    return DTensor(replace(x.meta, spec=cur_spec), locals_)


def _fibers(mesh: DeviceMesh, mesh_dim: int):
    """Yield lists of coordinates, one list per fiber along mesh_dim."""
    seen = set()
    for coord in mesh.iter_coords():
        key = tuple(c for d, c in enumerate(coord) if d != mesh_dim)
        if key in seen:
            continue
        seen.add(key)
        fiber = []
        for k in range(mesh.sizes[mesh_dim]):
            c = list(coord)
            c[mesh_dim] = k
            fiber.append(tuple(c))
        yield fiber


def _dimwise_view(spec: ShardSpec, global_shape, coord, mesh_dim: int, placement: Placement):
    """Window of `placement` applied on mesh_dim alone, with all other mesh
    dims kept at this coord's current placements."""
    probe = spec.with_placement(mesh_dim, placement)
    return local_shape_and_offset(probe, global_shape, coord)


def _transition(locals_, spec: ShardSpec, mesh_dim: int, dst_p: Placement,
                global_shape, ledger):
    mesh = spec.mesh
    src_p = spec.placements[mesh_dim]
    dim_name = mesh.dim_names[mesh_dim]
    new_spec = spec.with_placement(mesh_dim, dst_p)
    out: dict = {}

    if isinstance(dst_p, Partial):
        raise RedistributeError(f"public transition into Partial is unsupported ({src_p}->{dst_p})")

    if isinstance(src_p, (Shard, InterleavedShard)) and isinstance(dst_p, Replicate):
        # AllGather: reassemble the sharded tensor dim from every fiber member
        for fiber in _fibers(mesh, mesh_dim):
            shards = comm.all_gather(
                [locals_[c] for c in fiber], ledger, mesh.name, dim_name)
            assembled = _assemble_shards(spec, global_shape, fiber, shards, mesh_dim)
            for c in fiber:
                out[c] = assembled
        return out, new_spec

    if isinstance(src_p, Partial) and isinstance(dst_p, Replicate):
        for fiber in _fibers(mesh, mesh_dim):
            summed = comm.all_reduce([locals_[c] for c in fiber], ledger, mesh.name, dim_name)
            for c in fiber:
                out[c] = summed
        return out, new_spec

    if isinstance(src_p, Partial) and isinstance(dst_p, (Shard, InterleavedShard)):
        for fiber in _fibers(mesh, mesh_dim):
            pieces = comm.reduce_scatter(
                [locals_[c] for c in fiber],
                lambda summed, k: _local_slice(summed, spec, global_shape, fiber[k], mesh_dim, dst_p),
                ledger, mesh.name, dim_name,
            )
            for c, piece in zip(fiber, pieces):
                out[c] = piece
        return out, new_spec

    if isinstance(src_p, Replicate) and isinstance(dst_p, (Shard, InterleavedShard)):
        # pure local slice, no communication
        for coord in mesh.iter_coords():
            out[coord] = _local_slice(locals_[coord], spec, global_shape, coord, mesh_dim, dst_p)
        return out, new_spec

    if isinstance(src_p, (Shard, InterleavedShard)) and isinstance(dst_p, (Shard, InterleavedShard)):
        # AllGather then slice
        locals_, mid_spec = _transition(locals_, spec, mesh_dim, Replicate(), global_shape, ledger)
        return _transition(locals_, mid_spec, mesh_dim, dst_p, global_shape, ledger)

    raise RedistributeError(f"unsupported transition {src_p} -> {dst_p}")


def _assemble_shards(spec: ShardSpec, global_shape, fiber, shards, mesh_dim):
    """Place each fiber member's shard back at its global coordinates along
    the sharded tensor dim; other dims stay in local coordinates."""
    src_p = spec.placements[mesh_dim]
    tdim = src_p.dim
    # target shape: local along other dims, full global extent along tdim
    sample_view = local_shape_and_offset(spec, global_shape, fiber[0])
    rep_view = _dimwise_view(spec, global_shape, fiber[0], mesh_dim, Replicate())
    out_shape = list(sample_view.local_shape)
    out_shape[tdim] = rep_view.local_shape[tdim]
    sample = next(iter(shards))
    out = np.zeros(out_shape, dtype=sample.dtype)
    base = rep_view.index_lists[tdim]
    pos_of = {int(g): li for li, g in enumerate(base)}
    for c, shard in zip(fiber, shards):
        view = local_shape_and_offset(spec, global_shape, c)
        if view.num_local_elements == 0:
            continue
        idx = np.array([pos_of[int(g)] for g in view.index_lists[tdim]], dtype=np.int64)
        out_index = [slice(None)] * len(out_shape)
        out_index[tdim] = idx
        out[tuple(out_index)] = shard
    return out


def _local_slice(buffer: np.ndarray, spec: ShardSpec, global_shape, coord,
                 mesh_dim: int, dst_p: Placement) -> np.ndarray:
    """Slice this device's piece of `buffer` (which holds the full extent of
    dst_p's tensor dim) for placement dst_p on mesh_dim."""
    tdim = dst_p.dim
    target = _dimwise_view(spec, global_shape, coord, mesh_dim, dst_p)
    rep = _dimwise_view(spec, global_shape, coord, mesh_dim, Replicate())
    base = rep.index_lists[tdim]
    pos_of = {int(g): li for li, g in enumerate(base)}
    idx = np.array([pos_of[int(g)] for g in target.index_lists[tdim]], dtype=np.int64)
    index = [slice(None)] * buffer.ndim
    index[tdim] = idx
    return np.ascontiguousarray(buffer[tuple(index)])
