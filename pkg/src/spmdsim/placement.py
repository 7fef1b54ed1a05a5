"""Placement kinds and the local<->global shape/offset/index math.

Four placements per mesh dimension:
  Shard(d)              contiguous split of tensor dim d (ceil-block; trailing
                        devices may own empty shards)
  Replicate             full copy
  Partial(op)           pending elementwise reduction (default sum)
  InterleavedShard(d,m) dim d viewed as (m, len/m), factor 2 contiguously
                        sharded, yielding per-group index lists

A ShardSpec pairs a mesh with one placement per mesh dim. A ShardView is the
resolved per-device window: per-tensor-dim global index lists, from which
local shape, offsets, and Algorithm-style flat-index mapping all derive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .mesh import DeviceMesh


class PlacementError(ValueError):
    pass


class Placement:
    def is_shard_like(self) -> bool:
        return isinstance(self, (Shard, InterleavedShard))


@dataclass(frozen=True)
class Shard(Placement):
    dim: int

    def __str__(self):
        return f"S({self.dim})"


@dataclass(frozen=True)
class Replicate(Placement):
    def __str__(self):
        return "R"


@dataclass(frozen=True)
class Partial(Placement):
    reduce_op: str = "sum"

    def __str__(self):
        return "P" if self.reduce_op == "sum" else f"P({self.reduce_op})"


@dataclass(frozen=True)
class InterleavedShard(Placement):
    dim: int
    interleaved_size: int

    def __str__(self):
        return f"IS({self.dim},{self.interleaved_size})"


def parse_placement(text: str) -> Placement:
    """Parse a single placement literal: R | P | S(d) | IS(d,m)."""
    t = text.strip()
    if t == "R":
        return Replicate()
    if t == "P":
        return Partial()
    if t.startswith("S(") and t.endswith(")"):
        return Shard(int(t[2:-1]))
    if t.startswith("IS(") and t.endswith(")"):
        d, m = t[3:-1].split(",")
        return InterleavedShard(int(d), int(m))
    raise PlacementError(f"bad placement literal {text!r}")


def parse_placements(text: str) -> tuple[Placement, ...]:
    """Comma-joined placement list, one per mesh dim, e.g. 'S(0),R'."""
    out = []
    depth = 0
    cur = ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return tuple(parse_placement(p) for p in out)


def format_placements(placements) -> str:
    return ",".join(str(p) for p in placements)


@dataclass(frozen=True)
class ShardSpec:
    mesh: DeviceMesh
    placements: tuple[Placement, ...]

    def __post_init__(self):
        if len(self.placements) != self.mesh.ndim:
            raise PlacementError(
                f"{len(self.placements)} placements for {self.mesh.ndim}-d mesh"
            )
        sharded_dims = [p.dim for p in self.placements if p.is_shard_like()]
        if len(set(sharded_dims)) != len(sharded_dims):
            raise PlacementError(f"tensor dim sharded by more than one mesh dim: {self}")
        has_partial = any(isinstance(p, Partial) for p in self.placements)
        has_interleaved = any(isinstance(p, InterleavedShard) for p in self.placements)
        if has_partial and has_interleaved:
            raise PlacementError("Partial may not coexist with InterleavedShard")

    def __str__(self):
        return f"[{format_placements(self.placements)}]@{self.mesh.name}"

    def is_fully_replicated(self) -> bool:
        return all(isinstance(p, Replicate) for p in self.placements)

    def partial_mesh_dims(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.placements) if isinstance(p, Partial))

    def with_placement(self, mesh_dim: int, placement: Placement) -> ShardSpec:
        ps = list(self.placements)
        ps[mesh_dim] = placement
        return ShardSpec(self.mesh, tuple(ps))

    def validate_for_shape(self, global_shape: tuple[int, ...]):
        for i, p in enumerate(self.placements):
            if isinstance(p, (Shard, InterleavedShard)):
                if not (0 <= p.dim < len(global_shape)):
                    raise PlacementError(
                        f"placement {p} invalid for shape {global_shape}"
                    )
            if isinstance(p, InterleavedShard):
                group = p.interleaved_size * self.mesh.sizes[i]
                if p.interleaved_size < 1 or global_shape[p.dim] % group != 0:
                    raise PlacementError(
                        f"{p}: {p.interleaved_size}*{self.mesh.sizes[i]} must divide "
                        f"dim {p.dim} of {global_shape}"
                    )


def row_major_stride(shape: tuple[int, ...]) -> tuple[int, ...]:
    stride = [1] * len(shape)
    for d in range(len(shape) - 2, -1, -1):
        stride[d] = stride[d + 1] * shape[d + 1]
    return tuple(stride)


def replicate_spec(mesh: DeviceMesh) -> ShardSpec:
    return ShardSpec(mesh, tuple(Replicate() for _ in range(mesh.ndim)))


@dataclass(frozen=True)
class ShardView:
    """One device's window into a global tensor.

    index_lists[d] holds the global coordinates this device owns along tensor
    dim d, ascending. Contiguous shards yield contiguous lists; interleaved
    shards yield per-group blocks.
    """

    global_shape: tuple[int, ...]
    index_lists: tuple[np.ndarray, ...] = field(repr=False)

    @cached_property
    def global_stride(self) -> tuple[int, ...]:
        return row_major_stride(self.global_shape)

    @cached_property
    def local_shape(self) -> tuple[int, ...]:
        return tuple(len(ix) for ix in self.index_lists)

    @property
    def ndim(self) -> int:
        return len(self.global_shape)

    @cached_property
    def num_local_elements(self) -> int:
        return math.prod(self.local_shape)

    def is_contiguous(self) -> bool:
        return all(
            len(ix) == 0 or (ix[-1] - ix[0] + 1 == len(ix)) for ix in self.index_lists
        )

    @cached_property
    def local_offset(self) -> tuple[int, ...]:
        """Per-dim start coordinate; only meaningful for contiguous views."""
        return tuple(int(ix[0]) if len(ix) else 0 for ix in self.index_lists)

    def local_to_global_index(self, i: int) -> int:
        """Map a local flat index to the flat index in global memory."""
        if not (0 <= i < self.num_local_elements):
            raise IndexError(f"local index {i} out of range {self.num_local_elements}")
        j = 0
        for d in range(self.ndim - 1, -1, -1):
            c = int(self.index_lists[d][i % self.local_shape[d]])
            j += c * self.global_stride[d]
            i //= self.local_shape[d]
        return j

    def global_flat_indices(self) -> np.ndarray:
        """Flat global indices of all local elements, in local row-major
        order (vectorized local_to_global_index)."""
        if self.num_local_elements == 0:
            return np.zeros(0, dtype=np.int64)
        j = np.zeros(self.local_shape, dtype=np.int64)
        for d in range(self.ndim):
            shape = [1] * self.ndim
            shape[d] = self.local_shape[d]
            j = j + (self.index_lists[d].astype(np.int64) * self.global_stride[d]).reshape(shape)
        return j.reshape(-1)


def _shard_block(length: int, nparts: int, k: int) -> tuple[int, int]:
    """Ceil-block split: block k owns [k*ceil(L/P), min((k+1)*ceil(L/P), L))."""
    block = -(-length // nparts)
    lo = min(k * block, length)
    hi = min(lo + block, length)
    return lo, hi


def local_shape_and_offset(
    spec: ShardSpec, global_shape: tuple[int, ...], mesh_coord: tuple[int, ...]
) -> ShardView:
    """Resolve the window a device at mesh_coord owns under spec."""
    spec.validate_for_shape(global_shape)
    if len(mesh_coord) != spec.mesh.ndim:
        raise PlacementError(f"mesh coord {mesh_coord} for {spec.mesh.ndim}-d mesh")
    index_lists = [np.arange(n, dtype=np.int64) for n in global_shape]
    for i, p in enumerate(spec.placements):
        P = spec.mesh.sizes[i]
        k = mesh_coord[i]
        if isinstance(p, Shard):
            lo, hi = _shard_block(global_shape[p.dim], P, k)
            index_lists[p.dim] = np.arange(lo, hi, dtype=np.int64)
        elif isinstance(p, InterleavedShard):
            group_len = global_shape[p.dim] // p.interleaved_size
            per_shard = group_len // P
            chunks = [
                np.arange(g * group_len + k * per_shard,
                          g * group_len + (k + 1) * per_shard, dtype=np.int64)
                for g in range(p.interleaved_size)
            ]
            index_lists[p.dim] = np.concatenate(chunks)
    return ShardView(global_shape=tuple(global_shape), index_lists=tuple(index_lists))


def full_view(global_shape: tuple[int, ...]) -> ShardView:
    return ShardView(
        global_shape=tuple(global_shape),
        index_lists=tuple(np.arange(n, dtype=np.int64) for n in global_shape),
    )


def _extract(arr: np.ndarray, view: ShardView) -> np.ndarray:
    if view.num_local_elements == 0:
        return np.zeros(view.local_shape, dtype=arr.dtype)
    return arr[np.ix_(*view.index_lists)]


def distribute_local_tensors(
    spec: ShardSpec, global_tensor: np.ndarray
) -> dict[tuple[int, ...], np.ndarray]:
    """Exact slices per placement; the inverse of merge_local_tensors.

    Partial decomposes canonically: full value on mesh-coordinate 0 along each
    Partial dim, zeros elsewhere.
    """
    spec.validate_for_shape(global_tensor.shape)
    partial_dims = spec.partial_mesh_dims()
    locals_: dict[tuple[int, ...], np.ndarray] = {}
    for coord in spec.mesh.iter_coords():
        view = local_shape_and_offset(spec, global_tensor.shape, coord)
        local = _extract(global_tensor, view).copy()
        if any(coord[i] != 0 for i in partial_dims):
            local = np.zeros_like(local)
        locals_[coord] = local
    return locals_


def merge_local_tensors(
    spec: ShardSpec,
    global_shape: tuple[int, ...],
    locals_: dict[tuple[int, ...], np.ndarray],
) -> np.ndarray:
    """Scatter shard dims back by index, reduce Partial dims in ascending
    mesh-coordinate order, and require Replicate replicas bit-identical."""
    spec.validate_for_shape(global_shape)
    mesh = spec.mesh
    coords = list(mesh.iter_coords())
    if set(locals_.keys()) != set(coords):
        raise PlacementError("locals must cover every mesh coordinate exactly once")
    partial_dims = spec.partial_mesh_dims()
    shard_dims = tuple(
        i for i, p in enumerate(spec.placements) if p.is_shard_like()
    )

    # reduce Partial dims: group coords by the non-partial coordinates
    reduced: dict[tuple[int, ...], np.ndarray] = {}
    for coord in coords:  # ascending order fixes the reduction order
        key = tuple(c for i, c in enumerate(coord) if i not in partial_dims)
        view = local_shape_and_offset(spec, global_shape, coord)
        local = locals_[coord]
        if tuple(local.shape) != view.local_shape:
            raise PlacementError(
                f"local at {coord} has shape {local.shape}, expected {view.local_shape}"
            )
        if key in reduced:
            reduced[key] = reduced[key] + local
        else:
            reduced[key] = local.astype(local.dtype, copy=True)

    # check Replicate dims bit-identical, keep one representative per shard coord
    rep: dict[tuple[int, ...], np.ndarray] = {}
    rep_source: dict[tuple[int, ...], tuple[int, ...]] = {}
    nonpartial = [i for i in range(mesh.ndim) if i not in partial_dims]
    for key, local in reduced.items():
        shard_key = tuple(
            c for i, c in zip(nonpartial, key) if i in shard_dims
        )
        if shard_key in rep:
            if rep[shard_key].shape != local.shape or (
                rep[shard_key].tobytes() != local.tobytes()
            ):
                raise PlacementError(
                    f"replica mismatch between coords {rep_source[shard_key]} and {key}"
                )
        else:
            rep[shard_key] = local
            rep_source[shard_key] = key

    # scatter shards into the global tensor
    sample = next(iter(locals_.values()))
    out = np.zeros(global_shape, dtype=sample.dtype)
    full_coord_template = [0] * mesh.ndim
    for shard_key, local in rep.items():
        coord = list(full_coord_template)
        for i, c in zip([i for i in range(mesh.ndim) if i in shard_dims], shard_key):
            coord[i] = c
        view = local_shape_and_offset(spec, global_shape, tuple(coord))
        if view.num_local_elements:
            out[np.ix_(*view.index_lists)] = local
    return out
