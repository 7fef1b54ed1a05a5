"""N-dimensional device mesh with sub-mesh and flatten views.

A mesh lays out device ranks row-major over its dimensions in declaration
order, so the coordinates of a rank are the mixed-radix digits of its index
in the rank list. All views (fibers, flattened meshes) share the same
underlying rank set.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceMesh:
    name: str
    dims: tuple[tuple[str, int], ...]  # (dim_name, size) pairs
    ranks: tuple[int, ...]             # row-major over dims

    def __post_init__(self):
        sizes = [s for _, s in self.dims]
        if not sizes:
            raise MeshError("mesh needs at least one dimension")
        if any(s < 1 for s in sizes):
            raise MeshError(f"dimension sizes must be >= 1, got {sizes}")
        if len(self.ranks) != math.prod(sizes):
            raise MeshError(
                f"rank count {len(self.ranks)} != product of sizes {math.prod(sizes)}"
            )
        if len(set(self.ranks)) != len(self.ranks):
            raise MeshError("duplicate ranks in mesh")
        names = [n for n, _ in self.dims]
        if len(set(names)) != len(names):
            raise MeshError(f"duplicate dim names: {names}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s for _, s in self.dims)

    @property
    def dim_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.dims)

    def size(self) -> int:
        return len(self.ranks)

    def dim_index(self, dim_name: str) -> int:
        try:
            return self.dim_names.index(dim_name)
        except ValueError:
            raise MeshError(f"unknown mesh dim {dim_name!r} in {self.dim_names}") from None

    def dim_size(self, dim_name: str) -> int:
        return self.sizes[self.dim_index(dim_name)]

    def coords_of_rank(self, rank: int) -> tuple[int, ...]:
        idx = self.ranks.index(rank)
        return self._coords_of_index(idx)

    def _coords_of_index(self, idx: int) -> tuple[int, ...]:
        coords = []
        for s in reversed(self.sizes):
            coords.append(idx % s)
            idx //= s
        return tuple(reversed(coords))

    def rank_at(self, coords: tuple[int, ...]) -> int:
        return self.ranks[self._index_of_coords(coords)]

    def _index_of_coords(self, coords: tuple[int, ...]) -> int:
        if len(coords) != self.ndim:
            raise MeshError(f"coords {coords} rank mismatch for {self.ndim}-d mesh")
        idx = 0
        for c, s in zip(coords, self.sizes):
            if not (0 <= c < s):
                raise MeshError(f"coord {coords} out of bounds for sizes {self.sizes}")
            idx = idx * s + c
        return idx

    def iter_coords(self):
        """All coordinates in ascending (row-major) order."""
        return itertools.product(*(range(s) for s in self.sizes))

    def submesh(self, dim_name: str, rank: int) -> DeviceMesh:
        """The 1-D fiber mesh along dim_name containing `rank`."""
        d = self.dim_index(dim_name)
        base = self.coords_of_rank(rank)
        fiber = []
        for k in range(self.sizes[d]):
            coords = list(base)
            coords[d] = k
            fiber.append(self.rank_at(tuple(coords)))
        return DeviceMesh(
            name=f"{self.name}.{dim_name}",
            dims=((dim_name, self.sizes[d]),),
            ranks=tuple(fiber),
        )

    def fiber_ranks(self, dim_indices: tuple[int, ...], fixed_coords: tuple[int, ...]) -> list[int]:
        """Ranks of the fiber spanned by `dim_indices`, holding the other dims
        at `fixed_coords` (a full coordinate; entries at dim_indices are ignored).
        Order is row-major over the fiber dims in declaration order."""
        ranges = [
            range(self.sizes[d]) if d in dim_indices else (fixed_coords[d],)
            for d in range(self.ndim)
        ]
        return [self.rank_at(c) for c in itertools.product(*ranges)]

    def flatten_dims(self, dim_names: list[str], new_name: str | None = None) -> DeviceMesh:
        """Merge the named dims into one; the merged dim replaces the first
        named dim, ordered row-major over the merged coordinates."""
        if not dim_names:
            raise MeshError("flatten_dims needs at least one dim name")
        flat_idx = [self.dim_index(n) for n in dim_names]
        if len(set(flat_idx)) != len(flat_idx):
            raise MeshError(f"repeated dim names in {dim_names}")
        flat_idx_sorted = sorted(flat_idx)  # keep declaration order inside the merge
        merged_size = math.prod(self.sizes[d] for d in flat_idx_sorted)
        merged_name = new_name or "_".join(self.dim_names[d] for d in flat_idx_sorted)

        new_dims: list[tuple[str, int]] = []
        placed = False
        for d in range(self.ndim):
            if d in flat_idx_sorted:
                if not placed:
                    new_dims.append((merged_name, merged_size))
                    placed = True
            else:
                new_dims.append(self.dims[d])

        kept = [d for d in range(self.ndim) if d not in flat_idx_sorted]
        new_ranks = []
        # enumerate new coords row-major; map merged digit back to old coords
        merged_pos = new_dims.index((merged_name, merged_size))
        for coords in itertools.product(*(range(s) for _, s in new_dims)):
            old = [0] * self.ndim
            k = 0
            for pos, c in enumerate(coords):
                if pos == merged_pos:
                    m = c
                    for d in reversed(flat_idx_sorted):
                        old[d] = m % self.sizes[d]
                        m //= self.sizes[d]
                else:
                    old[kept[k]] = c
                    k += 1
            new_ranks.append(self.rank_at(tuple(old)))
        return DeviceMesh(
            name=f"{self.name}.flat({merged_name})",
            dims=tuple(new_dims),
            ranks=tuple(new_ranks),
        )


def create_mesh(
    dims: list[tuple[str, int]],
    ranks: list[int] | None = None,
    name: str = "mesh",
) -> DeviceMesh:
    if ranks is None:
        ranks = range(math.prod(s for _, s in dims))
    return DeviceMesh(name=name, dims=tuple(dims), ranks=tuple(ranks))
