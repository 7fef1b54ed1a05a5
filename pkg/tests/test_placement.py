import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spmdsim.mesh import create_mesh
from spmdsim.placement import (
    InterleavedShard,
    Partial,
    PlacementError,
    Replicate,
    Shard,
    ShardSpec,
    distribute_local_tensors,
    format_placements,
    full_view,
    local_shape_and_offset,
    merge_local_tensors,
    parse_placements,
)

from conftest import mesh1d, rand, spec


def test_placement_literals_round_trip():
    for text in ("R", "P", "S(0)", "S(3)", "IS(1,4)", "S(0),R", "R,IS(0,2)"):
        assert format_placements(parse_placements(text)) == text


def test_spec_validation():
    mesh = create_mesh([("a", 2), ("b", 2)])
    with pytest.raises(PlacementError):
        ShardSpec(mesh, parse_placements("R"))  # wrong arity
    with pytest.raises(PlacementError):
        ShardSpec(mesh, parse_placements("S(0),S(0)"))  # double shard of dim 0
    with pytest.raises(PlacementError):
        ShardSpec(mesh, parse_placements("P,IS(0,2)"))  # partial + interleaved
    ShardSpec(mesh, parse_placements("S(0),S(1)"))  # distinct dims fine


def test_ceil_block_split_with_empty_trailing_shard():
    mesh = mesh1d(4)
    s = spec(mesh, "S(0)")
    shapes = [local_shape_and_offset(s, (6,), (k,)).local_shape for k in range(4)]
    assert shapes == [(2,), (2,), (2,), (0,)]


def test_local_to_global_index_block():
    mesh = mesh1d(2)
    view = local_shape_and_offset(spec(mesh, "S(0)"), (4, 4), (1,))
    # local element 5 of the second row-block lives at global flat 8 + 5
    assert view.local_to_global_index(5) == 13


def test_interleaved_shard_index_sets():
    mesh = mesh1d(2)
    s = spec(mesh, "IS(0,3)")
    v0 = local_shape_and_offset(s, (12,), (0,))
    v1 = local_shape_and_offset(s, (12,), (1,))
    assert sorted(v0.global_flat_indices().tolist()) == [0, 1, 4, 5, 8, 9]
    assert sorted(v1.global_flat_indices().tolist()) == [2, 3, 6, 7, 10, 11]


def test_interleaved_divisibility_enforced():
    mesh = mesh1d(2)
    with pytest.raises(PlacementError):
        spec(mesh, "IS(0,3)").validate_for_shape((10,))


def test_full_view_is_identity():
    v = full_view((3, 5))
    assert v.local_shape == (3, 5)
    assert v.local_to_global_index(7) == 7


def test_partial_canonical_decomposition():
    mesh = mesh1d(4)
    s = spec(mesh, "P")
    g = rand((4, 4), seed=1)
    locals_ = distribute_local_tensors(s, g)
    assert np.array_equal(locals_[(0,)], g)
    for k in range(1, 4):
        assert not locals_[(k,)].any()
    merged = merge_local_tensors(s, (4, 4), locals_)
    assert merged.tobytes() == g.tobytes()


def test_merge_rejects_divergent_replicas():
    mesh = mesh1d(2)
    s = spec(mesh, "R")
    g = rand((4,))
    locals_ = distribute_local_tensors(s, g)
    locals_[(1,)] = locals_[(1,)] + 1.0
    with pytest.raises(PlacementError):
        merge_local_tensors(s, (4,), locals_)


@st.composite
def _case(draw):
    ndim = draw(st.integers(1, 3))
    shape = tuple(draw(st.integers(1, 9)) for _ in range(ndim))
    p1 = draw(st.integers(1, 4))
    p2 = draw(st.integers(1, 3))
    placements = []
    used = set()
    for _ in range(2):
        kind = draw(st.sampled_from(["R", "S"]))
        if kind == "S":
            d = draw(st.integers(0, ndim - 1))
            if d in used:
                kind = "R"
            else:
                used.add(d)
                placements.append(f"S({d})")
        if kind == "R":
            placements.append("R")
    return shape, (p1, p2), ",".join(placements)


@given(_case())
@settings(max_examples=200, deadline=None)
def test_distribute_merge_round_trip(case):
    shape, (p1, p2), placements = case
    mesh = create_mesh([("a", p1), ("b", p2)])
    s = ShardSpec(mesh, parse_placements(placements))
    g = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
    merged = merge_local_tensors(s, shape, distribute_local_tensors(s, g))
    assert merged.tobytes() == g.tobytes()


@given(st.integers(2, 5), st.integers(1, 6), st.integers(6, 40))
@settings(max_examples=100, deadline=None)
def test_shard_views_partition_the_tensor(p, m, length):
    mesh = mesh1d(p)
    n = length * m * p  # interleaved needs m*p | length
    for text in ("S(0)", f"IS(0,{m})"):
        s = spec(mesh, text)
        seen = []
        for k in range(p):
            v = local_shape_and_offset(s, (n,), (k,))
            seen.extend(v.global_flat_indices().tolist())
        assert sorted(seen) == list(range(n))
