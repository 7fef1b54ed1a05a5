import numpy as np
import pytest

from spmdsim.comm import all_reduce
from spmdsim.dispatch import (
    DispatchContext,
    NoStrategyError,
    StaticMetadataMissing,
    dispatch_op,
    use_context,
)
from spmdsim.dtensor import DTensor, DTensorMeta, distribute, to_global
from spmdsim.mesh import create_mesh
from spmdsim.placement import ShardSpec, parse_placements

from conftest import mesh1d, rand, randi, spec


@pytest.fixture
def tp4(fresh_runtime):
    mesh = mesh1d(4, name="tp")
    fresh_runtime(meshes={"tp": mesh})
    return mesh


MM_STRATEGIES = [
    ("R", "R", "R"),
    ("R", "S(1)", "S(1)"),
    ("S(0)", "R", "S(0)"),
    ("S(1)", "S(0)", "P"),
    ("P", "R", "P"),
    ("R", "P", "P"),
]


@pytest.mark.parametrize("pa,pb,pout", MM_STRATEGIES,
                         ids=[f"{a}x{b}" for a, b, _ in MM_STRATEGIES])
def test_mm_strategy_table(tp4, pa, pb, pout):
    A, B = rand((8, 16), seed=1), rand((16, 12), seed=2)
    a = distribute(A, spec(tp4, pa))
    b = distribute(B, spec(tp4, pb))
    with use_context(DispatchContext()):
        c = dispatch_op("mm", [a, b])
    assert str(c.meta.spec.placements[0]) == pout
    assert np.allclose(to_global(c), A @ B)


def test_min_cost_strategy_keeps_inputs_in_place(tp4):
    # S(1) x S(0) stays put (Partial out, zero redistribution bytes)
    a = distribute(rand((8, 16)), spec(tp4, "S(1)"))
    b = distribute(rand((16, 12)), spec(tp4, "S(0)"))
    from spmdsim import runtime as rtm
    ledger = rtm.current().ledger
    with use_context(DispatchContext()):
        dispatch_op("mm", [a, b])
    assert not ledger.entries


def test_cache_hits_and_distinct_signatures(tp4):
    a = distribute(rand((8, 16), seed=1), spec(tp4, "R"))
    b = distribute(rand((16, 12), seed=2), spec(tp4, "S(1)"))
    ctx = DispatchContext()
    with use_context(ctx):
        for _ in range(5):
            dispatch_op("mm", [a, b])
        dispatch_op("mm", [a, distribute(rand((16, 12)), spec(tp4, "R"))])
    assert ctx.counter("inferences") == 2  # two distinct signatures
    assert ctx.counter("cache_hits") == 4
    assert len(ctx.cache) == 2


def test_cache_off_still_correct(tp4):
    a = distribute(rand((8, 16), seed=1), spec(tp4, "R"))
    b = distribute(rand((16, 12), seed=2), spec(tp4, "S(1)"))
    on, off = DispatchContext(), DispatchContext(cache_enabled=False)
    with use_context(on):
        r1 = dispatch_op("mm", [a, b])
        dispatch_op("mm", [a, b])
    with use_context(off):
        r2 = dispatch_op("mm", [a, b])
        dispatch_op("mm", [a, b])
    assert to_global(r1).tobytes() == to_global(r2).tobytes()
    assert off.counter("inferences") == 2 and not off.cache


def test_commfree_add_matches_allreduce_oracle(tp4):
    ctx = DispatchContext()
    gen = np.random.default_rng(0)
    with use_context(ctx):
        for _ in range(50):
            partials = [gen.integers(-9, 10, (4, 6)).astype(np.float64) for _ in range(4)]
            B = gen.integers(-9, 10, (4, 6)).astype(np.float64)
            a = DTensor(DTensorMeta((4, 6), spec(tp4, "P"), np.dtype(np.float64)),
                        {(k,): partials[k] for k in range(4)})
            b = distribute(B, spec(tp4, "R"))
            out = dispatch_op("add", [a, b])
            assert str(out.meta.spec.placements[0]) == "P"
            oracle = all_reduce(partials) + B
            assert to_global(out).tobytes() == oracle.tobytes()
    assert ctx.counter("rule:commfree-add") == 50
    assert ctx.counter("inferences") == 0


def test_equal_bypass_no_inference(tp4):
    a = distribute(rand((4, 4)), spec(tp4, "S(0)"))
    ctx = DispatchContext()
    with use_context(ctx):
        assert dispatch_op("equal", [a, a]) is True
        b = dispatch_op("scale", [a], {"s": 2.0})
        assert dispatch_op("equal", [a, b]) is False
    assert ctx.counter("rule:equal-bypass") == 2


def test_out_given_rule_skips_inference(tp4):
    A, B = rand((4, 8)), rand((8, 4))
    a = distribute(A, spec(tp4, "R"))
    b = distribute(B, spec(tp4, "R"))
    placeholder = distribute(np.zeros((4, 4)), spec(tp4, "R"))
    ctx = DispatchContext()
    with use_context(ctx):
        out = dispatch_op("mm", [a, b], {"out": placeholder})
    assert ctx.counter("inferences") == 0
    assert np.allclose(to_global(out), A @ B)


def test_out_partial_rule(tp4):
    A, B = rand((8, 16)), rand((16, 12))
    a = distribute(A, spec(tp4, "S(1)"))
    b = distribute(B, spec(tp4, "S(0)"))
    ctx = DispatchContext()
    with use_context(ctx):
        out = dispatch_op("mm", [a, b], {"custom_meta": "out-partial"})
    assert ctx.counter("inferences") == 0
    assert str(out.meta.spec.placements[0]) == "P"
    assert np.allclose(to_global(out), A @ B)


def test_record_then_static_replay_bitwise(tp4):
    A, B = randi((8, 16), seed=1), randi((16, 12), seed=2)
    a = distribute(A, spec(tp4, "R"))
    b = distribute(B, spec(tp4, "S(1)"))

    def program():
        y = dispatch_op("mm", [a, b])
        y = dispatch_op("relu", [y])
        return dispatch_op("sum", [y])

    rec = DispatchContext(mode="record")
    with use_context(rec):
        ref = program()
    ctx = DispatchContext()
    ctx.begin_static_replay(list(rec.trace))
    with use_context(ctx):
        out = program()
    assert to_global(out).tobytes() == to_global(ref).tobytes()
    assert ctx.counter("inferences") == 0


def test_static_divergence_raises_with_op_name(tp4):
    a = distribute(rand((4, 4)), spec(tp4, "R"))
    rec = DispatchContext(mode="record")
    with use_context(rec):
        dispatch_op("relu", [a])
    ctx = DispatchContext()
    ctx.begin_static_replay(list(rec.trace))
    with use_context(ctx):
        with pytest.raises(StaticMetadataMissing, match="relu"):
            dispatch_op("sum", [a])
        ctx.static_pos = 0
        dispatch_op("relu", [a])
        with pytest.raises(StaticMetadataMissing, match="sum"):
            dispatch_op("sum", [a])


def test_shape_mismatch_rejected(tp4):
    from spmdsim.dispatch import DispatchError
    a = distribute(rand((4, 4)), spec(tp4, "R"))
    with use_context(DispatchContext()):
        with pytest.raises(DispatchError):
            dispatch_op("mm", [a, distribute(rand((3, 4)), spec(tp4, "R"))])


def test_dropout_sharding_invariant(tp4, fresh_runtime):
    X = rand((16, 16), seed=3)
    outs = []
    for placements in ("R", "S(0)", "S(1)"):
        rt = fresh_runtime(seed=5, meshes={"tp": tp4})
        x = distribute(X, spec(tp4, placements))
        with use_context(DispatchContext()):
            out = dispatch_op("dropout", [x], {"p": 0.5})
        outs.append(to_global(out).tobytes())
        assert rt.rng.offset == 1
    assert outs[0] == outs[1] == outs[2]


def test_reduction_and_reshape_shapes(tp4):
    x = distribute(rand((8, 16)), spec(tp4, "S(1)"))
    with use_context(DispatchContext()):
        s = dispatch_op("sum", [x])
        m = dispatch_op("mean", [x])
        flat = dispatch_op("reshape", [x], {"shape": (128,)})
    assert s.shape == () and m.shape == ()
    assert np.isclose(to_global(s), to_global(x).sum())
    assert np.isclose(to_global(m), to_global(x).mean())
    assert to_global(flat).tobytes() == to_global(x).reshape(-1).tobytes()
    # sharding on a non-leading dim flattens to an interleaved pattern
    assert str(flat.meta.spec.placements[0]) == "IS(0,8)"
