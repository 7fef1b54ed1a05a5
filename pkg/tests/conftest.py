import numpy as np
import pytest

from spmdsim import runtime as rtm
from spmdsim.comm import CollectiveLedger
from spmdsim.mesh import create_mesh
from spmdsim.placement import ShardSpec, parse_placements
from spmdsim.rng import RngState


@pytest.fixture
def fresh_runtime():
    """Install a fresh runtime; returns a factory that rebinds it."""
    def make(seed=0, meshes=None, theta=65536):
        rt = rtm.Runtime(rng=RngState(seed, 0, theta),
                         ledger=CollectiveLedger(),
                         meshes=meshes or {})
        rtm.set_runtime(rt)
        return rt
    rt = make()
    yield make


def mesh1d(p, name="d"):
    return create_mesh([(name, p)], name=name)


def spec(mesh, text):
    return ShardSpec(mesh, parse_placements(text))


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def randi(shape, seed=0, lo=-4, hi=5):
    return np.random.default_rng(seed).integers(lo, hi, size=shape).astype(np.float64)
