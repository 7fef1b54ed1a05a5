"""Run-scoped shared state: meshes, RNG state, communication ledger, and the
dispatch context. One Runtime per simulated run; a module-level default keeps
call sites uncluttered."""

from __future__ import annotations

from dataclasses import dataclass, field

from .comm import CollectiveLedger
from .mesh import DeviceMesh
from .rng import RngState


@dataclass
class Runtime:
    rng: RngState = field(default_factory=RngState)
    ledger: CollectiveLedger = field(default_factory=CollectiveLedger)
    meshes: dict[str, DeviceMesh] = field(default_factory=dict)

    def register_mesh(self, mesh: DeviceMesh):
        self.meshes[mesh.name] = mesh

    def mesh(self, name: str) -> DeviceMesh:
        try:
            return self.meshes[name]
        except KeyError:
            raise KeyError(f"unknown mesh {name!r}; registered: {sorted(self.meshes)}") from None


_current: list[Runtime] = [Runtime()]


def current() -> Runtime:
    return _current[-1]


def set_runtime(rt: Runtime):
    _current[-1] = rt


class use_runtime:
    """Scoped runtime swap, mainly for tests."""

    def __init__(self, rt: Runtime):
        self.rt = rt

    def __enter__(self):
        _current.append(self.rt)
        return self.rt

    def __exit__(self, *exc):
        _current.pop()
        return False
