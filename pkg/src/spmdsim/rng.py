"""Single-device-semantic distributed RNG.

Every random element is a pure function of (seed, virtual thread, virtual
offset): a local flat index i is mapped to its flat index j in the global
tensor, then j is virtualized as thread j mod THETA and offset j // THETA on
top of the shared global offset. The backend is the Philox-4x32-10 counter
cipher, so any device can generate exactly the slice of the global sequence
it owns, bit-for-bit, regardless of placement or device count.

The generator state (seed, offset, THETA) is shared by all simulated devices;
the offset advances by ceil(global_numel / THETA) after every random op, on
empty local shards too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .placement import ShardSpec, ShardView, full_view, local_shape_and_offset

DEFAULT_GLOBAL_THREADS = 65536

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_LO32 = np.uint64(0xFFFFFFFF)
_MASK32 = 0xFFFFFFFF


def philox_4x32_10(
    key_lo: int,
    key_hi: int,
    c0: np.ndarray,
    c1: np.ndarray,
    c2: np.ndarray,
    c3: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized Philox-4x32-10: counter lanes are uint32 arrays of equal
    shape; returns the four output word arrays."""
    k0 = key_lo & _MASK32
    k1 = key_hi & _MASK32
    for _ in range(10):
        p0 = _M0 * c0.astype(np.uint64)
        p1 = _M1 * c2.astype(np.uint64)
        hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
        lo0 = (p0 & _LO32).astype(np.uint32)
        hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
        lo1 = (p1 & _LO32).astype(np.uint32)
        c0 = hi1 ^ c1 ^ np.uint32(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint32(k1)
        c3 = lo0
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


def backend_block(seed: int, tau_virtual: int, beta_virtual: int) -> tuple[int, int, int, int]:
    """One 4-word block for a single (seed, thread, offset) triple.

    Counter layout: lanes 0/1 hold the 64-bit virtual offset, lanes 2/3 the
    64-bit virtual thread; the key is the seed split into 32-bit halves.
    """
    w = _blocks_for(
        seed,
        np.asarray([tau_virtual], dtype=np.uint64),
        np.asarray([beta_virtual], dtype=np.uint64),
    )
    return tuple(int(x[0]) for x in w)


def _blocks_for(seed: int, tau: np.ndarray, beta: np.ndarray):
    c0 = (beta & _LO32).astype(np.uint32)
    c1 = (beta >> np.uint64(32)).astype(np.uint32)
    c2 = (tau & _LO32).astype(np.uint32)
    c3 = (tau >> np.uint64(32)).astype(np.uint32)
    seed &= 0xFFFFFFFFFFFFFFFF
    return philox_4x32_10(seed & _MASK32, seed >> 32, c0, c1, c2, c3)


@dataclass
class RngState:
    seed: int = 0
    offset: int = 0
    global_threads: int = DEFAULT_GLOBAL_THREADS

    def __post_init__(self):
        if self.global_threads < 1:
            raise ValueError("global thread count must be >= 1")

    def advance(self, global_numel: int, blocks_per_element: int = 1):
        """Advance the shared offset after a random op over a tensor of
        global_numel elements. Identical on every device."""
        self.offset += -(-global_numel // self.global_threads) * blocks_per_element

    def clone(self) -> "RngState":
        return RngState(self.seed, self.offset, self.global_threads)


class Distribution:
    """Maps one 4-word block to one value; no cross-element state."""

    blocks_per_element = 1

    def transform(self, words, dtype) -> np.ndarray:
        raise NotImplementedError


def _u01_from_word(w: np.ndarray) -> np.ndarray:
    # 24-bit mantissa in [0, 1)
    return (w >> np.uint32(8)).astype(np.float64) * 2.0**-24


class Uniform01(Distribution):
    """word0 >> 8 scaled to [0,1) for f32; 53 bits from words 0-1 for f64."""

    def transform(self, words, dtype):
        w0, w1, _, _ = words
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return _u01_from_word(w0).astype(np.float32)
        u64 = w0.astype(np.uint64) | (w1.astype(np.uint64) << np.uint64(32))
        return (u64 >> np.uint64(11)).astype(np.float64) * 2.0**-53


class Uniform(Distribution):
    def __init__(self, lo: float = 0.0, hi: float = 1.0):
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got [{lo}, {hi})")
        self.lo, self.hi = lo, hi

    def transform(self, words, dtype):
        u = Uniform01().transform(words, dtype)
        return (self.lo + (self.hi - self.lo) * u).astype(dtype)


class Normal(Distribution):
    """Box-Muller on words 0-1 of the element's own block; the second value
    of the pair is discarded."""

    def __init__(self, mean: float = 0.0, std: float = 1.0):
        if std <= 0:
            raise ValueError("std must be positive")
        self.mean, self.std = mean, std

    def transform(self, words, dtype):
        w0, w1, _, _ = words
        u1 = _u01_from_word(w0)
        u2 = _u01_from_word(w1)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], no log(0)
        z = r * np.cos(2.0 * np.pi * u2)
        return (self.mean + self.std * z).astype(dtype)


class RandInt(Distribution):
    """lo + (64-bit draw from words 0-1) mod (hi - lo)."""

    def __init__(self, lo: int, hi: int):
        if not lo < hi:
            raise ValueError(f"randint needs lo < hi, got [{lo}, {hi})")
        self.lo, self.hi = lo, hi

    def transform(self, words, dtype):
        w0, w1, _, _ = words
        u64 = w0.astype(np.uint64) | (w1.astype(np.uint64) << np.uint64(32))
        span = np.uint64(self.hi - self.lo)
        return (self.lo + (u64 % span).astype(np.int64)).astype(dtype)


class Bernoulli(Distribution):
    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
        self.p = p

    def transform(self, words, dtype):
        u = Uniform01().transform(words, np.float64)
        return (u < self.p).astype(dtype)


def fill_random(
    view: ShardView,
    state: RngState,
    dist: Distribution,
    dtype=np.float64,
    theta: int = 1,
) -> np.ndarray:
    """Fill one device's local window. Values depend only on the global flat
    index of each element, so the local thread count theta cannot change the
    result; it is accepted to mirror the per-thread striding of the kernel
    formulation. Does not advance `state` (callers advance once per op)."""
    if theta < 1:
        raise ValueError("local thread count must be >= 1")
    j = view.global_flat_indices().astype(np.uint64)
    theta_g = np.uint64(state.global_threads)
    tau = j % theta_g
    beta = j // theta_g + np.uint64(state.offset)
    words = _blocks_for(state.seed, tau, beta)
    values = dist.transform(words, dtype)
    _note_allocation(view.num_local_elements)
    return values.reshape(view.local_shape)


def generate_global(
    global_shape: tuple[int, ...],
    state: RngState,
    dist: Distribution,
    dtype=np.float64,
) -> np.ndarray:
    """Single-device generation of the full global tensor; advances state."""
    out = fill_random(full_view(global_shape), state, dist, dtype=dtype)
    state.advance(math.prod(global_shape), dist.blocks_per_element)
    return out


def generate_distributed(
    spec: ShardSpec,
    global_shape: tuple[int, ...],
    state: RngState,
    dist: Distribution,
    dtype=np.float64,
) -> dict[tuple[int, ...], np.ndarray]:
    """Generate every device's local shard of one global random tensor;
    advances state exactly once. Replicate mesh dims receive identical values
    because generation reads only global indices."""
    locals_ = {}
    for coord in spec.mesh.iter_coords():
        view = local_shape_and_offset(spec, global_shape, coord)
        locals_[coord] = fill_random(view, state, dist, dtype=dtype)
    state.advance(math.prod(global_shape), dist.blocks_per_element)
    return locals_


def dropout_mask_local(view: ShardView, state: RngState, p: float, dtype=np.float64) -> np.ndarray:
    """Keep-mask for dropout(p): 1.0 where the element survives."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout needs p in [0, 1), got {p}")
    return fill_random(view, state, Bernoulli(1.0 - p), dtype=dtype)


# -- allocation accounting, used by deferred-init tests -----------------------

_alloc_counter = {"max_elements": 0, "enabled": False}


def _note_allocation(n: int):
    if _alloc_counter["enabled"] and n > _alloc_counter["max_elements"]:
        _alloc_counter["max_elements"] = n


class track_allocations:
    """Context manager recording the largest single RNG fill, in elements."""

    def __enter__(self):
        _alloc_counter["enabled"] = True
        _alloc_counter["max_elements"] = 0
        return _alloc_counter

    def __exit__(self, *exc):
        _alloc_counter["enabled"] = False
        return False
