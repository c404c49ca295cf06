"""Deterministic index and phase math for hierarchy-aligned point networks.

* Periodic rotary phases: pair ``k`` of axis ``i`` rotates by
  ``2 pi (k + 1) p_i / period_i`` with ``p_i`` reduced modulo the period first.
* Morton serialization under the three cyclic axis permutations.
* 27-point pooling/unpooling stencils anchored at ``2x`` on the finer level.

No learnable parameters live here.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hierarchy import GmgHierarchy

__all__ = [
    "RaRopeSpec",
    "rarope_angle",
    "lattice_angle",
    "rarope_rotate",
    "rarope_apply",
    "SerializationView",
    "VIEWS",
    "morton_code",
    "morton_decode",
    "serialize",
    "POOL_OFFSETS",
    "PoolStencil",
    "pool_stencil",
    "pool_index_map",
    "unpool_targets",
]


# -- rotary phases -------------------------------------------------------------
@dataclass(frozen=True)
class RaRopeSpec:
    """Channel layout of the periodic rotary encoding.

    Parameters
    ----------
    period : per-axis cell size, all > 0.
    pairs : channel pairs per axis (``d_sub / 2``).
    allocation : ``"blocked"`` (all x pairs, then y, then z), ``"interleaved"``
        (round-robin over axes that still have pairs left) or an explicit
        sequence giving the axis of every channel pair.
    """

    period: tuple[float, float, float] = (1.0, 1.0, 1.0)
    pairs: tuple[int, int, int] = (8, 8, 8)
    allocation: str | tuple[int, ...] = "blocked"

    def __post_init__(self):
        period = tuple(float(p) for p in np.broadcast_to(np.asarray(self.period, dtype=float), (3,)))
        pairs = tuple(int(k) for k in np.broadcast_to(np.asarray(self.pairs), (3,)))
        if not all(np.isfinite(p) and p > 0 for p in period):
            raise ValueError(f"periods must be positive, got {period}")
        if any(k < 0 for k in pairs) or sum(pairs) == 0:
            raise ValueError(f"invalid pair counts {pairs}")
        object.__setattr__(self, "period", period)
        object.__setattr__(self, "pairs", pairs)
        if not isinstance(self.allocation, str):
            alloc = tuple(int(a) for a in self.allocation)
            if sorted(alloc) != sorted(a for a in range(3) for _ in range(pairs[a])):
                raise ValueError("explicit allocation must list each axis exactly pairs[axis] times")
            object.__setattr__(self, "allocation", alloc)
        elif self.allocation not in ("blocked", "interleaved"):
            raise ValueError(f"unknown allocation {self.allocation!r}")

    @property
    def channels(self) -> int:
        return 2 * sum(self.pairs)

    def layout(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis and harmonic index ``k`` of every channel pair."""
        if self.allocation == "blocked":
            axes = [a for a in range(3) for _ in range(self.pairs[a])]
        elif self.allocation == "interleaved":
            left, axes = list(self.pairs), []
            while any(left):
                for a in range(3):
                    if left[a]:
                        axes.append(a)
                        left[a] -= 1
        else:
            axes = list(self.allocation)
        axes = np.asarray(axes, dtype=np.int64)
        k = np.zeros_like(axes)
        seen = [0, 0, 0]
        for j, a in enumerate(axes):
            k[j] = seen[a]
            seen[a] += 1
        return axes, k


def rarope_angle(p, period: float, k) -> np.ndarray:
    """``2 pi (k + 1) (p mod period) / period``."""
    period = float(period)
    if not period > 0:
        raise ValueError("period must be positive")
    p = np.mod(np.asarray(p, dtype=float), period)
    return 2.0 * np.pi * (np.asarray(k) + 1.0) * (p / period)


def lattice_angle(x, n: int, period: float, k) -> np.ndarray:
    """Angle of the lattice point ``x * period / n`` with ``x`` reduced modulo ``n`` in integers.

    Integer reduction makes the phase of ``x + t n`` bit-identical to that of ``x``.
    """
    x = np.mod(np.asarray(x, dtype=np.int64), int(n))
    return rarope_angle(x * (float(period) / n), period, k)


def rarope_rotate(a, b, theta):
    """Rotate the pair ``(a, b)`` by ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return a * c - b * s, a * s + b * c


def rarope_apply(features: np.ndarray, coords: np.ndarray, spec: RaRopeSpec,
                 lattice: int | Sequence[int] | None = None) -> np.ndarray:
    """Rotate channel pairs ``(2j, 2j+1)`` of ``features`` by the phases of ``coords``.

    ``features`` has shape ``(..., channels)`` and ``coords`` ``(..., 3)``.
    With ``lattice`` given, ``coords`` are integer node indices on an ``n``-per-axis grid.
    """
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != spec.channels:
        raise ValueError(f"expected {spec.channels} channels, got {features.shape[-1]}")
    coords = np.asarray(coords)
    if coords.shape[-1] != 3:
        raise ValueError("coordinates must have 3 components")
    axes, k = spec.layout()
    period = np.asarray(spec.period)[axes]
    if lattice is None:
        p = np.mod(coords[..., axes].astype(float), period)
        theta = 2.0 * np.pi * (k + 1.0) * (p / period)
    else:
        n = np.broadcast_to(np.asarray(lattice, dtype=np.int64), (3,))[axes]
        x = np.mod(coords[..., axes].astype(np.int64), n)
        theta = 2.0 * np.pi * (k + 1.0) * ((x * (period / n)) / period)
    a, b = rarope_rotate(features[..., 0::2], features[..., 1::2], theta)
    out = np.empty_like(features)
    out[..., 0::2] = a
    out[..., 1::2] = b
    return out


# -- Morton serialization ------------------------------------------------------
@dataclass(frozen=True)
class SerializationView:
    """Axis permutation (first axis most significant) and bits per axis."""

    perm: tuple[int, int, int] = (0, 1, 2)
    bits: int = 10

    def __post_init__(self):
        if sorted(self.perm) != [0, 1, 2]:
            raise ValueError(f"{self.perm} is not a permutation of the axes")
        if not 1 <= self.bits <= 21:
            raise ValueError("bits per axis must lie in 1..21")

    def with_bits(self, bits: int) -> "SerializationView":
        return SerializationView(self.perm, bits)


VIEWS = (SerializationView((0, 1, 2)), SerializationView((1, 2, 0)), SerializationView((2, 0, 1)))


def morton_code(coords, view: SerializationView = VIEWS[0], bits: int | None = None) -> np.ndarray:
    """Bit-interleaved code of integer ``coords`` (``(..., 3)``) in ``[0, 2**bits)``."""
    bits = view.bits if bits is None else bits
    c = np.asarray(coords, dtype=np.int64)
    if c.shape[-1] != 3:
        raise ValueError("coordinates must have 3 components")
    if np.any(c < 0) or np.any(c >= (1 << bits)):
        raise ValueError(f"coordinates outside [0, 2**{bits})")
    c = c.astype(np.uint64)
    code = np.zeros(c.shape[:-1], dtype=np.uint64)
    one = np.uint64(1)
    for b in range(bits - 1, -1, -1):
        for a in view.perm:
            code = (code << one) | ((c[..., a] >> np.uint64(b)) & one)
    return code


def morton_decode(code, view: SerializationView = VIEWS[0], bits: int | None = None) -> np.ndarray:
    bits = view.bits if bits is None else bits
    code = np.asarray(code, dtype=np.uint64)
    out = np.zeros(code.shape + (3,), dtype=np.int64)
    one = np.uint64(1)
    shift = 3 * bits
    for b in range(bits - 1, -1, -1):
        for a in view.perm:
            shift -= 1
            out[..., a] |= (((code >> np.uint64(shift)) & one).astype(np.int64) << b)
    return out


def serialize(coords, view: SerializationView = VIEWS[0], bits: int | None = None) -> np.ndarray:
    """Permutation ordering ``coords`` along the view's Z-curve."""
    return np.argsort(morton_code(coords, view, bits), kind="stable")


# -- pooling stencils ----------------------------------------------------------
# k in {-1, 0, 1}^3, x fastest
POOL_OFFSETS = np.array([(i, j, k) for k in (-1, 0, 1) for j in (-1, 0, 1) for i in (-1, 0, 1)],
                        dtype=np.int64)


@dataclass(frozen=True, eq=False)
class PoolStencil:
    coarse: np.ndarray   # (3,) coarse node coordinate
    fine: np.ndarray     # (27, 3) wrapped fine coordinates 2x + k
    index: np.ndarray    # (27,) fine node index, -1 if inactive
    present: np.ndarray  # (27,) bool


def _fine_coords(x: np.ndarray, n_fine: int) -> np.ndarray:
    return np.mod(2 * np.asarray(x, dtype=np.int64)[..., None, :] + POOL_OFFSETS, n_fine)


def pool_index_map(hierarchy: GmgHierarchy, coarse_level: int) -> np.ndarray:
    """``(num_coarse_nodes, 27)`` fine-node indices of every coarse node's stencil (-1 = inactive)."""
    if not 2 <= coarse_level <= hierarchy.depth:
        raise ValueError(f"coarse level must lie in 2..{hierarchy.depth}")
    fine, coarse = hierarchy[coarse_level - 1], hierarchy[coarse_level]
    return fine.lookup_nodes(_fine_coords(coarse.nodes, fine.resolution))


def pool_stencil(x, hierarchy: GmgHierarchy, coarse_level: int) -> PoolStencil:
    """Stencil of coarse node ``x`` (level ``coarse_level``) on the next finer level."""
    if not 2 <= coarse_level <= hierarchy.depth:
        raise ValueError(f"coarse level must lie in 2..{hierarchy.depth}")
    x = np.asarray(x, dtype=np.int64)
    coarse = hierarchy[coarse_level]
    if coarse.lookup_nodes(x[None])[0] < 0:
        raise ValueError(f"{tuple(x)} is not an active node of level {coarse_level}")
    fine = hierarchy[coarse_level - 1]
    fc = _fine_coords(x, fine.resolution)
    idx = fine.lookup_nodes(fc)
    return PoolStencil(x, fc, idx, idx >= 0)


def unpool_targets(x, hierarchy: GmgHierarchy, coarse_level: int) -> np.ndarray:
    """Active fine-node indices that receive the features of coarse node ``x``."""
    st = pool_stencil(x, hierarchy, coarse_level)
    return st.index[st.present]
