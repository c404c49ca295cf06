"""Sparse GMG hierarchy of active elements and nodes on nested periodic grids.

Level 1 is the voxel grid.  A coarse element is active when any of its 2x2x2
fine children is active, and the active node set of every level is the vertex
union of its active elements under periodic identification (node ``N`` is
node ``0``).  Elements and nodes are stored sorted by the x-fastest linear
index ``x + N*(y + N*z)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxgeom import OCTANT_OFFSETS, VoxelGrid

__all__ = [
    "LevelTopology",
    "GmgHierarchy",
    "linear_index",
    "unravel",
    "coarsen_elements",
    "derive_node_set",
    "default_depth",
    "build_hierarchy",
]


def linear_index(coords: np.ndarray, n: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) % n
    return c[..., 0] + n * (c[..., 1] + n * c[..., 2])


def unravel(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return np.stack([idx % n, (idx // n) % n, idx // (n * n)], axis=-1)


def coarsen_elements(elements: np.ndarray, n: int) -> np.ndarray:
    """Coarse elements covering any active fine element (``n`` is the fine resolution)."""
    if n % 2:
        raise ValueError(f"cannot coarsen odd resolution {n}")
    coarse = np.unique(linear_index(np.asarray(elements) // 2, n // 2))
    return unravel(coarse, n // 2)


def derive_node_set(elements: np.ndarray, n: int) -> np.ndarray:
    """Vertex union of ``elements`` on the ``n``-periodic torus, sorted."""
    elements = np.asarray(elements, dtype=np.int64).reshape(-1, 3)
    verts = elements[:, None, :] + OCTANT_OFFSETS[None, :, :]
    return unravel(np.unique(linear_index(verts, n)), n)


@dataclass(frozen=True, eq=False)
class LevelTopology:
    """Active elements/nodes of one level with periodic element-node incidence."""

    level: int
    resolution: int
    elements: np.ndarray    # (n_e, 3)
    nodes: np.ndarray       # (n_n, 3)
    node_index: np.ndarray  # (N**3,) dense map, -1 where inactive
    elem_index: np.ndarray  # (N**3,) dense map, -1 where inactive
    elem_nodes: np.ndarray  # (n_e, 8) node indices, corner k at offset OCTANT_OFFSETS[k]

    @classmethod
    def from_elements(cls, level: int, elements: np.ndarray, n: int) -> "LevelTopology":
        elements = unravel(np.unique(linear_index(elements, n)), n)
        nodes = derive_node_set(elements, n)
        node_index = np.full(n ** 3, -1, dtype=np.int64)
        node_index[linear_index(nodes, n)] = np.arange(len(nodes))
        elem_index = np.full(n ** 3, -1, dtype=np.int64)
        elem_index[linear_index(elements, n)] = np.arange(len(elements))
        corners = elements[:, None, :] + OCTANT_OFFSETS[None, :, :]
        elem_nodes = node_index[linear_index(corners, n)]
        assert np.all(elem_nodes >= 0)
        for a in (elements, nodes, node_index, elem_index, elem_nodes):
            a.flags.writeable = False
        return cls(level, n, elements, nodes, node_index, elem_index, elem_nodes)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def lookup_nodes(self, coords: np.ndarray) -> np.ndarray:
        """Dense node indices of (wrapped) coordinates; -1 for inactive sites."""
        return self.node_index[linear_index(coords, self.resolution)]

    def lookup_elements(self, coords: np.ndarray) -> np.ndarray:
        return self.elem_index[linear_index(coords, self.resolution)]

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "resolution": self.resolution,
            "elements": self.elements.tolist(),
            "nodes": self.nodes.tolist(),
        }


@dataclass(frozen=True, eq=False)
class GmgHierarchy:
    levels: tuple[LevelTopology, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> LevelTopology:
        """1-based access: ``hier[1]`` is the finest level."""
        if not 1 <= level <= self.depth:
            raise IndexError(f"level {level} outside 1..{self.depth}")
        return self.levels[level - 1]

    def __iter__(self):
        return iter(self.levels)

    @property
    def resolutions(self) -> list[int]:
        return [lv.resolution for lv in self.levels]


def default_depth(n: int) -> int:
    """Deepest hierarchy with coarsest resolution >= 4; capped at 5 (6 for n >= 512)."""
    cap = 6 if n >= 512 else 5
    depth = 1
    while depth < cap and n % (2 ** depth) == 0 and n // 2 ** depth >= 4:
        depth += 1
    return depth


def build_hierarchy(grid: VoxelGrid, levels: int | None = None) -> GmgHierarchy:
    n = grid.resolution
    if levels is None:
        levels = default_depth(n)
    if levels < 1:
        raise ValueError("need at least one level")
    f = 2 ** (levels - 1)
    if n % f:
        raise ValueError(f"resolution {n} is not divisible by 2**(L-1) = {f}")
    if n // f < 2:
        raise ValueError(f"coarsest resolution {n // f} < 2")
    if (n // f) % 2:
        # the 8-color parity partition needs even resolution on every level
        raise ValueError(f"coarsest resolution {n // f} is odd")
    active = np.flatnonzero(grid.flat() > 0)
    elements = unravel(active, n)
    out = [LevelTopology.from_elements(1, elements, n)]
    for lv in range(2, levels + 1):
        prev = out[-1]
        coarse = coarsen_elements(prev.elements, prev.resolution)
        out.append(LevelTopology.from_elements(lv, coarse, prev.resolution // 2))
    return GmgHierarchy(tuple(out))
