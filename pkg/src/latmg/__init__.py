"""Periodic voxel homogenization with a matrix-free geometric multigrid solver."""

__version__ = "0.1.0"

from .voxgeom import MaterialModel, VoxelGrid, generate_tpms, load_grid, save_grid  # noqa: E402
from .hierarchy import GmgHierarchy, build_hierarchy  # noqa: E402
from .cycles import CycleConfig, WarmStart, solve  # noqa: E402
from .homog import homogenize, homogenize_elastic, homogenize_thermal  # noqa: E402
from .smooth import SmootherConfig  # noqa: E402

__all__ = [
    "MaterialModel",
    "VoxelGrid",
    "generate_tpms",
    "load_grid",
    "save_grid",
    "GmgHierarchy",
    "build_hierarchy",
    "CycleConfig",
    "WarmStart",
    "solve",
    "homogenize",
    "homogenize_elastic",
    "homogenize_thermal",
    "SmootherConfig",
]
