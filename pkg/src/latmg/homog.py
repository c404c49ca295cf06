"""Periodic cell problems, effective tensors, derived moduli and accuracy metrics.

The discrete cell problem of every load mode is ``K u = f`` with
``f = sum_e s_e A_e^T f_e``; the effective tensor is the element sum

    Phi_ij = 1/|Omega| sum_e s_e (x0_i - u_e,i)^T K_e (x0_j - u_e,j)

where ``x0`` is the element-local affine response of each mode.  Evaluating
``x0`` per element keeps the periodic seam out of the formula.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cycles import (CycleConfig, LevelOps, SolveReport, WarmStart, build_level_ops,
                     project_zero_mean, relative_residual, solve)
from .fem import EbeOperator, ElementKernel, assemble_dense, element_kernel
from .hierarchy import GmgHierarchy, LevelTopology, build_hierarchy
from .voxgeom import MaterialModel, VoxelGrid, volume_fraction

__all__ = [
    "EffectiveTensor",
    "CellProblem",
    "build_loads",
    "effective_tensor",
    "setup_cell_problem",
    "homogenize",
    "homogenize_elastic",
    "homogenize_thermal",
    "dense_solve",
    "relative_residual",
    "property_error",
    "derived_moduli",
    "voigt_bound_ok",
]


@dataclass
class EffectiveTensor:
    physics: str
    tensor: np.ndarray
    asymmetry: float = 0.0
    volume_fraction: float | None = None

    @property
    def moduli(self) -> dict | None:
        if self.physics != "elasticity":
            return None
        E, G, K = derived_moduli(self.tensor)
        return {"E": E, "G": G, "K_B": K}

    def to_dict(self) -> dict:
        d = {
            "physics": self.physics,
            "tensor": self.tensor.tolist(),
            "asymmetry": self.asymmetry,
            "volume_fraction": self.volume_fraction,
        }
        if self.physics == "elasticity":
            d["moduli"] = self.moduli
        return d


def build_loads(topo: LevelTopology, kernel: ElementKernel, scale=None) -> np.ndarray:
    """Scatter-add the scaled element loads of every mode into ``(nodes, dof, modes)``."""
    n_e = topo.num_elements
    s = np.ones(n_e) if scale is None else np.asarray(scale, dtype=float)
    fe = s[:, None, None] * kernel.loads[None]  # (n_e, 8*dof, M)
    dof, m = kernel.dof, kernel.modes
    f = np.zeros((topo.num_nodes, dof, m))
    rows = topo.elem_nodes.ravel()
    vals = fe.reshape(n_e * 8, dof, m)
    order = np.argsort(rows, kind="stable")
    starts = np.searchsorted(rows[order], np.arange(topo.num_nodes + 1))
    f[:] = np.add.reduceat(vals[order], starts[:-1], axis=0)
    # entries within the summation roundoff of their contributions are exact cancellations
    bound = np.add.reduceat(np.abs(vals[order]), starts[:-1], axis=0)
    f[np.abs(f) <= 16 * np.finfo(float).eps * bound] = 0.0
    return f


def _element_differences(topo: LevelTopology, kernel: ElementKernel, u: np.ndarray) -> np.ndarray:
    n_e = topo.num_elements
    ue = u[topo.elem_nodes].reshape(n_e, 8 * kernel.dof, u.shape[2])
    return kernel.reference[None] - ue


def effective_tensor(topo: LevelTopology, kernel: ElementKernel, u: np.ndarray, scale=None,
                     cell_volume: float | None = None) -> np.ndarray:
    """Raw (unsymmetrized) element-sum quadratic form."""
    n_e = topo.num_elements
    s = np.ones(n_e) if scale is None else np.asarray(scale, dtype=float)
    d = _element_differences(topo, kernel, u)
    kd = np.einsum("ij,ejm->eim", kernel.matrix, d)
    vol = cell_volume if cell_volume is not None else kernel.volume * topo.resolution ** 3
    return np.einsum("e,ein,eim->nm", s, d, kd) / vol


@dataclass
class CellProblem:
    """Everything needed to solve the cell problems of one grid."""

    grid: VoxelGrid
    physics: str
    kernel: ElementKernel
    hierarchy: GmgHierarchy
    scale: np.ndarray
    ops: LevelOps
    loads: np.ndarray = field(repr=False)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.grid.period))

    def tensor(self, u: np.ndarray) -> EffectiveTensor:
        raw = effective_tensor(self.hierarchy[1], self.kernel, u, self.scale, self.cell_volume)
        sym = 0.5 * (raw + raw.T)
        asym = float(np.abs(raw - raw.T).max() / max(np.abs(sym).max(), 1e-300))
        return EffectiveTensor(self.physics, sym, asym, volume_fraction(self.grid))


def _normalize_physics(physics: str) -> str:
    if physics in ("elastic", "elasticity", "mechanical"):
        return "elasticity"
    if physics == "thermal":
        return "thermal"
    raise ValueError(f"unknown physics {physics!r}")


def setup_cell_problem(grid: VoxelGrid, physics: str, material: MaterialModel | None = None,
                       levels: int | None = None, scale=None) -> CellProblem:
    """Build hierarchy, operators and loads.  ``scale`` overrides the per-element
    stiffness factors of the active voxels (default: the voxel values)."""
    physics = _normalize_physics(physics)
    material = material or grid.material
    kernel = element_kernel(physics, material, grid.spacing)
    hier = build_hierarchy(grid, levels)
    if scale is None:
        scale = grid.flat()[np.flatnonzero(grid.flat() > 0)]
    scale = np.asarray(scale, dtype=float)
    ops = build_level_ops(hier, kernel, scale)
    f = build_loads(hier[1], kernel, scale)
    return CellProblem(grid, physics, kernel, hier, scale, ops, f)


def homogenize(grid: VoxelGrid, physics: str, material: MaterialModel | None = None,
               cfg: CycleConfig = CycleConfig(), levels: int | None = None,
               warm: WarmStart | None = None, scale=None):
    """Solve all load modes with multigrid and return ``(EffectiveTensor, SolveReport, u)``."""
    cp = setup_cell_problem(grid, physics, material, levels, scale)
    u, report = solve(cp.ops, cp.loads, warm, cfg)
    return cp.tensor(u), report, u


def homogenize_elastic(grid: VoxelGrid, material: MaterialModel | None = None,
                       cfg: CycleConfig = CycleConfig(), **kw) -> tuple[EffectiveTensor, SolveReport]:
    t, report, _ = homogenize(grid, "elasticity", material, cfg, **kw)
    return t, report


def homogenize_thermal(grid: VoxelGrid, material: MaterialModel | None = None,
                       cfg: CycleConfig = CycleConfig(), **kw) -> tuple[EffectiveTensor, SolveReport]:
    t, report, _ = homogenize(grid, "thermal", material, cfg, **kw)
    return t, report


def dense_solve(op: EbeOperator, f: np.ndarray, cap: int = 4096) -> np.ndarray:
    """Minimum-norm least-squares solution of the assembled system, gauge-projected."""
    K = assemble_dense(op, cap)
    m = f.shape[2]
    x = scipy.linalg.lstsq(K, f.reshape(-1, m), lapack_driver="gelsd")[0]
    return project_zero_mean(x.reshape(f.shape))


def property_error(phi, phi_ref, floor: float = 1e-8) -> tuple[float, float]:
    """Mean and max of ``|phi - ref| / |ref|`` over entries with ``|ref| >= floor * ||ref||_F``."""
    phi = np.asarray(phi, dtype=float)
    ref = np.asarray(phi_ref, dtype=float)
    keep = np.abs(ref) >= floor * np.linalg.norm(ref)
    if not keep.any():
        return 0.0, 0.0
    rel = np.abs(phi[keep] - ref[keep]) / np.abs(ref[keep])
    return float(rel.mean()), float(rel.max())


def derived_moduli(C: np.ndarray) -> tuple[float, float, float]:
    """Young's, shear and bulk moduli from the compliance ``S = C^-1``.

    A singular tensor (no stiffness along some strain) yields zero moduli.
    """
    C = 0.5 * (np.asarray(C, dtype=float) + np.asarray(C, dtype=float).T)
    w = np.linalg.eigvalsh(C)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        return 0.0, 0.0, 0.0
    S = np.linalg.inv(C)
    E = 3.0 / (S[0, 0] + S[1, 1] + S[2, 2])
    G = 3.0 / (S[3, 3] + S[4, 4] + S[5, 5])
    K = 1.0 / S[:3, :3].sum()
    return float(E), float(G), float(K)


def voigt_bound_ok(tensor: np.ndarray, base: np.ndarray, vf: float, rtol: float = 1e-8) -> bool:
    """``lambda_max(tensor) <= vf * lambda_max(base)`` up to ``rtol``."""
    lt = np.linalg.eigvalsh(0.5 * (tensor + tensor.T))[-1]
    lb = np.linalg.eigvalsh(base)[-1]
    return bool(lt <= vf * lb * (1 + rtol))
