"""Inverse homogenization with SIMP interpolation and Optimality Criteria updates.

All three targets minimize a compliance measure of ``S = C_H^-1``:

* ``young``: mean of ``S00, S11, S22``
* ``shear``: mean of ``S33, S44, S55``
* ``bulk``:  sum of the upper-left 3x3 block of ``S``

so their density sensitivities are non-positive and feed OC directly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cycles import CycleConfig, WarmStart, relative_residual, solve
from .homog import CellProblem, setup_cell_problem
from .voxgeom import MaterialModel, VoxelGrid

log = logging.getLogger(__name__)

__all__ = [
    "SimpConfig",
    "OBJECTIVES",
    "interpolate",
    "objective",
    "sensitivities",
    "filter_sensitivities",
    "oc_update",
    "random_density",
    "density_problem",
    "evaluate",
    "optimize",
    "OptimizationResult",
]

OBJECTIVES = ("young", "shear", "bulk")


@dataclass(frozen=True)
class SimpConfig:
    penal: float = 3.0
    rho_min: float = 1e-5           # ersatz stiffness added to rho**p
    rho_lower: float = 1e-6         # OC lower bound, below the prune threshold
    volfrac: float = 0.3
    filter_radius: float = 1.5
    move: float = 0.2
    eta: float = 0.5
    max_iter: int = 100
    prune_period: int = 20
    prune_threshold: float = 1e-5
    solve_tol: float = 1e-6
    max_cycles: int = 200
    levels: int | None = None
    stop_tol: float = 1e-5
    stop_window: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.penal > 1:
            raise ValueError("penalization must exceed 1")
        if not 0 < self.volfrac < 1:
            raise ValueError("target volume fraction must lie in (0, 1)")
        if not 0 < self.rho_lower < 1 or not self.rho_min >= 0:
            raise ValueError("invalid density bounds")
        if not 0 < self.move <= 1 or not 0 < self.eta <= 1:
            raise ValueError("move limit and damping must lie in (0, 1]")
        if self.prune_period < 1:
            raise ValueError("prune period must be positive")


def interpolate(rho, cfg: SimpConfig = SimpConfig()) -> np.ndarray:
    """SIMP stiffness factor ``rho_min + rho**p``."""
    return cfg.rho_min + np.asarray(rho, dtype=float) ** cfg.penal


def objective(kind: str, C: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value and its gradient with respect to ``C`` (through ``dS = -S dC S``)."""
    if kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {kind!r}")
    S = np.linalg.inv(0.5 * (C + C.T))
    W = np.zeros((6, 6))
    if kind == "young":
        W[[0, 1, 2], [0, 1, 2]] = 1 / 3
    elif kind == "shear":
        W[[3, 4, 5], [3, 4, 5]] = 1 / 3
    else:
        W[:3, :3] = 1.0
    return float(np.sum(W * S)), -S @ W @ S


def density_problem(rho: np.ndarray, cfg: SimpConfig, material: MaterialModel | None = None,
                    period=(1.0, 1.0, 1.0)) -> CellProblem:
    grid = VoxelGrid(rho, "density", period, material or MaterialModel())
    active = grid.flat()
    return setup_cell_problem(grid, "elasticity", levels=cfg.levels,
                              scale=interpolate(active[active > 0], cfg))


def sensitivities(cp: CellProblem, rho_active: np.ndarray, u: np.ndarray, cfg: SimpConfig,
                  kind: str, tol: float | None = None) -> tuple[float, np.ndarray]:
    """Objective and ``dJ/drho`` over the active elements (hierarchy order)."""
    tol = cfg.solve_tol if tol is None else tol
    r = relative_residual(cp.ops.op(1), u, cp.loads)
    if r > tol:
        raise ValueError(f"cell problems not solved: relative residual {r:.3e} > {tol:.1e}")
    C = cp.tensor(u).tensor
    J, dJdC = objective(kind, C)
    topo, k = cp.hierarchy[1], cp.kernel
    d = k.reference[None] - u[topo.elem_nodes].reshape(topo.num_elements, 8 * k.dof, -1)
    kd = np.einsum("ij,ejm->eim", k.matrix, d)
    q = np.einsum("ein,eim,nm->e", d, kd, dJdC)
    g = cfg.penal * np.asarray(rho_active) ** (cfg.penal - 1) * q / cp.cell_volume
    return J, g


def filter_sensitivities(g: np.ndarray, rho: np.ndarray, radius: float) -> np.ndarray:
    """Density-weighted periodic sensitivity filter on dense ``(N, N, N)`` arrays.

    ``g_hat_e = sum_j w_ej rho_j g_j / (rho_e sum_j w_ej)``, ``w_ej = max(0, r - dist)``.
    Voxels with ``rho_e == 0`` (pruned) get 0.  With ``radius <= 1`` only the
    voxel itself has weight, so the filter is the identity.
    """
    if radius <= 1:
        return np.where(rho > 0, g, 0.0)
    reach = int(np.ceil(radius))
    num = np.zeros_like(g, dtype=float)
    den = 0.0
    rg = rho * g
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            for dz in range(-reach, reach + 1):
                w = radius - np.sqrt(dx * dx + dy * dy + dz * dz)
                if w <= 0:
                    continue
                num += w * np.roll(rg, (dx, dy, dz), axis=(0, 1, 2))
                den += w
    out = np.zeros_like(num)
    live = rho > 0
    out[live] = num[live] / (rho[live] * den)
    return out


def oc_update(rho: np.ndarray, g: np.ndarray, cfg: SimpConfig) -> np.ndarray:
    """OC step with move limits; the multiplier is bisected to hit ``cfg.volfrac``.

    Pruned voxels (``rho == 0``) stay at zero.
    """
    live = rho > 0
    desc = np.maximum(-g[live], 0.0)
    if not np.any(desc > 0):
        raise ValueError("all sensitivities vanish: no descent direction")
    r = rho[live]
    lo_b = np.maximum(cfg.rho_lower, r - cfg.move)
    hi_b = np.minimum(1.0, r + cfg.move)
    n_total = rho.size
    target = cfg.volfrac * n_total

    def step(log_lam):
        return np.clip(r * (desc / np.exp(log_lam)) ** cfg.eta, lo_b, hi_b)

    scale = np.log(desc.max())
    a, b = scale - 200.0, scale + 200.0  # volume decreases monotonically in lambda
    new = step(0.5 * (a + b))
    for _ in range(400):
        mid = 0.5 * (a + b)
        new = step(mid)
        vol = new.sum()
        if abs(vol - target) <= 1e-7 * n_total:
            break
        if vol > target:
            a = mid
        else:
            b = mid
    out = np.zeros_like(rho, dtype=float)
    out[live] = new
    return out


def random_density(n: int, volfrac: float, seed: int = 0, amplitude: float = 1.0,
                   correlation: float = 1.5, lower: float = 1e-3) -> np.ndarray:
    """Seeded periodic noise around ``volfrac`` with mean ``volfrac``.

    White noise is smoothed with a wrap-around Gaussian of width
    ``correlation`` voxels so its features survive the sensitivity filter.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, n, n))
    if correlation > 0:
        z = ndimage.gaussian_filter(z, correlation, mode="wrap")
    z = (z - z.mean()) / z.std()
    rho = np.clip(volfrac * (1 + amplitude * z), lower, 1.0)
    for _ in range(50):
        rho = np.clip(rho * (volfrac / rho.mean()), lower, 1.0)
        if abs(rho.mean() - volfrac) < 1e-12:
            break
    return rho


def evaluate(rho: np.ndarray, kind: str, cfg: SimpConfig, warm: WarmStart | None = None,
             material: MaterialModel | None = None, tol: float | None = None):
    """Solve the cell problems at ``rho`` and return ``(J, dense gradient, u, report, cp)``."""
    tol = cfg.solve_tol if tol is None else tol
    cp = density_problem(rho, cfg, material)
    ccfg = CycleConfig(max_cycles=cfg.max_cycles, tol=tol)
    u, report = solve(cp.ops, cp.loads, warm, ccfg)
    if not report.converged:
        raise RuntimeError(
            f"cell problems did not converge: r = {report.final_residual:.3e} after {report.cycles} cycles")
    flat = rho.ravel(order="F")
    act = np.flatnonzero(flat > 0)
    J, g_act = sensitivities(cp, flat[act], u, cfg, kind, tol)
    g = np.zeros(rho.size)
    g[act] = g_act
    return J, g.reshape(rho.shape, order="F"), u, report, cp


@dataclass
class OptimizationResult:
    grid: VoxelGrid
    history: list[dict] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    prune_log: dict[int, float] = field(default_factory=dict)  # iteration -> largest pruned density
    aborted: str | None = None


def optimize(grid0: VoxelGrid | np.ndarray, kind: str, cfg: SimpConfig = SimpConfig(),
             snapshot_every: int = 0, callback=None) -> OptimizationResult:
    """Run the SIMP/OC loop from an initial density field.

    Every ``cfg.prune_period`` iterations voxels with density below
    ``cfg.prune_threshold`` are set to 0 and leave the active set.
    """
    if kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {kind!r}")
    if isinstance(grid0, VoxelGrid):
        rho = np.array(grid0.values, dtype=float)
        material, period = grid0.material, grid0.period
    else:
        rho = np.array(grid0, dtype=float)
        material, period = MaterialModel(), (1.0, 1.0, 1.0)
    result = OptimizationResult(VoxelGrid(rho, "density", period, material))
    warm = None
    for it in range(1, cfg.max_iter + 1):
        try:
            J, g, u, report, cp = evaluate(rho, kind, cfg, warm, material)
        except RuntimeError as exc:
            result.aborted = str(exc)
            log.warning("aborting at iteration %d: %s", it, exc)
            break
        g = filter_sensitivities(g, rho, cfg.filter_radius)
        new = oc_update(rho, g, cfg)
        change = float(np.abs(new - rho).max())
        pruned = 0
        if it % cfg.prune_period == 0:
            kill = (new > 0) & (new < cfg.prune_threshold)
            pruned = int(kill.sum())
            if pruned:
                result.prune_log[it] = float(new[kill].max())
            new[kill] = 0.0
        warm = WarmStart(fine=u) if pruned == 0 else None
        rho = new
        rec = {"iter": it, "J": J, "vf": float(rho.mean()), "max_drho": change,
               "r": report.final_residual, "cycles": report.cycles, "pruned": pruned}
        result.history.append(rec)
        if callback is not None:
            callback(rec, rho)
        if snapshot_every and it % snapshot_every == 0:
            result.snapshots[it] = rho.copy()
        log.info("it %3d  J %.6e  vf %.4f  change %.3f  r %.1e", it, J, rec["vf"], change, rec["r"])
        js = [h["J"] for h in result.history[-(cfg.stop_window + 1):]]
        if len(js) == cfg.stop_window + 1:
            if max(abs(a - b) for a, b in zip(js[1:], js[:-1])) < cfg.stop_tol * abs(js[-1]):
                break
    result.grid = VoxelGrid(rho, "density", period, material)
    return result
