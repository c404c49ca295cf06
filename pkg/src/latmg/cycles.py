"""Multigrid schedules, warm-start injection and the convergence driver.

Level visits for three levels (``1`` finest, ``3`` coarsest)::

    V       1 2 3 2 1
    W       1 2 3 3 2 2 3 3 2 1
    F       1 2 3 3 2 2 3 2 1
    Half-V  1 2 3 2 1            (no post-smoothing on level 2)

W recurses twice into every coarser level.  F recurses once as an F-cycle
and once as a V-cycle.  Half-V skips post-smoothing below the finest level.
FMG solves the restricted residual equation coarsest-first and climbs with
one V-cycle per level.
"""
from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fem import EbeOperator, ElementKernel, galerkin_kernels
from .hierarchy import GmgHierarchy
from .smooth import SmootherConfig, smooth
from .transfer import TransferStencil, build_stencil, prolongate, restrict

__all__ = [
    "SCHEDULES",
    "CycleConfig",
    "LevelOps",
    "build_level_ops",
    "WarmStart",
    "SolveReport",
    "DivergenceError",
    "v_cycle",
    "w_cycle",
    "f_cycle",
    "half_v_cycle",
    "fmg",
    "run_cycle",
    "solve",
    "project_zero_mean",
    "relative_residual",
    "log_residual",
    "gauge_penalty",
    "fmg_init",
    "truncated_warm_start",
    "save_field",
    "load_field",
    "save_warm_start",
    "load_warm_start",
]

SCHEDULES = ("v", "half_v", "fmg", "w", "f")
_DIVERGENCE_FACTOR = 1e12


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CycleConfig:
    """Schedule, per-level smoother budgets and stopping rule.

    ``pre``/``post`` are either one config for all non-coarsest levels or a
    sequence indexed by level - 1.
    """

    schedule: str = "v"
    pre: SmootherConfig | Sequence[SmootherConfig] = SmootherConfig("gs8", 2)
    post: SmootherConfig | Sequence[SmootherConfig] = SmootherConfig("gs8", 2)
    coarsest: SmootherConfig = SmootherConfig("gs8", 10)
    max_cycles: int = 50
    tol: float = 1e-5

    def __post_init__(self):
        sched = self.schedule.replace("-", "_").lower()
        if sched == "halfv":
            sched = "half_v"
        if sched not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        object.__setattr__(self, "schedule", sched)
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def pre_at(self, level: int) -> SmootherConfig:
        return self.pre if isinstance(self.pre, SmootherConfig) else self.pre[level - 1]

    def post_at(self, level: int) -> SmootherConfig:
        return self.post if isinstance(self.post, SmootherConfig) else self.post[level - 1]

    def replace(self, **kw) -> "CycleConfig":
        d = dict(schedule=self.schedule, pre=self.pre, post=self.post, coarsest=self.coarsest,
                 max_cycles=self.max_cycles, tol=self.tol)
        d.update(kw)
        return CycleConfig(**d)


@dataclass(frozen=True, eq=False)
class LevelOps:
    """Operators of every level and the stencils between consecutive levels."""

    hierarchy: GmgHierarchy
    operators: tuple[EbeOperator, ...]
    stencils: tuple[TransferStencil, ...]

    @property
    def depth(self) -> int:
        return len(self.operators)

    @property
    def dof(self) -> int:
        return self.operators[0].dof

    def op(self, level: int) -> EbeOperator:
        return self.operators[level - 1]


def build_level_ops(hierarchy: GmgHierarchy, kernel: ElementKernel, scale=None) -> LevelOps:
    """Finest-level EBE operator from ``kernel`` and Galerkin coarse operators below it."""
    ops = [EbeOperator(hierarchy[1], kernel.dof, kernel.matrix, scale)]
    stencils = []
    for lv in range(2, hierarchy.depth + 1):
        kc = galerkin_kernels(ops[-1], hierarchy[lv])
        ops.append(EbeOperator(hierarchy[lv], kernel.dof, kernels=kc))
        stencils.append(build_stencil(hierarchy, lv - 1))
    return LevelOps(hierarchy, tuple(ops), tuple(stencils))


@dataclass
class WarmStart:
    """Externally supplied initial field and coarse corrections.

    ``fine`` seeds the finest-level iterate; ``corrections[l]`` (l >= 2)
    replaces the zero initialization of the level-l correction on the first
    descent of the first cycle.
    """

    fine: np.ndarray | None = None
    corrections: dict[int, np.ndarray] = field(default_factory=dict)

    def correction(self, level: int, op: EbeOperator, modes: int) -> np.ndarray:
        e = self.corrections.get(level)
        if e is None:
            return op.zeros(modes)
        return op.check(e).copy()

    def validate(self, ops: LevelOps, modes: int):
        if self.fine is not None:
            ops.op(1).check(self.fine)
            if self.fine.shape[2] != modes:
                raise ValueError(f"warm start has {self.fine.shape[2]} modes, expected {modes}")
        for lv, e in self.corrections.items():
            if not 2 <= lv <= ops.depth:
                raise ValueError(f"correction for level {lv} outside 2..{ops.depth}")
            ops.op(lv).check(e)
            if e.shape[2] != modes:
                raise ValueError(f"level-{lv} correction has {e.shape[2]} modes, expected {modes}")


@dataclass
class SolveReport:
    history: list[float]
    cycles: int
    wall_time: float
    gauge_deviation: np.ndarray
    converged: bool
    diverged: bool = False

    @property
    def final_residual(self) -> float:
        return self.history[-1]

    def to_dict(self) -> dict:
        return {
            "history": [float(r) for r in self.history],
            "cycles": self.cycles,
            "wall_time": self.wall_time,
            "gauge_deviation": np.asarray(self.gauge_deviation).tolist(),
            "converged": self.converged,
            "diverged": self.diverged,
            "final_residual": float(self.final_residual),
        }


# -- metrics -------------------------------------------------------------------
def _mode_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ndm,ndm->m", x, x))


def relative_residual(op: EbeOperator, u: np.ndarray, f: np.ndarray) -> float:
    """``max_m ||f_m - K u_m|| / ||f_m||``; modes with ``f_m = 0`` are measured against ``||f||``."""
    res = _mode_norms(op.residual(u, f))
    fn = _mode_norms(op.check(f))
    total = float(np.sqrt(np.sum(fn ** 2)))
    if total == 0.0:
        return 0.0 if np.all(res == 0) else float("inf")
    denom = np.where(fn > 0, fn, total)
    return float(np.max(res / denom))


def log_residual(op: EbeOperator, u: np.ndarray, f: np.ndarray) -> float:
    return float(np.log10(np.linalg.norm(op.residual(u, f)) + 1e-12))


def gauge_penalty(u: np.ndarray) -> np.ndarray:
    """Squared nodal sum per (component, mode)."""
    return np.asarray(u).sum(axis=0) ** 2


def project_zero_mean(u: np.ndarray) -> np.ndarray:
    """Subtract the per-component, per-mode mean over active nodes."""
    u = np.asarray(u, dtype=float)
    return u - u.mean(axis=0, keepdims=True)


# -- cycles --------------------------------------------------------------------
class _Guard:
    def __init__(self, u: np.ndarray, f: np.ndarray, op: EbeOperator):
        scale = max(np.linalg.norm(u), np.linalg.norm(f) / op.diagonal().min(), 1e-300)
        self.limit = _DIVERGENCE_FACTOR * scale

    def __call__(self, x: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(x)
        if not np.isfinite(n) or n > self.limit:
            raise DivergenceError("multigrid iterate diverged")
        return x


def _recurse(ops: LevelOps, lv: int, u, f, cfg: CycleConfig, kind: str, warm, guard):
    op = ops.op(lv)
    if lv == ops.depth:
        return guard(smooth(op, u, f, cfg.coarsest))
    u = guard(smooth(op, u, f, cfg.pre_at(lv)))
    st = ops.stencils[lv - 1]
    fc = restrict(st, op.residual(u, f))
    m = u.shape[2]
    cop = ops.op(lv + 1)
    uc = warm.correction(lv + 1, cop, m) if warm is not None else cop.zeros(m)
    if kind == "w":
        uc = _recurse(ops, lv + 1, uc, fc, cfg, "w", warm, guard)
        uc = _recurse(ops, lv + 1, uc, fc, cfg, "w", None, guard)
    elif kind == "f":
        uc = _recurse(ops, lv + 1, uc, fc, cfg, "f", warm, guard)
        uc = _recurse(ops, lv + 1, uc, fc, cfg, "v", None, guard)
    else:
        uc = _recurse(ops, lv + 1, uc, fc, cfg, kind, warm, guard)
    u = u + prolongate(st, uc)
    if kind == "half_v" and lv > 1:
        return guard(u)
    return guard(smooth(op, u, f, cfg.post_at(lv)))


def _start(ops: LevelOps, u, f, warm: WarmStart | None):
    op = ops.op(1)
    f = op.check(f)
    if u is None:
        u = warm.fine if warm is not None and warm.fine is not None else op.zeros(f.shape[2])
    u = op.check(u).copy()
    if warm is not None:
        warm.validate(ops, f.shape[2])
    return u, f, _Guard(u, f, op)


def v_cycle(ops: LevelOps, u, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    """One V-cycle; ``u=None`` starts from ``warm.fine`` (or zero)."""
    u, f, guard = _start(ops, u, f, warm)
    return _recurse(ops, 1, u, f, cfg, "v", warm, guard)


def w_cycle(ops: LevelOps, u, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    u, f, guard = _start(ops, u, f, warm)
    return _recurse(ops, 1, u, f, cfg, "w", warm, guard)


def f_cycle(ops: LevelOps, u, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    u, f, guard = _start(ops, u, f, warm)
    return _recurse(ops, 1, u, f, cfg, "f", warm, guard)


def half_v_cycle(ops: LevelOps, u, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    u, f, guard = _start(ops, u, f, warm)
    return _recurse(ops, 1, u, f, cfg, "half_v", warm, guard)


def fmg(ops: LevelOps, u, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    """Full multigrid on the residual equation of ``u``: coarsest-first cascade, one V-cycle per level."""
    u, f, guard = _start(ops, u, f, warm)
    rhs = [ops.op(1).residual(u, f)]
    for st in ops.stencils:
        rhs.append(restrict(st, rhs[-1]))
    L = ops.depth
    m = f.shape[2]
    e = guard(smooth(ops.op(L), ops.op(L).zeros(m), rhs[L - 1], cfg.coarsest))
    for lv in range(L - 1, 0, -1):
        e = prolongate(ops.stencils[lv - 1], e)
        e = _recurse(ops, lv, e, rhs[lv - 1], cfg, "v", None, guard)
    return u + e


_CYCLES = {"v": v_cycle, "w": w_cycle, "f": f_cycle, "half_v": half_v_cycle, "fmg": fmg}


def run_cycle(ops: LevelOps, u, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    return _CYCLES[cfg.schedule](ops, u, f, warm, cfg)


def fmg_init(ops: LevelOps, f, cfg: CycleConfig = CycleConfig()) -> WarmStart:
    """Built-in initializer: one FMG cascade from zero used as the finest-level warm start."""
    return WarmStart(fine=fmg(ops, None, f, None, cfg))


def truncated_warm_start(ops: LevelOps, f, u_ref: np.ndarray, target: float = 1e-3,
                         steps: int = 40) -> tuple[WarmStart, float]:
    """Quantize a converged reference field to the coarsest step with residual <= ``target``.

    Rounding leaves white, high-frequency error: the profile a smoother handles
    and a Krylov truncation does not produce.  Returns ``(warm, r0)``.
    """
    op = ops.op(1)
    f = op.check(f)
    u_ref = op.check(u_ref)
    scale = float(np.abs(u_ref).max())
    if scale == 0.0 or relative_residual(op, u_ref, f) > target:
        raise ValueError("reference field does not meet the target residual")

    def quantize(e):
        q = scale * 10.0 ** e
        return np.round(u_ref / q) * q

    lo, hi = -16.0, 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if relative_residual(op, quantize(mid), f) <= target:
            lo = mid
        else:
            hi = mid
    u0 = quantize(lo)
    return WarmStart(fine=u0), relative_residual(op, u0, f)


def solve(ops: LevelOps, f, warm: WarmStart | None = None, cfg: CycleConfig = CycleConfig()):
    """Repeat the configured cycle until the relative residual reaches ``cfg.tol``.

    Coarse corrections of ``warm`` are injected in the first cycle only.  The
    best iterate is returned (gauge-projected) even when the budget runs out;
    check ``report.converged``.
    """
    t0 = time.perf_counter()
    op = ops.op(1)
    f = op.check(f)
    m = f.shape[2]
    if warm is not None:
        warm.validate(ops, m)
    if not np.any(f):
        u = op.zeros(m)
        return u, SolveReport([0.0], 1, time.perf_counter() - t0, np.zeros((op.dof, m)), True)
    u = op.zeros(m) if warm is None or warm.fine is None else warm.fine.copy()
    r = relative_residual(op, u, f)
    history = [r]
    best_u, best_r = u, r
    converged = r <= cfg.tol
    diverged = False
    cycles = 0
    while not converged and cycles < cfg.max_cycles:
        try:
            u = run_cycle(ops, u, f, warm if cycles == 0 else None, cfg)
        except (DivergenceError, FloatingPointError):
            diverged = True
            break
        cycles += 1
        r = relative_residual(op, u, f)
        history.append(r)
        if r < best_r:
            best_u, best_r = u, r
        converged = r <= cfg.tol
    u = project_zero_mean(best_u)
    gauge = np.abs(best_u.sum(axis=0))
    return u, SolveReport(history, cycles, time.perf_counter() - t0, gauge, converged, diverged)


# -- field files ---------------------------------------------------------------
_MAGIC = b"GMTF"
_HEADER = struct.Struct("<4sIII")


def save_field(fh, level: int, u: np.ndarray):
    """Append one field record (16-byte header + little-endian float32 data) to ``fh``."""
    u = np.asarray(u)
    fh.write(_HEADER.pack(_MAGIC, level, u.shape[1], u.shape[2]))
    fh.write(np.ascontiguousarray(u, dtype="<f4").tobytes())


def load_field(fh, num_nodes_by_level) -> tuple[int, np.ndarray] | None:
    head = fh.read(_HEADER.size)
    if not head:
        return None
    if len(head) != _HEADER.size:
        raise ValueError("truncated field header")
    magic, level, dof, modes = _HEADER.unpack(head)
    if magic != _MAGIC:
        raise ValueError(f"bad field magic {magic!r}")
    n = num_nodes_by_level(level)
    count = n * dof * modes
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"level-{level} field holds {len(raw) // 4} values, expected {count}")
    return level, np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, dof, modes)


def save_warm_start(path, warm: WarmStart):
    with open(path, "wb") as fh:
        if warm.fine is not None:
            save_field(fh, 1, warm.fine)
        for lv in sorted(warm.corrections):
            save_field(fh, lv, warm.corrections[lv])


def load_warm_start(path, hierarchy: GmgHierarchy, dof: int, modes: int) -> WarmStart:
    """Read a concatenation of field records (level 1 = initial field, l >= 2 = corrections)."""

    def nodes(level):
        if not 1 <= level <= hierarchy.depth:
            raise ValueError(f"field record for level {level} outside 1..{hierarchy.depth}")
        return hierarchy[level].num_nodes

    fields = {}
    with open(path, "rb") as fh:
        while (rec := load_field(fh, nodes)) is not None:
            level, u = rec
            if u.shape[1:] != (dof, modes):
                raise ValueError(
                    f"level-{level} field has {u.shape[1]} dof x {u.shape[2]} modes, expected {dof} x {modes}")
            fields[level] = u
    for lv in range(1, hierarchy.depth + 1):
        if lv not in fields:
            warnings.warn(f"warm start has no level-{lv} field; using zeros", stacklevel=2)
    fine = fields.pop(1, None)
    return WarmStart(fine, fields)
