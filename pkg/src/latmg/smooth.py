"""Fixed-budget smoothers: damped Jacobi, 8-color Gauss-Seidel, SOR, CG and Jacobi-PCG."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import EbeOperator

__all__ = ["SmootherConfig", "KINDS", "ColorPartition", "color_of", "color_nodes", "smooth", "pcg_solve"]

KINDS = ("jacobi", "gs8", "sor", "cg", "pcg_jacobi")
_DEFAULT_OMEGA = {"jacobi": 0.6, "gs8": 1.0, "sor": 1.2, "cg": 1.0, "pcg_jacobi": 1.0}


@dataclass(frozen=True)
class SmootherConfig:
    kind: str = "gs8"
    iterations: int = 2
    omega: float | None = None

    def __post_init__(self):
        if self.kind == "pcg":
            object.__setattr__(self, "kind", "pcg_jacobi")
        if self.kind not in KINDS:
            raise ValueError(f"unknown smoother {self.kind!r}; expected one of {KINDS}")
        if self.iterations < 1:
            raise ValueError("smoother needs at least one iteration")
        if self.omega is None:
            object.__setattr__(self, "omega", _DEFAULT_OMEGA[self.kind])
        if not 0 < self.omega < 2:
            raise ValueError(f"relaxation factor must lie in (0, 2), got {self.omega}")

    def with_iterations(self, it: int) -> "SmootherConfig":
        return SmootherConfig(self.kind, it, self.omega)


def color_of(coords: np.ndarray) -> np.ndarray:
    """``(x mod 2) + 2 (y mod 2) + 4 (z mod 2)``."""
    c = np.asarray(coords) % 2
    return c[..., 0] + 2 * c[..., 1] + 4 * c[..., 2]


@dataclass(frozen=True, eq=False)
class ColorPartition:
    classes: tuple[np.ndarray, ...]

    def __getitem__(self, c: int) -> np.ndarray:
        return self.classes[c]


def color_nodes(topo) -> ColorPartition:
    col = color_of(topo.nodes)
    return ColorPartition(tuple(np.flatnonzero(col == c) for c in range(8)))


def _check_finite(u: np.ndarray):
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite values in smoother field")


def _mode_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ndm,ndm->m", a, b)


def _remove_mean(r: np.ndarray) -> np.ndarray:
    return r - r.mean(axis=0, keepdims=True)


def _krylov(op: EbeOperator, u: np.ndarray, f: np.ndarray, iterations: int, precondition: bool):
    inv_d = 1.0 / op.diagonal()[:, :, None]
    r = _remove_mean(f - op.apply(u))
    z = r * inv_d if precondition else r
    p = z.copy()
    rz = _mode_dot(r, z)
    for _ in range(iterations):
        Ap = op.apply(p)
        pAp = _mode_dot(p, Ap)
        alpha = np.divide(rz, pAp, out=np.zeros_like(rz), where=pAp > 0)
        u = u + alpha * p
        r = _remove_mean(r - alpha * Ap)
        z = r * inv_d if precondition else r
        rz_new = _mode_dot(r, z)
        beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=rz > 0)
        p = z + beta * p
        rz = rz_new
    return u


def smooth(op: EbeOperator, u: np.ndarray, f: np.ndarray, cfg: SmootherConfig) -> np.ndarray:
    """Run ``cfg.iterations`` sweeps of ``cfg.kind`` on ``K u = f``; returns a new field."""
    u = op.check(u).copy()
    f = op.check(f)
    _check_finite(u)
    _check_finite(f)
    d = op.diagonal()
    if np.any(d <= 0):
        raise ZeroDivisionError("zero diagonal entry: an inactive DOF reached the smoother")
    if cfg.kind in ("cg", "pcg_jacobi"):
        u = _krylov(op, u, f, cfg.iterations, cfg.kind == "pcg_jacobi")
    elif cfg.kind == "jacobi":
        scale = cfg.omega / d[:, :, None]
        for _ in range(cfg.iterations):
            u += scale * (f - op.apply(u))
    else:
        # gs8 and sor share one code path; they differ only in the default omega.
        for _ in range(cfg.iterations):
            for c in range(8):
                nodes = op.color_nodes(c)
                if len(nodes) == 0:
                    continue
                r = f[nodes] - op.apply_color(u, c)
                u[nodes] += cfg.omega * r / d[nodes, :, None]
    _check_finite(u)
    return u


def pcg_solve(op: EbeOperator, f: np.ndarray, tol: float, max_iter: int = 10000,
              u0: np.ndarray | None = None, precondition: bool = True) -> tuple[np.ndarray, int]:
    """Jacobi-PCG until ``max_m ||f_m - K u_m|| / ||f_m|| <= tol``; returns ``(u, iterations)``.

    Used as a long-run oracle and to build truncated warm starts.
    """
    f = op.check(f)
    u = op.zeros(f.shape[2]) if u0 is None else op.check(u0).copy()
    inv_d = 1.0 / op.diagonal()[:, :, None]
    fn = np.sqrt(_mode_dot(f, f))
    fn = np.where(fn > 0, fn, max(float(np.sqrt(np.sum(fn ** 2))), 1e-300))
    r = _remove_mean(f - op.apply(u))
    z = r * inv_d if precondition else r
    p = z.copy()
    rz = _mode_dot(r, z)
    for it in range(max_iter + 1):
        if np.max(np.sqrt(_mode_dot(r, r)) / fn) <= tol or it == max_iter:
            # recompute the true residual before trusting the recurrence
            res = f - op.apply(u)
            if np.max(np.sqrt(_mode_dot(res, res)) / fn) <= tol or it == max_iter:
                return u, it
            r = _remove_mean(res)
        Ap = op.apply(p)
        pAp = _mode_dot(p, Ap)
        alpha = np.divide(rz, pAp, out=np.zeros_like(rz), where=pAp > 0)
        u = u + alpha * p
        r = _remove_mean(r - alpha * Ap)
        z = r * inv_d if precondition else r
        rz_new = _mode_dot(r, z)
        beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=rz > 0)
        p = z + beta * p
        rz = rz_new
    return u, max_iter
