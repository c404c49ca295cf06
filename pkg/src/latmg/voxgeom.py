"""Periodic voxel geometry: grids, generators, node occupancy features and file I/O.

Voxel values are held in an ``(N, N, N)`` array indexed ``[x, y, z]``.  Every
flattened view uses x-fastest ordering (``index = x + N*(y + N*z)``), i.e.
``values.ravel(order="F")``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MaterialModel",
    "VoxelGrid",
    "NodeFeatures",
    "OCTANT_OFFSETS",
    "generate_tpms",
    "tpms_level_for_fraction",
    "generate_laminate",
    "generate_truss",
    "random_occupancy",
    "benchmark_suite",
    "SUITE_KINDS",
    "node_features",
    "volume_fraction",
    "save_grid",
    "load_grid",
    "GridFormatError",
]

# Corner / octant k <-> offset (k & 1, (k >> 1) & 1, (k >> 2) & 1): z-major lexicographic.
OCTANT_OFFSETS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)


class GridFormatError(ValueError):
    """Raised when a grid file pair is malformed."""


@dataclass(frozen=True)
class MaterialModel:
    """Isotropic base material: Young's modulus, Poisson ratio, conductivity."""

    E: float = 1.0
    nu: float = 0.3
    kappa: float = 1.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")
        if not self.kappa > 0:
            raise ValueError(f"conductivity must be positive, got {self.kappa}")

    @property
    def lame(self) -> tuple[float, float]:
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        mu = self.E / (2 * (1 + self.nu))
        return lam, mu

    def stiffness_voigt(self) -> np.ndarray:
        """6x6 isotropic stiffness, Voigt order (11, 22, 33, 23, 13, 12), engineering shear."""
        lam, mu = self.lame
        C = np.zeros((6, 6))
        C[:3, :3] = lam
        C[np.arange(3), np.arange(3)] = lam + 2 * mu
        C[np.arange(3, 6), np.arange(3, 6)] = mu
        return C

    def scaled(self, s: float) -> "MaterialModel":
        return MaterialModel(self.E * s, self.nu, self.kappa * s)


@dataclass(frozen=True)
class VoxelGrid:
    """Periodic cubic voxel RVE.

    ``kind`` is ``"occupancy"`` (values in {0, 1}) or ``"density"`` (values in
    [0, 1]; exactly 0 marks a pruned voxel).  Any voxel with value > 0 is active.
    """

    values: np.ndarray
    kind: str = "occupancy"
    period: tuple[float, float, float] = (1.0, 1.0, 1.0)
    material: MaterialModel = field(default_factory=MaterialModel)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"values must be a cubic 3-D array, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("resolution must be at least 2")
        if self.kind not in ("occupancy", "density"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        if self.kind == "occupancy":
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("occupancy grids may only contain 0 and 1")
        elif np.any(v < 0) or np.any(v > 1):
            raise ValueError("density values must lie in [0, 1]")
        if not np.any(v > 0):
            raise ValueError("grid has no solid voxel")
        period = tuple(float(p) for p in self.period)
        if len(period) != 3 or min(period) <= 0:
            raise ValueError(f"period must be three positive numbers, got {self.period}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "period", period)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        """Physical voxel edge length per axis."""
        return np.asarray(self.period) / self.resolution

    @property
    def active(self) -> np.ndarray:
        return self.values > 0

    def flat(self) -> np.ndarray:
        """Values in x-fastest order."""
        return self.values.ravel(order="F")

    def with_values(self, values, kind: str | None = None) -> "VoxelGrid":
        return VoxelGrid(values, kind or self.kind, self.period, self.material)


def _centers(n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, c, indexing="ij")


def _tpms_field(kind: str, n: int, shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    x, y, z = (2 * np.pi * (c + s) for c, s in zip(_centers(n), shift))
    if kind == "gyroid":
        return np.sin(x) * np.cos(y) + np.sin(y) * np.cos(z) + np.sin(z) * np.cos(x)
    if kind == "schwarz_p":
        return np.cos(x) + np.cos(y) + np.cos(z)
    if kind == "diamond":
        return (np.sin(x) * np.sin(y) * np.sin(z) + np.sin(x) * np.cos(y) * np.cos(z)
                + np.cos(x) * np.sin(y) * np.cos(z) + np.cos(x) * np.cos(y) * np.sin(z))
    raise ValueError(f"unknown TPMS kind {kind!r}")


def generate_tpms(kind: str, n: int, level: float, shift=(0.0, 0.0, 0.0), **kw) -> VoxelGrid:
    """Occupancy grid of the region ``phi(x) < level`` sampled at voxel centers.

    ``shift`` translates the level set by a fraction of the period; the result
    stays periodic because the trigonometric fields are.
    """
    if n < 2:
        raise ValueError("resolution must be at least 2")
    phi = _tpms_field(kind, n, shift)
    return VoxelGrid((phi < level).astype(np.float64), "occupancy", **kw)


def tpms_level_for_fraction(kind: str, n: int, vf: float, shift=(0.0, 0.0, 0.0)) -> float:
    """Bisect the level so the counted volume fraction is as close to ``vf`` as possible."""
    if not 0 < vf <= 1:
        raise ValueError("volume fraction must lie in (0, 1]")
    phi = np.sort(_tpms_field(kind, n, shift).ravel())
    k = int(round(vf * phi.size))
    k = min(max(k, 1), phi.size)
    if k == phi.size:
        return math.inf
    lo, hi = phi[k - 1], phi[k]
    return float(0.5 * (lo + hi)) if hi > lo else float(np.nextafter(lo, np.inf))


def generate_laminate(n: int, axis: str, solid_layers: int, **kw) -> VoxelGrid:
    """Layered grid: voxels with coordinate along ``axis`` below ``solid_layers`` are solid."""
    if n < 2:
        raise ValueError("resolution must be at least 2")
    if axis not in ("x", "y", "z"):
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    if not 1 <= solid_layers <= n - 1:
        raise ValueError(f"solid_layers must lie in [1, {n - 1}], got {solid_layers}")
    v = np.zeros((n, n, n))
    sl = [slice(None)] * 3
    sl["xyz".index(axis)] = slice(0, solid_layers)
    v[tuple(sl)] = 1.0
    return VoxelGrid(v, "occupancy", **kw)


_TRUSS_STRUTS = {
    "cubic": [((0, 0, 0), (1, 0, 0)), ((0, 0, 0), (0, 1, 0)), ((0, 0, 0), (0, 0, 1))],
    "bcc": [((0, 0, 0), (1, 1, 1)), ((1, 0, 0), (0, 1, 1)), ((0, 1, 0), (1, 0, 1)), ((0, 0, 1), (1, 1, 0))],
    "octet": [((0, 0, 0), (1, 1, 0)), ((1, 0, 0), (0, 1, 0)), ((0, 0, 0), (1, 0, 1)),
              ((1, 0, 0), (0, 0, 1)), ((0, 0, 0), (0, 1, 1)), ((0, 1, 0), (0, 0, 1))],
}


def generate_truss(kind: str, n: int, radius: float, shift=(0.0, 0.0, 0.0), **kw) -> VoxelGrid:
    """Strut lattice: voxels whose center lies within ``radius`` (period units) of a strut."""
    if n < 2:
        raise ValueError("resolution must be at least 2")
    if kind not in _TRUSS_STRUTS:
        raise ValueError(f"unknown truss kind {kind!r}")
    p = np.stack([(c + s) % 1.0 for c, s in zip(_centers(n), shift)], axis=-1).reshape(-1, 3)
    best = np.full(len(p), np.inf)
    images = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], float)
    for a, b in _TRUSS_STRUTS[kind]:
        a, b = np.asarray(a, float), np.asarray(b, float)
        d = b - a
        for img in images:
            q = p - (a + img)
            t = np.clip(q @ d / (d @ d), 0.0, 1.0)
            best = np.minimum(best, np.linalg.norm(q - t[:, None] * d, axis=1))
    solid = (best < radius).reshape(n, n, n)
    return VoxelGrid(solid.astype(np.float64), "occupancy", **kw)


def random_occupancy(n: int, fill: float = 0.5, seed: int = 0, **kw) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    v = (rng.random((n, n, n)) < fill).astype(np.float64)
    if not v.any():
        v[0, 0, 0] = 1.0
    return VoxelGrid(v, "occupancy", **kw)


SUITE_KINDS = ("gyroid", "schwarz_p", "diamond", "cubic", "bcc", "octet")


def benchmark_suite(n: int = 16, count: int = 10, seed: int = 0, **kw) -> list[tuple[str, VoxelGrid]]:
    """Seeded mix of TPMS and truss cells with random phase shifts.

    TPMS volume fractions are drawn from [0.2, 0.4], strut radii from
    [0.08, 0.14] period units.  Kinds cycle through ``SUITE_KINDS``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = SUITE_KINDS[i % len(SUITE_KINDS)]
        shift = tuple(rng.random(3))
        if kind in _TRUSS_STRUTS:
            r = float(rng.uniform(0.08, 0.14))
            out.append((f"{kind}-r{r:.3f}", generate_truss(kind, n, r, shift, **kw)))
        else:
            vf = float(rng.uniform(0.2, 0.4))
            level = tpms_level_for_fraction(kind, n, vf, shift)
            out.append((f"{kind}-vf{vf:.3f}", generate_tpms(kind, n, level, shift, **kw)))
    return out


@dataclass(frozen=True)
class NodeFeatures:
    """Active nodes of the finest level with their 8 octant occupancy bits.

    ``coords`` is ``(n, 3)`` sorted by x-fastest linear index; ``bits[:, k]``
    is the occupancy of octant ``OCTANT_OFFSETS[k]``.
    """

    coords: np.ndarray
    bits: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)


def node_features(grid: VoxelGrid) -> NodeFeatures:
    n = grid.resolution
    occ = grid.active
    bits = np.empty((n, n, n, 8), dtype=bool)
    for k, o in enumerate(OCTANT_OFFSETS):
        # octant o of node x is voxel (x - 1 + o) mod n
        bits[..., k] = np.roll(occ, shift=tuple(1 - o), axis=(0, 1, 2))
    flat = bits.transpose(2, 1, 0, 3).reshape(-1, 8)
    keep = np.flatnonzero(flat.any(axis=1))
    coords = np.stack([keep % n, (keep // n) % n, keep // (n * n)], axis=1)
    return NodeFeatures(coords, flat[keep].astype(np.uint8))


def volume_fraction(grid: VoxelGrid) -> float:
    return float(grid.values.mean())


def _pair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_grid(grid: VoxelGrid, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (metadata) and ``<path>.raw`` (little-endian voxel data)."""
    meta_path, data_path = _pair_paths(path)
    m = grid.material
    meta = {
        "resolution": grid.resolution,
        "kind": grid.kind,
        "period": list(grid.period),
        "material": {"E": m.E, "nu": m.nu, "kappa": m.kappa},
    }
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    flat = grid.flat()
    if grid.kind == "occupancy":
        data = flat.astype("u1")
    else:
        data = flat.astype("<f4")
    data_path.write_bytes(data.tobytes())
    return meta_path, data_path


def load_grid(path) -> VoxelGrid:
    meta_path, data_path = _pair_paths(path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        n = int(meta["resolution"])
        kind = meta["kind"]
        period = tuple(float(p) for p in meta.get("period", (1.0, 1.0, 1.0)))
        mat = meta.get("material", {})
        material = MaterialModel(float(mat.get("E", 1.0)), float(mat.get("nu", 0.3)),
                                 float(mat.get("kappa", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"malformed grid header {meta_path}: {exc}") from exc
    if kind not in ("occupancy", "density"):
        raise GridFormatError(f"unknown grid kind {kind!r}")
    if n < 2:
        raise GridFormatError(f"invalid resolution {n}")
    raw = data_path.read_bytes()
    dtype = np.dtype("u1") if kind == "occupancy" else np.dtype("<f4")
    if len(raw) != n ** 3 * dtype.itemsize:
        raise GridFormatError(
            f"{data_path} holds {len(raw)} bytes, expected {n ** 3 * dtype.itemsize}")
    flat = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if kind == "occupancy" and np.any(flat > 1):
        raise GridFormatError("occupancy data contains values other than 0 and 1")
    if kind == "density" and (np.any(~np.isfinite(flat)) or np.any(flat < 0) or np.any(flat > 1)):
        raise GridFormatError("density data outside [0, 1]")
    values = flat.reshape((n, n, n), order="F")
    try:
        return VoxelGrid(values, kind, period, material)
    except ValueError as exc:
        raise GridFormatError(str(exc)) from exc
