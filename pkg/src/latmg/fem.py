"""Trilinear hexahedral element kernels and the matrix-free element-by-element operator.

DOF layout of every nodal field is ``(num_nodes, dof_per_node, modes)``:
node-major, then components (ux, uy, uz), then load-mode columns.  Element
DOFs follow the corner order of :data:`latmg.voxgeom.OCTANT_OFFSETS`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .hierarchy import LevelTopology
from .voxgeom import OCTANT_OFFSETS, MaterialModel

__all__ = [
    "ElementKernel",
    "element_stiffness_elastic",
    "element_matrix_thermal",
    "element_kernel",
    "EbeOperator",
    "local_prolongation",
    "galerkin_kernels",
    "galerkin_coarse_kernel",
    "assemble_dense",
]

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class ElementKernel:
    """Unit-material element matrix plus its per-mode load and affine reference response.

    ``loads`` is the element load for each macroscopic mode (``B^T C eps``
    integrated); ``reference`` holds the element-local nodal values of the
    affine field of each mode, so ``matrix @ reference == loads``.
    """

    physics: str
    matrix: np.ndarray
    loads: np.ndarray
    reference: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def dof(self) -> int:
        return 3 if self.physics == "elasticity" else 1

    @property
    def modes(self) -> int:
        return self.loads.shape[1]

    @property
    def volume(self) -> float:
        return float(np.prod(self.spacing))


def _shape_gradients(xi, h) -> np.ndarray:
    """(3, 8) physical gradients of the 8 trilinear shape functions at reference point ``xi``."""
    s = 2 * OCTANT_OFFSETS - 1  # corner signs in reference coords
    g = np.empty((3, 8))
    for d in range(3):
        others = [e for e in range(3) if e != d]
        g[d] = s[:, d] / 8.0
        for e in others:
            g[d] *= 1 + s[:, e] * xi[e]
        g[d] *= 2.0 / h[d]
    return g


def _strain_matrix(grad: np.ndarray) -> np.ndarray:
    """6x24 strain-displacement matrix, Voigt (11, 22, 33, 23, 13, 12), engineering shear."""
    B = np.zeros((6, 24))
    gx, gy, gz = grad
    B[0, 0::3] = gx
    B[1, 1::3] = gy
    B[2, 2::3] = gz
    B[3, 1::3] = gz
    B[3, 2::3] = gy
    B[4, 0::3] = gz
    B[4, 2::3] = gx
    B[5, 0::3] = gy
    B[5, 1::3] = gx
    return B


def _gauss_points():
    for a in _GAUSS:
        for b in _GAUSS:
            for c in _GAUSS:
                yield np.array([a, b, c])


def _voigt_strain_tensor(m: int) -> np.ndarray:
    eps = np.zeros((3, 3))
    if m < 3:
        eps[m, m] = 1.0
    else:
        i, j = [(1, 2), (0, 2), (0, 1)][m - 3]
        eps[i, j] = eps[j, i] = 0.5
    return eps


def element_stiffness_elastic(material: MaterialModel, spacing=(1.0, 1.0, 1.0)) -> ElementKernel:
    h = np.asarray(spacing, dtype=float)
    C = material.stiffness_voigt()
    detj = np.prod(h) / 8.0
    K = np.zeros((24, 24))
    F = np.zeros((24, 6))
    for xi in _gauss_points():
        B = _strain_matrix(_shape_gradients(xi, h))
        K += B.T @ C @ B * detj
        F += B.T @ C * detj
    K = 0.5 * (K + K.T)
    corners = OCTANT_OFFSETS * h
    X0 = np.stack([(corners @ _voigt_strain_tensor(m).T).ravel() for m in range(6)], axis=1)
    return ElementKernel("elasticity", K, F, X0, tuple(h))


def element_matrix_thermal(material: MaterialModel, spacing=(1.0, 1.0, 1.0)) -> ElementKernel:
    h = np.asarray(spacing, dtype=float)
    detj = np.prod(h) / 8.0
    K = np.zeros((8, 8))
    F = np.zeros((8, 3))
    for xi in _gauss_points():
        G = _shape_gradients(xi, h)
        K += material.kappa * G.T @ G * detj
        F += material.kappa * G.T * detj
    K = 0.5 * (K + K.T)
    T0 = (OCTANT_OFFSETS * h).astype(float)
    return ElementKernel("thermal", K, F, T0, tuple(h))


def element_kernel(physics: str, material: MaterialModel, spacing=(1.0, 1.0, 1.0)) -> ElementKernel:
    if physics in ("elasticity", "elastic"):
        return element_stiffness_elastic(material, spacing)
    if physics == "thermal":
        return element_matrix_thermal(material, spacing)
    raise ValueError(f"unknown physics {physics!r}")


def _parity(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords) % 2
    return c[..., 0] + 2 * c[..., 1] + 4 * c[..., 2]


class EbeOperator:
    """Matrix-free ``K u = sum_e A_e^T K_e A_e u`` over the active elements of one level.

    Either a shared element ``matrix`` with a per-element ``scale`` (finest level),
    or a stack of per-element ``kernels`` (Galerkin coarse levels).  Elements are
    kept internally grouped by coordinate parity so Gauss-Seidel color sweeps
    can evaluate only the rows they update.  All scatter-adds go through
    fixed-order CSR reductions and are bit-reproducible.
    """

    def __init__(self, topo: LevelTopology, dof: int, matrix=None, scale=None, kernels=None):
        if (matrix is None) == (kernels is None):
            raise ValueError("pass exactly one of matrix or kernels")
        self.topo = topo
        self.dof = dof
        nd = 8 * dof
        n_e = topo.num_elements
        parity = _parity(topo.elements)
        order = np.argsort(parity, kind="stable")
        self._order = order
        self._groups = np.searchsorted(parity[order], np.arange(9))
        self._elem_nodes = np.ascontiguousarray(topo.elem_nodes[order])
        if kernels is not None:
            kernels = np.asarray(kernels, dtype=float)
            if kernels.shape != (n_e, nd, nd):
                raise ValueError(f"kernels must have shape {(n_e, nd, nd)}, got {kernels.shape}")
            self.matrix = None
            self.scale = None
            self._kernels = np.ascontiguousarray(kernels[order])
        else:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.shape != (nd, nd):
                raise ValueError(f"matrix must be {nd}x{nd}")
            scale = np.ones(n_e) if scale is None else np.asarray(scale, dtype=float)
            if scale.shape != (n_e,):
                raise ValueError(f"scale must have length {n_e}")
            if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
                raise ValueError("element scales must be positive and finite")
            self.matrix = matrix
            self.scale = scale
            self._kernels = None
            self._scale_sorted = scale[order]
        n_n = topo.num_nodes
        self._scatter = sp.csr_matrix(
            (np.ones(n_e * 8), (self._elem_nodes.ravel(), np.arange(n_e * 8))), shape=(n_n, n_e * 8))
        self._colors = self._build_color_scatter()
        self._diag = self._compute_diagonal()
        if np.any(self._diag <= 0):
            raise ValueError("operator diagonal is not strictly positive on active DOFs")

    # -- construction helpers -------------------------------------------------
    def _build_color_scatter(self):
        topo = self.topo
        node_color = _parity(topo.nodes)
        out = []
        par_sorted = np.repeat(np.arange(8), np.diff(self._groups))
        e = np.arange(topo.num_elements)
        for c in range(8):
            nodes_c = np.flatnonzero(node_color == c)
            pos = np.full(topo.num_nodes, -1)
            pos[nodes_c] = np.arange(len(nodes_c))
            target = self._elem_nodes[e, c ^ par_sorted]
            rows = pos[target]
            assert np.all(rows >= 0)
            S = sp.csr_matrix((np.ones(len(e)), (rows, e)), shape=(len(nodes_c), len(e)))
            out.append((nodes_c, S))
        return out

    def _compute_diagonal(self) -> np.ndarray:
        if self._kernels is not None:
            d = np.diagonal(self._kernels, axis1=1, axis2=2)
        else:
            d = self._scale_sorted[:, None] * np.diag(self.matrix)[None, :]
        d = d.reshape(-1, self.dof)
        return np.asarray(self._scatter @ d)

    # -- public surface -------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return self.topo.num_nodes

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_nodes, self.dof)

    def zeros(self, modes: int) -> np.ndarray:
        return np.zeros((self.num_nodes, self.dof, modes))

    def check(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim != 3 or u.shape[:2] != self.shape:
            raise ValueError(
                f"field shape {u.shape} does not match level {self.topo.level} "
                f"({self.num_nodes} nodes x {self.dof} dof x modes)")
        return u

    def diagonal(self) -> np.ndarray:
        """Per-DOF diagonal of K, shape ``(num_nodes, dof)``."""
        return self._diag

    def element_kernels(self) -> np.ndarray:
        """Per-element matrices in hierarchy element order (materialized)."""
        if self._kernels is not None:
            out = np.empty_like(self._kernels)
            out[self._order] = self._kernels
            return out
        return self.scale[:, None, None] * self.matrix[None]

    def _gather(self, u: np.ndarray, lo: int = 0, hi: int | None = None) -> np.ndarray:
        en = self._elem_nodes[lo:hi]
        m = u.shape[2]
        return u[en].reshape(len(en), 8 * self.dof, m)

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = self.check(u)
        n_e, m = self.topo.num_elements, u.shape[2]
        U = self._gather(u)
        if self._kernels is not None:
            Y = np.matmul(self._kernels, U)
        else:
            nd = 8 * self.dof
            Y = (self.matrix @ U.transpose(1, 0, 2).reshape(nd, n_e * m)).reshape(nd, n_e, m)
            Y = Y.transpose(1, 0, 2) * self._scale_sorted[:, None, None]
        Y = Y.reshape(n_e * 8, self.dof * m)
        return np.asarray(self._scatter @ Y).reshape(self.num_nodes, self.dof, m)

    __matmul__ = apply

    def residual(self, u: np.ndarray, f: np.ndarray) -> np.ndarray:
        return self.check(f) - self.apply(u)

    def color_nodes(self, c: int) -> np.ndarray:
        return self._colors[c][0]

    def apply_color(self, u: np.ndarray, c: int) -> np.ndarray:
        """Rows of ``K u`` belonging to color ``c`` nodes, shape ``(n_c, dof, modes)``."""
        m = u.shape[2]
        dof = self.dof
        nd = 8 * dof
        parts = []
        for p in range(8):
            lo, hi = self._groups[p], self._groups[p + 1]
            if hi == lo:
                continue
            k = c ^ p
            U = self._gather(u, lo, hi)
            if self._kernels is not None:
                rows = self._kernels[lo:hi, k * dof:(k + 1) * dof, :]
                parts.append(np.matmul(rows, U))
            else:
                rows = self.matrix[k * dof:(k + 1) * dof]
                Y = (rows @ U.transpose(1, 0, 2).reshape(nd, -1)).reshape(dof, hi - lo, m)
                parts.append(Y.transpose(1, 0, 2) * self._scale_sorted[lo:hi, None, None])
        Y = np.concatenate(parts, axis=0).reshape(-1, dof * m)
        nodes_c, S = self._colors[c]
        return np.asarray(S @ Y).reshape(len(nodes_c), dof, m)


def local_prolongation(dof: int) -> np.ndarray:
    """Trilinear prolongation from the 8 corners of a coarse element to its 27 patch nodes."""
    q = np.array([[i, j, k] for k in range(3) for j in range(3) for i in range(3)])
    W = np.prod(1 - np.abs(q[:, None, :] / 2 - OCTANT_OFFSETS[None, :, :]), axis=2)
    return np.kron(W, np.eye(dof))


def _child_prolongations(dof: int) -> list[np.ndarray]:
    """For child offset a: map from coarse corner DOFs to the child's fine corner DOFs."""
    out = []
    for a in OCTANT_OFFSETS:
        pos = (a[None, :] + OCTANT_OFFSETS) / 2.0
        W = np.prod(1 - np.abs(pos[:, None, :] - OCTANT_OFFSETS[None, :, :]), axis=2)
        out.append(np.kron(W, np.eye(dof)))
    return out


def galerkin_kernels(fine_op: EbeOperator, coarse: LevelTopology) -> np.ndarray:
    """Coarse element matrices ``P_loc^T K_patch P_loc`` for every coarse element."""
    fine = fine_op.topo
    if coarse.resolution * 2 != fine.resolution:
        raise ValueError("levels are not adjacent")
    dof = fine_op.dof
    nd = 8 * dof
    out = np.zeros((coarse.num_elements, nd, nd))
    shared = fine_op._kernels is None
    if not shared:
        kern = fine_op.element_kernels()
    for a, Q in zip(OCTANT_OFFSETS, _child_prolongations(dof)):
        child = fine.lookup_elements(2 * coarse.elements + a)
        has = child >= 0
        if not has.any():
            continue
        if shared:
            base = Q.T @ fine_op.matrix @ Q
            out[has] += fine_op.scale[child[has], None, None] * base[None]
        else:
            out[has] += np.einsum("ji,ejk,kl->eil", Q, kern[child[has]], Q, optimize=True)
    return 0.5 * (out + out.transpose(0, 2, 1))


def galerkin_coarse_kernel(fine_op: EbeOperator, coarse_element, coarse: LevelTopology) -> np.ndarray:
    idx = coarse.lookup_elements(np.asarray(coarse_element)[None, :])[0]
    if idx < 0:
        raise ValueError(f"coarse element {tuple(coarse_element)} is not active")
    single = LevelTopology.from_elements(coarse.level, coarse.elements[idx:idx + 1], coarse.resolution)
    return galerkin_kernels(fine_op, single)[0]


def assemble_dense(op: EbeOperator, cap: int = 4096) -> np.ndarray:
    """Explicit global matrix (test oracle only)."""
    n = op.num_nodes * op.dof
    if n > cap:
        raise ValueError(f"{n} DOFs exceed the dense assembly cap of {cap}")
    dof = op.dof
    kern = op.element_kernels()
    dofs = (op.topo.elem_nodes[:, :, None] * dof + np.arange(dof)).reshape(len(kern), -1)
    K = np.zeros((n, n))
    rows = np.broadcast_to(dofs[:, :, None], kern.shape)
    cols = np.broadcast_to(dofs[:, None, :], kern.shape)
    np.add.at(K, (rows.ravel(), cols.ravel()), kern.ravel())
    return K
