"""Matrix-free trilinear prolongation and restriction between adjacent hierarchy levels.

The stencil of a fine node ``x_f`` references the coarse nodes
``(floor(x_f/2) + o) mod N_c`` for corner offsets ``o`` with weights
``prod_d (1 - |xi_d - o_d|)``, ``xi = (x_f mod 2) / 2``.  Zero-weight entries
are dropped.  Restriction is the exact transpose of prolongation; both reduce
in a fixed order (segmented sums over pre-sorted entries), so results are
bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import GmgHierarchy
from .voxgeom import OCTANT_OFFSETS

__all__ = ["TransferStencil", "build_stencil", "prolongate", "restrict"]


@dataclass(frozen=True, eq=False)
class TransferStencil:
    """Flat (fine, coarse, weight) triples of the nonzero stencil entries.

    Entries are sorted by fine index; ``by_coarse`` is the permutation sorting
    them by coarse index for the scatter-add of restriction.
    """

    fine_level: int
    num_fine: int
    num_coarse: int
    fine: np.ndarray
    coarse: np.ndarray
    weight: np.ndarray
    by_coarse: np.ndarray
    fine_starts: np.ndarray
    coarse_starts: np.ndarray

    def rows(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Coarse indices and weights of fine node ``i``."""
        lo, hi = self.fine_starts[i], self.fine_starts[i + 1]
        return self.coarse[lo:hi], self.weight[lo:hi]

    def dense(self) -> np.ndarray:
        """Explicit prolongation matrix (test oracle)."""
        P = np.zeros((self.num_fine, self.num_coarse))
        np.add.at(P, (self.fine, self.coarse), self.weight)
        return P


def build_stencil(hierarchy: GmgHierarchy, level: int) -> TransferStencil:
    """Stencil from level ``level + 1`` (coarse) to ``level`` (fine)."""
    if not 1 <= level < hierarchy.depth:
        raise ValueError(f"no level pair ({level}, {level + 1}) in a {hierarchy.depth}-level hierarchy")
    fine, coarse = hierarchy[level], hierarchy[level + 1]
    xf = fine.nodes
    xc = xf // 2
    xi = (xf % 2) / 2.0
    w = np.prod(1 - np.abs(xi[:, None, :] - OCTANT_OFFSETS[None, :, :]), axis=2)  # (n_f, 8)
    cidx = coarse.lookup_nodes(xc[:, None, :] + OCTANT_OFFSETS[None, :, :])
    keep = w > 0
    if np.any(cidx[keep] < 0):
        bad = xf[np.nonzero((cidx < 0) & keep)[0][0]]
        raise ValueError(f"fine node {tuple(bad)} references an inactive coarse node")
    fi = np.broadcast_to(np.arange(len(xf))[:, None], w.shape)[keep]
    ci = cidx[keep]
    wk = w[keep]
    assert np.allclose(np.bincount(fi, weights=wk, minlength=len(xf)), 1.0)
    by_coarse = np.lexsort((fi, ci))
    fine_starts = np.searchsorted(fi, np.arange(len(xf) + 1))
    coarse_starts = np.searchsorted(ci[by_coarse], np.arange(coarse.num_nodes + 1))
    if np.any(np.diff(coarse_starts) == 0):
        raise ValueError("a coarse node receives no restriction contribution")
    return TransferStencil(level, len(xf), coarse.num_nodes, fi, ci, wk, by_coarse,
                           fine_starts, coarse_starts)


def prolongate(stencil: TransferStencil, coarse: np.ndarray) -> np.ndarray:
    """Weighted gather ``u_f(i) = sum_k W_ik u_c(I_ik)``."""
    coarse = np.asarray(coarse, dtype=float)
    if coarse.shape[0] != stencil.num_coarse:
        raise ValueError(f"coarse field has {coarse.shape[0]} nodes, expected {stencil.num_coarse}")
    w = stencil.weight.reshape((-1,) + (1,) * (coarse.ndim - 1))
    vals = w * coarse[stencil.coarse]
    return np.add.reduceat(vals, stencil.fine_starts[:-1], axis=0)


def restrict(stencil: TransferStencil, fine: np.ndarray) -> np.ndarray:
    """Transpose of :func:`prolongate`: scatter-add ``r_c(j) = sum W_ik r_f(i)`` in coarse order."""
    fine = np.asarray(fine, dtype=float)
    if fine.shape[0] != stencil.num_fine:
        raise ValueError(f"fine field has {fine.shape[0]} nodes, expected {stencil.num_fine}")
    perm = stencil.by_coarse
    w = stencil.weight[perm].reshape((-1,) + (1,) * (fine.ndim - 1))
    vals = w * fine[stencil.fine[perm]]
    return np.add.reduceat(vals, stencil.coarse_starts[:-1], axis=0)
