import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from latmg.hierarchy import (build_hierarchy, coarsen_elements, default_depth, derive_node_set,
                             linear_index, unravel)
from latmg.voxgeom import (VoxelGrid, generate_laminate, generate_tpms, random_occupancy,
                           tpms_level_for_fraction)


def or_pool(occ):
    n = occ.shape[0] // 2
    return occ.reshape(n, 2, n, 2, n, 2).any(axis=(1, 3, 5))


def brute_vertices(occ):
    n = occ.shape[0]
    out = set()
    for v in zip(*np.nonzero(occ)):
        for o in itertools.product((0, 1), repeat=3):
            out.add(tuple((np.array(v) + o) % n))
    return out


def periodic_components(occ):
    n = occ.shape[0]
    idx = np.flatnonzero(occ.ravel(order="F"))
    if len(idx) == 0:
        return 0
    coords = unravel(idx, n)
    pos = {int(i): k for k, i in enumerate(idx)}
    rows, cols = [], []
    for k, c in enumerate(coords):
        for d in range(3):
            nb = c.copy()
            nb[d] = (nb[d] + 1) % n
            j = pos.get(int(linear_index(nb, n)))
            if j is not None:
                rows.append(k)
                cols.append(j)
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(idx), len(idx)))
    return connected_components(g, directed=False)[0]


def test_index_round_trip():
    c = np.array([[1, 2, 3], [3, 3, 3], [0, 0, 0]])
    assert linear_index(c, 4).tolist() == [1 + 4 * (2 + 4 * 3), 63, 0]
    assert np.array_equal(unravel(linear_index(c, 4), 4), c)
    assert linear_index([4, -1, 0], 4) == 0 + 4 * 3


def test_coarsen_examples():
    full = unravel(np.arange(64), 4)
    assert len(coarsen_elements(full, 4)) == 8
    assert coarsen_elements(np.array([[3, 0, 0]]), 8).tolist() == [[1, 0, 0]]
    with pytest.raises(ValueError):
        coarsen_elements(full, 5)


def test_coarsen_gyroid_matches_or_pool():
    g = generate_tpms("gyroid", 16, tpms_level_for_fraction("gyroid", 16, 0.3))
    h = build_hierarchy(g, 3)
    occ = g.active
    for lv in (2, 3):
        occ = or_pool(occ)
        ref = np.argwhere(occ)
        got = h[lv].elements
        assert sorted(map(tuple, ref)) == sorted(map(tuple, got))


def test_node_set_examples():
    assert len(derive_node_set(unravel(np.arange(8), 2), 2)) == 8
    assert len(derive_node_set(np.array([[1, 1, 1]]), 4)) == 8
    lam = generate_laminate(8, "y", 3)
    h = build_hierarchy(lam, 3)
    occ = lam.active
    for lv in (1, 2, 3):
        if lv > 1:
            occ = or_pool(occ)
        assert set(map(tuple, h[lv].nodes)) == brute_vertices(occ)


def test_resolutions_and_errors():
    assert build_hierarchy(VoxelGrid(np.ones((64, 64, 64))), 5).resolutions == [64, 32, 16, 8, 4]
    assert build_hierarchy(VoxelGrid(np.ones((16, 16, 16))), 3).resolutions == [16, 8, 4]
    with pytest.raises(ValueError):
        build_hierarchy(VoxelGrid(np.ones((12, 12, 12))), 4)
    with pytest.raises(ValueError):
        build_hierarchy(VoxelGrid(np.ones((4, 4, 4))), 3)  # coarsest would be 1
    with pytest.raises(ValueError, match="odd"):
        build_hierarchy(VoxelGrid(np.ones((6, 6, 6))), 2)
    with pytest.raises(ValueError, match="odd"):
        build_hierarchy(VoxelGrid(np.ones((5, 5, 5))), 1)


@pytest.mark.parametrize("n,L", [(4, 1), (8, 2), (16, 3), (32, 4), (64, 5), (128, 5), (512, 6), (12, 2), (6, 1)])
def test_default_depth(n, L):
    assert default_depth(n) == L


def test_sorted_and_incidence():
    g = random_occupancy(8, 0.3, seed=5)
    h = build_hierarchy(g, 3)
    for t in h:
        n = t.resolution
        for arr in (t.elements, t.nodes):
            assert np.all(np.diff(linear_index(arr, n)) > 0)
        corners = t.elements[:, None, :] + np.array(list(itertools.product((0, 1), repeat=3)))[:, ::-1]
        assert np.array_equal(t.nodes[t.elem_nodes], corners % n)
        assert t.lookup_nodes(t.nodes).tolist() == list(range(t.num_nodes))


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.02, 0.6))
def test_conservative_and_topology_preserving(seed, fill):
    g = random_occupancy(8, fill, seed)
    h = build_hierarchy(g, 3)
    occ = g.active
    for lv in (1, 2):
        fine, coarse = h[lv], h[lv + 1]
        assert np.all(coarse.lookup_elements(fine.elements // 2) >= 0)
        assert coarse.num_elements <= fine.num_elements
        nxt = or_pool(occ)
        assert periodic_components(nxt) <= periodic_components(occ)
        occ = nxt


def test_deterministic():
    g = random_occupancy(8, 0.4, seed=9)
    a, b = build_hierarchy(g), build_hierarchy(VoxelGrid(g.values.copy()))
    for x, y in zip(a, b):
        assert np.array_equal(x.nodes, y.nodes) and np.array_equal(x.elem_nodes, y.elem_nodes)


def test_to_json():
    h = build_hierarchy(VoxelGrid(np.ones((4, 4, 4))), 2)
    d = h[2].to_json()
    assert d["resolution"] == 2 and len(d["nodes"]) == 8
