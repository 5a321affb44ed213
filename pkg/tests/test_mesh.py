"""Mesh construction, nesting, neighborhoods and oversampling."""

import numpy as np
import pytest

from biotms.mesh import (MeshError, all_neighborhoods, build_coarse_grid,
                         build_fine_mesh, neighborhood, oversample)


class TestFineMesh:
    @pytest.mark.parametrize("n,nodes,cells", [(60, 3721, 7200), (1, 4, 2), (5, 36, 50)])
    def test_counts(self, n, nodes, cells):
        mesh = build_fine_mesh(n)
        assert mesh.n_nodes == nodes
        assert mesh.n_cells == cells

    def test_zero_resolution_rejected(self):
        with pytest.raises(MeshError):
            build_fine_mesh(0)

    def test_positive_areas(self):
        mesh = build_fine_mesh(7)
        assert np.all(mesh.areas > 0)
        assert np.allclose(mesh.areas.sum(), 1.0)

    def test_edge_sharing(self):
        mesh = build_fine_mesh(6)
        edges = {}
        for cell in mesh.cells:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key = tuple(sorted((cell[a], cell[b])))
                edges[key] = edges.get(key, 0) + 1
        counts = np.array(list(edges.values()))
        assert set(counts) <= {1, 2}
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        for (a, b), c in edges.items():
            on_bnd = all(x[v] in (0.0, 1.0) or y[v] in (0.0, 1.0) for v in (a, b)) and (
                x[a] == x[b] or y[a] == y[b])
            if c == 1:
                assert on_bnd, f"interior edge {(a, b)} in only one cell"

    def test_boundary_tags_corner_resolution(self):
        mesh = build_fine_mesh(4)
        from biotms.mesh import TAG_BOTTOM, TAG_TOP
        # corners carry the pressure-Dirichlet-dominant top/bottom tag
        corner_ids = [0, 4, 20, 24]
        assert list(mesh.boundary_tag[corner_ids]) == [TAG_BOTTOM, TAG_BOTTOM,
                                                       TAG_TOP, TAG_TOP]
        assert mesh.on_left[0] and mesh.on_bottom[0]  # masks keep both facts


class TestCoarseGrid:
    def test_nested_counts(self):
        mesh = build_fine_mesh(60)
        cg = build_coarse_grid(mesh, 5)
        assert cg.n_cnodes == 36
        assert cg.n_ccells == 50
        # counting oracle: 7200 fine cells partitioned over 50 coarse cells
        assert cg.cell_to_fine.shape == (50, 144)
        # and 288 per coarse square (the two triangles of each block)
        pair = cg.cell_to_fine.reshape(25, 2, 144)
        assert pair.shape[1] * pair.shape[2] == 288

    def test_partition_disjoint_exhaustive(self):
        mesh = build_fine_mesh(12)
        cg = build_coarse_grid(mesh, 3)
        flat = np.sort(cg.cell_to_fine.ravel())
        assert np.array_equal(flat, np.arange(mesh.n_cells))

    def test_degenerate_nesting(self):
        mesh = build_fine_mesh(4)
        cg = build_coarse_grid(mesh, 4)
        assert cg.n_ccells == mesh.n_cells
        assert np.array_equal(np.sort(cg.cell_to_fine.ravel()), np.arange(mesh.n_cells))
        assert cg.cell_to_fine.shape[1] == 1

    def test_non_divisible_rejected(self):
        mesh = build_fine_mesh(60)
        with pytest.raises(MeshError):
            build_coarse_grid(mesh, 7)

    def test_coarse_nodes_coincide_with_fine(self):
        mesh = build_fine_mesh(12)
        cg = build_coarse_grid(mesh, 3)
        coords = cg.coarse_node_coords()
        for k, (x, y) in enumerate(coords):
            assert x * 3 == round(x * 3) and y * 3 == round(y * 3)

    def test_refinement_property(self):
        """Every coarse edge is a chain of fine edges."""
        mesh = build_fine_mesh(12)
        cg = build_coarse_grid(mesh, 3)
        fine_edges = set()
        for cell in mesh.cells:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                fine_edges.add(tuple(sorted((cell[a], cell[b]))))
        m = cg.ratio
        side = mesh.n + 1
        for tri in cg.coarse_cells:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                fa, fb = cg.coarse_nodes[tri[a]], cg.coarse_nodes[tri[b]]
                ax, ay = fa % side, fa // side
                bx, by = fb % side, fb // side
                sx, sy = (bx - ax) // m, (by - ay) // m
                chain = [(ay + k * sy) * side + (ax + k * sx) for k in range(m + 1)]
                for u, v in zip(chain, chain[1:]):
                    assert tuple(sorted((u, v))) in fine_edges


def _cells_containing_coarse_node(cg, i):
    """Geometric oracle: coarse triangles whose closure contains node i."""
    coords = cg.coarse_node_coords()
    x = coords[i]
    hits = []
    for c, tri in enumerate(cg.coarse_cells):
        p = coords[tri]
        e1, e2 = p[1] - p[0], p[2] - p[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        l1 = ((x[0] - p[0][0]) * e2[1] - (x[1] - p[0][1]) * e2[0]) / det
        l2 = (-(x[0] - p[0][0]) * e1[1] + (x[1] - p[0][1]) * e1[0]) / det
        if l1 >= -1e-12 and l2 >= -1e-12 and l1 + l2 <= 1 + 1e-12:
            hits.append(c)
    return hits


class TestNeighborhood:
    def test_interior_node_six_cells(self):
        mesh = build_fine_mesh(12)
        cg = build_coarse_grid(mesh, 3)
        interior = 1 * 4 + 1  # coarse node (1, 1)
        nb = neighborhood(cg, interior)
        assert len(nb.coarse_cells) == 6
        assert sorted(nb.coarse_cells) == _cells_containing_coarse_node(cg, interior)

    def test_corner_cells_depend_on_diagonal(self):
        mesh = build_fine_mesh(12)
        cg = build_coarse_grid(mesh, 3)
        n_side = 4
        corner_counts = {
            0: len(neighborhood(cg, 0).coarse_cells),                      # (0,0)
            n_side - 1: len(neighborhood(cg, n_side - 1).coarse_cells),    # (1,0)
            n_side * (n_side - 1): len(neighborhood(cg, n_side * (n_side - 1)).coarse_cells),
            n_side * n_side - 1: len(neighborhood(cg, n_side * n_side - 1).coarse_cells),
        }
        # corners on the diagonal get both triangles, off-diagonal only one
        assert corner_counts[0] == 2 and corner_counts[n_side * n_side - 1] == 2
        assert corner_counts[n_side - 1] == 1 and corner_counts[n_side * (n_side - 1)] == 1
        for i, count in corner_counts.items():
            assert count == len(_cells_containing_coarse_node(cg, i))

    def test_fine_cell_in_exactly_three_neighborhoods(self):
        mesh = build_fine_mesh(12)
        cg = build_coarse_grid(mesh, 3)
        membership = np.zeros(mesh.n_cells, dtype=int)
        for nb in all_neighborhoods(cg):
            membership[nb.fine_cells] += 1
        assert membership.min() >= 1 and membership.max() <= 3
        assert np.all(membership == 3)

    def test_union_covers_mesh(self, mesh12, grid12):
        covered = np.zeros(mesh12.n_cells, dtype=bool)
        for nb in all_neighborhoods(grid12):
            covered[nb.fine_cells] = True
        assert covered.all()

    def test_node_split_disjoint(self, grid12):
        nb = neighborhood(grid12, 5)
        assert np.intersect1d(nb.interior_fine_nodes, nb.boundary_fine_nodes).size == 0
        merged = np.union1d(nb.interior_fine_nodes, nb.boundary_fine_nodes)
        assert np.array_equal(merged, nb.fine_nodes)


class TestOversample:
    def test_zero_layers_identity(self, grid12):
        nb = neighborhood(grid12, 5)
        nb0 = oversample(nb, 0)
        assert np.array_equal(nb0.fine_cells, nb.fine_cells)
        assert np.array_equal(nb0.fine_nodes, nb.fine_nodes)
        assert nb0.layers == 0

    def test_monotone_growth(self, grid12):
        nb = neighborhood(grid12, 5)
        prev = nb
        for t in range(1, 5):
            grown = oversample(nb, t)
            assert np.all(np.isin(prev.fine_nodes, grown.fine_nodes))
            assert grown.layers == t
            prev = grown

    def test_strictly_larger_until_saturation(self):
        mesh = build_fine_mesh(60)
        cg = build_coarse_grid(mesh, 5)
        nb = neighborhood(cg, 14)  # interior node
        nb4 = oversample(nb, 4)
        assert nb4.fine_nodes.shape[0] > nb.fine_nodes.shape[0]

    def test_saturates_at_whole_mesh(self, grid12):
        nb = neighborhood(grid12, 5)
        big = oversample(nb, 100)
        assert big.fine_cells.shape[0] == grid12.fine.n_cells
        bigger = oversample(big, 1)
        assert bigger.fine_cells.shape[0] == grid12.fine.n_cells

    def test_negative_layers_rejected(self, grid12):
        with pytest.raises(MeshError):
            oversample(neighborhood(grid12, 5), -1)
