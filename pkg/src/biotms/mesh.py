"""Nested structured triangulations of the unit square.

Fine and coarse grids use the same "criss" pattern: every axis-aligned
square is split along its lower-left to upper-right diagonal, which makes
a coarse grid whose intervals divide the fine intervals exactly nested.
Coarse node neighborhoods (the union of coarse cells touching a coarse
node) and their layer-wise oversampled extensions are the supports of the
multiscale basis construction.

All objects are immutable after construction and safe to share read-only.
"""

from dataclasses import dataclass, field

import numpy as np

# Boundary tag codes per node. Corners resolve to TOP/BOTTOM because the
# pressure Dirichlet data lives there and must win over the lateral
# flux/roller conditions.
TAG_INTERIOR = 0
TAG_LEFT = 1
TAG_RIGHT = 2
TAG_TOP = 3
TAG_BOTTOM = 4


class MeshError(ValueError):
    """Invalid resolution or nesting parameters."""


@dataclass(frozen=True)
class FineMesh:
    """Structured criss triangulation of [0,1]^2 with n intervals per side."""

    n: int
    nodes: np.ndarray          # (n_nodes, 2)
    cells: np.ndarray          # (n_cells, 3) counter-clockwise node triples
    boundary_tag: np.ndarray   # (n_nodes,) TAG_* codes
    on_left: np.ndarray        # boolean node masks, corners included in both
    on_right: np.ndarray
    on_top: np.ndarray
    on_bottom: np.ndarray
    areas: np.ndarray          # (n_cells,) positive signed areas
    centroids: np.ndarray      # (n_cells, 2)
    node_cell_ptr: np.ndarray = field(repr=False)   # CSR adjacency node -> cells
    node_cell_ids: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def cells_of_nodes(self, node_ids: np.ndarray) -> np.ndarray:
        """All cells having at least one vertex in ``node_ids`` (sorted, unique)."""
        chunks = [
            self.node_cell_ids[self.node_cell_ptr[v]:self.node_cell_ptr[v + 1]]
            for v in np.atleast_1d(node_ids)
        ]
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(chunks))


def build_fine_mesh(n: int) -> FineMesh:
    """Build the n-by-n criss triangulation of the unit square.

    Yields (n+1)^2 nodes and 2 n^2 triangles; each square is split along the
    diagonal from its lower-left to its upper-right corner, both triangles
    oriented counter-clockwise.
    """
    if n < 1:
        raise MeshError(f"invalid resolution: need at least 1 interval per side, got {n}")

    side = n + 1
    coords = np.linspace(0.0, 1.0, side)
    xg, yg = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])  # index = iy*side + ix

    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (iy * side + ix).ravel()
    v10 = v00 + 1
    v01 = v00 + side
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    x, y = nodes[:, 0], nodes[:, 1]
    on_left = x == 0.0
    on_right = x == 1.0
    on_top = y == 1.0
    on_bottom = y == 0.0
    tag = np.zeros(nodes.shape[0], dtype=np.int8)
    tag[on_left] = TAG_LEFT
    tag[on_right] = TAG_RIGHT
    tag[on_top] = TAG_TOP        # top/bottom override lateral tags at corners
    tag[on_bottom] = TAG_BOTTOM

    pts = nodes[cells]
    e1 = pts[:, 1] - pts[:, 0]
    e2 = pts[:, 2] - pts[:, 0]
    areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    centroids = pts.mean(axis=1)

    flat = cells.ravel()
    order = np.argsort(flat, kind="stable")
    node_cell_ids = (order // 3).astype(np.int64)
    node_cell_ptr = np.searchsorted(flat[order], np.arange(nodes.shape[0] + 1))

    return FineMesh(
        n=n, nodes=nodes, cells=cells, boundary_tag=tag,
        on_left=on_left, on_right=on_right, on_top=on_top, on_bottom=on_bottom,
        areas=areas, centroids=centroids,
        node_cell_ptr=node_cell_ptr, node_cell_ids=node_cell_ids,
    )


def subset_node_split(mesh: FineMesh, cell_ids: np.ndarray):
    """Split the nodes of a cell subset into (all, boundary, interior).

    An edge lies on the subset boundary iff exactly one subset cell carries
    it; boundary nodes are the endpoints of such edges. Portions of the
    domain boundary covered by the subset count as subset boundary.
    """
    tri = mesh.cells[cell_ids]
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    lo = edges.min(axis=1).astype(np.int64)
    hi = edges.max(axis=1).astype(np.int64)
    keys = lo * mesh.n_nodes + hi
    uniq, counts = np.unique(keys, return_counts=True)
    bnd_keys = uniq[counts == 1]
    boundary = np.unique(np.concatenate([bnd_keys // mesh.n_nodes, bnd_keys % mesh.n_nodes]))
    all_nodes = np.unique(tri.ravel())
    interior = np.setdiff1d(all_nodes, boundary, assume_unique=True)
    return all_nodes, boundary, interior


@dataclass(frozen=True)
class CoarseGrid:
    """Coarse criss triangulation nested in ``fine`` (N divides fine.n)."""

    fine: FineMesh = field(repr=False)
    n_coarse: int
    ratio: int                     # fine intervals per coarse interval
    coarse_nodes: np.ndarray       # (n_cnodes,) fine node index of each coarse node
    coarse_cells: np.ndarray       # (n_ccells, 3) coarse-node index triples
    cell_to_fine: np.ndarray = field(repr=False)  # (n_ccells, ratio**2) fine cell ids
    cnode_cell_ptr: np.ndarray = field(repr=False)
    cnode_cell_ids: np.ndarray = field(repr=False)

    @property
    def n_cnodes(self) -> int:
        return self.coarse_nodes.shape[0]

    @property
    def n_ccells(self) -> int:
        return self.coarse_cells.shape[0]

    @property
    def node_to_fine(self) -> np.ndarray:
        return self.coarse_nodes

    def coarse_node_coords(self) -> np.ndarray:
        return self.fine.nodes[self.coarse_nodes]


def build_coarse_grid(fine: FineMesh, n_coarse: int) -> CoarseGrid:
    """Build the nested coarse grid with ``n_coarse`` intervals per side."""
    if n_coarse < 1:
        raise MeshError(f"invalid coarse resolution: {n_coarse}")
    if fine.n % n_coarse != 0:
        raise MeshError(
            f"coarse grid not nested: fine side {fine.n} is not divisible by {n_coarse}"
        )
    m = fine.n // n_coarse
    side_f = fine.n + 1
    side_c = n_coarse + 1

    cix, ciy = np.meshgrid(np.arange(side_c), np.arange(side_c), indexing="xy")
    coarse_nodes = (ciy * m * side_f + cix * m).ravel()

    ix, iy = np.meshgrid(np.arange(n_coarse), np.arange(n_coarse), indexing="xy")
    w00 = (iy * side_c + ix).ravel()
    w10 = w00 + 1
    w01 = w00 + side_c
    w11 = w01 + 1
    coarse_cells = np.empty((2 * n_coarse * n_coarse, 3), dtype=np.int64)
    coarse_cells[0::2] = np.column_stack([w00, w10, w11])
    coarse_cells[1::2] = np.column_stack([w00, w11, w01])

    # Assign each fine cell to the coarse triangle containing it. Fine squares
    # on the coarse diagonal are split by it exactly along their own diagonal.
    fcell = np.arange(fine.n_cells)
    fsq = fcell // 2
    is_upper = (fcell % 2).astype(bool)
    fx = fsq % fine.n
    fy = fsq // fine.n
    lx = fx % m
    ly = fy % m
    big = 2 * ((fy // m) * n_coarse + (fx // m))
    in_lower = np.where(is_upper, ly < lx, ly <= lx)
    owner = big + (~in_lower).astype(np.int64)

    order = np.argsort(owner, kind="stable")
    cell_to_fine = fcell[order].reshape(2 * n_coarse * n_coarse, m * m)

    flat = coarse_cells.ravel()
    corder = np.argsort(flat, kind="stable")
    cnode_cell_ids = (corder // 3).astype(np.int64)
    cnode_cell_ptr = np.searchsorted(flat[corder], np.arange(side_c * side_c + 1))

    return CoarseGrid(
        fine=fine, n_coarse=n_coarse, ratio=m,
        coarse_nodes=coarse_nodes, coarse_cells=coarse_cells,
        cell_to_fine=cell_to_fine,
        cnode_cell_ptr=cnode_cell_ptr, cnode_cell_ids=cnode_cell_ids,
    )


@dataclass(frozen=True)
class Neighborhood:
    """Union of the coarse cells whose closure contains one coarse node.

    ``fine_nodes`` splits disjointly into interior and boundary nodes; the
    boundary includes any portion of the domain boundary the patch covers.
    ``layers`` counts how many fine-cell layers were grown on top of the
    plain coarse-cell union.
    """

    center: int                      # coarse node index
    coarse_cells: np.ndarray
    fine_cells: np.ndarray
    fine_nodes: np.ndarray
    boundary_fine_nodes: np.ndarray
    interior_fine_nodes: np.ndarray
    layers: int
    mesh: FineMesh = field(repr=False)

    @property
    def n_fine_nodes(self) -> int:
        return self.fine_nodes.shape[0]


def _make_neighborhood(mesh: FineMesh, center: int, coarse_cells: np.ndarray,
                       fine_cells: np.ndarray, layers: int) -> Neighborhood:
    fine_cells = np.unique(fine_cells)
    all_nodes, boundary, interior = subset_node_split(mesh, fine_cells)
    return Neighborhood(
        center=center, coarse_cells=coarse_cells, fine_cells=fine_cells,
        fine_nodes=all_nodes, boundary_fine_nodes=boundary,
        interior_fine_nodes=interior, layers=layers, mesh=mesh,
    )


def neighborhood(cg: CoarseGrid, i: int) -> Neighborhood:
    """Neighborhood of coarse node ``i``: all coarse cells with x_i as a vertex."""
    if not 0 <= i < cg.n_cnodes:
        raise MeshError(f"coarse node index out of range: {i}")
    ccells = cg.cnode_cell_ids[cg.cnode_cell_ptr[i]:cg.cnode_cell_ptr[i + 1]]
    ccells = np.sort(ccells)
    fine_cells = cg.cell_to_fine[ccells].ravel()
    return _make_neighborhood(cg.fine, i, ccells, fine_cells, layers=0)


def oversample(nb: Neighborhood, t: int) -> Neighborhood:
    """Grow the patch by ``t`` layers of node-adjacent fine cells.

    Growth clips silently at the domain boundary; t=0 returns an identical
    neighborhood.
    """
    if t < 0:
        raise MeshError(f"oversampling layer count must be >= 0, got {t}")
    cells = nb.fine_cells
    mesh = nb.mesh
    for _ in range(t):
        if cells.shape[0] == mesh.n_cells:
            break
        touched = np.unique(mesh.cells[cells].ravel())
        cells = mesh.cells_of_nodes(touched)
    return _make_neighborhood(mesh, nb.center, nb.coarse_cells, cells,
                              layers=nb.layers + t)


def all_neighborhoods(cg: CoarseGrid) -> list[Neighborhood]:
    return [neighborhood(cg, i) for i in range(cg.n_cnodes)]
