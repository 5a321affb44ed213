"""Offline multiscale basis construction.

Per coarse neighborhood: a snapshot space (harmonic extensions of
per-boundary-DOF deltas, or a reduced count of random Gaussian boundary
solves on an oversampled patch), spectral dimension reduction to the
smallest eigenpairs of the projected stiffness/mass pencil, and the
product with a conforming partition of unity. The resulting basis rows
stack into global restriction operators for the pressure and the
displacement spaces.

Displacement eigenmodes contribute two basis rows each (the x and the y
part of the partition-of-unity product), so a coarse grid with N nodes
and n_off modes per node yields N*n_off pressure and 2*N*n_off
displacement degrees of freedom.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import npzio
from .assembly import BilinearFormKind as Form
from .assembly import assemble
from .material import MaterialField
from .mesh import CoarseGrid, FineMesh, Neighborhood, all_neighborhoods, oversample, subset_node_split

log = logging.getLogger(__name__)

PRESSURE = "pressure"
DISPLACEMENT = "displacement"

_STIFFNESS_FORM = {PRESSURE: Form.DARCY_STIFFNESS, DISPLACEMENT: Form.ELASTICITY}
_MASS_FORM = {PRESSURE: Form.PRESSURE_MASS, DISPLACEMENT: Form.VECTOR_MASS}
_FIELD_CODE = {PRESSURE: 0, DISPLACEMENT: 1}

RANDOM_COUNT_BUFFER = 8  # extra random snapshots beyond the requested mode count


class OfflineError(RuntimeError):
    """Offline-phase construction failure."""


def _interleave(node_positions: np.ndarray) -> np.ndarray:
    """Vector DOF indices (x then y per node) for local node positions."""
    out = np.empty(2 * node_positions.shape[0], dtype=np.int64)
    out[0::2] = 2 * node_positions
    out[1::2] = 2 * node_positions + 1
    return out


def _local_split(nb: Neighborhood, kind: str):
    """(boundary DOFs, interior DOFs, total DOFs) in the patch numbering."""
    pos_b = np.searchsorted(nb.fine_nodes, nb.boundary_fine_nodes)
    pos_i = np.searchsorted(nb.fine_nodes, nb.interior_fine_nodes)
    if kind == PRESSURE:
        return pos_b, pos_i, nb.n_fine_nodes
    return _interleave(pos_b), _interleave(pos_i), 2 * nb.n_fine_nodes


def _local_stiffness(nb: Neighborhood, kind: str, mesh, material) -> sp.csr_matrix:
    return assemble(_STIFFNESS_FORM[kind], mesh, material,
                    cells=nb.fine_cells, nodes=nb.fine_nodes).mat


def _local_mass(nb: Neighborhood, kind: str, mesh, material) -> sp.csr_matrix:
    return assemble(_MASS_FORM[kind], mesh, material,
                    cells=nb.fine_cells, nodes=nb.fine_nodes).mat


def _boundary_solve(stiff: sp.csr_matrix, bnd: np.ndarray, interior: np.ndarray,
                    n_dofs: int, boundary_data: np.ndarray, center: int) -> np.ndarray:
    """Extend prescribed boundary data harmonically into the patch interior."""
    try:
        lu = splu(sp.csc_matrix(stiff[interior][:, interior]))
    except RuntimeError as exc:
        raise OfflineError(
            f"singular local system on neighborhood of coarse node {center}: {exc}"
        ) from exc
    coupling = stiff[interior][:, bnd]
    vectors = np.zeros((n_dofs, boundary_data.shape[1]))
    vectors[bnd] = boundary_data
    if interior.size:
        vectors[interior] = -lu.solve(coupling @ boundary_data)
    return vectors


@dataclass
class SnapshotSpace:
    """Local solution vectors spanning the pre-reduction space on one patch."""

    kind: str
    neighborhood: Neighborhood
    vectors: np.ndarray  # (local DOFs of the base patch, count)
    mode: str            # 'delta' | 'random'
    seed: int | None = None
    oversample_layers: int = 0

    @property
    def count(self) -> int:
        return self.vectors.shape[1]


def _global_dofs(nb: Neighborhood, kind: str, local_dofs: np.ndarray) -> np.ndarray:
    """Global fine DOF ids of patch-local DOFs."""
    if kind == PRESSURE:
        return nb.fine_nodes[local_dofs]
    return 2 * nb.fine_nodes[local_dofs // 2] + local_dofs % 2


def _driving_mask(nb: Neighborhood, kind: str, bnd: np.ndarray,
                  exclude_dofs: np.ndarray | None) -> np.ndarray:
    """Boundary DOFs that carry snapshot data (constrained ones stay zero)."""
    if exclude_dofs is None or exclude_dofs.size == 0:
        return np.ones(bnd.shape[0], dtype=bool)
    return ~np.isin(_global_dofs(nb, kind, bnd), exclude_dofs)


def harmonic_snapshots(nb: Neighborhood, kind: str, mesh: FineMesh,
                       material: MaterialField,
                       exclude_dofs: np.ndarray | None = None) -> SnapshotSpace:
    """One harmonic extension per boundary DOF of the patch (delta data).

    ``exclude_dofs`` (global fine DOFs, typically the globally constrained
    Dirichlet set) are clamped to zero instead of contributing deltas, so
    every snapshot conforms to the outer boundary conditions.
    """
    bnd, interior, n_dofs = _local_split(nb, kind)
    drive = _driving_mask(nb, kind, bnd, exclude_dofs)
    data = np.eye(bnd.shape[0])[:, drive]
    stiff = _local_stiffness(nb, kind, mesh, material)
    vectors = _boundary_solve(stiff, bnd, interior, n_dofs, data, nb.center)
    return SnapshotSpace(kind=kind, neighborhood=nb, vectors=vectors, mode="delta",
                         oversample_layers=nb.layers)


def _restrict_dofs(nb: Neighborhood, nb_over: Neighborhood, kind: str) -> np.ndarray:
    pos = np.searchsorted(nb_over.fine_nodes, nb.fine_nodes)
    return pos if kind == PRESSURE else _interleave(pos)


def _kernel_traces(nb_over: Neighborhood, kind: str, bnd: np.ndarray) -> np.ndarray:
    """Coarse-kernel boundary data: constants (scalar) or rigid motions (vector).

    Where the patch boundary coincides with the physical domain boundary the
    oversampling buffer vanishes and purely random data almost surely misses
    these smooth traces, so a few snapshot solves are spent on them directly.
    """
    if kind == PRESSURE:
        return np.ones((bnd.shape[0], 1))
    nodes = nb_over.fine_nodes[bnd[0::2] // 2]
    coords = nb_over.mesh.nodes[nodes]
    center = coords.mean(axis=0)
    radius = max(np.abs(coords - center).max(), 1e-12)
    data = np.zeros((bnd.shape[0], 3))
    data[0::2, 0] = 1.0                                   # x translation
    data[1::2, 1] = 1.0                                   # y translation
    data[0::2, 2] = -(coords[:, 1] - center[1]) / radius  # rotation
    data[1::2, 2] = (coords[:, 0] - center[0]) / radius
    return data


def randomized_snapshots(nb: Neighborhood, nb_over: Neighborhood, kind: str,
                         mesh: FineMesh, material: MaterialField,
                         count: int, seed_key,
                         exclude_dofs: np.ndarray | None = None) -> SnapshotSpace:
    """Random-boundary solves on the oversampled patch, restricted to the base.

    The first solves of the budget carry the coarse kernel traces (constant
    or rigid-motion data), the rest independent standard Gaussian vectors on
    the driving boundary DOFs. ``seed_key`` feeds ``np.random.default_rng``
    and should encode the global seed plus the neighborhood, so parallel
    schedules cannot change results.
    """
    bnd, interior, n_dofs = _local_split(nb_over, kind)
    drive = _driving_mask(nb_over, kind, bnd, exclude_dofs)
    n_drive = int(drive.sum())
    if count > n_drive:
        raise OfflineError(
            f"requested {count} random snapshots but the oversampled boundary has "
            f"only {n_drive} driving DOFs (coarse node {nb.center})")
    if count < 1:
        raise OfflineError(f"random snapshot count must be positive, got {count}")
    rng = np.random.default_rng(seed_key)
    kernel = _kernel_traces(nb_over, kind, bnd)
    n_kernel = min(kernel.shape[1], count)
    data = np.zeros((bnd.shape[0], count))
    data[:, :n_kernel] = kernel[:, :n_kernel]
    data[drive, n_kernel:] = rng.standard_normal((n_drive, count - n_kernel))
    data[~drive] = 0.0
    stiff = _local_stiffness(nb_over, kind, mesh, material)
    vectors = _boundary_solve(stiff, bnd, interior, n_dofs, data, nb.center)
    restricted = vectors[_restrict_dofs(nb, nb_over, kind)]
    return SnapshotSpace(kind=kind, neighborhood=nb, vectors=restricted, mode="random",
                         seed=None, oversample_layers=nb_over.layers)


def oversampled_harmonic_snapshots(nb: Neighborhood, nb_over: Neighborhood, kind: str,
                                   mesh: FineMesh, material: MaterialField,
                                   exclude_dofs: np.ndarray | None = None) -> SnapshotSpace:
    """Delta snapshots solved on the oversampled patch, restricted to the base."""
    bnd, interior, n_dofs = _local_split(nb_over, kind)
    drive = _driving_mask(nb_over, kind, bnd, exclude_dofs)
    data = np.eye(bnd.shape[0])[:, drive]
    vectors = _boundary_solve(_local_stiffness(nb_over, kind, mesh, material),
                              bnd, interior, n_dofs, data, nb.center)
    restricted = vectors[_restrict_dofs(nb, nb_over, kind)]
    return SnapshotSpace(kind=kind, neighborhood=nb, vectors=restricted, mode="delta",
                         oversample_layers=nb_over.layers)


@dataclass
class ReducedBasis:
    """Smallest eigenpairs of the snapshot-projected stiffness/mass pencil."""

    kind: str
    neighborhood: Neighborhood
    eigenvalues: np.ndarray  # ascending
    vectors: np.ndarray      # (local DOFs, n_off), mass-orthonormal
    regularized: bool = False

    @property
    def n_off(self) -> int:
        return self.vectors.shape[1]


MASS_TRUNCATION_REL = 1e-10  # relative mass eigenvalue cutoff for the whitening


def spectral_reduce(snap: SnapshotSpace, stiffness: sp.spmatrix, mass: sp.spmatrix,
                    n_off: int) -> ReducedBasis:
    """Reduce the snapshot space to its ``n_off`` lowest generalized eigenmodes.

    The pencil is whitened through a symmetric eigendecomposition of the
    projected mass. Near-dependent snapshots (possible with random or
    restricted data) make the mass numerically singular; its near-null
    eigendirections carry 0/0 Rayleigh quotients that would masquerade as
    low modes, so the whitening drops them and the reduction proceeds on
    the numerically meaningful subspace (logged when it happens).
    """
    vecs = snap.vectors
    if n_off > vecs.shape[1]:
        raise OfflineError(
            f"requested {n_off} offline modes from only {vecs.shape[1]} snapshots")
    if n_off < 1:
        raise OfflineError(f"offline mode count must be positive, got {n_off}")
    stiff_off = vecs.T @ (stiffness @ vecs)
    mass_off = vecs.T @ (mass @ vecs)
    stiff_off = 0.5 * (stiff_off + stiff_off.T)
    mass_off = 0.5 * (mass_off + mass_off.T)

    w, q = scipy.linalg.eigh(mass_off)
    keep = w > MASS_TRUNCATION_REL * w[-1]
    regularized = not bool(keep.all())
    if regularized:
        log.warning("near-dependent snapshots on coarse node %d (%s): keeping "
                    "%d of %d mass directions (min/max eig %.3e / %.3e)",
                    snap.neighborhood.center, snap.kind, int(keep.sum()),
                    keep.shape[0], w[0], w[-1])
    if int(keep.sum()) < n_off:
        raise OfflineError(
            f"coarse node {snap.neighborhood.center}: only {int(keep.sum())} "
            f"independent snapshot directions for {n_off} requested modes")
    whiten = q[:, keep] * (1.0 / np.sqrt(w[keep]))
    pencil = whiten.T @ stiff_off @ whiten
    lam, y = scipy.linalg.eigh(0.5 * (pencil + pencil.T))
    coeffs = whiten @ y[:, :n_off]
    out = vecs @ coeffs
    # Deterministic sign: largest-magnitude entry of each mode positive.
    for k in range(out.shape[1]):
        j = np.argmax(np.abs(out[:, k]))
        if out[j, k] < 0:
            out[:, k] = -out[:, k]
    return ReducedBasis(kind=snap.kind, neighborhood=snap.neighborhood,
                        eigenvalues=lam[:n_off], vectors=out, regularized=regularized)


# -- partition of unity ------------------------------------------------------


@dataclass
class PartitionOfUnity:
    """Rows are the per-coarse-node glue fields chi (scalar) and xi (vector)."""

    chi: sp.csr_matrix  # (n coarse nodes, n fine nodes)
    xi: sp.csr_matrix   # (n coarse nodes, 2 * n fine nodes)
    variant: str        # 'multiscale' | 'linear'


def _cell_barycentric(cg: CoarseGrid, ccell: int, nodes: np.ndarray) -> np.ndarray:
    """Exact barycentric coordinates of fine nodes w.r.t. one coarse triangle.

    Every coordinate comes straight from an integer numerator over the
    refinement ratio, so values on edges are exact rationals and the
    off-edge coordinate is an exact zero (the sum may be off by an ulp,
    which the partition-of-unity tolerance absorbs; exact zeros are what
    the support and conformity logic depends on).
    """
    m = cg.ratio
    side = cg.fine.n + 1
    square, upper = divmod(ccell, 2)
    ix0 = (square % cg.n_coarse) * m
    iy0 = (square // cg.n_coarse) * m
    a = (nodes % side) - ix0
    b = (nodes // side) - iy0
    lam = np.empty((nodes.shape[0], 3))
    if not upper:  # vertices (0,0), (m,0), (m,m)
        lam[:, 0] = (m - a) / m
        lam[:, 1] = (a - b) / m
        lam[:, 2] = b / m
    else:          # vertices (0,0), (m,m), (0,m)
        lam[:, 0] = (m - b) / m
        lam[:, 1] = a / m
        lam[:, 2] = (b - a) / m
    return lam


def partition_of_unity(cg: CoarseGrid, kind: str, material: MaterialField,
                       variant: str = "multiscale") -> sp.csr_matrix:
    """Per-coarse-node glue fields with hat traces on every coarse edge.

    'multiscale' extends the edge traces harmonically with the same
    heterogeneous operator as the snapshots; 'linear' keeps plain coarse
    hat functions (ablation aid).
    """
    if variant not in ("multiscale", "linear"):
        raise OfflineError(f"unknown partition-of-unity variant: {variant!r}")
    mesh = cg.fine
    comp = 1 if kind == PRESSURE else 2
    dense = np.zeros((cg.n_cnodes, comp * mesh.n_nodes))

    for ccell in range(cg.n_ccells):
        cells = cg.cell_to_fine[ccell]
        nodes, bnd, interior = subset_node_split(mesh, cells)
        lam = _cell_barycentric(cg, ccell, nodes)
        if variant == "linear":
            values = lam if kind == PRESSURE else np.repeat(lam, 2, axis=0)
        else:
            pos_b = np.searchsorted(nodes, bnd)
            pos_i = np.searchsorted(nodes, interior)
            if kind == PRESSURE:
                stiff = assemble(Form.DARCY_STIFFNESS, mesh, material,
                                 cells=cells, nodes=nodes).mat
                values = _boundary_solve(stiff, pos_b, pos_i, nodes.shape[0],
                                         lam[pos_b], ccell)
            else:
                stiff = assemble(Form.ELASTICITY, mesh, material,
                                 cells=cells, nodes=nodes).mat
                traces = np.repeat(lam[pos_b], 2, axis=0)  # same trace per component
                values = _boundary_solve(stiff, _interleave(pos_b), _interleave(pos_i),
                                         2 * nodes.shape[0], traces, ccell)
        for v_local, cnode in enumerate(cg.coarse_cells[ccell]):
            if kind == PRESSURE:
                dense[cnode, nodes] = values[:, v_local]
            else:
                dense[cnode, 2 * nodes] = values[0::2, v_local]
                dense[cnode, 2 * nodes + 1] = values[1::2, v_local]
    return sp.csr_matrix(dense)


def build_partition_of_unity(cg: CoarseGrid, material: MaterialField,
                             variant: str = "multiscale") -> PartitionOfUnity:
    return PartitionOfUnity(
        chi=partition_of_unity(cg, PRESSURE, material, variant),
        xi=partition_of_unity(cg, DISPLACEMENT, material, variant),
        variant=variant,
    )


# -- basis rows and restriction operators ------------------------------------


@dataclass
class NodeBasis:
    """Multiscale basis rows of one coarse node (global fine-DOF columns)."""

    node: int
    eigenvalues_p: np.ndarray
    eigenvalues_u: np.ndarray
    rows_p: sp.csr_matrix  # (n_off_p, n fine nodes)
    rows_u: sp.csr_matrix  # (2 * n_off_u, 2 * n fine nodes), x row then y row per mode


def build_node_basis(reduced_p: ReducedBasis, reduced_u: ReducedBasis,
                     pou: PartitionOfUnity, n_fine_nodes: int) -> NodeBasis:
    """Pointwise product of the partition of unity with the offline modes.

    The scalar field multiplies nodewise; each displacement mode splits
    into an x-part row and a y-part row (componentwise product), which
    keeps componentwise boundary conditions representable on the coarse
    space.
    """
    nb = reduced_p.neighborhood
    i = nb.center
    nodes = nb.fine_nodes
    chi_vals = pou.chi[[i], :].toarray().ravel()[nodes]
    xi_row = pou.xi[[i], :].toarray().ravel()
    xi_x = xi_row[2 * nodes]
    xi_y = xi_row[2 * nodes + 1]

    n_off_p = reduced_p.n_off
    data_p = (chi_vals[:, None] * reduced_p.vectors).T  # (n_off_p, n_loc)
    cols_p = np.tile(nodes, n_off_p)
    indptr_p = nodes.shape[0] * np.arange(n_off_p + 1)
    rows_p = sp.csr_matrix((data_p.ravel(), cols_p, indptr_p),
                           shape=(n_off_p, n_fine_nodes))

    n_off_u = reduced_u.n_off
    ux = reduced_u.vectors[0::2]  # (n_loc, n_off_u)
    uy = reduced_u.vectors[1::2]
    data_u = np.empty((2 * n_off_u, nodes.shape[0]))
    data_u[0::2] = (xi_x[:, None] * ux).T
    data_u[1::2] = (xi_y[:, None] * uy).T
    cols_u = np.empty((2 * n_off_u, nodes.shape[0]), dtype=np.int64)
    cols_u[0::2] = 2 * nodes
    cols_u[1::2] = 2 * nodes + 1
    indptr_u = nodes.shape[0] * np.arange(2 * n_off_u + 1)
    rows_u = sp.csr_matrix((data_u.ravel(), cols_u.ravel(), indptr_u),
                           shape=(2 * n_off_u, 2 * n_fine_nodes))
    rows_p.eliminate_zeros()
    rows_u.eliminate_zeros()
    return NodeBasis(node=i, eigenvalues_p=reduced_p.eigenvalues,
                     eigenvalues_u=reduced_u.eigenvalues,
                     rows_p=rows_p, rows_u=rows_u)


@dataclass
class RestrictionOperator:
    """Stacked multiscale basis rows with per-row provenance."""

    kind: str
    matrix: sp.csr_matrix
    node: np.ndarray   # coarse node per row
    mode: np.ndarray   # eigenmode index per row
    comp: np.ndarray   # 0 for scalar rows and x-parts, 1 for y-parts

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def singular_range(self):
        gram = (self.matrix @ self.matrix.T).toarray()
        w = scipy.linalg.eigvalsh(gram)
        return float(np.sqrt(max(w[0], 0.0))), float(np.sqrt(w[-1]))


def assemble_restriction(bases: list[NodeBasis], kind: str,
                         n_off: int | None = None,
                         check_rank: bool = False) -> RestrictionOperator:
    """Stack per-node basis rows (node ascending, mode ascending) into R."""
    rows, node_ids, mode_ids, comps = [], [], [], []
    for nb in bases:
        if kind == PRESSURE:
            take = nb.rows_p.shape[0] if n_off is None else n_off
            if take > nb.rows_p.shape[0]:
                raise OfflineError(
                    f"node {nb.node}: requested {take} pressure rows, built "
                    f"{nb.rows_p.shape[0]}")
            rows.append(nb.rows_p[:take])
            node_ids += [nb.node] * take
            mode_ids += list(range(take))
            comps += [0] * take
        else:
            take = nb.rows_u.shape[0] // 2 if n_off is None else n_off
            if 2 * take > nb.rows_u.shape[0]:
                raise OfflineError(
                    f"node {nb.node}: requested {take} displacement modes, built "
                    f"{nb.rows_u.shape[0] // 2}")
            rows.append(nb.rows_u[:2 * take])
            node_ids += [nb.node] * (2 * take)
            mode_ids += [k for k in range(take) for _ in (0, 1)]
            comps += [0, 1] * take
    op = RestrictionOperator(
        kind=kind,
        matrix=sp.vstack(rows, format="csr"),
        node=np.array(node_ids, dtype=np.int64),
        mode=np.array(mode_ids, dtype=np.int64),
        comp=np.array(comps, dtype=np.int64),
    )
    if check_rank:
        smin, smax = op.singular_range()
        if smin <= 1e-10 * smax:
            gram = (op.matrix @ op.matrix.T).toarray()
            _, vecs = scipy.linalg.eigh(gram)
            null = np.abs(vecs[:, 0])
            bad = np.argsort(null)[::-1][:8]
            pairs = [(int(op.node[r]), int(op.mode[r]), int(op.comp[r])) for r in bad]
            raise OfflineError(
                f"rank-deficient {kind} restriction operator; dominant rows "
                f"(node, mode, comp): {pairs}")
    return op


# -- offline driver -----------------------------------------------------------


@dataclass
class OfflineBasis:
    """Archive of the full offline phase, sliceable to any smaller mode count."""

    cg: CoarseGrid = field(repr=False)
    pou: PartitionOfUnity = field(repr=False)
    bases: list = field(repr=False)
    n_off_max_p: int
    n_off_max_u: int
    meta: dict

    def restriction(self, n_off_p: int, n_off_u: int):
        """(R_p, R_u) truncated to the first modes per node (nested rows)."""
        if n_off_p > self.n_off_max_p or n_off_u > self.n_off_max_u:
            raise OfflineError(
                f"requested ({n_off_p}, {n_off_u}) modes but the archive holds "
                f"({self.n_off_max_p}, {self.n_off_max_u})")
        rp = assemble_restriction(self.bases, PRESSURE, n_off_p)
        ru = assemble_restriction(self.bases, DISPLACEMENT, n_off_u)
        return rp, ru

    def coarse_dimension(self, n_off_p: int, n_off_u: int) -> int:
        """Combined offline-space dimension for the given per-node counts."""
        return self.cg.n_cnodes * (n_off_p + 2 * n_off_u)

    def save(self, path) -> None:
        arrays = {
            "meta": np.frombuffer(json.dumps(self.meta, sort_keys=True).encode(),
                                  dtype=np.uint8),
            "pou_variant": np.frombuffer(self.pou.variant.encode(), dtype=np.uint8),
        }
        for label, mat in (("chi", self.pou.chi), ("xi", self.pou.xi)):
            arrays[f"{label}_data"] = mat.data
            arrays[f"{label}_indices"] = mat.indices
            arrays[f"{label}_indptr"] = mat.indptr
            arrays[f"{label}_shape"] = np.array(mat.shape)
        for nb in self.bases:
            pre = f"node{nb.node:04d}"
            arrays[f"{pre}_eigp"] = nb.eigenvalues_p
            arrays[f"{pre}_eigu"] = nb.eigenvalues_u
            for label, mat in (("rowsp", nb.rows_p), ("rowsu", nb.rows_u)):
                arrays[f"{pre}_{label}_data"] = mat.data
                arrays[f"{pre}_{label}_indices"] = mat.indices
                arrays[f"{pre}_{label}_indptr"] = mat.indptr
                arrays[f"{pre}_{label}_shape"] = np.array(mat.shape)
        npzio.save_npz(path, arrays)

    @classmethod
    def load(cls, path, cg: CoarseGrid) -> "OfflineBasis":
        arrays = npzio.load_npz(path)
        meta = json.loads(bytes(arrays["meta"]).decode())
        if meta["fine_n"] != cg.fine.n or meta["coarse_n"] != cg.n_coarse:
            raise OfflineError(
                f"archive was built for grid {meta['fine_n']}/{meta['coarse_n']}, "
                f"got {cg.fine.n}/{cg.n_coarse}")

        def csr(prefix):
            return sp.csr_matrix(
                (arrays[f"{prefix}_data"], arrays[f"{prefix}_indices"],
                 arrays[f"{prefix}_indptr"]),
                shape=tuple(arrays[f"{prefix}_shape"]))

        pou = PartitionOfUnity(chi=csr("chi"), xi=csr("xi"),
                               variant=bytes(arrays["pou_variant"]).decode())
        bases = []
        for i in range(cg.n_cnodes):
            pre = f"node{i:04d}"
            bases.append(NodeBasis(
                node=i,
                eigenvalues_p=arrays[f"{pre}_eigp"],
                eigenvalues_u=arrays[f"{pre}_eigu"],
                rows_p=csr(f"{pre}_rowsp"),
                rows_u=csr(f"{pre}_rowsu"),
            ))
        return cls(cg=cg, pou=pou, bases=bases,
                   n_off_max_p=meta["n_off_max_p"], n_off_max_u=meta["n_off_max_u"],
                   meta=meta)


def random_snapshot_count(nb: Neighborhood, nb_over: Neighborhood, kind: str,
                          ratio: float, n_off: int,
                          exclude_dofs: np.ndarray | None = None) -> int:
    """Random snapshot budget for one patch.

    The ratio applies to the standard (delta) snapshot count of the patch
    the solves actually run on, i.e. the driving boundary DOFs of the
    oversampled patch; the result is floored at n_off plus a small buffer
    and capped by that same DOF count.
    """
    bnd_over, _, _ = _local_split(nb_over, kind)
    available = int(_driving_mask(nb_over, kind, bnd_over, exclude_dofs).sum())
    count = min(max(int(np.ceil(ratio * available)), n_off + RANDOM_COUNT_BUFFER),
                available)
    if count < n_off:
        raise OfflineError(
            f"coarse node {nb.center}: only {count} random snapshots available "
            f"for {n_off} requested modes")
    return count


def build_offline(mesh: FineMesh, cg: CoarseGrid, material: MaterialField,
                  n_off_p: int, n_off_u: int, snapshots: str = "delta",
                  snapshot_ratio: float = 0.36, layers: int = 0, seed: int = 0,
                  pou_variant: str = "multiscale", workers: int = 1,
                  constrained_dofs: dict | None = None) -> OfflineBasis:
    """Run the complete offline phase and return the sliceable basis archive.

    ``constrained_dofs`` maps field kind to the globally constrained fine
    DOFs; snapshot data stays zero there so boundary-node modes conform to
    the outer Dirichlet conditions. Random streams are derived per
    neighborhood from (seed, node, field), so the worker count cannot
    change any result.
    """
    if snapshots not in ("delta", "random"):
        raise OfflineError(f"unknown snapshot mode: {snapshots!r}")
    if n_off_p < 1 or n_off_u < 1:
        raise OfflineError(
            f"offline mode counts must be positive, got ({n_off_p}, {n_off_u})")
    constrained_dofs = constrained_dofs or {}
    pou = build_partition_of_unity(cg, material, pou_variant)
    neighborhoods = all_neighborhoods(cg)

    def node_exclusions(nb: Neighborhood, kind: str) -> np.ndarray | None:
        """Constrained DOFs the node's own glue function actually touches.

        Everywhere else the partition of unity vanishes identically on the
        constrained set, so unclamped snapshot data cannot break conformity
        (and clamping there would needlessly remove the smooth modes).
        """
        cons = constrained_dofs.get(kind)
        if cons is None or cons.size == 0:
            return None
        row = pou.chi if kind == PRESSURE else pou.xi
        support = row[nb.center].indices
        excl = np.intersect1d(support, cons)
        return excl if excl.size else None

    def build_one(nb: Neighborhood) -> NodeBasis:
        reduced = {}
        nb_over = oversample(nb, layers) if layers > 0 else nb
        for kind, n_off in ((PRESSURE, n_off_p), (DISPLACEMENT, n_off_u)):
            excl = node_exclusions(nb, kind)
            if snapshots == "delta":
                if layers > 0:
                    snap = oversampled_harmonic_snapshots(nb, nb_over, kind, mesh,
                                                          material, exclude_dofs=excl)
                else:
                    snap = harmonic_snapshots(nb, kind, mesh, material, exclude_dofs=excl)
            else:
                count = random_snapshot_count(nb, nb_over, kind, snapshot_ratio, n_off,
                                              exclude_dofs=excl)
                snap = randomized_snapshots(nb, nb_over, kind, mesh, material, count,
                                            seed_key=[seed, nb.center, _FIELD_CODE[kind]],
                                            exclude_dofs=excl)
            stiff = _local_stiffness(nb, kind, mesh, material)
            mass = _local_mass(nb, kind, mesh, material)
            reduced[kind] = spectral_reduce(snap, stiff, mass, n_off)
        return build_node_basis(reduced[PRESSURE], reduced[DISPLACEMENT], pou,
                                mesh.n_nodes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            bases = list(pool.map(build_one, neighborhoods))
    else:
        bases = [build_one(nb) for nb in neighborhoods]

    meta = {
        "fine_n": mesh.n,
        "coarse_n": cg.n_coarse,
        "snapshots": snapshots,
        "snapshot_ratio": snapshot_ratio,
        "oversample_layers": layers,
        "seed": seed,
        "pou_variant": pou_variant,
        "n_off_max_p": n_off_p,
        "n_off_max_u": n_off_u,
        "bc_aware": bool(constrained_dofs),
    }
    return OfflineBasis(cg=cg, pou=pou, bases=bases, n_off_max_p=n_off_p,
                        n_off_max_u=n_off_u, meta=meta)


def offline_cache_key(meta: dict, material_signature: str) -> str:
    """Stable hash of everything that determines the offline output."""
    payload = json.dumps({**meta, "material": material_signature}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def material_signature(material: MaterialField) -> str:
    h = hashlib.sha256()
    for arr in (material.labels, material.permeability, material.biot_modulus,
                material.elastic_modulus):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.array([material.viscosity, material.alpha, material.poisson]).tobytes())
    return h.hexdigest()[:24]
