"""Fine-scale P1 finite element assembly on triangle meshes.

All element integrals are closed-form (affine P1 elements, cellwise
constant coefficients), so no quadrature error enters the assembled
operators. Scalar (pressure) degrees of freedom coincide with node
indices; vector (displacement) DOFs interleave as (ux0, uy0, ux1, ...).
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .material import MaterialField
from .mesh import FineMesh, Neighborhood


class AssemblyError(ValueError):
    """Inconsistent mesh/material/DOF inputs."""


class BilinearFormKind(str, Enum):
    DARCY_STIFFNESS = "darcy_stiffness"            # (k/nu) grad p . grad q
    PRESSURE_MASS = "pressure_mass"                # (k/nu) p q
    STORAGE = "storage"                            # (1/M) p q
    STORAGE_FIXED_STRESS = "storage_fixed_stress"  # (1/M + alpha^2/K_dr) p q
    ELASTICITY = "elasticity"                      # 2 mu eps(u):eps(v) + lam div u div v
    VECTOR_MASS = "vector_mass"                    # (lam + 2 mu) u . v
    GRAD_COUPLING = "grad_coupling"                # alpha grad p . v   (rows u, cols p)
    DIV_COUPLING = "div_coupling"                  # alpha div u q      (rows p, cols u)


_SCALAR_KINDS = {
    BilinearFormKind.DARCY_STIFFNESS,
    BilinearFormKind.PRESSURE_MASS,
    BilinearFormKind.STORAGE,
    BilinearFormKind.STORAGE_FIXED_STRESS,
}
_SYMMETRIC_KINDS = _SCALAR_KINDS | {BilinearFormKind.ELASTICITY, BilinearFormKind.VECTOR_MASS}

_MASS3 = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
# Vector mass pattern: same-component blocks of the scalar pattern.
_MASS6 = np.zeros((6, 6))
for _i in range(3):
    for _j in range(3):
        _MASS6[2 * _i, 2 * _j] = _MASS3[_i, _j]
        _MASS6[2 * _i + 1, 2 * _j + 1] = _MASS3[_i, _j]


@dataclass
class SparseOperator:
    """An assembled bilinear form with provenance for local reassembly."""

    kind: BilinearFormKind
    mat: sp.csr_matrix
    symmetric: bool
    mesh: FineMesh
    material: MaterialField
    nodes: np.ndarray | None = None  # global fine nodes behind local numbering

    @property
    def shape(self):
        return self.mat.shape

    def dump_coo(self, path) -> None:
        """Write 'row col value' lines for cross-checks with external tools."""
        coo = self.mat.tocoo()
        with open(path, "w") as f:
            for r, c, v in zip(coo.row, coo.col, coo.data):
                f.write(f"{r} {c} {v:.17g}\n")


def _geometry(mesh: FineMesh, cells: np.ndarray):
    """Areas and constant P1 basis gradients for the given cells."""
    tri = mesh.cells[cells]
    pts = mesh.nodes[tri]
    x, y = pts[..., 0], pts[..., 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / area2[:, None]
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / area2[:, None]
    grads = np.stack([gx, gy], axis=2)  # (C, 3, 2)
    return tri, 0.5 * area2, grads


def _scalar_weight(kind: BilinearFormKind, mat: MaterialField, cells: np.ndarray) -> np.ndarray:
    if kind in (BilinearFormKind.DARCY_STIFFNESS, BilinearFormKind.PRESSURE_MASS):
        return mat.mobility()[cells]
    if kind == BilinearFormKind.STORAGE:
        return 1.0 / mat.biot_modulus[cells]
    if kind == BilinearFormKind.STORAGE_FIXED_STRESS:
        return 1.0 / mat.biot_modulus[cells] + mat.alpha ** 2 / mat.drained[cells]
    raise AssemblyError(f"not a scalar-weighted kind: {kind}")


def _element_matrices(kind: BilinearFormKind, mesh: FineMesh, mat: MaterialField,
                      cells: np.ndarray) -> np.ndarray:
    tri, area, grads = _geometry(mesh, cells)
    if kind == BilinearFormKind.DARCY_STIFFNESS:
        w = _scalar_weight(kind, mat, cells) * area
        return np.einsum("c,cia,cja->cij", w, grads, grads)
    if kind in (BilinearFormKind.PRESSURE_MASS, BilinearFormKind.STORAGE,
                BilinearFormKind.STORAGE_FIXED_STRESS):
        w = _scalar_weight(kind, mat, cells) * area
        return w[:, None, None] * _MASS3
    if kind == BilinearFormKind.ELASTICITY:
        mu = mat.mu[cells]
        lam = mat.lam[cells]
        nc = cells.shape[0]
        bmat = np.zeros((nc, 3, 6))
        bmat[:, 0, 0::2] = grads[..., 0]
        bmat[:, 1, 1::2] = grads[..., 1]
        bmat[:, 2, 0::2] = grads[..., 1]
        bmat[:, 2, 1::2] = grads[..., 0]
        dmat = np.zeros((nc, 3, 3))
        dmat[:, 0, 0] = dmat[:, 1, 1] = lam + 2.0 * mu
        dmat[:, 0, 1] = dmat[:, 1, 0] = lam
        dmat[:, 2, 2] = mu
        return np.einsum("c,cki,ckl,clj->cij", area, bmat, dmat, bmat)
    if kind == BilinearFormKind.VECTOR_MASS:
        w = (mat.lam[cells] + 2.0 * mat.mu[cells]) * area
        return w[:, None, None] * _MASS6
    if kind == BilinearFormKind.GRAD_COUPLING:
        # (2i+a, j) entry: alpha * area/3 * (grad lambda_j)_a, independent of i.
        coef = mat.alpha * area / 3.0
        block = coef[:, None, None] * grads.transpose(0, 2, 1)  # (C, 2, 3)
        return np.tile(block, (1, 3, 1))
    if kind == BilinearFormKind.DIV_COUPLING:
        # (j, 2i+a) entry: alpha * area/3 * (grad lambda_i)_a, independent of j.
        coef = mat.alpha * area / 3.0
        flat = grads.reshape(cells.shape[0], 6)  # (i-major, component-minor)
        return np.tile(coef[:, None, None] * flat[:, None, :], (1, 3, 1))
    raise AssemblyError(f"unknown bilinear form kind: {kind}")


def _dof_maps(kind: BilinearFormKind, tri_local: np.ndarray):
    """(row_dofs, col_dofs) per element for the given form kind."""
    scalar = tri_local
    vector = np.empty((tri_local.shape[0], 6), dtype=np.int64)
    vector[:, 0::2] = 2 * tri_local
    vector[:, 1::2] = 2 * tri_local + 1
    if kind in _SCALAR_KINDS:
        return scalar, scalar
    if kind in (BilinearFormKind.ELASTICITY, BilinearFormKind.VECTOR_MASS):
        return vector, vector
    if kind == BilinearFormKind.GRAD_COUPLING:
        return vector, scalar
    return scalar, vector  # DIV_COUPLING


def assemble(kind: BilinearFormKind, mesh: FineMesh, material: MaterialField,
             cells: np.ndarray | None = None,
             nodes: np.ndarray | None = None) -> SparseOperator:
    """Assemble one fine-scale operator, optionally over a cell subset.

    When ``cells``/``nodes`` are given the integration runs only over those
    cells and the matrix lives on the local numbering induced by ``nodes``
    (which must be sorted and cover all vertices of ``cells``).
    """
    kind = BilinearFormKind(kind)
    if material.n_cells != mesh.n_cells:
        raise AssemblyError(
            f"dimension mismatch: material has {material.n_cells} cells, "
            f"mesh has {mesh.n_cells}"
        )
    if cells is None:
        cells = np.arange(mesh.n_cells)
    cells = np.asarray(cells, dtype=np.int64)
    tri = mesh.cells[cells]
    if nodes is None:
        tri_local = tri
        n_nodes = mesh.n_nodes
    else:
        nodes = np.asarray(nodes, dtype=np.int64)
        lookup = np.full(mesh.n_nodes, -1, dtype=np.int64)
        lookup[nodes] = np.arange(nodes.shape[0])
        tri_local = lookup[tri]
        if np.any(tri_local < 0):
            raise AssemblyError("node set does not cover all vertices of the cell subset")
        n_nodes = nodes.shape[0]

    ke = _element_matrices(kind, mesh, material, cells)
    row_dofs, col_dofs = _dof_maps(kind, tri_local)
    n_rows = n_nodes * (row_dofs.shape[1] // 3)
    n_cols = n_nodes * (col_dofs.shape[1] // 3)
    rows = np.broadcast_to(row_dofs[:, :, None], ke.shape).ravel()
    cols = np.broadcast_to(col_dofs[:, None, :], ke.shape).ravel()
    mat = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    mat.sum_duplicates()
    return SparseOperator(kind=kind, mat=mat, symmetric=kind in _SYMMETRIC_KINDS,
                          mesh=mesh, material=material, nodes=nodes)


def restrict_local(op: SparseOperator, nb: Neighborhood) -> SparseOperator:
    """Reassemble ``op`` over the neighborhood's cells in its local numbering.

    Integration covers only cells inside the neighborhood, so boundary rows
    see no contributions from outside; index maps live in ``.nodes``.
    """
    if nb.fine_cells.size == 0:
        raise AssemblyError(f"empty neighborhood around coarse node {nb.center}")
    return assemble(op.kind, op.mesh, op.material, cells=nb.fine_cells, nodes=nb.fine_nodes)


def eliminate_dirichlet(op, rhs: np.ndarray, dofs: np.ndarray, values: np.ndarray):
    """Symmetric Dirichlet elimination with lifting.

    Constrained rows and columns are zeroed, the diagonal is set to one and
    the right-hand side absorbs the lifted values. Returns (matrix, rhs).
    """
    mat = op.mat if isinstance(op, SparseOperator) else op
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    n = mat.shape[0]
    rhs_out = np.asarray(rhs, dtype=float).copy()
    if dofs.size:
        full_values = np.zeros(n)
        full_values[dofs] = values
        rhs_out -= mat @ full_values
        rhs_out[dofs] = values
    keep = np.ones(n)
    keep[dofs] = 0.0
    mask = sp.diags(keep)
    out = (mask @ mat @ mask + sp.diags(1.0 - keep)).tocsr()
    out.sum_duplicates()
    return out, rhs_out


def scalar_mass(mesh: FineMesh, weight_per_cell: np.ndarray,
                cells: np.ndarray | None = None) -> sp.csr_matrix:
    """Plain weighted scalar mass matrix (used for source-term load vectors)."""
    if cells is None:
        cells = np.arange(mesh.n_cells)
    cells = np.asarray(cells, dtype=np.int64)
    tri, area, _ = _geometry(mesh, cells)
    w = np.broadcast_to(np.asarray(weight_per_cell, dtype=float), mesh.n_cells)[cells]
    ke = (w * area)[:, None, None] * _MASS3
    rows = np.broadcast_to(tri[:, :, None], ke.shape).ravel()
    cols = np.broadcast_to(tri[:, None, :], ke.shape).ravel()
    return sp.coo_matrix((ke.ravel(), (rows, cols)),
                         shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
