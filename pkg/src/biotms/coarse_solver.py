"""Coarse-scale online solves on the multiscale space.

The fine operator blocks are projected through the restriction operators
and advanced in time with the same stepping core as the fine solver.

Dirichlet data is handled by lifting: the partition of unity interpolates
the boundary values into a fine-grid lift field, and the coarse problem
solves for the homogeneous remainder in the conforming subspace of basis
combinations whose trace vanishes on the constrained DOFs. Basis rows
supported away from the constrained boundary enter unchanged; rows of
boundary-touching coarse nodes contribute only through their trace-free
combinations (none remain in the single-mode homogeneous limit, which
then reduces exactly to a standard coarse FEM). An identity-basis variant
reproduces the fine solver and serves as a projection oracle.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fine_solver import ProblemData, SchemeConfig, assemble_biot_operators, dirichlet_sets
from .material import MaterialField
from .mesh import FineMesh
from .offline import DISPLACEMENT, PRESSURE, OfflineBasis, RestrictionOperator
from .stepping import BiotStepper, ReducedBlocks, SolverError

__all__ = ["CoarseBasis", "CoarseSystem", "CoarseTrajectory", "project",
           "coarse_step", "run_coarse", "prolong", "solve_stationary_pressure",
           "initial_pressure_field", "SolverError"]


def _trace_free_columns(matrix: sp.csr_matrix, constrained: np.ndarray) -> sp.csr_matrix:
    """Columns spanning the row combinations with zero trace on ``constrained``.

    Rows whose stored entries avoid the constrained DOFs pass through as
    unit columns; the remaining rows contribute an orthonormal null-space
    basis of their trace block (empty when the traces are independent).
    """
    n_rows = matrix.shape[0]
    trace = matrix[:, constrained].tocsr()
    trace.eliminate_zeros()
    touched = np.diff(trace.indptr) > 0
    free_rows = np.flatnonzero(~touched)
    bnd_rows = np.flatnonzero(touched)

    cols = [sp.csr_matrix(
        (np.ones(free_rows.shape[0]), (free_rows, np.arange(free_rows.shape[0]))),
        shape=(n_rows, free_rows.shape[0]))]
    if bnd_rows.size:
        block = trace[bnd_rows].toarray().T  # (n constrained, n boundary rows)
        null = scipy.linalg.null_space(block)
        if null.shape[1]:
            lift_cols = sp.csr_matrix(
                (null.ravel(),
                 (np.repeat(bnd_rows, null.shape[1]),
                  np.tile(np.arange(null.shape[1]), bnd_rows.shape[0]))),
                shape=(n_rows, null.shape[1]))
            cols.append(lift_cols)
    return sp.hstack(cols, format="csr")


@dataclass
class CoarseBasis:
    """Restriction operators plus the Dirichlet bookkeeping of the online solve.

    ``conform_*`` map conforming coefficients to full basis coefficients;
    ``effective_*`` are the conforming basis rows actually used in the
    solve. ``lift_*`` are fine-grid fields carrying the boundary data.
    """

    restriction_p: RestrictionOperator
    restriction_u: RestrictionOperator
    conform_p: sp.csr_matrix
    conform_u: sp.csr_matrix
    lift_p: np.ndarray
    lift_u: np.ndarray
    label: str = "gmsfem"
    _eff_p: sp.csr_matrix = field(default=None, repr=False)
    _eff_u: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        self._eff_p = (self.conform_p.T @ self.restriction_p.matrix).tocsr()
        self._eff_u = (self.conform_u.T @ self.restriction_u.matrix).tocsr()

    @property
    def effective_p(self) -> sp.csr_matrix:
        return self._eff_p

    @property
    def effective_u(self) -> sp.csr_matrix:
        return self._eff_u

    @property
    def dim_p(self) -> int:
        """Full offline pressure-space dimension (bookkeeping)."""
        return self.restriction_p.n_rows

    @property
    def dim_u(self) -> int:
        return self.restriction_u.n_rows

    @property
    def dim(self) -> int:
        return self.dim_p + self.dim_u

    @classmethod
    def from_offline(cls, offline: OfflineBasis, problem: ProblemData,
                     n_off_p: int, n_off_u: int) -> "CoarseBasis":
        cg = offline.cg
        mesh = cg.fine
        rp, ru = offline.restriction(n_off_p, n_off_u)
        p_dofs, _, u_dofs, _ = dirichlet_sets(mesh, problem)

        cnode_fine = cg.coarse_nodes
        g = np.zeros(cg.n_cnodes)
        g[mesh.on_top[cnode_fine]] = problem.pressure_top
        g[mesh.on_bottom[cnode_fine]] = problem.pressure_bottom
        lift_p = offline.pou.chi.T @ g
        return cls(
            restriction_p=rp, restriction_u=ru,
            conform_p=_trace_free_columns(rp.matrix, p_dofs),
            conform_u=_trace_free_columns(ru.matrix, u_dofs),
            lift_p=lift_p, lift_u=np.zeros(2 * mesh.n_nodes), label="gmsfem")

    @classmethod
    def identity(cls, mesh: FineMesh, problem: ProblemData) -> "CoarseBasis":
        """Coarse space equal to the fine space (exactness oracle)."""
        n_p = mesh.n_nodes
        n_u = 2 * n_p
        p_dofs, p_values, u_dofs, _ = dirichlet_sets(mesh, problem)
        rp = RestrictionOperator(kind=PRESSURE, matrix=sp.identity(n_p, format="csr"),
                                 node=np.arange(n_p), mode=np.zeros(n_p, dtype=np.int64),
                                 comp=np.zeros(n_p, dtype=np.int64))
        ru = RestrictionOperator(kind=DISPLACEMENT, matrix=sp.identity(n_u, format="csr"),
                                 node=np.arange(n_u) // 2,
                                 mode=np.zeros(n_u, dtype=np.int64),
                                 comp=np.arange(n_u) % 2)
        lift_p = np.zeros(n_p)
        lift_p[p_dofs] = p_values
        return cls(restriction_p=rp, restriction_u=ru,
                   conform_p=_trace_free_columns(rp.matrix, p_dofs),
                   conform_u=_trace_free_columns(ru.matrix, u_dofs),
                   lift_p=lift_p, lift_u=np.zeros(n_u), label="identity")


@dataclass
class CoarseSystem:
    """Projected operator blocks with the scheme's factorizations."""

    basis: CoarseBasis
    blocks: ReducedBlocks
    stepper: BiotStepper
    scheme: SchemeConfig
    _storage_fine: sp.csr_matrix = field(default=None, repr=False)
    _lu_init: object = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.basis.dim

    def initial_state(self, initial_pressure_field: np.ndarray):
        """Coarse coefficients of the initial state.

        The pressure remainder (initial field minus lift) enters through
        its storage-weighted projection; the displacement follows from the
        quasi-static equilibrium on the coarse space.
        """
        if self._lu_init is None:
            self._lu_init = splu(sp.csc_matrix(self.blocks.storage))
        rp = self.basis.effective_p
        rhs = rp @ (self._storage_fine @ (initial_pressure_field - self.basis.lift_p))
        p0 = self._lu_init.solve(rhs)
        # one step of iterative refinement: when the remainder is exactly
        # representable (identity projection) the coefficients must match it
        # to machine precision, not to kappa * eps
        p0 += self._lu_init.solve(rhs - self.blocks.storage @ p0)
        u0 = self.stepper.initial_displacement(p0)
        return u0, p0


@dataclass
class CoarseTrajectory:
    """Conforming-coefficient trajectory; prolongation recovers fine fields."""

    times: np.ndarray
    pressure_c: np.ndarray      # (n_steps+1, conforming pressure dims)
    displacement_c: np.ndarray
    basis: CoarseBasis
    scheme: SchemeConfig
    dim: int                    # full offline dimension (bookkeeping)

    def prolonged(self):
        """Fine-grid (displacement, pressure) arrays for every stored time."""
        u = self.displacement_c @ self.basis.effective_u.toarray() + self.basis.lift_u
        p = self.pressure_c @ self.basis.effective_p.toarray() + self.basis.lift_p
        return u, p


def project(ops: dict, basis: CoarseBasis, scheme: SchemeConfig,
            load: np.ndarray | None = None) -> CoarseSystem:
    """Project the fine blocks of the chosen scheme through the conforming rows."""
    rp, ru = basis.effective_p, basis.effective_u
    n_p_fine = ops["darcy"].shape[0]
    if rp.shape[1] != n_p_fine or ru.shape[1] != ops["elasticity"].shape[0]:
        raise ValueError("restriction operators do not match the fine operator dims")
    f_load = np.zeros(n_p_fine) if load is None else load
    blocks = ReducedBlocks(
        elasticity=(ru @ ops["elasticity"] @ ru.T).tocsr(),
        grad_coupling=(ru @ ops["grad_coupling"] @ rp.T).tocsr(),
        div_coupling=(rp @ ops["div_coupling"] @ ru.T).tocsr(),
        darcy=(rp @ ops["darcy"] @ rp.T).tocsr(),
        storage=(rp @ ops["storage"] @ rp.T).tocsr(),
        storage_fs=(rp @ ops["storage_fs"] @ rp.T).tocsr(),
        fs_stab=(rp @ ops["fs_stab"] @ rp.T).tocsr(),
        const_u=-(ru @ (ops["elasticity"] @ basis.lift_u + ops["grad_coupling"] @ basis.lift_p)),
        const_p=rp @ (f_load - ops["darcy"] @ basis.lift_p),
    )
    stepper = BiotStepper(blocks, tau=scheme.tau, scheme=scheme.scheme,
                          fs_inner_iterations=scheme.fs_inner_iterations)
    return CoarseSystem(basis=basis, blocks=stepper.blocks, stepper=stepper,
                        scheme=scheme, _storage_fine=ops["storage"])


def coarse_step(system: CoarseSystem, u_c, p_c, u_prev=None, p_prev=None):
    """Advance the coarse coefficients one step under the configured scheme."""
    if u_prev is None:
        u_prev, p_prev = u_c, p_c
    return system.stepper.step(u_c, p_c, u_prev, p_prev)


def run_coarse(system: CoarseSystem, initial_pressure_field: np.ndarray) -> CoarseTrajectory:
    cfg = system.scheme
    u, p = system.initial_state(initial_pressure_field)
    pressure = np.empty((cfg.n_steps + 1, p.shape[0]))
    displacement = np.empty((cfg.n_steps + 1, u.shape[0]))
    pressure[0], displacement[0] = p, u
    u_prev, p_prev = u, p
    for n in range(cfg.n_steps):
        u_new, p_new = system.stepper.step(u, p, u_prev, p_prev)
        u_prev, p_prev = u, p
        u, p = u_new, p_new
        pressure[n + 1], displacement[n + 1] = p, u
    times = cfg.tau * np.arange(cfg.n_steps + 1)
    return CoarseTrajectory(times=times, pressure_c=pressure,
                            displacement_c=displacement, basis=system.basis,
                            scheme=cfg, dim=system.dim)


def prolong(basis: CoarseBasis, u_c: np.ndarray, p_c: np.ndarray):
    """Fine nodal fields from conforming coarse coefficients."""
    u = basis.effective_u.T @ u_c + basis.lift_u
    p = basis.effective_p.T @ p_c + basis.lift_p
    return u, p


def solve_stationary_pressure(basis: CoarseBasis, ops: dict,
                              load: np.ndarray | None = None) -> np.ndarray:
    """Stationary Darcy solve on the coarse pressure space (fine field out)."""
    rp = basis.effective_p
    f_load = np.zeros(ops["darcy"].shape[0]) if load is None else load
    mat = sp.csc_matrix(rp @ ops["darcy"] @ rp.T)
    rhs = rp @ (f_load - ops["darcy"] @ basis.lift_p)
    p_c = splu(mat).solve(rhs)
    return basis.effective_p.T @ p_c + basis.lift_p


def make_system(mesh: FineMesh, material: MaterialField, basis: CoarseBasis,
                scheme: SchemeConfig) -> CoarseSystem:
    """Convenience: assemble fine blocks and project them in one call."""
    return project(assemble_biot_operators(mesh, material), basis, scheme)


def initial_pressure_field(mesh: FineMesh, problem: ProblemData) -> np.ndarray:
    """Fine nodal initial pressure with the Dirichlet override applied."""
    p0 = np.full(mesh.n_nodes, problem.initial_pressure)
    dofs, values, _, _ = dirichlet_sets(mesh, problem)
    p0[dofs] = values
    return p0


def constrained_dof_map(mesh: FineMesh, problem: ProblemData) -> dict:
    """Globally constrained fine DOFs per field, for BC-conforming snapshots."""
    p_dofs, _, u_dofs, _ = dirichlet_sets(mesh, problem)
    return {PRESSURE: p_dofs, DISPLACEMENT: u_dofs}
