"""Shared implicit time-stepping core for the Biot system.

Both the fine solver (on the free-DOF subspace after Dirichlet
elimination) and the coarse solver (on the multiscale space) advance the
same reduced algebra: the blocks passed in are already projected onto the
working space and the Dirichlet data enters through the constant vectors.
Keeping a single implementation guarantees the identity-projection path
reproduces the fine trajectory exactly.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class SolverError(RuntimeError):
    """Linear solver breakdown (singular or structurally deficient system)."""


@dataclass
class ReducedBlocks:
    """Projected operator blocks and constant right-hand-side parts.

    ``const_u`` and ``const_p`` carry the (time-constant) Dirichlet lift and
    load contributions: const_u = -R_u (A w_u + G w_p), const_p =
    R_p (F - B w_p).
    """

    elasticity: sp.spmatrix       # u,u
    grad_coupling: sp.spmatrix    # u,p
    div_coupling: sp.spmatrix     # p,u
    darcy: sp.spmatrix            # p,p stiffness
    storage: sp.spmatrix          # p,p (1/M) mass
    storage_fs: sp.spmatrix       # p,p (1/M + alpha^2/K_dr) mass
    fs_stab: sp.spmatrix          # p,p (alpha^2/K_dr) mass
    const_u: np.ndarray
    const_p: np.ndarray

    @property
    def n_u(self) -> int:
        return self.elasticity.shape[0]

    @property
    def n_p(self) -> int:
        return self.darcy.shape[0]


def _factor(mat: sp.spmatrix, label: str):
    try:
        lu = splu(sp.csc_matrix(mat))
    except RuntimeError as exc:
        raise SolverError(f"factorization of the {label} system failed: {exc}") from exc
    return lu


def _canonical(mat: sp.spmatrix) -> sp.csr_matrix:
    """Canonical CSR form: summed duplicates, no stored zeros, sorted indices.

    Equal-valued operators then factor and multiply bit-identically no
    matter whether they were built by slicing or by triple products, which
    keeps the identity-projection oracle exact.
    """
    out = sp.csr_matrix(mat)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def _check(x: np.ndarray, label: str):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"{label} solve produced non-finite values (singular system?)")
    return x


@dataclass
class BiotStepper:
    """One-step advancement under the coupled or fixed-stress scheme.

    Matrices are constant in time, so each factorization happens once.
    ``fs_inner_iterations > 1`` enables a non-standard iterated correction
    of the fixed-stress split (the plain split performs a single pressure
    and a single displacement solve per step).
    """

    blocks: ReducedBlocks
    tau: float
    scheme: str
    fs_inner_iterations: int = 1
    _lu_coupled: object = field(default=None, repr=False)
    _lu_pressure: object = field(default=None, repr=False)
    _lu_elastic: object = field(default=None, repr=False)

    def __post_init__(self):
        b = self.blocks
        b = self.blocks = ReducedBlocks(
            elasticity=_canonical(b.elasticity),
            grad_coupling=_canonical(b.grad_coupling),
            div_coupling=_canonical(b.div_coupling),
            darcy=_canonical(b.darcy),
            storage=_canonical(b.storage),
            storage_fs=_canonical(b.storage_fs),
            fs_stab=_canonical(b.fs_stab),
            const_u=b.const_u,
            const_p=b.const_p,
        )
        self._lu_elastic = _factor(b.elasticity, "elasticity")
        if self.scheme == "coupled":
            block = sp.bmat(
                [[b.elasticity, b.grad_coupling],
                 [b.div_coupling * (1.0 / self.tau), b.storage * (1.0 / self.tau) + b.darcy]],
                format="csc",
            )
            self._lu_coupled = _factor(block, "coupled")
        elif self.scheme == "fixed_stress":
            self._lu_pressure = _factor(
                b.storage_fs * (1.0 / self.tau) + b.darcy, "fixed-stress pressure")
        else:
            raise ValueError(f"unknown scheme: {self.scheme!r}")

    def initial_displacement(self, p0: np.ndarray) -> np.ndarray:
        """Quasi-static equilibrium displacement for the initial pressure."""
        b = self.blocks
        return _check(self._lu_elastic.solve(b.const_u - b.grad_coupling @ p0), "elasticity")

    def step(self, u, p, u_prev, p_prev):
        if self.scheme == "coupled":
            return self._step_coupled(u, p)
        return self._step_fixed_stress(u, p, u_prev, p_prev)

    def _step_coupled(self, u, p):
        b = self.blocks
        rhs_p = b.const_p + (b.div_coupling @ u) / self.tau + (b.storage @ p) / self.tau
        rhs = np.concatenate([b.const_u, rhs_p])
        x = _check(self._lu_coupled.solve(rhs), "coupled")
        return x[:b.n_u], x[b.n_u:]

    def _step_fixed_stress(self, u, p, u_prev, p_prev):
        b = self.blocks
        rhs_p = (b.const_p + (b.storage_fs @ p) / self.tau
                 + (b.fs_stab @ (p - p_prev)) / self.tau
                 - (b.div_coupling @ (u - u_prev)) / self.tau)
        p_new = _check(self._lu_pressure.solve(rhs_p), "fixed-stress pressure")
        u_new = _check(self._lu_elastic.solve(b.const_u - b.grad_coupling @ p_new),
                       "elasticity")
        for _ in range(self.fs_inner_iterations - 1):
            rhs_p = (b.const_p + (b.storage_fs @ p) / self.tau
                     + (b.fs_stab @ (p_new - p)) / self.tau
                     - (b.div_coupling @ (u_new - u)) / self.tau)
            p_new = _check(self._lu_pressure.solve(rhs_p), "fixed-stress pressure")
            u_new = _check(self._lu_elastic.solve(b.const_u - b.grad_coupling @ p_new),
                           "elasticity")
        return u_new, p_new
