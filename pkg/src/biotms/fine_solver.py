"""Fine-scale reference time integrator for the Biot system.

Supports the monolithic fully coupled scheme and the (non-iterated)
fixed-stress splitting. The driving setup matches the reference
experiments: pressure Dirichlet data on the top and bottom boundaries,
no-flux on the sides, roller conditions u_x = 0 on the left and
u_y = 0 on the bottom, zero source.
"""

from dataclasses import dataclass

import numpy as np

from . import assembly
from .assembly import BilinearFormKind as Form
from .material import MaterialField
from .mesh import FineMesh
from .stepping import BiotStepper, ReducedBlocks, SolverError

__all__ = ["SchemeConfig", "ProblemData", "StateTrajectory", "FineSolver",
           "assemble_biot_operators", "SolverError"]


@dataclass(frozen=True)
class SchemeConfig:
    """Time discretization: scheme, step size tau and step count."""

    scheme: str = "coupled"
    tau: float = 5.0
    n_steps: int = 20
    fs_inner_iterations: int = 1  # >1 is a non-standard iterated variant

    def __post_init__(self):
        if self.scheme not in ("coupled", "fixed_stress"):
            raise ValueError(f"unknown scheme: {self.scheme!r}")
        if not self.tau > 0:
            raise ValueError(f"time step must be positive, got {self.tau}")
        if self.n_steps < 1:
            raise ValueError(f"need at least one time step, got {self.n_steps}")

    @property
    def total_time(self) -> float:
        return self.tau * self.n_steps


@dataclass(frozen=True)
class ProblemData:
    """Boundary data and source driving the flow and the mechanics."""

    pressure_top: float = 1.0
    pressure_bottom: float = 0.0
    initial_pressure: float = 0.0
    source: float = 0.0  # constant volumetric fluid source


@dataclass
class StateTrajectory:
    """Time-indexed pressure/displacement fields plus scheme metadata."""

    times: np.ndarray
    pressure: np.ndarray      # (n_steps+1, n_p)
    displacement: np.ndarray  # (n_steps+1, n_u)
    scheme: SchemeConfig

    @property
    def n_states(self) -> int:
        return self.times.shape[0]

    def final(self):
        return self.displacement[-1], self.pressure[-1]


def assemble_biot_operators(mesh: FineMesh, material: MaterialField) -> dict:
    """All fine-scale operator blocks the two schemes need, by name."""
    ops = {
        "elasticity": assembly.assemble(Form.ELASTICITY, mesh, material).mat,
        "grad_coupling": assembly.assemble(Form.GRAD_COUPLING, mesh, material).mat,
        "div_coupling": assembly.assemble(Form.DIV_COUPLING, mesh, material).mat,
        "darcy": assembly.assemble(Form.DARCY_STIFFNESS, mesh, material).mat,
        "storage": assembly.assemble(Form.STORAGE, mesh, material).mat,
        "storage_fs": assembly.assemble(Form.STORAGE_FIXED_STRESS, mesh, material).mat,
    }
    # The alpha^2/K_dr stabilization mass is the difference of the two
    # storage forms (identical sparsity, weights add cellwise).
    ops["fs_stab"] = (ops["storage_fs"] - ops["storage"]).tocsr()
    return ops


def dirichlet_sets(mesh: FineMesh, problem: ProblemData):
    """Constrained fine DOFs and values for both fields.

    Pressure: top/bottom rows carry the Dirichlet data (corners included,
    the lateral no-flux condition yields no constraint). Displacement:
    u_x = 0 on the left edge, u_y = 0 on the bottom edge, combined
    componentwise at corners.
    """
    top = np.flatnonzero(mesh.on_top)
    bottom = np.flatnonzero(mesh.on_bottom)
    p_dofs = np.concatenate([top, bottom])
    p_values = np.concatenate([
        np.full(top.shape, problem.pressure_top),
        np.full(bottom.shape, problem.pressure_bottom),
    ])
    order = np.argsort(p_dofs)
    p_dofs, p_values = p_dofs[order], p_values[order]

    u_dofs = np.unique(np.concatenate([
        2 * np.flatnonzero(mesh.on_left),
        2 * np.flatnonzero(mesh.on_bottom) + 1,
    ]))
    u_values = np.zeros(u_dofs.shape)
    return p_dofs, p_values, u_dofs, u_values


class FineSolver:
    """Reference solver on the full fine grid.

    Works internally on the free DOFs (Dirichlet rows and columns removed,
    boundary data lifted into constant right-hand-side parts) and
    reconstructs full nodal fields; matrices are factorized once per
    scheme.
    """

    def __init__(self, mesh: FineMesh, material: MaterialField,
                 problem: ProblemData | None = None,
                 scheme: SchemeConfig | None = None):
        self.mesh = mesh
        self.material = material
        self.problem = problem or ProblemData()
        self.scheme = scheme or SchemeConfig()
        self.ops = assemble_biot_operators(mesh, material)

        n_p = mesh.n_nodes
        n_u = 2 * n_p
        p_dofs, p_values, u_dofs, u_values = dirichlet_sets(mesh, self.problem)
        self.pressure_dirichlet = (p_dofs, p_values)
        self.displacement_dirichlet = (u_dofs, u_values)
        self.free_p = np.setdiff1d(np.arange(n_p), p_dofs, assume_unique=True)
        self.free_u = np.setdiff1d(np.arange(n_u), u_dofs, assume_unique=True)

        self.lift_p = np.zeros(n_p)
        self.lift_p[p_dofs] = p_values
        self.lift_u = np.zeros(n_u)
        self.lift_u[u_dofs] = u_values

        if self.problem.source != 0.0:
            mass_plain = assembly.scalar_mass(mesh, np.ones(mesh.n_cells))
            self.load = mass_plain @ np.full(n_p, self.problem.source)
        else:
            self.load = np.zeros(n_p)

        fu, fp = self.free_u, self.free_p
        ops = self.ops
        blocks = ReducedBlocks(
            elasticity=ops["elasticity"][fu][:, fu],
            grad_coupling=ops["grad_coupling"][fu][:, fp],
            div_coupling=ops["div_coupling"][fp][:, fu],
            darcy=ops["darcy"][fp][:, fp],
            storage=ops["storage"][fp][:, fp],
            storage_fs=ops["storage_fs"][fp][:, fp],
            fs_stab=ops["fs_stab"][fp][:, fp],
            const_u=-(ops["elasticity"] @ self.lift_u + ops["grad_coupling"] @ self.lift_p)[fu],
            const_p=(self.load - ops["darcy"] @ self.lift_p)[fp],
        )
        self.stepper = BiotStepper(blocks, tau=self.scheme.tau, scheme=self.scheme.scheme,
                                   fs_inner_iterations=self.scheme.fs_inner_iterations)

    @property
    def coupled_dimension(self) -> int:
        """Total fine DOF count of the coupled solve (pressure + displacement)."""
        return 3 * self.mesh.n_nodes

    # -- full <-> free vector conversion ------------------------------------

    def _to_full_p(self, p_free):
        p = self.lift_p.copy()
        p[self.free_p] = p_free
        return p

    def _to_full_u(self, u_free):
        u = self.lift_u.copy()
        u[self.free_u] = u_free
        return u

    def initialize(self):
        """Initial state: nodal p0 with Dirichlet override, equilibrium u0."""
        p0 = np.full(self.mesh.n_nodes, self.problem.initial_pressure)
        dofs, values = self.pressure_dirichlet
        p0[dofs] = values
        p_free = (p0 - self.lift_p)[self.free_p]
        u_free = self.stepper.initial_displacement(p_free)
        return self._to_full_u(u_free), p0

    def step_coupled(self, u, p):
        """One monolithic implicit step from the full-field state (u, p)."""
        uf, pf = self.stepper._step_coupled((u - self.lift_u)[self.free_u],
                                            (p - self.lift_p)[self.free_p])
        return self._to_full_u(uf), self._to_full_p(pf)

    def step_fixed_stress(self, u, p, u_prev, p_prev):
        """One pressure-then-displacement split step with lagged coupling."""
        uf, pf = self.stepper._step_fixed_stress(
            (u - self.lift_u)[self.free_u], (p - self.lift_p)[self.free_p],
            (u_prev - self.lift_u)[self.free_u], (p_prev - self.lift_p)[self.free_p])
        return self._to_full_u(uf), self._to_full_p(pf)

    def run(self) -> StateTrajectory:
        cfg = self.scheme
        u_full, p_full = self.initialize()
        n_p = self.mesh.n_nodes
        pressure = np.empty((cfg.n_steps + 1, n_p))
        displacement = np.empty((cfg.n_steps + 1, 2 * n_p))
        pressure[0], displacement[0] = p_full, u_full

        u = (u_full - self.lift_u)[self.free_u]
        p = (p_full - self.lift_p)[self.free_p]
        u_prev, p_prev = u, p  # fixed-stress lag at n=0 uses the initial state
        for n in range(cfg.n_steps):
            u_new, p_new = self.stepper.step(u, p, u_prev, p_prev)
            u_prev, p_prev = u, p
            u, p = u_new, p_new
            displacement[n + 1] = self._to_full_u(u)
            pressure[n + 1] = self._to_full_p(p)
        times = cfg.tau * np.arange(cfg.n_steps + 1)
        return StateTrajectory(times=times, pressure=pressure,
                               displacement=displacement, scheme=cfg)


def trajectory_diagnostics_csv(traj: StateTrajectory, path) -> None:
    """Per-step scalars: time, pressure min/max, max displacement magnitude."""
    ux = traj.displacement[:, 0::2]
    uy = traj.displacement[:, 1::2]
    mag = np.sqrt(ux ** 2 + uy ** 2).max(axis=1)
    with open(path, "w") as f:
        f.write("time,pressure_min,pressure_max,displacement_max\n")
        for t, p, m in zip(traj.times, traj.pressure, mag):
            f.write(f"{t:.17g},{p.min():.17g},{p.max():.17g},{m:.17g}\n")
