"""Weighted error norms between fine reference and multiscale solutions.

Pressure errors use the mobility-weighted L2 norm and H1 seminorm;
displacement errors use the (lam + 2 mu)-weighted L2 norm and the
elastic energy seminorm. All four are quadratic forms of assembled
operators, so values agree with per-element quadrature to roundoff.
"""

from dataclasses import dataclass

import numpy as np

from . import assembly
from .assembly import BilinearFormKind as Form
from .material import MaterialField
from .mesh import FineMesh


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class FieldErrors:
    l2: float
    h1: float
    l2_rel: float
    h1_rel: float


def _form_value(mat, e) -> float:
    return float(np.sqrt(max(e @ (mat @ e), 0.0)))


def _pair(mass, stiff, ref, other) -> FieldErrors:
    if ref.shape != other.shape or ref.shape[0] != mass.shape[0]:
        raise MetricsError(
            f"dimension mismatch: fields {ref.shape} vs {other.shape}, "
            f"operator {mass.shape}")
    e = ref - other
    l2 = _form_value(mass, e)
    h1 = _form_value(stiff, e)
    ref_l2 = _form_value(mass, ref)
    ref_h1 = _form_value(stiff, ref)
    return FieldErrors(
        l2=l2, h1=h1,
        l2_rel=l2 / ref_l2 if ref_l2 > 0 else l2,
        h1_rel=h1 / ref_h1 if ref_h1 > 0 else h1,
    )


class ErrorNorms:
    """Caches the four weighted operators for repeated comparisons."""

    def __init__(self, mesh: FineMesh, material: MaterialField):
        self.pressure_mass = assembly.assemble(Form.PRESSURE_MASS, mesh, material).mat
        self.pressure_stiff = assembly.assemble(Form.DARCY_STIFFNESS, mesh, material).mat
        self.displacement_mass = assembly.assemble(Form.VECTOR_MASS, mesh, material).mat
        self.displacement_stiff = assembly.assemble(Form.ELASTICITY, mesh, material).mat

    def pressure(self, p_ref, p_other) -> FieldErrors:
        return _pair(self.pressure_mass, self.pressure_stiff, p_ref, p_other)

    def displacement(self, u_ref, u_other) -> FieldErrors:
        return _pair(self.displacement_mass, self.displacement_stiff, u_ref, u_other)


def pressure_errors(p_ref, p_other, mesh: FineMesh, material: MaterialField) -> FieldErrors:
    """Weighted L2 and H1 pressure errors (absolute and relative)."""
    mass = assembly.assemble(Form.PRESSURE_MASS, mesh, material).mat
    stiff = assembly.assemble(Form.DARCY_STIFFNESS, mesh, material).mat
    return _pair(mass, stiff, p_ref, p_other)


def displacement_errors(u_ref, u_other, mesh: FineMesh, material: MaterialField) -> FieldErrors:
    """Weighted L2 and energy-seminorm displacement errors."""
    mass = assembly.assemble(Form.VECTOR_MASS, mesh, material).mat
    stiff = assembly.assemble(Form.ELASTICITY, mesh, material).mat
    return _pair(mass, stiff, u_ref, u_other)


@dataclass
class ErrorReport:
    """Per-time-step weighted errors, relative and absolute."""

    times: np.ndarray
    pressure_l2: np.ndarray
    pressure_h1: np.ndarray
    displacement_l2: np.ndarray
    displacement_h1: np.ndarray
    pressure_l2_abs: np.ndarray
    pressure_h1_abs: np.ndarray
    displacement_l2_abs: np.ndarray
    displacement_h1_abs: np.ndarray
    relative_normalized: bool = True

    def endpoint(self) -> dict:
        return {
            "l2_p": float(self.pressure_l2[-1]),
            "h1_p": float(self.pressure_h1[-1]),
            "l2_u": float(self.displacement_l2[-1]),
            "h1_u": float(self.displacement_h1[-1]),
        }

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("time,l2_p,h1_p,l2_u,h1_u,l2_p_abs,h1_p_abs,l2_u_abs,h1_u_abs\n")
            for row in zip(self.times, self.pressure_l2, self.pressure_h1,
                           self.displacement_l2, self.displacement_h1,
                           self.pressure_l2_abs, self.pressure_h1_abs,
                           self.displacement_l2_abs, self.displacement_h1_abs):
                f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def compare_trajectories(norms: ErrorNorms, times, pressure_ref, displacement_ref,
                         pressure_ms, displacement_ms) -> ErrorReport:
    """Step-by-step weighted errors of a multiscale trajectory vs the reference."""
    n = len(times)
    cols = {k: np.empty(n) for k in
            ("pl2", "ph1", "ul2", "uh1", "pl2a", "ph1a", "ul2a", "uh1a")}
    for i in range(n):
        ep = norms.pressure(pressure_ref[i], pressure_ms[i])
        eu = norms.displacement(displacement_ref[i], displacement_ms[i])
        cols["pl2"][i], cols["ph1"][i] = ep.l2_rel, ep.h1_rel
        cols["ul2"][i], cols["uh1"][i] = eu.l2_rel, eu.h1_rel
        cols["pl2a"][i], cols["ph1a"][i] = ep.l2, ep.h1
        cols["ul2a"][i], cols["uh1a"][i] = eu.l2, eu.h1
    return ErrorReport(
        times=np.asarray(times),
        pressure_l2=cols["pl2"], pressure_h1=cols["ph1"],
        displacement_l2=cols["ul2"], displacement_h1=cols["uh1"],
        pressure_l2_abs=cols["pl2a"], pressure_h1_abs=cols["ph1a"],
        displacement_l2_abs=cols["ul2a"], displacement_h1_abs=cols["uh1a"],
    )
