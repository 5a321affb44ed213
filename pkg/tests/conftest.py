"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest

from biotms.material import SubdomainGeometry, build_case, generate_geometry
from biotms.mesh import build_coarse_grid, build_fine_mesh

# Midpoint-of-edges rule: exact for polynomials of degree <= 2, which covers
# every element integrand of the P1 forms (products of constants and linears).
_QUAD_POINTS = np.array([[0.5, 0.0, 0.5], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
_QUAD_WEIGHTS = np.array([1.0, 1.0, 1.0]) / 3.0


def quad_integrate_p1(mesh, cell, integrand):
    """Numerically integrate integrand(lambda values, grads) over one cell.

    ``integrand(bary, grads)`` receives the barycentric coordinates at a
    quadrature point and the constant P1 gradients (3, 2) and returns the
    pointwise value. Independent of the package's closed-form assembly.
    """
    tri = mesh.cells[cell]
    pts = mesh.nodes[tri]
    e1, e2 = pts[1] - pts[0], pts[2] - pts[0]
    area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    x, y = pts[:, 0], pts[:, 1]
    denom = 2.0 * area
    grads = np.column_stack([
        [y[1] - y[2], y[2] - y[0], y[0] - y[1]],
        [x[2] - x[1], x[0] - x[2], x[1] - x[0]],
    ]) / denom
    total = 0.0
    for w, bary in zip(_QUAD_WEIGHTS, _QUAD_POINTS):
        total += w * integrand(bary, grads)
    return area * total


def uniform_geometry(size, label=1):
    return SubdomainGeometry(np.full((size, size), label, dtype=np.int64))


@pytest.fixture(scope="session")
def mesh12():
    return build_fine_mesh(12)


@pytest.fixture(scope="session")
def grid12(mesh12):
    return build_coarse_grid(mesh12, 3)


@pytest.fixture(scope="session")
def material12(mesh12):
    return build_case(1, generate_geometry(12, seed=4, margin=2), mesh12)


@pytest.fixture(scope="session")
def homogeneous12(mesh12):
    return build_case(1, uniform_geometry(12), mesh12)
