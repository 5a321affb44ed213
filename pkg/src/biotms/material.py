"""Heterogeneous two-subdomain coefficient fields.

Coefficients are piecewise constant per fine cell. A geometry raster
(label 1 = background matrix, label 2 = inclusions and strips) selects
between the two parameter sets of the configured test case; Lame
parameters and the drained modulus are derived cellwise from the elastic
modulus and the global Poisson ratio.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import FineMesh


class MaterialError(ValueError):
    """Invalid material parameters or geometry."""


# Two-subdomain parameter sets: (subdomain 1, subdomain 2).
CASE_COEFFICIENTS = {
    1: {"permeability": (1e-3, 1.0), "biot_modulus": (1.0, 10.0), "elastic_modulus": (10.0, 1.0)},
    2: {"permeability": (1e-3, 1.0), "biot_modulus": (1.0, 10.0), "elastic_modulus": (10.0, 1e-3)},
}
VISCOSITY = 1.0
BIOT_ALPHA = 0.9
POISSON = 0.22


def lame_from_modulus(elastic_modulus, poisson):
    """Lame pair (mu, lambda) from elastic modulus and Poisson ratio."""
    if np.any(np.asarray(poisson) >= 0.5):
        raise MaterialError(f"incompressible limit: Poisson ratio {poisson} >= 0.5")
    e = np.asarray(elastic_modulus, dtype=float)
    mu = e / (2.0 * (1.0 + poisson))
    lam = e * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


def drained_modulus(elastic_modulus, poisson):
    """Drained bulk stiffness entering the fixed-stress stabilization."""
    if np.any(np.asarray(poisson) >= 0.5):
        raise MaterialError(f"incompressible limit: Poisson ratio {poisson} >= 0.5")
    e = np.asarray(elastic_modulus, dtype=float)
    return e * (1.0 - poisson) / ((1.0 - 2.0 * poisson) * (1.0 + poisson))


@dataclass(frozen=True)
class SubdomainGeometry:
    """Raster of subdomain labels; row 0 spans y in [0, 1/H)."""

    raster: np.ndarray  # (H, W) integer labels in {1, 2}

    def __post_init__(self):
        labels = np.unique(self.raster)
        if not np.all(np.isin(labels, (1, 2))):
            raise MaterialError(f"geometry labels must be 1 or 2, found {labels}")

    @property
    def shape(self):
        return self.raster.shape

    def labels_for(self, mesh: FineMesh) -> np.ndarray:
        """Per-fine-cell labels by centroid lookup."""
        h, w = self.raster.shape
        cols = np.minimum((mesh.centroids[:, 0] * w).astype(int), w - 1)
        rows = np.minimum((mesh.centroids[:, 1] * h).astype(int), h - 1)
        return self.raster[rows, cols].astype(np.int64)


def read_geometry(path) -> SubdomainGeometry:
    """Read a raster file: header ``width height``, then width*height labels."""
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise MaterialError(f"geometry file {path}: missing 'width height' header")
    w, h = int(tokens[0]), int(tokens[1])
    body = tokens[2:]
    if len(body) != w * h:
        raise MaterialError(
            f"geometry file {path}: expected {w * h} labels, found {len(body)}"
        )
    raster = np.array(body, dtype=np.int64).reshape(h, w)
    return SubdomainGeometry(raster)


def write_geometry(path, geom: SubdomainGeometry) -> None:
    h, w = geom.raster.shape
    lines = [f"{w} {h}"]
    lines += [" ".join(str(v) for v in row) for row in geom.raster]
    Path(path).write_text("\n".join(lines) + "\n")


def generate_geometry(size: int, seed: int, inclusions: int = 9,
                      strips: int = 2, margin: int | None = None) -> SubdomainGeometry:
    """Deterministic inclusions-plus-strips medium on a size-by-size raster.

    Background is subdomain 1; circular particles and alternating
    horizontal/vertical strips are subdomain 2. ``margin`` pixels along
    every domain edge stay background so the contrast features are
    isolated from the boundary data.
    """
    rng = np.random.default_rng(seed)
    if margin is None:
        margin = max(2, size // 10)
    raster = np.ones((size, size), dtype=np.int64)
    width = max(1, size // 30)
    lo, hi = margin, size - margin
    for s in range(strips):
        pos = int(rng.integers(size // 5, size - size // 5 - width))
        if s % 2 == 0:
            raster[pos:pos + width, lo:hi] = 2
        else:
            raster[lo:hi, pos:pos + width] = 2
    jj, ii = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="xy")
    for _ in range(inclusions):
        r = rng.uniform(size / 30.0, size / 12.0)
        cx = rng.uniform(margin + r, size - margin - r)
        cy = rng.uniform(margin + r, size - margin - r)
        raster[(jj - cx) ** 2 + (ii - cy) ** 2 <= r * r] = 2
    return SubdomainGeometry(raster)


def default_geometry() -> SubdomainGeometry:
    """The fixed geometry shipped with the package (60x60 raster)."""
    return read_geometry(Path(__file__).parent / "data" / "default_geometry_60.txt")


@dataclass(frozen=True)
class MaterialField:
    """Cellwise coefficients plus global constants and derived moduli."""

    labels: np.ndarray            # (n_cells,) subdomain labels
    permeability: np.ndarray      # (n_cells,) k
    biot_modulus: np.ndarray      # (n_cells,) storage modulus
    elastic_modulus: np.ndarray   # (n_cells,)
    viscosity: float
    alpha: float                  # Biot-Willis coupling coefficient
    poisson: float
    mu: np.ndarray                # derived Lame shear modulus
    lam: np.ndarray               # derived Lame first parameter
    drained: np.ndarray           # derived drained modulus

    @property
    def n_cells(self) -> int:
        return self.labels.shape[0]

    def mobility(self) -> np.ndarray:
        """k / viscosity, the Darcy weight."""
        return self.permeability / self.viscosity


def build_case(case_id: int, geometry: SubdomainGeometry, mesh: FineMesh) -> MaterialField:
    """Instantiate the per-cell coefficient field for test case 1 or 2."""
    if case_id not in CASE_COEFFICIENTS:
        raise MaterialError(f"unknown case id: {case_id!r} (expected 1 or 2)")
    coeffs = CASE_COEFFICIENTS[case_id]
    labels = geometry.labels_for(mesh)
    pick = labels - 1  # 0 or 1 into the (sub1, sub2) pairs

    def per_cell(name):
        pair = np.asarray(coeffs[name], dtype=float)
        return pair[pick]

    e = per_cell("elastic_modulus")
    mu, lam = lame_from_modulus(e, POISSON)
    return MaterialField(
        labels=labels,
        permeability=per_cell("permeability"),
        biot_modulus=per_cell("biot_modulus"),
        elastic_modulus=e,
        viscosity=VISCOSITY,
        alpha=BIOT_ALPHA,
        poisson=POISSON,
        mu=mu,
        lam=lam,
        drained=drained_modulus(e, POISSON),
    )
