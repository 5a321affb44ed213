"""Legacy-VTK (ASCII unstructured grid) export of meshes and nodal fields."""

import numpy as np

from .mesh import FineMesh


def write_vtk(path, mesh: FineMesh, point_scalars: dict | None = None,
              point_vectors: dict | None = None, cell_scalars: dict | None = None,
              title: str = "biotms fields") -> None:
    """Write the triangulation with optional nodal/cell data.

    Vector fields are length 2*n_nodes with interleaved components; a zero
    z component is appended for VTK.
    """
    point_scalars = point_scalars or {}
    point_vectors = point_vectors or {}
    cell_scalars = cell_scalars or {}
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            f.write(f"{x:.12g} {y:.12g} 0\n")
        f.write(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}\n")
        for a, b, c in mesh.cells:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {mesh.n_cells}\n")
        f.write("5\n" * mesh.n_cells)
        if point_scalars or point_vectors:
            f.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, values in point_scalars.items():
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in np.asarray(values):
                    f.write(f"{v:.12g}\n")
            for name, values in point_vectors.items():
                arr = np.asarray(values)
                f.write(f"VECTORS {name} double\n")
                for vx, vy in zip(arr[0::2], arr[1::2]):
                    f.write(f"{vx:.12g} {vy:.12g} 0\n")
        if cell_scalars:
            f.write(f"CELL_DATA {mesh.n_cells}\n")
            for name, values in cell_scalars.items():
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in np.asarray(values):
                    f.write(f"{v:.12g}\n")
