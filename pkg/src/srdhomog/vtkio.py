"""Legacy VTK (ASCII unstructured grid) export of meshes and fields."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh

__all__ = ["write_vtk"]

# legacy VTK cell type ids
_VTK_QUAD = 9
_VTK_HEXAHEDRON = 12


def write_vtk(path, mesh: Mesh, cell_data: dict | None = None,
              point_data: dict | None = None, title: str = "srdhomog mesh"):
    """Write the mesh with optional per-cell / per-node scalar or vector data.

    Cell data always includes phase_id and level; vector-valued point data
    (for example displacements) is padded to three components.
    """
    cell_data = dict(cell_data or {})
    cell_data.setdefault("phase_id", mesh.phase)
    cell_data.setdefault("level", mesh.level)

    dim = mesh.dim
    nnod = 2**dim
    pts = np.zeros((mesh.n_nodes, 3))
    pts[:, :dim] = mesh.nodes

    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_nodes} double\n")
        for p in pts:
            f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")

        ne = mesh.n_elements
        f.write(f"CELLS {ne} {ne * (nnod + 1)}\n")
        for row in mesh.conn:
            f.write(f"{nnod} " + " ".join(str(int(n)) for n in row) + "\n")
        ctype = _VTK_QUAD if dim == 2 else _VTK_HEXAHEDRON
        f.write(f"CELL_TYPES {ne}\n")
        for _ in range(ne):
            f.write(f"{ctype}\n")

        f.write(f"CELL_DATA {ne}\n")
        for name, values in cell_data.items():
            values = np.asarray(values)
            kind = "int" if np.issubdtype(values.dtype, np.integer) else "double"
            f.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n")
            for v in values:
                f.write(f"{int(v)}\n" if kind == "int" else f"{v:.10g}\n")

        if point_data:
            f.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, values in point_data.items():
                values = np.asarray(values, dtype=np.float64)
                if values.ndim == 2:
                    vec = np.zeros((mesh.n_nodes, 3))
                    vec[:, : values.shape[1]] = values
                    f.write(f"VECTORS {name} double\n")
                    for v in vec:
                        f.write(f"{v[0]:.10g} {v[1]:.10g} {v[2]:.10g}\n")
                else:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in values:
                        f.write(f"{v:.10g}\n")
