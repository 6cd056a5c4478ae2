"""Wavefront OBJ and legacy VTK (ASCII POLYDATA) mesh files."""

import numpy as np

from ..exceptions import InvariantError
from .mesh import TriangulatedSurface


def write_obj(surface: TriangulatedSurface, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in surface.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in surface.faces + 1:
            fh.write(f"f {i} {j} {k}\n")


def read_obj(path) -> TriangulatedSurface:
    """Read vertices and triangular faces; ``v/vt/vn`` face tokens accepted."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise InvariantError("only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriangulatedSurface(np.array(verts, float).reshape(-1, 3),
                               np.array(faces, np.int64).reshape(-1, 3))


def write_vtk(surface: TriangulatedSurface, path, title="surface", point_data=None) -> None:
    """Legacy VTK ASCII POLYDATA with optional scalar point data."""
    v, f = surface.vertices, surface.faces
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {len(v)} double\n")
        for x, y, z in v:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        fh.write(f"POLYGONS {len(f)} {4 * len(f)}\n")
        for i, j, k in f:
            fh.write(f"3 {i} {j} {k}\n")
        if point_data:
            fh.write(f"POINT_DATA {len(v)}\n")
            for name, values in point_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for val in np.asarray(values, float):
                    fh.write(f"{val:.17g}\n")
