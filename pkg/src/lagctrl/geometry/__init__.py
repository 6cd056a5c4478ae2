"""Meshes, domains, quadrature, flow maps and surface distances."""

from .distance import SurfaceDistance, point_surface_distance, surface_distance
from .domain import DomainSpec
from .flow import advect_surface, flow_points, rk4_step
from .io import read_obj, write_obj, write_vtk
from .mesh import TriangulatedSurface, enclosed_volume, mesh_sphere, surface_flux, unit_icosphere
from .samples import CONTROL_PATCH, GAMMA_T, SEALED, BoundarySampleSet

__all__ = [
    "TriangulatedSurface", "mesh_sphere", "enclosed_volume", "surface_flux", "unit_icosphere",
    "DomainSpec", "BoundarySampleSet", "GAMMA_T", "CONTROL_PATCH", "SEALED",
    "advect_surface", "flow_points", "rk4_step",
    "surface_distance", "point_surface_distance", "SurfaceDistance",
    "read_obj", "write_obj", "write_vtk",
]
