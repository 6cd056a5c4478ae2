"""Closed triangle meshes, icosphere generation and surface quadrature."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..exceptions import InvariantError, ParameterError

DEGENERACY_FACTOR = 1e-12


@dataclass(frozen=True)
class TriangulatedSurface:
    """Closed, outward oriented, genus-0 triangle mesh.

    Parameters
    ----------
    vertices : ndarray, shape (n, 3)
    faces : ndarray of int, shape (m, 3)
        Counter-clockwise when seen from outside.
    reference : ndarray, shape (n, 3), optional
        Unit-sphere coordinates of each vertex, kept through advection so
        that two surfaces can also be compared at matching parameters.
    """

    vertices: np.ndarray
    faces: np.ndarray
    reference: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvariantError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise InvariantError(f"faces must have shape (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvariantError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.reference is not None:
            r = np.asarray(self.reference, dtype=float)
            if r.shape != v.shape:
                raise InvariantError("reference coordinates must match vertices")
            object.__setattr__(self, "reference", r)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangulatedSurface":
        """Same connectivity and reference coordinates, new positions."""
        return TriangulatedSurface(vertices, self.faces, self.reference)

    def translated(self, shift) -> "TriangulatedSurface":
        return self.with_vertices(self.vertices + np.asarray(shift, float))

    def flipped(self) -> "TriangulatedSurface":
        """Reverse the orientation of every face."""
        return TriangulatedSurface(self.vertices, self.faces[:, ::-1], self.reference)

    # -- per-face quantities -------------------------------------------------

    def corners(self):
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def area_vectors(self) -> np.ndarray:
        """Area-weighted face normals, shape (m, 3)."""
        a, b, c = self.corners()
        return 0.5 * np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return np.linalg.norm(self.area_vectors(), axis=1)

    def face_normals(self) -> np.ndarray:
        av = self.area_vectors()
        return av / np.linalg.norm(av, axis=1)[:, None]

    def centroids(self) -> np.ndarray:
        a, b, c = self.corners()
        return (a + b + c) / 3.0

    def vertex_normals(self) -> np.ndarray:
        """Unit vertex normals from area-weighted incident face normals."""
        acc = np.zeros_like(self.vertices)
        av = self.area_vectors()
        for k in range(3):
            np.add.at(acc, self.faces[:, k], av)
        return acc / np.linalg.norm(acc, axis=1)[:, None]

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape (e, 2)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def validate(self, check_volume: bool = True) -> None:
        """Raise ``InvariantError`` unless the mesh is a closed oriented sphere."""
        f = self.faces
        if len(f) == 0:
            raise InvariantError("mesh has no faces")
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        undirected = np.sort(directed, axis=1)
        _, counts = np.unique(undirected, axis=0, return_counts=True)
        if np.any(counts != 2):
            raise InvariantError(
                f"open or non-manifold mesh: {int(np.sum(counts != 2))} edges "
                "not shared by exactly two faces")
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dcounts != 1):
            raise InvariantError("inconsistent face orientation")
        used = np.unique(f)
        chi = len(used) - len(counts) + len(f)
        if chi != 2:
            raise InvariantError(f"Euler characteristic {chi} != 2 (genus 0 required)")
        diag = self.bbox_diagonal()
        amin = self.face_areas().min()
        if not amin > DEGENERACY_FACTOR * diag ** 2:
            raise InvariantError(f"degenerate face with area {amin:.3e}")
        if check_volume and not enclosed_volume(self, validate=False) > 0:
            raise InvariantError("faces are oriented inward (non-positive volume)")


def enclosed_volume(surface: TriangulatedSurface, validate: bool = True) -> float:
    """Volume enclosed by a closed mesh via the divergence theorem.

    ``(1/3) * sum(centroid . area_vector)``; negative for inward orientation.
    """
    if validate:
        surface.validate(check_volume=False)
    return float(np.einsum("ij,ij->", surface.centroids(), surface.area_vectors()) / 3.0)


def surface_flux(surface: TriangulatedSurface, field, t: float) -> float:
    """Midpoint-rule flux of ``field(t, x)`` through the surface."""
    u = np.asarray(field(t, surface.centroids()), dtype=float)
    return float(np.einsum("ij,ij->", u, surface.area_vectors()))


# -- icosphere -----------------------------------------------------------------

def _icosahedron():
    p = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1)[:, None], f


def _subdivide(v, f):
    # every edge gets one midpoint, shared by both neighbouring faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    uniq, inv = np.unique(e_sorted, axis=0, return_inverse=True)
    inv = inv.reshape(3, -1)
    mid = v[uniq[:, 0]] + v[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1)[:, None]
    m01, m12, m20 = inv[0] + len(v), inv[1] + len(v), inv[2] + len(v)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    nf = np.concatenate([
        np.stack([a, m01, m20], 1), np.stack([b, m12, m01], 1),
        np.stack([c, m20, m12], 1), np.stack([m01, m12, m20], 1)])
    return np.vstack([v, mid]), nf


def unit_icosphere(level: int):
    """Vertices on the unit sphere and faces of a subdivided icosahedron."""
    if not (isinstance(level, (int, np.integer)) and 0 <= level <= 7):
        raise ParameterError(f"subdivision_level must be an integer in [0, 7], got {level!r}")
    v, f = _icosahedron()
    for _ in range(int(level)):
        v, f = _subdivide(v, f)
    return v, f


def mesh_sphere(center, radius: float, subdivision_level: int) -> TriangulatedSurface:
    """Icosphere with ``10 * 4**level + 2`` vertices on an exact sphere."""
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    v, f = unit_icosphere(subdivision_level)
    c = np.asarray(center, dtype=float).reshape(3)
    return TriangulatedSurface(c + radius * v, f, reference=v)
