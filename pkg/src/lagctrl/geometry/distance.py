"""Parameterization-free distances between closed triangle meshes."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangulatedSurface


@dataclass(frozen=True)
class SurfaceDistance:
    hausdorff: float
    mean: float
    normal_deviation: float

    def to_dict(self):
        return {"hausdorff": self.hausdorff, "mean": self.mean,
                "normal_deviation": self.normal_deviation}


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, row by row.

    Returns the closest points and their barycentric coordinates.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    bary = np.empty((len(p), 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 1.0 / 3.0)
        w = np.where(denom != 0, vc / denom, 1.0 / 3.0)
        bary[:] = np.stack([1.0 - v - w, v, w], 1)

        # later assignments take precedence, mirroring the usual region tests
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        s = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[m] = np.stack([np.zeros(m.sum()), 1.0 - s[m], s[m]], 1)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        s = d2 / (d2 - d6)
        bary[m] = np.stack([1.0 - s[m], np.zeros(m.sum()), s[m]], 1)
        m = (d6 >= 0) & (d5 <= d6)
        bary[m] = (0.0, 0.0, 1.0)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        s = d1 / (d1 - d3)
        bary[m] = np.stack([1.0 - s[m], s[m], np.zeros(m.sum())], 1)
        m = (d3 >= 0) & (d4 <= d3)
        bary[m] = (0.0, 1.0, 0.0)
        m = (d1 <= 0) & (d2 <= 0)
        bary[m] = (1.0, 0.0, 0.0)
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


def point_surface_distance(points, surface: TriangulatedSurface):
    """Exact distance from each point to the triangles of ``surface``.

    Returns distances, closest points, closest face index and barycentric
    coordinates in that face.
    """
    points = np.asarray(points, float)
    v, f = surface.vertices, surface.faces
    cent = surface.centroids()
    rad = np.max(np.linalg.norm(v[f] - cent[:, None, :], axis=2), axis=1)
    # the nearest vertex bounds the distance; any face closer than that has
    # its centroid within bound + circumradius
    d_vert, _ = cKDTree(v).query(points)
    tree = cKDTree(cent)
    lists = tree.query_ball_point(points, d_vert + rad.max() + 1e-12)
    n = len(points)
    dist = np.empty(n)
    closest = np.empty((n, 3))
    face = np.empty(n, dtype=np.int64)
    bary_out = np.empty((n, 3))
    counts = np.array([len(l) for l in lists])
    # bound the number of (query, face) pairs held in memory at once
    bounds = np.searchsorted(np.cumsum(counts), np.arange(0, counts.sum(), 200_000), side="right")
    bounds = np.unique(np.r_[0, bounds, n])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        qi = np.repeat(np.arange(lo, hi), counts[lo:hi])
        fi = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists[lo:hi]])
        a, b, c = v[f[fi, 0]], v[f[fi, 1]], v[f[fi, 2]]
        q, bary = closest_point_on_triangles(points[qi], a, b, c)
        d = np.linalg.norm(points[qi] - q, axis=1)
        order = np.lexsort((d, qi))
        first = order[np.r_[0, np.flatnonzero(np.diff(qi[order])) + 1]]
        sel = qi[first]
        dist[sel], closest[sel], face[sel], bary_out[sel] = d[first], q[first], fi[first], bary[first]
    return dist, closest, face, bary_out


def _one_sided(A: TriangulatedSurface, B: TriangulatedSurface):
    vn_a = A.vertex_normals()
    vn_b = B.vertex_normals()
    queries = np.vstack([A.vertices, A.centroids()])
    weights = np.concatenate([np.zeros(A.n_vertices), A.face_areas()])
    d, _, fi, bary = point_surface_distance(queries, B)
    # interpolated normal at the closest point, compared with A's vertex normals
    nv = d[:A.n_vertices]
    fv, bv = fi[:A.n_vertices], bary[:A.n_vertices]
    nb = np.einsum("ik,ikj->ij", bv, vn_b[B.faces[fv]])
    nb /= np.linalg.norm(nb, axis=1)[:, None]
    # atan2 keeps full precision for nearly parallel normals
    angle = np.arctan2(np.linalg.norm(np.cross(vn_a, nb), axis=1), np.einsum("ij,ij->i", vn_a, nb))
    mean = float(np.sum(weights * d) / weights.sum())
    return float(max(d.max(), nv.max())), mean, float(angle.max())


def surface_distance(A: TriangulatedSurface, B: TriangulatedSurface) -> SurfaceDistance:
    """Symmetric Hausdorff distance, mean distance and normal deviation.

    Distances are measured from vertices and face centroids of each mesh to
    the triangles of the other, so the result does not depend on how the
    two surfaces are parameterized.  The mean is area weighted (centroid
    samples) and averaged over both directions.
    """
    h1, m1, n1 = _one_sided(A, B)
    h2, m2, n2 = _one_sided(B, A)
    return SurfaceDistance(max(h1, h2), 0.5 * (m1 + m2), max(n1, n2))
