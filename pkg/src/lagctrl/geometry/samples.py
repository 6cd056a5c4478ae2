"""Quadrature samples on closed surfaces."""

from dataclasses import dataclass

import numpy as np

from ..exceptions import InvariantError, ParameterError

GAMMA_T = "gamma_t"
CONTROL_PATCH = "control_patch"
SEALED = "sealed_boundary"
REGION_TAGS = (GAMMA_T, CONTROL_PATCH, SEALED)


@dataclass(frozen=True)
class BoundarySampleSet:
    """Points, unit outward normals and area weights on a closed surface.

    ``tags`` holds one of ``gamma_t``, ``control_patch`` or
    ``sealed_boundary`` per point.
    """

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, float)
        n = np.asarray(self.normals, float)
        w = np.asarray(self.weights, float)
        tags = np.asarray(self.tags).astype(str)
        if p.ndim != 2 or p.shape[1] != 3 or n.shape != p.shape:
            raise InvariantError("points and normals must both have shape (n, 3)")
        if w.shape != (len(p),) or tags.shape != (len(p),):
            raise InvariantError("one weight and one tag per sample required")
        if len(p) and not np.all(w > 0):
            raise InvariantError("sample weights must be positive")
        if len(p) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-10:
            raise InvariantError("normals must be unit vectors")
        bad = set(np.unique(tags)) - set(REGION_TAGS)
        if bad:
            raise InvariantError(f"unknown region tags {sorted(bad)}")
        for name, val in (("points", p), ("normals", n), ("weights", w), ("tags", tags)):
            object.__setattr__(self, name, val)

    def __len__(self):
        return len(self.points)

    @property
    def area(self) -> float:
        return float(self.weights.sum())

    def mask(self, tag: str) -> np.ndarray:
        if tag not in REGION_TAGS:
            raise ParameterError(f"unknown sample tag {tag!r}")
        return self.tags == tag

    def subset(self, mask) -> "BoundarySampleSet":
        mask = np.asarray(mask)
        return BoundarySampleSet(self.points[mask], self.normals[mask],
                                 self.weights[mask], self.tags[mask])

    @classmethod
    def from_surface(cls, surface, tag: str = GAMMA_T) -> "BoundarySampleSet":
        """Face centroids, face normals and face areas of a mesh.

        Midpoint quadrature with these samples integrates constant and linear
        normal fluxes exactly over the polyhedron.
        """
        av = surface.area_vectors()
        areas = np.linalg.norm(av, axis=1)
        return cls(surface.centroids(), av / areas[:, None], areas,
                   np.full(len(areas), tag))
