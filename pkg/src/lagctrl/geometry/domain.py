"""Analytic fluid domains with a control patch on the boundary."""

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy.special import sph_harm_y

from ..exceptions import ParameterError
from .mesh import TriangulatedSurface, unit_icosphere
from .samples import CONTROL_PATCH, SEALED, BoundarySampleSet

SHAPES = ("ball", "ellipsoid", "perturbed_ball")


def real_sph_harm(l: int, m: int, dirs: np.ndarray) -> np.ndarray:
    """Real spherical harmonic Y_lm evaluated at unit directions."""
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    y = sph_harm_y(l, abs(m), theta, phi)
    if m > 0:
        return np.sqrt(2.0) * y.real
    if m < 0:
        return np.sqrt(2.0) * y.imag
    return y.real


@dataclass(frozen=True)
class DomainSpec:
    """Star-shaped fluid domain Omega with a spherical-cap control patch.

    Parameters
    ----------
    shape : {"ball", "ellipsoid", "perturbed_ball"}
    center : 3-vector
    radius : float
        Radius of the ball, or base radius of the perturbed ball.
    semi_axes : 3-vector, optional
        Ellipsoid semi-axes.
    modes : sequence of (l, m, amplitude)
        Radial perturbation r = radius * (1 + sum a Y_lm).
    cap_axis, cap_cos : control patch Gamma = {x on boundary :
        (x - c)/|x - c| . axis > cap_cos}.
    boundary_level : int
        Icosphere level used for boundary samples.
    """

    shape: str = "ball"
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    semi_axes: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modes: Sequence[Tuple[int, int, float]] = field(default_factory=tuple)
    cap_axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    cap_cos: float = 0.8
    boundary_level: int = 4

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown domain shape {self.shape!r}; expected one of {SHAPES}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(c) for c in self.semi_axes))
        object.__setattr__(self, "modes", tuple((int(l), int(m), float(a)) for l, m, a in self.modes))
        axis = np.asarray(self.cap_axis, float)
        if not np.linalg.norm(axis) > 0:
            raise ParameterError("cap_axis must be nonzero")
        object.__setattr__(self, "cap_axis", tuple(axis / np.linalg.norm(axis)))
        if self.shape in ("ball", "perturbed_ball") and not self.radius > 0:
            raise ParameterError("radius must be positive")
        if self.shape == "ellipsoid" and not min(self.semi_axes) > 0:
            raise ParameterError("semi-axes must be positive")
        if self.shape == "perturbed_ball":
            if sum(abs(a) for _, _, a in self.modes) * 0.5 >= 1.0:
                raise ParameterError("perturbation amplitudes too large for a star-shaped domain")
            for l, m, _ in self.modes:
                if l < 0 or abs(m) > l:
                    raise ParameterError(f"invalid spherical harmonic index ({l}, {m})")
        if not -1.0 < self.cap_cos < 1.0:
            raise ParameterError("cap_cos must lie in (-1, 1) so that Gamma is a nonempty open cap")

    # -- shape ---------------------------------------------------------------

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center)

    def radial_function(self, dirs) -> np.ndarray:
        """Boundary radius along unit directions from the center."""
        dirs = np.atleast_2d(np.asarray(dirs, float))
        if self.shape == "ball":
            return np.full(len(dirs), float(self.radius))
        if self.shape == "ellipsoid":
            a = np.asarray(self.semi_axes)
            return 1.0 / np.sqrt(np.sum((dirs / a) ** 2, axis=1))
        r = np.ones(len(dirs))
        for l, m, amp in self.modes:
            r += amp * real_sph_harm(l, m, dirs)
        return self.radius * r

    def signed_distance(self, x) -> np.ndarray:
        """Negative inside Omega.

        Exact for the ball; for the other shapes the radial gap
        ``|x - c| - r(direction)`` which has the correct sign and zero set.
        """
        x = np.atleast_2d(np.asarray(x, float))
        d = x - self.c
        rho = np.linalg.norm(d, axis=1)
        dirs = np.where(rho[:, None] > 0, d / np.where(rho > 0, rho, 1.0)[:, None],
                        np.array([0.0, 0.0, 1.0]))
        return rho - self.radial_function(dirs)

    def contains(self, x) -> np.ndarray:
        return self.signed_distance(x) < 0

    def boundary_mesh(self, level=None) -> TriangulatedSurface:
        v, f = unit_icosphere(self.boundary_level if level is None else level)
        return TriangulatedSurface(self.c + v * self.radial_function(v)[:, None], f, reference=v)

    def in_control_patch(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        d = x - self.c
        d = d / np.linalg.norm(d, axis=1)[:, None]
        return d @ np.asarray(self.cap_axis) > self.cap_cos

    def boundary_samples(self, level=None) -> BoundarySampleSet:
        """Face-centroid samples of the boundary tagged control/sealed."""
        s = BoundarySampleSet.from_surface(self.boundary_mesh(level))
        tags = np.where(self.in_control_patch(s.points), CONTROL_PATCH, SEALED)
        return BoundarySampleSet(s.points, s.normals, s.weights, tags)

    def extent_radius(self) -> float:
        """Largest distance from the center to the boundary."""
        v, _ = unit_icosphere(5)
        return float(self.radial_function(v).max())

    def feature_size(self) -> float:
        """Smallest center-to-boundary distance, used to scale pole offsets."""
        v, _ = unit_icosphere(5)
        return float(self.radial_function(v).min())

    @property
    def diameter(self) -> float:
        return 2.0 * self.extent_radius()

    def interior_lattice(self, spacing: float, clearance: float = 0.0) -> np.ndarray:
        """Regular lattice points with ``signed_distance <= -clearance``."""
        if not spacing > 0:
            raise ParameterError("lattice spacing must be positive")
        r = self.extent_radius()
        n = int(np.floor(r / spacing))
        g = np.arange(-n, n + 1) * spacing
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) + self.c
        return pts[self.signed_distance(pts) <= -clearance]

    def to_dict(self) -> dict:
        return {
            "shape": self.shape, "center": list(self.center), "radius": self.radius,
            "semi_axes": list(self.semi_axes), "modes": [list(m) for m in self.modes],
            "cap_axis": list(self.cap_axis), "cap_cos": self.cap_cos,
            "boundary_level": self.boundary_level,
        }
