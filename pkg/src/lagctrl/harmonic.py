"""Harmonic potentials as sums of exterior point sources.

A potential is ``phi(x) = sum_p w_p / (4 pi |x - Y_p|) + c + a . x``; it is
harmonic wherever no pole ``Y_p`` sits, so placing the poles outside a
region gives functions harmonic on a neighbourhood of it.  Least-squares
fits use column scaling and a truncated SVD (relative cutoff ``rcond``).
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_points, check_positive
from .exceptions import (BasisError, CompatibilityError, ConditioningError,
                         ParameterError)
from .fields import VelocityField, as_points
from .geometry.distance import point_surface_distance
from .geometry.domain import DomainSpec
from .geometry.mesh import TriangulatedSurface, unit_icosphere
from .geometry.samples import CONTROL_PATCH, SEALED, BoundarySampleSet

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
CHUNK_PAIRS = 65_536


class ConditioningWarning(UserWarning):
    pass


def _chunks(n, p):
    step = max(1, CHUNK_PAIRS // max(p, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


class PointSourcePotential:
    """Weighted point sources plus an affine part.

    Parameters
    ----------
    poles : ndarray, shape (P, 3)
    weights : ndarray, shape (P,)
    constant : float
    linear : 3-vector
    info : dict, optional
        Fit diagnostics (residuals, condition number); not part of the value.
    """

    def __init__(self, poles, weights, constant=0.0, linear=(0.0, 0.0, 0.0), info=None):
        self.poles = check_points(poles, "poles", allow_empty=True).copy()
        self.weights = np.asarray(weights, float).reshape(-1).copy()
        if len(self.weights) != len(self.poles):
            raise ParameterError("one weight per pole required")
        self.constant = float(constant)
        self.linear = np.asarray(linear, float).reshape(3).copy()
        self.info = dict(info or {})

    @classmethod
    def zero(cls):
        return cls(np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def affine(cls, constant=0.0, linear=(0.0, 0.0, 0.0)):
        return cls(np.zeros((0, 3)), np.zeros(0), constant, linear)

    @property
    def n_poles(self) -> int:
        return len(self.poles)

    def __repr__(self):
        return f"PointSourcePotential(n_poles={self.n_poles}, constant={self.constant:.3g})"

    # -- evaluation ------------------------------------------------------------

    def value(self, x) -> np.ndarray:
        x = as_points(x)
        out = self.constant + x @ self.linear
        for s in _chunks(len(x), self.n_poles):
            r = np.linalg.norm(x[s, None, :] - self.poles[None], axis=2)
            out[s] += (1.0 / r) @ self.weights / FOUR_PI
        return out

    __call__ = value

    def gradient(self, x) -> np.ndarray:
        x = as_points(x)
        out = np.broadcast_to(self.linear, x.shape).copy()
        w = self.weights / FOUR_PI
        for s in _chunks(len(x), self.n_poles):
            r = cdist(x[s], self.poles)
            w3 = w / r ** 3
            # sum_p w3 (x - Y_p) without forming the pair differences
            out[s] -= x[s] * w3.sum(axis=1)[:, None] - w3 @ self.poles
        return out

    def hessian(self, x) -> np.ndarray:
        return self.gradient_and_hessian(x)[1]

    def gradient_and_hessian(self, x):
        """``(gradient, hessian)`` sharing the pair distances."""
        x = as_points(x)
        n = len(x)
        grad = np.broadcast_to(self.linear, x.shape).copy()
        hess = np.zeros((n, 3, 3))
        w = self.weights / FOUR_PI
        Y = self.poles
        YY = (Y[:, :, None] * Y[:, None, :]).reshape(-1, 9)
        for s in _chunks(n, self.n_poles):
            xs = x[s]
            r = cdist(xs, Y)
            w3 = w / r ** 3
            w5 = w3 / r ** 2
            s3 = w3.sum(axis=1)
            grad[s] -= xs * s3[:, None] - w3 @ Y
            s5 = w5.sum(axis=1)
            m5 = w5 @ Y
            # sum_p w5 (x - Y)(x - Y)^T expanded into moments of the poles
            dd = (s5[:, None, None] * xs[:, :, None] * xs[:, None, :]
                  - xs[:, :, None] * m5[:, None, :] - m5[:, :, None] * xs[:, None, :]
                  + (w5 @ YY).reshape(-1, 3, 3))
            hess[s] = 3.0 * dd - s3[:, None, None] * np.eye(3)
        return grad, hess

    def normal_derivative(self, points, normals) -> np.ndarray:
        return np.einsum("ij,ij->i", self.gradient(points), normals)

    def laplacian_fd(self, x, h) -> np.ndarray:
        """Seven-point finite-difference Laplacian, for harmonicity checks."""
        x = as_points(x)
        acc = -6.0 * self.value(x)
        for e in np.eye(3):
            acc += self.value(x + h * e) + self.value(x - h * e)
        return acc / h ** 2

    def min_pole_distance(self, x) -> np.ndarray:
        x = as_points(x)
        if self.n_poles == 0:
            return np.full(len(x), np.inf)
        return cKDTree(self.poles).query(x)[0]

    # -- algebra ---------------------------------------------------------------

    def scaled(self, a: float) -> "PointSourcePotential":
        return PointSourcePotential(self.poles, a * self.weights, a * self.constant,
                                    a * self.linear)

    def combine(self, other: "PointSourcePotential", a=1.0, b=1.0) -> "PointSourcePotential":
        """``a * self + b * other`` with coincident poles merged."""
        poles = np.vstack([self.poles, other.poles])
        weights = np.concatenate([a * self.weights, b * other.weights])
        if len(poles):
            uniq, inv = np.unique(poles, axis=0, return_inverse=True)
            merged = np.zeros(len(uniq))
            np.add.at(merged, inv.reshape(-1), weights)
            poles, weights = uniq, merged
        return PointSourcePotential(poles, weights, a * self.constant + b * other.constant,
                                    a * self.linear + b * other.linear)

    def __add__(self, other):
        return self.combine(other)

    def __sub__(self, other):
        return self.combine(other, 1.0, -1.0)

    def field(self) -> "PotentialGradientField":
        return PotentialGradientField(self)

    def to_dict(self) -> dict:
        return {"poles": self.poles.tolist(), "weights": self.weights.tolist(),
                "constant": self.constant, "linear": self.linear.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["poles"], float).reshape(-1, 3), d["weights"],
                   d.get("constant", 0.0), d.get("linear", (0.0, 0.0, 0.0)))


class PotentialGradientField(VelocityField):
    """Steady velocity ``grad phi`` of a point-source potential."""

    def __init__(self, potential: PointSourcePotential):
        self.potential = potential

    def __call__(self, t, x):
        return self.potential.gradient(x)

    def gradient(self, t, x):
        return self.potential.hessian(x)

    def value_and_gradient(self, t, x):
        return self.potential.gradient_and_hessian(x)

    def singularities(self):
        return self.potential.poles


# -- basis matrices and least squares ----------------------------------------------

def source_values(x, poles) -> np.ndarray:
    """Matrix ``G[n, p] = 1 / (4 pi |x_n - Y_p|)``."""
    d = x[:, None, :] - poles[None]
    return 1.0 / (FOUR_PI * np.linalg.norm(d, axis=2))


def source_gradients(x, poles) -> np.ndarray:
    """Array ``dG[n, p, k]`` of kernel gradients with respect to ``x``."""
    d = x[:, None, :] - poles[None]
    r = np.linalg.norm(d, axis=2)
    return -d / (FOUR_PI * r[..., None] ** 3)


class TruncatedLeastSquares:
    """Column-scaled least squares with truncated SVD, reusable for many RHS.

    Attributes
    ----------
    condition_number : float
        Ratio of extreme singular values of the column-scaled matrix.
    effective_condition : float
        Same ratio restricted to the retained singular values.
    rank : int
    """

    def __init__(self, A, rcond=1e-12):
        A = np.asarray(A, float)
        scale = np.linalg.norm(A, axis=0)
        scale[scale == 0] = 1.0
        self.scale = scale
        U, s, Vt = np.linalg.svd(A / scale, full_matrices=False)
        if s.size == 0 or s[0] == 0:
            keep = np.zeros_like(s, dtype=bool)
        else:
            keep = s > rcond * s[0]
        self.U, self.s, self.Vt = U[:, keep], s[keep], Vt[keep]
        self.rank = int(keep.sum())
        smin = s[-1] if s.size else 0.0
        self.condition_number = float(s[0] / smin) if smin > 0 else float("inf")
        self.effective_condition = float(s[0] / self.s[-1]) if self.rank else float("inf")

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, float)
        y = (self.U.T @ b) / (self.s if b.ndim == 1 else self.s[:, None])
        x = self.Vt.T @ y
        return x / (self.scale if b.ndim == 1 else self.scale[:, None])


# -- pole placement ---------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def _surface_points_normals(surface: TriangulatedSurface, count: int):
    """Quasi-uniform points and unit normals on a sphere-like mesh.

    Fibonacci directions are located on the reference sphere mesh and
    mapped to the physical mesh with barycentric interpolation; without
    reference coordinates, farthest-point sampling of vertices is used.
    """
    vn = surface.vertex_normals()
    if surface.reference is not None:
        ref = TriangulatedSurface(surface.reference, surface.faces)
        _, _, fi, bary = point_surface_distance(fibonacci_sphere(count), ref)
        tri = surface.faces[fi]
        pts = np.einsum("ik,ikj->ij", bary, surface.vertices[tri])
        nrm = np.einsum("ik,ikj->ij", bary, vn[tri])
        return pts, nrm / np.linalg.norm(nrm, axis=1)[:, None]
    v = surface.vertices
    if count > len(v):
        raise ParameterError("more poles requested than mesh vertices available")
    chosen = [0]
    dist = np.linalg.norm(v - v[0], axis=1)
    for _ in range(count - 1):
        j = int(np.argmax(dist))
        chosen.append(j)
        dist = np.minimum(dist, np.linalg.norm(v - v[j], axis=1))
    return v[chosen], vn[chosen]


def place_poles(surface, side: str, offset: float, count: int) -> np.ndarray:
    """Poles at signed distance ``offset`` along the normals of a closed surface.

    Parameters
    ----------
    surface : TriangulatedSurface or DomainSpec
    side : {"inside", "outside"}
    offset : float
    count : int, at least 4
    """
    check_positive(offset, "offset")
    if int(count) != count or count < 4:
        raise ParameterError(f"count must be an integer >= 4, got {count!r}")
    if side not in ("inside", "outside"):
        raise ParameterError(f"side must be 'inside' or 'outside', got {side!r}")
    if isinstance(surface, DomainSpec):
        surface = surface.boundary_mesh(level=max(surface.boundary_level, 5))
    pts, nrm = _surface_points_normals(surface, int(count))
    sign = 1.0 if side == "outside" else -1.0
    poles = pts + sign * offset * nrm
    if len(poles) > 1:
        dmin = cKDTree(poles).query(poles, k=2)[0][:, 1].min()
        if dmin < offset / 10.0:
            warnings.warn(f"pole spacing {dmin:.3g} below offset/10; expect poor conditioning",
                          ConditioningWarning, stacklevel=2)
    return poles


# -- Neumann problem ----------------------------------------------------------------

def compatibility_ratio(samples: BoundarySampleSet, flux) -> float:
    """``|sum w f| / (||f||_L2 sqrt(area))``, in [0, 1] by Cauchy-Schwarz."""
    flux = np.asarray(flux, float)
    norm = np.sqrt(np.sum(samples.weights * flux ** 2)) * np.sqrt(samples.area)
    if norm == 0:
        return 0.0
    return float(abs(np.sum(samples.weights * flux)) / norm)


@dataclass
class FitReport:
    residual: float
    relative_residual: float
    condition_number: float
    effective_condition: float
    rank: int
    n_poles: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"residual": self.residual, "relative_residual": self.relative_residual,
             "condition_number": self.condition_number,
             "effective_condition": self.effective_condition,
             "rank": self.rank, "n_poles": self.n_poles}
        d.update(self.extra)
        return d


class NeumannSolver(BaseEstimator):
    """Interior Neumann problem on a closed surface by point sources.

    Poles sit outside the surface, so the fitted potential is harmonic on a
    neighbourhood of the enclosed region.  The factorization depends only on
    the samples and poles and is reused by :meth:`solve` for new data.

    Parameters
    ----------
    pole_offset : float
        Distance of poles from the surface along outward normals.
    n_poles : int, optional
        Defaults to one third of the number of samples.
    poles : ndarray, optional
        Explicit pole positions; overrides placement.
    rcond : float
        Relative singular-value cutoff.
    compat_tol : float
        Allowed compatibility ratio of the data; a smaller nonzero mismatch
        is projected out before fitting.
    max_condition : float
        Raise ``ConditioningError`` above this effective condition number.
    """

    def __init__(self, pole_offset=0.5, n_poles=None, poles=None, rcond=1e-12,
                 compat_tol=1e-8, max_condition=1e14):
        self.pole_offset = pole_offset
        self.n_poles = n_poles
        self.poles = poles
        self.rcond = rcond
        self.compat_tol = compat_tol
        self.max_condition = max_condition

    def fit(self, samples: BoundarySampleSet, flux=None, surface=None):
        """Factorize for ``samples``; also solve for ``flux`` when given.

        ``surface`` is used for pole placement; without it the samples are
        treated as the vertices of a convex-ish cloud and poles go along the
        sample normals.
        """
        self.samples_ = samples
        if self.poles is not None:
            poles = check_points(self.poles, "poles")
        else:
            count = self.n_poles or max(4, len(samples) // 3)
            if surface is not None:
                poles = place_poles(surface, "outside", self.pole_offset, count)
            else:
                idx = np.linspace(0, len(samples) - 1, count).astype(int)
                poles = samples.points[idx] + self.pole_offset * samples.normals[idx]
        self.poles_ = poles
        dG = source_gradients(samples.points, poles)
        A = np.concatenate([np.einsum("npk,nk->np", dG, samples.normals), samples.normals], axis=1)
        self._ls = TruncatedLeastSquares(A, self.rcond)
        if self._ls.effective_condition > self.max_condition:
            raise ConditioningError(
                f"Neumann system condition {self._ls.effective_condition:.3e} exceeds "
                f"{self.max_condition:.1e}; increase the pole offset or use fewer poles")
        self._A = A
        self._G = source_values(samples.points, poles)
        if flux is not None:
            self.potential_ = self.solve(flux)
        return self

    def _check_fitted(self):
        if not hasattr(self, "_ls"):
            raise NotFittedError("NeumannSolver is not fitted yet; call fit first")

    def solve(self, flux) -> PointSourcePotential:
        """Potential whose normal derivative fits ``flux`` at the samples."""
        self._check_fitted()
        s = self.samples_
        flux = np.asarray(flux, float).reshape(-1)
        if flux.shape != (len(s),):
            raise ParameterError(f"flux must have one value per sample ({len(s)})")
        ratio = compatibility_ratio(s, flux)
        if ratio > self.compat_tol:
            raise CompatibilityError(
                f"Neumann data has net flux (compatibility ratio {ratio:.3e} > "
                f"{self.compat_tol:.1e}); the boundary integral of the data must vanish")
        flux = flux - np.sum(s.weights * flux) / s.area
        coef = self._ls.solve(flux)
        P = len(self.poles_)
        w, lin = coef[:P], coef[P:]
        res = self._A @ coef - flux
        phi = self._G @ w + s.points @ lin
        const = -np.sum(s.weights * phi) / s.area
        fnorm = np.sqrt(np.sum(s.weights * flux ** 2))
        rnorm = np.sqrt(np.sum(s.weights * res ** 2))
        report = FitReport(float(rnorm), float(rnorm / fnorm) if fnorm > 0 else 0.0,
                           self._ls.condition_number, self._ls.effective_condition,
                           self._ls.rank, P, {"max_residual": float(np.abs(res).max()),
                                              "compatibility_ratio": ratio})
        return PointSourcePotential(self.poles_, w, const, lin, info=report.to_dict())

    def predict(self, X):
        """Velocity ``grad phi`` of the fitted potential at points ``X``."""
        if not hasattr(self, "potential_"):
            raise NotFittedError("no Neumann data has been fitted")
        return self.potential_.gradient(check_points(X, "X"))


def solve_neumann(samples: BoundarySampleSet, flux, surface=None, pole_offset=0.5,
                  n_poles=None, poles=None, rcond=1e-12, compat_tol=1e-8) -> PointSourcePotential:
    """Fit ``d phi / d n = flux`` at the samples with exterior poles.

    The gauge is zero weighted mean of ``phi`` over the samples.  Fit
    diagnostics are in ``result.info`` (``residual`` is the area-weighted
    L2 norm of the normal-derivative misfit).
    """
    solver = NeumannSolver(pole_offset=pole_offset, n_poles=n_poles, poles=poles,
                           rcond=rcond, compat_tol=compat_tol)
    return solver.fit(samples, flux, surface=surface).potential_


# -- Runge-type approximation --------------------------------------------------------

class SmallRegionFactor:
    """Triangular factor of the smallness rows, shared between fits.

    The penalty rows ``sqrt(weight) * [phi; grad phi]`` at the small-region
    probes depend only on the probes and poles; replacing them by the ``R``
    factor of their QR decomposition leaves the least-squares problem
    (and its singular values) unchanged since their right-hand side is zero.
    """

    def __init__(self, poles, small_region, smallness_weight):
        poles = check_points(poles, "poles")
        small = check_points(small_region, "small_region", allow_empty=True)
        self.poles = poles
        self.small_region = small
        self.smallness_weight = float(smallness_weight)
        sw = np.sqrt(self.smallness_weight)
        P = len(poles)
        R = np.zeros((0, P + 4))
        if len(small) and sw > 0:
            for s in _chunks(len(small), 4 * P):
                x = small[s]
                G = source_values(x, poles)
                dG = source_gradients(x, poles)
                ones, zeros = np.ones((len(x), 1)), np.zeros((len(x), 1))
                blocks = [np.concatenate([G, ones, x], 1)]
                for k in range(3):
                    blocks.append(np.concatenate(
                        [dG[:, :, k], zeros, np.tile(np.eye(3)[k], (len(x), 1))], 1))
                R = np.linalg.qr(np.vstack([R] + [sw * b for b in blocks]), mode="r")
        self.R = R


class HarmonicApproximator(BaseEstimator):
    """Penalized least-squares approximation by sources at given poles.

    Minimizes ``sum_match |grad phi - grad target|^2 + smallness_weight *
    sum_small (phi^2 + |grad phi|^2)`` over pole weights and affine part.

    Parameters
    ----------
    poles : ndarray, shape (P, 3)
    smallness_weight : float
    rcond : float
    small_factor : SmallRegionFactor, optional
        Precomputed smallness rows for these poles; ``small_region`` passed
        to :meth:`fit` is then ignored.
    """

    def __init__(self, poles=None, smallness_weight=10.0, rcond=1e-12, small_factor=None):
        self.poles = poles
        self.smallness_weight = smallness_weight
        self.rcond = rcond
        self.small_factor = small_factor

    def fit(self, target: PointSourcePotential, match_region, small_region=None):
        match = check_points(match_region, "match_region")
        poles = check_points(self.poles, "poles")
        if self.smallness_weight < 0:
            raise ParameterError("smallness_weight must be nonnegative")
        factor = self.small_factor
        if factor is None:
            small = (np.zeros((0, 3)) if small_region is None
                     else check_points(small_region, "small_region", allow_empty=True))
            factor = SmallRegionFactor(poles, small, self.smallness_weight)
        elif factor.poles.shape != poles.shape or not np.array_equal(factor.poles, poles):
            raise ParameterError("small_factor was built for different poles")
        small = factor.small_region
        probes = np.vstack([match, small])
        if len(poles):
            clearance = cKDTree(poles).query(probes)[0].min()
            scale = np.linalg.norm(probes.max(0) - probes.min(0))
            if clearance < 1e-3 * scale:
                raise ParameterError(f"pole within {clearance:.3g} of a probe point")
        P = len(poles)
        # columns: sources, constant, x, y, z
        dGm = source_gradients(match, poles)
        rows = [np.concatenate([dGm[:, :, k], np.zeros((len(match), 1)),
                                np.tile(np.eye(3)[k], (len(match), 1))], 1) for k in range(3)]
        tgrad = target.gradient(match)
        A = np.vstack(rows + [factor.R])
        b = np.concatenate([tgrad[:, 0], tgrad[:, 1], tgrad[:, 2], np.zeros(len(factor.R))])
        ls = TruncatedLeastSquares(A, self.rcond)
        coef = ls.solve(b)
        phi = PointSourcePotential(poles, coef[:P], coef[P], coef[P + 1:])
        err = phi.gradient(match) - tgrad
        tnorm = np.sqrt(np.mean(np.sum(tgrad ** 2, 1)))
        match_rms = float(np.sqrt(np.mean(np.sum(err ** 2, 1))))
        if len(small):
            small_rms = float(np.sqrt(np.mean(phi.value(small) ** 2
                                              + np.sum(phi.gradient(small) ** 2, 1))))
        else:
            small_rms = 0.0
        self.report_ = FitReport(match_rms, match_rms / tnorm if tnorm > 0 else match_rms,
                                 ls.condition_number, ls.effective_condition, ls.rank, P,
                                 {"small_residual": small_rms,
                                  "match_max_error": float(np.linalg.norm(err, axis=1).max())})
        phi.info = self.report_.to_dict()
        self.potential_ = phi
        return self

    def predict(self, X):
        if not hasattr(self, "potential_"):
            raise NotFittedError("HarmonicApproximator is not fitted yet")
        return self.potential_.gradient(check_points(X, "X"))


def harmonic_approx(target: PointSourcePotential, match_region, small_region, poles,
                    smallness_weight: float = 10.0, rcond: float = 1e-12) -> PointSourcePotential:
    """Approximate ``grad target`` on ``match_region`` while keeping the
    approximant and its gradient small on ``small_region``.

    ``result.info`` holds ``relative_residual`` (match, RMS relative to the
    target gradient) and ``small_residual``.
    """
    approx = HarmonicApproximator(poles=poles, smallness_weight=smallness_weight, rcond=rcond)
    return approx.fit(target, match_region, small_region).potential_


# -- boundary correction ------------------------------------------------------------------

def smoothstep(s):
    """C-infinity transition from 0 (s <= 0) to 1 (s >= 1)."""
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    out[s >= 1] = 1.0
    m = (s > 0) & (s < 1)
    a = np.exp(-1.0 / s[m])
    b = np.exp(-1.0 / (1.0 - s[m]))
    out[m] = a / (a + b)
    return out


def reflection_coefficients(lams):
    """Weights c_k with sum c_k lam_k^j = (-1)^j, j < len(lams).

    ``f(-s) ~ sum c_k f(lam_k s)`` then matches ``f`` and its first
    ``len(lams) - 1`` derivatives across ``s = 0``.
    """
    lams = np.asarray(lams, float)
    V = lams[None, :] ** np.arange(len(lams))[:, None]
    return np.linalg.solve(V, (-1.0) ** np.arange(len(lams)))


class BoundaryCorrector(BaseEstimator, TransformerMixin):
    """Remove the sealed-boundary normal velocity of a candidate potential.

    ``transform(candidate)`` returns ``candidate - h`` where ``h`` solves the
    interior Neumann problem on the domain boundary with data ``d``:
    ``d = d candidate / d n`` on sealed samples, extended to the control
    patch so that its boundary integral vanishes.

    Parameters
    ----------
    domain : DomainSpec, optional
        Needed by the ``"reflection"`` and ``"continuation"`` extensions.
    extension : {"constant", "reflection", "continuation"}
        How ``d`` is continued onto the control patch.  ``constant`` uses a
        single constant (discontinuous at the patch edge); ``reflection``
        reflects the sealed data across the patch edge (C^2) and blends it
        into a constant; ``continuation`` blends the candidate's own normal
        derivative on the patch into a constant (C-infinity, but not
        bounded by the sealed data alone).
    blend_width : float
        Angular width of the blend band, as a fraction of the largest width
        the reflection can use.
    reflection_scales : sequence of float
        Reflected sample angles ``alpha0 + lam * (alpha0 - alpha)``; k scales
        give a C^(k-1) extension.
    pole_offset, n_poles, rcond : Neumann fit settings for ``h``.
    """

    def __init__(self, domain=None, extension="constant", blend_width=1.0,
                 reflection_scales=(1.0, 2.0, 3.0), pole_offset=None, n_poles=None,
                 rcond=1e-12):
        self.domain = domain
        self.extension = extension
        self.blend_width = blend_width
        self.reflection_scales = reflection_scales
        self.pole_offset = pole_offset
        self.n_poles = n_poles
        self.rcond = rcond

    def fit(self, boundary: BoundarySampleSet, y=None):
        if self.extension not in ("constant", "reflection", "continuation"):
            raise ParameterError(f"unknown extension {self.extension!r}")
        if self.extension != "constant" and self.domain is None:
            raise ParameterError(f"extension {self.extension!r} needs the domain")
        self.boundary_ = boundary
        self.sealed_ = boundary.mask(SEALED)
        self.patch_ = boundary.mask(CONTROL_PATCH)
        if not np.all(self.sealed_ | self.patch_):
            raise ParameterError("boundary samples must be tagged sealed_boundary or control_patch")
        if self.sealed_.all():
            raise ParameterError("control patch is empty")
        dom = self.domain
        offset = self.pole_offset
        if offset is None:
            offset = 0.5 * (dom.feature_size() if dom is not None else 1.0)
        surface = dom.boundary_mesh() if dom is not None else None
        self.solver_ = NeumannSolver(pole_offset=offset, n_poles=self.n_poles,
                                     rcond=self.rcond, compat_tol=1e-6)
        self.solver_.fit(boundary, surface=surface)
        if self.extension != "constant" and self.patch_.any():
            self._prepare_blend()
        return self

    def _prepare_blend(self):
        dom = self.domain
        axis = np.asarray(dom.cap_axis)
        alpha0 = np.arccos(dom.cap_cos)
        p = self.boundary_.points[self.patch_] - dom.c
        dirs = p / np.linalg.norm(p, axis=1)[:, None]
        alpha = np.arccos(np.clip(dirs @ axis, -1.0, 1.0))
        lams = np.asarray(self.reflection_scales, float)
        band = self.blend_width * min(alpha0, (np.pi - alpha0) / lams.max())
        s = alpha0 - alpha
        self._beta = smoothstep(s / band)
        if self.extension == "reflection":
            # rotate each patch direction away from the axis to angle alpha0 + k s
            perp = dirs - np.outer(dirs @ axis, axis)
            pn = np.linalg.norm(perp, axis=1)
            ref = np.cross(axis, [1.0, 0.0, 0.0])
            if np.linalg.norm(ref) < 1e-8:
                ref = np.cross(axis, [0.0, 1.0, 0.0])
            ref /= np.linalg.norm(ref)
            perp = np.where(pn[:, None] > 1e-12, perp / np.where(pn > 1e-12, pn, 1.0)[:, None], ref)
            self._reflect_coef = reflection_coefficients(lams)
            pts, nrm = [], []
            for lam in lams:
                ang = np.minimum(alpha0 + lam * s, np.pi)
                d = np.cos(ang)[:, None] * axis + np.sin(ang)[:, None] * perp
                x = dom.c + d * dom.radial_function(d)[:, None]
                pts.append(x)
                nrm.append(boundary_normals(dom, x))
            self._reflect_points = np.stack(pts)
            self._reflect_normals = np.stack(nrm)

    def boundary_data(self, candidate: PointSourcePotential) -> np.ndarray:
        """The extended Neumann data ``d`` at every boundary sample."""
        b = self.boundary_
        dn = candidate.normal_derivative(b.points, b.normals)
        d = np.zeros(len(b))
        d[self.sealed_] = dn[self.sealed_]
        if not self.patch_.any():
            return d
        w = b.weights
        if self.extension == "constant":
            d[self.patch_] = -np.sum(w[self.sealed_] * d[self.sealed_]) / w[self.patch_].sum()
            return d
        if self.extension == "continuation":
            near = dn[self.patch_]
        else:
            near = sum(c * candidate.normal_derivative(self._reflect_points[k], self._reflect_normals[k])
                       for k, c in enumerate(self._reflect_coef))
        beta = self._beta
        wp = w[self.patch_]
        partial = np.sum(w[self.sealed_] * d[self.sealed_]) + np.sum(wp * (1.0 - beta) * near)
        kappa = -partial / np.sum(wp * beta)
        d[self.patch_] = (1.0 - beta) * near + beta * kappa
        return d

    def transform(self, candidate: PointSourcePotential) -> PointSourcePotential:
        if not hasattr(self, "solver_"):
            raise NotFittedError("BoundaryCorrector is not fitted yet")
        b = self.boundary_
        d = self.boundary_data(candidate)
        h = self.solver_.solve(d)
        out = candidate - h
        seal = np.abs(out.normal_derivative(b.points[self.sealed_], b.normals[self.sealed_]))
        grad_scale = float(np.abs(candidate.gradient(b.points)).max())
        out.info = {
            "tol_seal": float(seal.max()) if seal.size else 0.0,
            "seal_rms": float(np.sqrt(np.mean(seal ** 2))) if seal.size else 0.0,
            "candidate_gradient_scale": grad_scale,
            "h_residual": h.info["residual"],
            "h_relative_residual": h.info["relative_residual"],
            "h_condition_number": h.info["effective_condition"],
            "d_ratio": float(np.abs(d).max() / max(np.abs(d[self.sealed_]).max(), 1e-300))
            if self.sealed_.any() else 0.0,
        }
        out.info["h"] = h
        return out


def boundary_normals(domain: DomainSpec, x) -> np.ndarray:
    """Outward unit normals of the domain boundary at boundary points ``x``."""
    x = np.atleast_2d(x)
    d = x - domain.c
    if domain.shape == "ball":
        n = d
    elif domain.shape == "ellipsoid":
        n = d / np.asarray(domain.semi_axes) ** 2
    else:
        h = 1e-6 * domain.radius
        n = np.stack([(domain.signed_distance(x + h * e) - domain.signed_distance(x - h * e)) / (2 * h)
                      for e in np.eye(3)], 1)
    return n / np.linalg.norm(n, axis=1)[:, None]


def boundary_correction(candidate: PointSourcePotential, boundary: BoundarySampleSet,
                        domain=None, extension="constant", **kwargs) -> PointSourcePotential:
    """``candidate - h`` with ``d(candidate - h)/dn`` zero on sealed samples.

    ``result.info["tol_seal"]`` is the largest remaining sealed-boundary
    normal derivative.
    """
    corr = BoundaryCorrector(domain=domain, extension=extension, **kwargs).fit(boundary)
    return corr.transform(candidate)


# -- cohomology -----------------------------------------------------------------------------

def cohomology_basis(domain: DomainSpec) -> list:
    """Curl-free boundary-tangent fields spanning the harmonic vector fields.

    Every supported shape is simply connected, so the basis is empty.
    """
    if not isinstance(domain, DomainSpec):
        raise ParameterError("domain must be a DomainSpec")
    return []


def gram_matrix(basis, points, weights, t=0.0) -> np.ndarray:
    """``G[i, j] = integral Q_i . Q_j`` by the given volume quadrature."""
    vals = [np.asarray(q(t, points), float) for q in basis]
    n = len(vals)
    G = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            G[i, j] = G[j, i] = np.sum(weights * np.einsum("ij,ij->i", vals[i], vals[j]))
    return G


def check_cohomology_basis(basis, points, weights, rtol=1e-10) -> np.ndarray:
    """Return the Gram matrix of a user basis, rejecting singular ones."""
    if not basis:
        return np.zeros((0, 0))
    G = gram_matrix(basis, points, weights)
    ev = np.linalg.eigvalsh(G)
    if ev.max() <= 0 or ev.min() <= rtol * ev.max():
        raise BasisError(f"cohomology basis Gram matrix is singular (eigenvalues {ev})")
    return G


def solid_volume_quadrature(domain: DomainSpec, spacing: float):
    """Midpoint lattice quadrature over the domain: points and weights."""
    pts = domain.interior_lattice(spacing)
    return pts, np.full(len(pts), spacing ** 3)
