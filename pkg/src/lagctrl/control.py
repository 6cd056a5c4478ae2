"""Divergence-free isotopies, time sampling and the potential control.

The isotopy fields are ``X = curl(chi * A) = chi * curl A + grad chi x A``
with an analytic vector potential ``A`` and a smooth cutoff ``chi`` that
equals one on a ball following the moving surface and vanishes away from
it, so ``div X = 0`` holds identically.  The control is the time-blended
potential ``theta(t, x) = sum_i chi_i(t) psi_i(x)``.
"""

import logging
import math
from functools import lru_cache
import time as _time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.integrate import quad
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_positive, check_vector
from .exceptions import (GeometryError, ParameterError, RefinementOverflowError,
                         ValidationError)
from .fields import VelocityField, as_points
from .geometry.domain import DomainSpec
from .geometry.flow import advect_surface
from .geometry.mesh import TriangulatedSurface, surface_flux
from .geometry.samples import SEALED, BoundarySampleSet
from .harmonic import (BoundaryCorrector, HarmonicApproximator, NeumannSolver,
                       PointSourcePotential, SmallRegionFactor, fibonacci_sphere, place_poles, smoothstep)

logger = logging.getLogger(__name__)


# -- smooth profiles ------------------------------------------------------------------

def bump(s):
    """``exp(-1 / (1 - s^2))`` on (-1, 1), zero elsewhere."""
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    out[m] = np.exp(-1.0 / (1.0 - s[m] ** 2))
    return out


def bump_derivative(s):
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    q = 1.0 - s[m] ** 2
    out[m] = np.exp(-1.0 / q) * (-2.0 * s[m] / q ** 2)
    return out


def smoothstep_derivative(s):
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    m = (s > 0) & (s < 1)
    a = np.exp(-1.0 / s[m])
    b = np.exp(-1.0 / (1.0 - s[m]))
    out[m] = a * b * (1.0 / s[m] ** 2 + 1.0 / (1.0 - s[m]) ** 2) / (a + b) ** 2
    return out


_BUMP_MASS = quad(lambda t: float(bump(2.0 * t - 1.0)), 0.0, 1.0, epsabs=0.0, epsrel=1e-12,
                  limit=200)[0]


def speed_profile(t):
    """Normalized bump on (0, 1) with unit integral."""
    return bump(2.0 * np.asarray(t, float) - 1.0) / _BUMP_MASS


@lru_cache(maxsize=65536)
def speed_integral(t) -> float:
    """``S(t) = int_0^t s``, from 0 at t <= 0 to 1 at t >= 1."""
    t = float(t)
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return quad(lambda u: float(speed_profile(u)), 0.0, t, epsabs=0.0, epsrel=1e-12,
                limit=200)[0]


# -- isotopy fields -------------------------------------------------------------------

class DivFreeIsotopyField(VelocityField):
    """``X = curl(chi A)`` for a body moving rigidly with axis-aligned stretch.

    On the region where ``chi = 1`` the velocity is
    ``X = c'(t) + a(t) * (x - c(t))`` (componentwise stretch rates ``a``
    with zero sum), realized by the vector potential
    ``A = 0.5 c' x (x - c) + (0, a3 y1 y3, -a2 y1 y2)``, ``y = x - c``.
    The cutoff equals one on the ball of radius ``r(t) + tube_radius / 2``
    around the body center and vanishes beyond ``r(t) + tube_radius``.

    Subclasses provide ``center(t)``, ``center_velocity(t)``,
    ``log_scales(t)`` and ``stretch_rates(t)``.
    """

    def __init__(self, center0, body_radius, tube_radius, domain: Optional[DomainSpec] = None):
        self.center0 = check_vector(center0, "center0")
        self.body_radius = float(check_positive(body_radius, "body_radius"))
        self.tube_radius = float(check_positive(tube_radius, "tube_radius"))
        self.domain = domain

    # motion description
    def center(self, t):
        raise NotImplementedError

    def center_velocity(self, t):
        raise NotImplementedError

    def log_scales(self, t):
        return np.zeros(3)

    def stretch_rates(self, t):
        return np.zeros(3)

    @property
    def is_zero(self) -> bool:
        return False

    def radius(self, t) -> float:
        """Radius of the ball around ``center(t)`` enclosing the body."""
        return self.body_radius * float(np.exp(np.max(self.log_scales(t))))

    def body_map(self, t, x0):
        """Image at time ``t`` of reference points on the cutoff plateau."""
        x0 = as_points(x0)
        return self.center(t) + np.exp(self.log_scales(t)) * (x0 - self.center0)

    # cutoff
    def cutoff(self, t, x):
        y = as_points(x) - self.center(t)
        r = np.linalg.norm(y, axis=1)
        half = 0.5 * self.tube_radius
        return 1.0 - smoothstep((r - self.radius(t) - half) / half)

    def cutoff_gradient(self, t, x):
        y = as_points(x) - self.center(t)
        r = np.linalg.norm(y, axis=1)
        half = 0.5 * self.tube_radius
        g = -smoothstep_derivative((r - self.radius(t) - half) / half) / half
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[:, None] > 0, y / r[:, None], 0.0)
        return g[:, None] * unit

    def vector_potential(self, t, x):
        y = as_points(x) - self.center(t)
        cv = self.center_velocity(t)
        a = self.stretch_rates(t)
        A = 0.5 * np.cross(cv, y)
        A[:, 1] += a[2] * y[:, 0] * y[:, 2]
        A[:, 2] -= a[1] * y[:, 0] * y[:, 1]
        return A

    def plateau_velocity(self, t, x):
        """``curl A``: the velocity where the cutoff equals one."""
        y = as_points(x) - self.center(t)
        return self.center_velocity(t) + self.stretch_rates(t) * y

    def __call__(self, t, x):
        x = as_points(x)
        if self.is_zero or t <= 0.0 or t >= 1.0:
            return np.zeros_like(x)
        chi = self.cutoff(t, x)
        out = chi[:, None] * self.plateau_velocity(t, x)
        out += np.cross(self.cutoff_gradient(t, x), self.vector_potential(t, x))
        return out

    def check_clearance(self, n_times=201):
        """Raise ``GeometryError`` if the cutoff support leaves the domain."""
        if self.domain is None or self.is_zero:
            return
        dirs = fibonacci_sphere(400)
        for t in np.linspace(0.0, 1.0, n_times):
            pts = self.center(t) + (self.radius(t) + self.tube_radius) * dirs
            sd = self.domain.signed_distance(pts)
            if sd.max() >= 0:
                raise GeometryError(
                    f"tube around the moving surface exits the domain at t={t:.4f} "
                    f"(overshoot {sd.max():.3g})", time=float(t))

    def min_clearance(self, n_times=201) -> float:
        """Smallest distance between the swept body ball and the boundary."""
        dirs = fibonacci_sphere(400)
        best = np.inf
        for t in np.linspace(0.0, 1.0, n_times):
            pts = self.center(t) + self.radius(t) * dirs
            best = min(best, float(-self.domain.signed_distance(pts).max()))
        return best


class TranslationIsotopy(DivFreeIsotopyField):
    """Rigid translation by ``displacement`` with speed profile ``s(t)``."""

    def __init__(self, center0, body_radius, displacement, tube_radius, domain=None):
        super().__init__(center0, body_radius, tube_radius, domain)
        self.displacement = check_vector(displacement, "displacement")

    @property
    def is_zero(self):
        return not np.any(self.displacement)

    def center(self, t):
        return self.center0 + speed_integral(t) * self.displacement

    def center_velocity(self, t):
        return float(speed_profile(t)) * self.displacement


class CompositeIsotopy(DivFreeIsotopyField):
    """Piecewise motion through waypoints of displacement and stretch.

    Parameters
    ----------
    waypoints : list of (time, displacement, scales)
        Cumulative displacement of the body center and cumulative
        axis-aligned scale factors (product one) reached at ``time``.
        A rest waypoint ``(0, 0, (1, 1, 1))`` is prepended when missing.
        Between waypoints both are interpolated with a C-infinity step in
        time (log-linear for the scales), so the motion starts and stops
        smoothly at each waypoint.
    """

    def __init__(self, center0, body_radius, waypoints, tube_radius, domain=None):
        super().__init__(center0, body_radius, tube_radius, domain)
        times, disp, logs = [], [], []
        for t, d, s in waypoints:
            s = check_vector(s, "scales")
            if np.any(s <= 0):
                raise ValidationError("scale factors must be positive")
            if abs(np.prod(s) - 1.0) > 1e-9:
                raise ValidationError(
                    f"scales {tuple(s)} change the enclosed volume by a factor {np.prod(s):.6g}; "
                    "the initial and final surfaces must enclose the same volume")
            times.append(float(t))
            disp.append(check_vector(d, "displacement"))
            logs.append(np.log(s))
        if not times or times[0] > 0.0:
            times.insert(0, 0.0)
            disp.insert(0, np.zeros(3))
            logs.insert(0, np.zeros(3))
        times = np.asarray(times)
        if np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > 1:
            raise ParameterError("waypoint times must increase within [0, 1]")
        if np.any(disp[0]) or np.any(logs[0]):
            raise ParameterError("the waypoint at time 0 must be the rest state")
        if times[-1] >= 1.0:
            raise ParameterError("the last waypoint must be reached before t = 1")
        self.times = times
        self.disp = np.asarray(disp)
        self.logs = np.asarray(logs)

    @property
    def is_zero(self):
        return not (np.any(self.disp) or np.any(self.logs))

    def _segment(self, t):
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if k < 0 or k >= len(self.times) - 1:
            return None
        t0, t1 = self.times[k], self.times[k + 1]
        return k, (t - t0) / (t1 - t0), 1.0 / (t1 - t0)

    def _interp(self, t, arr):
        seg = self._segment(t)
        if seg is None:
            return arr[0] if t < self.times[0] else arr[-1]
        k, u, _ = seg
        g = float(smoothstep(u))
        return arr[k] + g * (arr[k + 1] - arr[k])

    def _rate(self, t, arr):
        seg = self._segment(t)
        if seg is None:
            return np.zeros(3)
        k, u, inv = seg
        return float(smoothstep_derivative(u)) * inv * (arr[k + 1] - arr[k])

    def center(self, t):
        return self.center0 + self._interp(t, self.disp)

    def center_velocity(self, t):
        return self._rate(t, self.disp)

    def log_scales(self, t):
        return self._interp(t, self.logs)

    def stretch_rates(self, t):
        return self._rate(t, self.logs)

    def radius(self, t):
        return self.body_radius * float(np.exp(np.max(self._interp_max_logs(t))))

    def _interp_max_logs(self, t):
        # the enclosing radius must bound every intermediate scale, which the
        # log-linear interpolation keeps between waypoint values
        return np.maximum(self.log_scales(t), 0.0)


def _body_ball(gamma0: TriangulatedSurface):
    c = gamma0.vertices.mean(axis=0)
    return c, float(np.linalg.norm(gamma0.vertices - c, axis=1).max())


def build_translation_isotopy(gamma0: TriangulatedSurface, displacement, domain: DomainSpec,
                              tube_radius: float) -> TranslationIsotopy:
    """Isotopy translating ``gamma0`` by ``displacement`` over t in [0, 1]."""
    c, r = _body_ball(gamma0)
    X = TranslationIsotopy(c, r, displacement, tube_radius, domain)
    X.check_clearance()
    return X


def build_composite_isotopy(gamma0: TriangulatedSurface, waypoints, domain: DomainSpec,
                            tube_radius: float) -> CompositeIsotopy:
    """Isotopy through waypoints ``(time, displacement, scales)``."""
    c, r = _body_ball(gamma0)
    X = CompositeIsotopy(c, r, waypoints, tube_radius, domain)
    X.check_clearance()
    return X


# -- time sampling -------------------------------------------------------------------

@dataclass
class Schedule:
    times: np.ndarray
    surfaces: List[TriangulatedSurface]


def sample_schedule(X, gamma0: TriangulatedSurface, variation_tol: float, diameter=None,
                    steps_per_unit: int = 400, initial_intervals: int = 4,
                    max_snapshots: int = 10_000) -> Schedule:
    """Snapshot times with bounded surface motion between neighbours.

    Starting from ``initial_intervals`` equal intervals, an interval is
    bisected while the largest vertex displacement between the surfaces at
    its ends exceeds ``variation_tol * diameter`` (``diameter`` defaults to
    the domain diameter of ``X``).  Surfaces are advected on demand with
    RK4 at ``steps_per_unit`` steps per unit time.
    """
    check_positive(variation_tol, "variation_tol")
    if diameter is None:
        diameter = X.domain.diameter if getattr(X, "domain", None) is not None else gamma0.bbox_diagonal()
    if getattr(X, "is_zero", False):
        return Schedule(np.array([0.0]), [gamma0])
    limit = variation_tol * diameter
    cache = {0.0: gamma0}

    def surface_at(t, t_from):
        if t not in cache:
            n = max(1, int(math.ceil(steps_per_unit * (t - t_from) - 1e-9)))
            cache[t] = advect_surface(cache[t_from], X, t_from, t, n)
        return cache[t]

    grid = np.linspace(0.0, 1.0, initial_intervals + 1)
    for a, b in zip(grid[:-1], grid[1:]):
        surface_at(float(b), float(a))
    moved = max(np.abs(cache[float(b)].vertices - gamma0.vertices).max() for b in grid[1:])
    if moved == 0.0:
        return Schedule(np.array([0.0]), [gamma0])
    stack = [(float(a), float(b)) for a, b in zip(grid[:-1], grid[1:])][::-1]
    times = [0.0]
    while stack:
        a, b = stack.pop()
        disp = np.linalg.norm(cache[b].vertices - cache[a].vertices, axis=1).max()
        if disp > limit:
            m = 0.5 * (a + b)
            surface_at(m, a)
            # advect the right half from the midpoint as well, so every cached
            # surface descends from its left neighbour
            stack.append((m, b))
            stack.append((a, m))
        else:
            times.append(b)
        if len(times) + len(stack) > max_snapshots:
            raise RefinementOverflowError(
                f"more than {max_snapshots} snapshots needed for variation_tol={variation_tol}")
    times = np.array(sorted(times))
    return Schedule(times, [cache[t] for t in times])


class TimePartition:
    """Smooth partition of unity on [0, 1] from normalized bumps."""

    def __init__(self, times, half_widths):
        self.times = np.asarray(times, float).reshape(-1)
        self.half_widths = np.asarray(half_widths, float).reshape(-1)
        if self.times.shape != self.half_widths.shape or self.times.size == 0:
            raise ParameterError("one half-width per time required")
        if np.any(self.half_widths <= 0):
            raise ParameterError("half-widths must be positive")
        self._check_coverage()

    def _check_coverage(self):
        lo = self.times - self.half_widths
        hi = self.times + self.half_widths
        order = np.argsort(lo)
        if lo[order[0]] >= 0.0:
            raise ParameterError("time 0.0 is not covered by any interval")
        reach = -np.inf
        for i in order:
            if reach > -np.inf and lo[i] >= reach and reach < 1.0:
                raise ParameterError(f"time {reach:.6g} is not covered by any interval")
            reach = max(reach, hi[i])
        if reach <= 1.0:
            raise ParameterError(f"time {reach:.6g} is not covered by any interval")

    def __len__(self):
        return len(self.times)

    def raw(self, t):
        return bump((t - self.times) / self.half_widths)

    def __call__(self, t) -> np.ndarray:
        """Weights ``chi_i(t)``; they sum to one for t in [0, 1]."""
        b = self.raw(float(t))
        total = b.sum()
        if total == 0.0:
            return b
        return b / total

    def derivative(self, t) -> np.ndarray:
        t = float(t)
        b = self.raw(t)
        db = bump_derivative((t - self.times) / self.half_widths) / self.half_widths
        total = b.sum()
        if total == 0.0:
            return np.zeros_like(b)
        return (db * total - b * db.sum()) / total ** 2


def time_partition(times, half_widths) -> TimePartition:
    """Bump weights ``chi_i`` supported in ``(t_i - d_i, t_i + d_i)``."""
    return TimePartition(times, half_widths)


def default_half_widths(times) -> np.ndarray:
    """Half-width of each bump = largest gap to a neighbouring time."""
    times = np.asarray(times, float)
    if len(times) == 1:
        return np.array([1.5])
    gaps = np.diff(times)
    left = np.r_[gaps[0], gaps]
    right = np.r_[gaps, gaps[-1]]
    return np.maximum(left, right) * (1.0 + 1e-9)


# -- the control ----------------------------------------------------------------------

class TimePartitionedControl:
    """``theta(t, x) = sum_i chi_i(t) psi_i(x)`` on t in [0, 1].

    The snapshot potentials usually share their poles, so they are stored
    as one weight matrix over the union of poles and ``theta(t)`` is a
    single point-source potential.
    """

    def __init__(self, partition: TimePartition, potentials, report=None):
        if len(potentials) != len(partition):
            raise ParameterError("one potential per snapshot required")
        self.partition = partition
        self.potentials = list(potentials)
        self.report = list(report or [])
        allp = [p.poles for p in self.potentials if p.n_poles]
        if allp:
            union, inv = np.unique(np.vstack(allp), axis=0, return_inverse=True)
        else:
            union, inv = np.zeros((0, 3)), np.zeros(0, int)
        inv = np.asarray(inv).reshape(-1)
        W = np.zeros((len(self.potentials), len(union)))
        k = 0
        for i, p in enumerate(self.potentials):
            np.add.at(W[i], inv[k:k + p.n_poles], p.weights)
            k += p.n_poles
        self._poles = union
        self._W = W
        self._const = np.array([p.constant for p in self.potentials])
        self._lin = np.array([p.linear for p in self.potentials]).reshape(-1, 3)

    @property
    def times(self):
        return self.partition.times

    def _combine(self, c) -> PointSourcePotential:
        return PointSourcePotential(self._poles, c @ self._W, float(c @ self._const), c @ self._lin)

    def potential_at(self, t) -> PointSourcePotential:
        """``theta(t, .)`` as one potential (zero outside [0, 1])."""
        if t < 0.0 or t > 1.0:
            return PointSourcePotential.zero()
        return self._combine(self.partition(t))

    def theta(self, t, x):
        return self.potential_at(t).value(as_points(x))

    def dtheta_dt(self, t, x):
        x = as_points(x)
        if t < 0.0 or t > 1.0:
            return np.zeros(len(x))
        return self._combine(self.partition.derivative(t)).value(x)

    def velocity(self, t, x):
        return self.potential_at(t).gradient(as_points(x))

    def velocity_gradient(self, t, x):
        return self.potential_at(t).hessian(as_points(x))

    def velocity_and_gradient(self, t, x):
        return self.potential_at(t).gradient_and_hessian(as_points(x))

    def field(self) -> "ControlField":
        return ControlField(self)

    def all_poles(self) -> np.ndarray:
        return self._poles

    def to_dict(self) -> dict:
        return {"times": self.partition.times.tolist(),
                "half_widths": self.partition.half_widths.tolist(),
                "potentials": [p.to_dict() for p in self.potentials],
                "report": [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in self.report]}

    @classmethod
    def from_dict(cls, d):
        part = TimePartition(d["times"], d["half_widths"])
        return cls(part, [PointSourcePotential.from_dict(p) for p in d["potentials"]], d.get("report", []))


class ControlField(VelocityField):
    """``grad_x theta`` as a velocity field."""

    def __init__(self, control: TimePartitionedControl):
        self.control = control

    def __call__(self, t, x):
        return self.control.velocity(t, x)

    def gradient(self, t, x):
        return self.control.velocity_gradient(t, x)

    def value_and_gradient(self, t, x):
        return self.control.velocity_and_gradient(t, x)

    def singularities(self):
        return self.control.all_poles()


def evaluate_control(theta: TimePartitionedControl, t: float, x) -> np.ndarray:
    """``grad_x theta(t, x)``; zero outside [0, 1]."""
    return theta.velocity(t, x)


# -- synthesis --------------------------------------------------------------------------

# larger exterior pole sets fit the matching data better but the Runge
# weights grow until the sealed-boundary correction amplifies them
MAX_DEFAULT_POLES = 600


@dataclass
class SynthesisConfig:
    """Numerical settings for :func:`synthesize_control`.

    Lengths are in domain units; ``None`` entries are resolved from the
    geometry (see :meth:`resolve`).
    """

    variation_tol: float = 0.02
    schedule_steps_per_unit: int = 400
    gamma_pole_offset: Optional[float] = None
    gamma_pole_count: Optional[int] = None
    eta: Optional[float] = None
    approx_pole_offset: Optional[float] = None
    approx_pole_count: Optional[int] = None
    cap_pole_offset: Optional[float] = None
    cap_pole_count: int = 0
    smallness_weight: float = 10.0
    small_layers: int = 2
    match_layers: int = 3
    correction_pole_offset: Optional[float] = None
    correction_pole_count: Optional[int] = None
    extension: str = "continuation"
    rcond: float = 1e-12

    def resolve(self, gamma0: TriangulatedSurface, domain: DomainSpec, X=None) -> "SynthesisConfig":
        out = SynthesisConfig(**self.__dict__)
        _, r = _body_ball(gamma0)
        n_bdry = len(domain.boundary_samples())
        if out.gamma_pole_offset is None:
            out.gamma_pole_offset = 0.5 * r
        if out.gamma_pole_count is None:
            out.gamma_pole_count = max(4, gamma0.n_faces // 3)
        if out.eta is None:
            clearance = X.min_clearance() if X is not None and not X.is_zero else _static_clearance(gamma0, domain)
            out.eta = 0.5 * clearance
        if out.approx_pole_offset is None:
            out.approx_pole_offset = 0.5 * domain.feature_size()
        if out.approx_pole_count is None:
            out.approx_pole_count = max(4, min(MAX_DEFAULT_POLES, n_bdry // 3))
        if out.cap_pole_offset is None:
            out.cap_pole_offset = out.eta
        if out.correction_pole_offset is None:
            out.correction_pole_offset = 0.5 * domain.feature_size()
        if out.correction_pole_count is None:
            out.correction_pole_count = max(4, min(MAX_DEFAULT_POLES, n_bdry // 3))
        return out

    def to_dict(self):
        return dict(self.__dict__)


def _static_clearance(gamma0, domain):
    return float(-domain.signed_distance(gamma0.vertices).max())


def approximation_poles(domain: DomainSpec, cfg: SynthesisConfig) -> np.ndarray:
    """Poles for the Runge step: a layer outside the whole boundary plus an
    optional denser layer just outside the control patch."""
    poles = [place_poles(domain, "outside", cfg.approx_pole_offset, cfg.approx_pole_count)]
    if cfg.cap_pole_count:
        surf = domain.boundary_mesh(level=max(domain.boundary_level, 5))
        from .harmonic import _surface_points_normals
        # oversample, keep the points over the patch
        frac = 0.5 * (1.0 - domain.cap_cos)
        pts, nrm = _surface_points_normals(surf, int(np.ceil(cfg.cap_pole_count / frac)))
        keep = domain.in_control_patch(pts)
        poles.append(pts[keep] + cfg.cap_pole_offset * nrm[keep])
    return np.vstack(poles)


def match_probes(surface: TriangulatedSurface, eta: float, layers: int = 3) -> np.ndarray:
    """Probe points filling the eta/2 neighbourhood of the enclosed region."""
    v = surface.vertices
    n = surface.vertex_normals()
    c = v.mean(axis=0)
    out = [v + 0.5 * eta * n, v]
    for k in range(1, max(layers, 2) - 1):
        out.append(c + (v - c) * (1.0 - k / (layers - 1)))
    out.append(c[None])
    return np.vstack(out)


def small_probes(boundary: BoundarySampleSet, eta: float, layers: int = 2) -> np.ndarray:
    """Probe points in the eta/2 neighbourhood of the sealed boundary."""
    s = boundary.mask(SEALED)
    p, n = boundary.points[s], boundary.normals[s]
    offsets = np.linspace(-0.5 * eta, 0.5 * eta, max(layers, 1)) if layers > 1 else np.array([0.0])
    return np.vstack([p + o * n for o in offsets])


@dataclass
class SnapshotReport:
    time: float
    neumann_residual: float
    approx_residual: float
    seal_residual: float
    pole_count: int
    condition_number: float
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"time": self.time, "neumann_residual": self.neumann_residual,
             "approx_residual": self.approx_residual, "seal_residual": self.seal_residual,
             "pole_count": self.pole_count, "condition_number": self.condition_number}
        d.update(self.extra)
        return d


class ControlSynthesizer(BaseEstimator):
    """Estimator wrapper: ``fit(X, gamma0)`` builds ``control_``.

    Parameters
    ----------
    domain : DomainSpec
    config : SynthesisConfig, optional
    """

    def __init__(self, domain=None, config=None):
        self.domain = domain
        self.config = config

    def fit(self, X, gamma0: TriangulatedSurface):
        if self.domain is None:
            raise ParameterError("ControlSynthesizer needs a domain")
        cfg = (self.config or SynthesisConfig()).resolve(gamma0, self.domain, X)
        self.config_ = cfg
        t0 = _time.perf_counter()
        schedule = sample_schedule(X, gamma0, cfg.variation_tol, diameter=self.domain.diameter,
                                   steps_per_unit=cfg.schedule_steps_per_unit)
        self.schedule_ = schedule
        boundary = self.domain.boundary_samples()
        self.boundary_ = boundary
        corrector = BoundaryCorrector(domain=self.domain, extension=cfg.extension,
                                      pole_offset=cfg.correction_pole_offset,
                                      n_poles=cfg.correction_pole_count, rcond=cfg.rcond)
        corrector.fit(boundary)
        poles = approximation_poles(self.domain, cfg)
        small = small_probes(boundary, cfg.eta, cfg.small_layers)
        factor = SmallRegionFactor(poles, small, cfg.smallness_weight)
        potentials, reports = [], []
        neumann = None
        for i, (t, surf) in enumerate(zip(schedule.times, schedule.surfaces)):
            try:
                psi, rep = self._snapshot(X, t, surf, cfg, poles, factor, corrector)
            except Exception as exc:  # keep the snapshot index on the way out
                exc.args = (f"snapshot {i} (t={t:.4f}): {exc.args[0] if exc.args else exc}",) + exc.args[1:]
                raise
            potentials.append(psi)
            reports.append(rep)
        # realized variation of the control potential between neighbours
        for i in range(len(potentials) - 1):
            probes = match_probes(schedule.surfaces[i], cfg.eta, 2)
            dv = np.linalg.norm(potentials[i + 1].gradient(probes) - potentials[i].gradient(probes), axis=1)
            reports[i].extra["gradient_variation_to_next"] = float(dv.max())
        half = default_half_widths(schedule.times)
        partition = time_partition(schedule.times, half)
        self.control_ = TimePartitionedControl(partition, potentials, reports)
        self.elapsed_ = _time.perf_counter() - t0
        return self

    def _snapshot(self, X, t, surf, cfg, poles, factor, corrector):
        samples = BoundarySampleSet.from_surface(surf)
        flux = np.einsum("ij,ij->i", X(t, samples.points), samples.normals)
        scale = np.abs(flux).max()
        if scale == 0.0:
            zero = PointSourcePotential.zero()
            zero.info = {"tol_seal": 0.0}
            return zero, SnapshotReport(float(t), 0.0, 0.0, 0.0, 0, 1.0)
        solver = NeumannSolver(pole_offset=cfg.gamma_pole_offset, n_poles=cfg.gamma_pole_count,
                               rcond=cfg.rcond, compat_tol=1e-6)
        psi = solver.fit(samples, flux, surface=surf).potential_
        match = match_probes(surf, cfg.eta, cfg.match_layers)
        approx = HarmonicApproximator(poles=poles, smallness_weight=cfg.smallness_weight,
                                      rcond=cfg.rcond, small_factor=factor).fit(psi, match)
        psi_hat = approx.potential_
        psi_check = corrector.transform(psi_hat)
        # error of the corrected potential against the Neumann solution
        err = np.linalg.norm(psi_check.gradient(match) - psi.gradient(match), axis=1)
        gnorm = np.sqrt(np.mean(np.sum(psi.gradient(match) ** 2, 1)))
        info = psi_check.info
        info.pop("h", None)
        rep = SnapshotReport(
            float(t), float(psi.info["relative_residual"]),
            float(approx.report_.relative_residual), float(info["tol_seal"]),
            int(psi_check.n_poles), float(approx.report_.effective_condition),
            {"corrected_match_error": float(np.sqrt(np.mean(err ** 2)) / gnorm),
             "corrected_match_max": float(err.max() / gnorm),
             "small_residual": float(approx.report_.extra["small_residual"]),
             "neumann_condition": float(psi.info["effective_condition"]),
             "correction_condition": float(info["h_condition_number"]),
             "d_ratio": float(info["d_ratio"])})
        return psi_check, rep


def synthesize_control(X, gamma0: TriangulatedSurface, domain: DomainSpec,
                       config: Optional[SynthesisConfig] = None) -> TimePartitionedControl:
    """Potential control whose gradient approximately transports ``gamma0``
    along the isotopy ``X`` while keeping zero normal velocity on the sealed
    boundary.  ``result.report`` lists per-snapshot residuals."""
    return ControlSynthesizer(domain, config).fit(X, gamma0).control_
