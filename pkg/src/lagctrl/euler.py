"""Controlled Euler flows by a vorticity fixed point.

Given a reference potential flow ``ybar`` and small initial data ``u0``, the
map ``F`` extends a candidate field to a large ball, transports the
vorticity of ``u0`` along it (Cauchy formula on a marker cloud), rebuilds a
divergence-free velocity with that curl and the prescribed normal trace, and
returns it.  A fixed point of ``F`` solves the Euler equations in the domain.

Velocities are represented as ``ybar + W`` where ``W`` is stored on a set of
time frames; each frame is a regularized Biot-Savart sum plus the gradient
of a point-source potential fixing the normal trace.
"""

import logging
import time as _time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ._validation import check_positive
from .control import smoothstep_derivative, speed_integral
from .exceptions import (BallViolationError, BlowUpError, GeometryError,
                         NonConvergenceError, ParameterError)
from .fields import FD_STEP, VelocityField, ZeroField, as_points, fd_gradient, skew
from .geometry.domain import DomainSpec
from .geometry.samples import BoundarySampleSet
from .harmonic import (NeumannSolver, PointSourcePotential, check_cohomology_basis,
                       smoothstep, solid_volume_quadrature)

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
CHUNK_PAIRS = 65_536


_LEVI = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI[_i, _j, _k], _LEVI[_i, _k, _j] = 1.0, -1.0
_LEVI_NEG = -_LEVI  # skew(a)_{ab} = -eps_{abc} a_c


def _sqdist(x, y):
    g = x @ (-2.0 * y.T)
    g += np.einsum("ij,ij->i", x, x)[:, None]
    g += np.einsum("ij,ij->i", y, y)[None, :]
    return np.maximum(g, 0.0, out=g)


def _chunks(n, m):
    step = max(1, CHUNK_PAIRS // max(m, 1))
    for i in range(0, n, step):
        yield slice(i, min(n, i + step))


# -- cutoffs ------------------------------------------------------------------------

class TimeCutoff:
    """Smooth ``mu`` with ``mu = 1`` on [0, delta/4] and ``mu = 0`` from ``delta`` on.

    The decay is one minus the normalized integral of the standard bump.
    """

    def __init__(self, delta: float = 0.1):
        if not 0.0 < delta < 1.0:
            raise ParameterError(f"delta must lie in (0, 1), got {delta}")
        self.delta = float(delta)

    def __call__(self, t) -> float:
        a = 0.25 * self.delta
        if t <= a:
            return 1.0
        if t >= self.delta:
            return 0.0
        return 1.0 - speed_integral((t - a) / (self.delta - a))


class SpatialCutoff:
    """``zeta(x) = 1 - smoothstep(d(x) / width)`` with ``d`` the signed
    distance to the domain boundary: one on the closed domain, zero beyond
    ``width`` outside it."""

    def __init__(self, domain: DomainSpec, width: float):
        check_positive(width, "cutoff width")
        self.domain = domain
        self.width = float(width)

    def __call__(self, x) -> np.ndarray:
        return 1.0 - smoothstep(self.domain.signed_distance(x) / self.width)

    def gradient(self, x) -> np.ndarray:
        x = as_points(x)
        d = self.domain.signed_distance(x)
        ds = smoothstep_derivative(d / self.width) / self.width
        out = np.zeros_like(x)
        m = ds != 0.0
        if np.any(m):
            out[m] = -ds[m, None] * self._distance_gradient(x[m])
        return out

    def _distance_gradient(self, x):
        if self.domain.shape == "ball":
            d = x - self.domain.c
            return d / np.linalg.norm(d, axis=1)[:, None]
        h = FD_STEP
        cols = [(self.domain.signed_distance(x + h * e) - self.domain.signed_distance(x - h * e)) / (2 * h)
                for e in np.eye(3)]
        return np.stack(cols, axis=1)


# -- lattice fields -------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Regular grid of ``shape`` nodes starting at ``origin`` with step ``spacing``."""

    origin: np.ndarray
    spacing: float
    shape: tuple

    @classmethod
    def covering(cls, center, radius, spacing):
        """Cube lattice with nodes symmetric about ``center`` covering the ball."""
        n = int(np.ceil(radius / spacing))
        c = np.asarray(center, float).reshape(3)
        return cls(c - n * spacing, float(spacing), (2 * n + 1,) * 3)

    def axes(self):
        return [self.origin[i] + self.spacing * np.arange(self.shape[i]) for i in range(3)]

    def points(self) -> np.ndarray:
        g = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(g, -1).reshape(-1, 3)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class LatticeField(VelocityField):
    """Trilinear interpolation of steady lattice samples (nx, ny, nz, 3)."""

    def __init__(self, lattice: Lattice, values):
        values = np.asarray(values, float)
        if values.shape != tuple(lattice.shape) + (3,):
            raise ParameterError(f"lattice values must have shape {tuple(lattice.shape) + (3,)}")
        self.lattice = lattice
        self.values = values
        self._interp = RegularGridInterpolator(lattice.axes(), values, bounds_error=False,
                                               fill_value=None)

    @classmethod
    def from_field(cls, u, lattice: Lattice, t=0.0):
        return cls(lattice, u(t, lattice.points()).reshape(tuple(lattice.shape) + (3,)))

    def __call__(self, t, x):
        return self._interp(as_points(x))


# -- extension to a ball --------------------------------------------------------------

class ExtendedField(VelocityField):
    """``utilde = zeta * (continuation of u)`` on the ball ``B_R``.

    ``mode="closed_form"`` evaluates ``u`` itself outside the domain (source
    sums and curls are globally defined); ``mode="reflection"`` uses
    ``u(x*)`` with ``x*`` the mirror image of ``x`` across the boundary,
    for fields only known inside.  On the closed domain ``utilde = u``.
    """

    def __init__(self, u, domain: DomainSpec, R: float, margin: Optional[float] = None,
                 width: Optional[float] = None, mode: str = "auto"):
        if mode == "auto":
            mode = "reflection" if isinstance(u, LatticeField) else "closed_form"
        if mode not in ("closed_form", "reflection"):
            raise ParameterError(f"unknown extension mode {mode!r}")
        self.u, self.domain, self.mode = u, domain, mode
        self.R = float(R)
        self.margin = 0.05 * self.R if margin is None else float(margin)
        extent = domain.extent_radius() + np.linalg.norm(domain.c)
        room = self.R - self.margin - extent
        if room <= 0.0:
            raise GeometryError(
                f"ball radius {self.R:g} too small: the domain reaches {extent:g} and the cutoff "
                f"needs margin {self.margin:g}")
        w = room if width is None else min(float(width), room)
        if mode == "closed_form":
            sing = u.singularities() if hasattr(u, "singularities") else np.zeros((0, 3))
            if len(sing):
                gap = float(domain.signed_distance(sing).min())
                if gap <= 0.0:
                    raise GeometryError("field has singularities inside the domain; cannot extend")
                w = min(w, 0.5 * gap)
        self.cutoff = SpatialCutoff(domain, w)

    @property
    def width(self) -> float:
        return self.cutoff.width

    def singularities(self):
        return np.zeros((0, 3))

    def _reflect(self, x):
        d = x - self.domain.c
        rho = np.linalg.norm(d, axis=1)
        dirs = d / np.where(rho > 0, rho, 1.0)[:, None]
        rb = self.domain.radial_function(dirs)
        rr = np.where(rho > rb, 2.0 * rb - rho, rho)
        return self.domain.c + dirs * np.maximum(rr, 0.0)[:, None]

    def _inner(self, t, x):
        if self.mode == "reflection":
            return self.u(t, self._reflect(x))
        return self.u(t, x)

    def __call__(self, t, x):
        x = as_points(x)
        z = self.cutoff(x)
        out = np.zeros_like(x)
        m = z > 0.0
        if np.any(m):
            out[m] = z[m, None] * self._inner(t, x[m])
        return out

    def value_and_gradient(self, t, x):
        x = as_points(x)
        z = self.cutoff(x)
        val = np.zeros_like(x)
        jac = np.zeros((len(x), 3, 3))
        m = z > 0.0
        if not np.any(m):
            return val, jac
        xm = x[m]
        if self.mode == "reflection":
            v = self._inner(t, xm)
            g = fd_gradient(self._inner, t, xm)
        else:
            v, g = self.u.value_and_gradient(t, xm)
        gz = self.cutoff.gradient(xm)
        val[m] = z[m, None] * v
        jac[m] = z[m, None, None] * g + v[:, :, None] * gz[:, None, :]
        return val, jac

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]

    def extension_constant(self, t=0.0, spacing=None) -> float:
        """Measured ``sup_{B_R} |utilde| / sup_Omega |u|`` on a lattice."""
        spacing = spacing or self.R / 12.0
        pts = Lattice.covering(self.domain.c, self.R, spacing).points()
        inside = self.domain.contains(pts)
        ref = np.linalg.norm(self._inner(t, pts[inside]), axis=1).max()
        if ref == 0.0:
            return 0.0
        return float(np.linalg.norm(self(t, pts), axis=1).max() / ref)


def extend_field(u, domain: DomainSpec, R: float, margin: Optional[float] = None,
                 width: Optional[float] = None, mode: str = "auto") -> ExtendedField:
    """Extension of ``u`` to ``B_R`` vanishing near ``|x| = R``."""
    return ExtendedField(u, domain, R, margin, width, mode)


# -- Biot-Savart ---------------------------------------------------------------------------

def _core_profile(r2, sigma, derivative=True):
    """``q(s)`` and ``q'(s)/s`` of the high-order algebraic kernel ``K = q(|r|) alpha x r``.

    Overwrites ``r2``.
    """
    rho2 = r2
    rho2 *= 1.0 / sigma ** 2
    base = rho2 + 1.0
    np.reciprocal(base, out=base)
    b25 = np.sqrt(base)
    b25 *= base
    b25 *= base
    q = rho2 + 2.5
    q *= b25
    q *= 1.0 / (FOUR_PI * sigma ** 3)
    if not derivative:
        return q, None
    dq = rho2
    dq += 3.5
    dq *= b25
    dq *= base
    dq *= -3.0 / (FOUR_PI * sigma ** 5)
    return q, dq


def blob_density(r2, sigma):
    """Smoothing function of the same kernel; integrates to one."""
    return 15.0 / (8.0 * np.pi * sigma ** 3) * (r2 / sigma ** 2 + 1.0) ** -3.5


def blob_density_gradient_factor(r2, sigma):
    """``grad zeta_sigma(r) = f * r``."""
    return -105.0 / (8.0 * np.pi * sigma ** 5) * (r2 / sigma ** 2 + 1.0) ** -4.5


class BiotSavartField(VelocityField):
    """Regularized Biot-Savart velocity of vortex particles.

    ``u(x) = sum_p q_sigma(|x - x_p|) alpha_p x (x - x_p)`` with particle
    strengths ``alpha_p = omega_p * vol_p``; ``q_sigma(s) -> 1 / (4 pi s^3)``
    away from the core radius ``sigma``.
    """

    def __init__(self, positions, strengths, sigma: float):
        self.positions = np.asarray(positions, float).reshape(-1, 3)
        self.strengths = np.asarray(strengths, float).reshape(-1, 3)
        if len(self.positions) != len(self.strengths):
            raise ParameterError("one strength per particle required")
        check_positive(sigma, "core radius")
        self.sigma = float(sigma)

    def _moments(self):
        # per-particle columns for the matrix form of the sums, in coordinates
        # centred on the cloud to limit cancellation
        if not hasattr(self, "_cols"):
            c = self.positions.mean(axis=0) if len(self.positions) else np.zeros(3)
            y = self.positions - c
            a = self.strengths
            axy = np.cross(a, y)
            self._center = c
            self._cols = np.hstack([a, axy])
            self._cols_grad = np.hstack([a, axy, (a[:, :, None] * y[:, None, :]).reshape(-1, 9),
                                         (axy[:, :, None] * y[:, None, :]).reshape(-1, 9)])
        return self._center, self._cols, self._cols_grad

    def __call__(self, t, x):
        x = as_points(x)
        out = np.zeros_like(x)
        if len(self.positions) == 0:
            return out
        c, cols, _ = self._moments()
        xc = x - c
        y = self.positions - c
        for s in _chunks(len(x), len(self.positions)):
            q, _ = _core_profile(_sqdist(xc[s], y), self.sigma, derivative=False)
            m = q @ cols
            out[s] = np.cross(m[:, :3], xc[s]) - m[:, 3:]
        return out

    def value_and_gradient(self, t, x):
        x = as_points(x)
        val = np.zeros_like(x)
        jac = np.zeros((len(x), 3, 3))
        if len(self.positions) == 0:
            return val, jac
        c, cols, cols_g = self._moments()
        xc = x - c
        y = self.positions - c
        for s in _chunks(len(x), len(self.positions)):
            xs = xc[s]
            q, dq = _core_profile(_sqdist(xs, y), self.sigma)
            m = q @ cols
            val[s] = np.cross(m[:, :3], xs) - m[:, 3:]
            # value part: sum q_p skew(alpha_p)
            A = m[:, :3]
            jac[s] = np.einsum("abc,nc->nab", _LEVI_NEG, A)
            # sum dq_p (alpha_p x r)_a r_b with r = x - y_p, expanded in moments
            d = dq @ cols_g
            C, P = d[:, :3], d[:, 3:6]
            M = d[:, 6:15].reshape(-1, 3, 3)       # sum dq a_c y_b
            N = d[:, 15:24].reshape(-1, 3, 3)      # sum dq (a x y)_a y_b
            Cx = np.cross(C, xs)
            # sum dq (a x x)_a y_b = eps_acd x_d M_cb
            Mx = np.einsum("acd,nd,ncb->nab", _LEVI, xs, M)
            jac[s] += ((Cx - P)[:, :, None] * xs[:, None, :]) - Mx + N
        return val, jac

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]

    def vorticity(self, x) -> np.ndarray:
        """Smoothed particle vorticity ``sum_p zeta_sigma(x - x_p) alpha_p``."""
        x = as_points(x)
        out = np.zeros_like(x)
        for s in _chunks(len(x), len(self.positions)):
            r = x[s, None, :] - self.positions[None]
            out[s] = blob_density(np.einsum("npk,npk->np", r, r), self.sigma) @ self.strengths
        return out


# -- markers -----------------------------------------------------------------------------

@dataclass
class TransportLog:
    """Per-step transport record used by the Grönwall audit."""

    times: list = field(default_factory=list)
    omega_sup: list = field(default_factory=list)
    grad_sup: list = field(default_factory=list)
    div_sup: list = field(default_factory=list)

    def rate(self) -> np.ndarray:
        """``V(t) = max_p (|grad u|_2 + |div u|)``, one bound per record."""
        return np.asarray(self.grad_sup) + np.asarray(self.div_sup)

    def to_dict(self):
        return {"time": list(self.times), "omega_sup": list(self.omega_sup),
                "grad_sup": list(self.grad_sup), "div_sup": list(self.div_sup)}


@dataclass
class MarkerCloud:
    """Lagrangian markers carrying vorticity by the Cauchy formula.

    ``omega = F @ omega0 / det F``; the transported particle strength is
    ``F @ omega0 * vol0`` (the volume element scales with ``det F``).
    """

    x0: np.ndarray
    omega0: np.ndarray
    volumes: np.ndarray
    x: Optional[np.ndarray] = None
    F: Optional[np.ndarray] = None
    t: float = 0.0
    log: Optional[TransportLog] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float).reshape(-1, 3)
        self.omega0 = np.asarray(self.omega0, float).reshape(-1, 3)
        self.volumes = np.asarray(self.volumes, float).reshape(-1)
        n = len(self.x0)
        if len(self.omega0) != n or len(self.volumes) != n:
            raise ParameterError("markers need one vorticity and one volume each")
        if self.x is None:
            self.x = self.x0.copy()
        if self.F is None:
            self.F = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    def __len__(self):
        return len(self.x0)

    @property
    def J(self) -> np.ndarray:
        return np.linalg.det(self.F)

    @property
    def omega(self) -> np.ndarray:
        return np.einsum("nab,nb->na", self.F, self.omega0) / self.J[:, None]

    @property
    def strengths(self) -> np.ndarray:
        return np.einsum("nab,nb->na", self.F, self.omega0) * self.volumes[:, None]

    def evolved(self, x, F, t, log=None) -> "MarkerCloud":
        return MarkerCloud(self.x0, self.omega0, self.volumes, x, F, t, log)

    def mean_spacing(self) -> float:
        return float(np.mean(self.volumes) ** (1.0 / 3.0)) if len(self) else 0.0


def curl_fd(u, t, x, h=FD_STEP) -> np.ndarray:
    g = fd_gradient(u, t, x, h)
    return np.stack([g[:, 2, 1] - g[:, 1, 2], g[:, 0, 2] - g[:, 2, 0], g[:, 1, 0] - g[:, 0, 1]], axis=1)


def seed_markers(u0, center, radius: float, spacing: float, t: float = 0.0) -> MarkerCloud:
    """Markers on the lattice nodes of the ball where ``curl u0`` is nonzero.

    The vorticity comes from centered differences of ``u0``; each marker
    carries the cell volume ``spacing**3``.
    """
    check_positive(spacing, "marker spacing")
    lat = Lattice.covering(center, radius, spacing)
    pts = lat.points()
    pts = pts[np.linalg.norm(pts - np.asarray(center, float), axis=1) <= radius]
    w = curl_fd(u0, t, pts)
    mag = np.linalg.norm(w, axis=1)
    keep = mag > 0.0
    if np.any(keep):
        # centered differences leave roundoff outside the support
        keep &= mag > 1e-12 * mag.max()
    return MarkerCloud(pts[keep], w[keep], np.full(int(keep.sum()), spacing ** 3))


def transport_vorticity(utilde, cloud0: MarkerCloud, t: float, steps: int, t0: Optional[float] = None,
                        frame_times=None, log: bool = True):
    """Advance markers and deformation gradients from ``t0`` to ``t`` with RK4.

    Integrates ``dx/dt = u(t, x)`` and ``dF/dt = grad u(t, x) F`` jointly.
    Returns the final cloud, or the list of clouds at ``frame_times`` (which
    must be step times) when given.  Raises ``BlowUpError`` when some
    ``det F`` becomes nonpositive.
    """
    if int(steps) != steps or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps!r}")
    steps = int(steps)
    t0 = cloud0.t if t0 is None else float(t0)
    dt = (t - t0) / steps
    x, F = cloud0.x.copy(), cloud0.F.copy()
    record = TransportLog() if log else None
    frames = {}
    want = {}
    if frame_times is not None:
        for ft in frame_times:
            k = int(round((ft - t0) / dt)) if dt != 0 else 0
            if abs(t0 + k * dt - ft) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= steps:
                raise ParameterError(f"frame time {ft} is not a step time")
            want.setdefault(k, []).append(ft)
    n = len(x)

    def rhs(tt, xx, FF):
        if n == 0:
            return np.zeros_like(xx), np.zeros_like(FF), np.zeros((0, 3, 3))
        v, g = utilde.value_and_gradient(tt, xx)
        return v, np.matmul(g, FF), g

    def note(tt, FF, g):
        if record is None:
            return
        J = np.linalg.det(FF) if n else np.zeros(0)
        om = np.einsum("nab,nb->na", FF, cloud0.omega0) / J[:, None] if n else np.zeros((0, 3))
        record.times.append(float(tt))
        record.omega_sup.append(float(np.linalg.norm(om, axis=1).max()) if n else 0.0)
        record.grad_sup.append(float(np.linalg.norm(g, ord=2, axis=(1, 2)).max()) if n else 0.0)
        record.div_sup.append(float(np.abs(np.trace(g, axis1=1, axis2=2)).max()) if n else 0.0)

    if 0 in want:
        for ft in want[0]:
            frames[ft] = cloud0.evolved(x.copy(), F.copy(), ft)
    g_last = None
    for k in range(steps):
        tk = t0 + k * dt
        k1x, k1F, g1 = rhs(tk, x, F)
        note(tk, F, g1)
        k2x, k2F, _ = rhs(tk + 0.5 * dt, x + 0.5 * dt * k1x, F + 0.5 * dt * k1F)
        k3x, k3F, _ = rhs(tk + 0.5 * dt, x + 0.5 * dt * k2x, F + 0.5 * dt * k2F)
        k4x, k4F, _ = rhs(tk + dt, x + dt * k3x, F + dt * k3F)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        F = F + dt / 6.0 * (k1F + 2 * k2F + 2 * k3F + k4F)
        tn = t0 + (k + 1) * dt
        if n:
            J = np.linalg.det(F)
            bad = ~(J > 0) | ~np.all(np.isfinite(x), axis=1)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise BlowUpError(f"marker {i}: det F = {J[i]:.3e} at t={tn:.6g}", time=tn, index=i)
        if k + 1 in want:
            for ft in want[k + 1]:
                frames[ft] = cloud0.evolved(x.copy(), F.copy(), ft)
    if record is not None:
        _, _, g_last = rhs(t, x, F)
        note(t, F, g_last)
    out = cloud0.evolved(x, F, float(t), record)
    if frame_times is not None:
        clouds = [frames[ft] for ft in frame_times]
        for c in clouds:
            c.log = record
        return clouds
    return out


def cauchy_vorticity(utilde, omega0_fn, points, t: float, steps: int) -> np.ndarray:
    """Vorticity at ``points`` and time ``t`` by tracing characteristics back to 0.

    With ``B = d x0 / d x`` from the backward flow, ``F = B^-1`` and
    ``omega = F omega0(x0) / det F``.
    """
    pts = as_points(points)
    back = MarkerCloud(pts, np.zeros_like(pts), np.ones(len(pts)), t=float(t))
    c = transport_vorticity(utilde, back, 0.0, steps, log=False)
    F = np.linalg.inv(c.F)
    w0 = np.asarray(omega0_fn(c.x), float)
    return np.einsum("nab,nb->na", F, w0) / np.linalg.det(F)[:, None]


# -- grid oracle ---------------------------------------------------------------------------

def grid_transport_oracle(utilde, lattice: Lattice, omega0, t: float, steps: Optional[int] = None,
                          cfl: float = 0.5, t0: float = 0.0) -> np.ndarray:
    """First-order upwind finite-volume solution of the vorticity equation.

    Solves ``d omega/dt + div(u omega) = (grad u) omega`` (the conservative
    form of the transport-stretching equation) on the cells of ``lattice``
    with forward Euler steps and zero inflow at the lattice edge.  The CFL
    number ``dt * sum_d max|u_d| / h`` must stay at or below ``cfl <= 0.5``.
    Returns the vorticity array (nx, ny, nz, 3) at time ``t``.
    """
    if cfl > 0.5:
        raise ParameterError(f"CFL limit {cfl} exceeds 0.5")
    w = np.array(omega0, float)
    if w.shape != tuple(lattice.shape) + (3,):
        raise ParameterError(f"omega0 must have shape {tuple(lattice.shape) + (3,)}")
    h = lattice.spacing
    shape = tuple(lattice.shape)
    centers = lattice.points()
    faces = [centers + 0.5 * h * e for e in np.eye(3)]  # face between i and i+1 along d

    def vmax(tt):
        return sum(np.abs(utilde(tt, centers)[:, d]).max() for d in range(3))

    if steps is None:
        probe = max(vmax(t0 + (t - t0) * s) for s in np.linspace(0.0, 1.0, 11))
        steps = max(1, int(np.ceil(abs(t - t0) * probe / (0.9 * cfl * h))))
    dt = (t - t0) / steps
    for k in range(steps):
        tk = t0 + k * dt
        u_c, g_c = utilde.value_and_gradient(tk, centers)
        if abs(dt) * np.abs(u_c).max(axis=0).sum() / h > cfl * (1 + 1e-12):
            raise ParameterError(f"CFL condition violated at t={tk:.4g}; use more steps")
        div = np.zeros_like(w)
        for d in range(3):
            uf = utilde(tk, faces[d])[:, d].reshape(shape)
            wn = np.roll(w, -1, axis=d)
            # upwind value on the face between cell i and i+1
            flux = np.where(uf[..., None] > 0, w, wn) * uf[..., None]
            idx = [slice(None)] * 3
            idx[d] = slice(-1, None)
            flux[tuple(idx)] = 0.0  # closed outer faces
            div += flux - np.roll(flux, 1, axis=d)
        src = np.einsum("nab,nb->na", g_c, w.reshape(-1, 3)).reshape(w.shape)
        w = w + dt * (src - div / h)
    return w


# -- reconstruction --------------------------------------------------------------------------

class ReconstructedField(VelocityField):
    """``v = BS[omega] + grad chi (+ sum c_i Q_i)`` at one time."""

    def __init__(self, biot_savart: BiotSavartField, chi: PointSourcePotential, basis=(), coeffs=(),
                 report=None):
        self.biot_savart = biot_savart
        self.chi = chi
        self.basis = list(basis)
        self.coeffs = np.asarray(coeffs, float).reshape(-1)
        self.report = dict(report or {})

    def __call__(self, t, x):
        x = as_points(x)
        out = self.biot_savart(t, x) + self.chi.gradient(x)
        for c, q in zip(self.coeffs, self.basis):
            out += c * q(t, x)
        return out

    def value_and_gradient(self, t, x):
        x = as_points(x)
        v, g = self.biot_savart.value_and_gradient(t, x)
        cg, ch = self.chi.gradient_and_hessian(x)
        v = v + cg
        g = g + ch
        for c, q in zip(self.coeffs, self.basis):
            qv, qg = q.value_and_gradient(t, x)
            v += c * qv
            g += c * qg
        return v, g

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]

    def singularities(self):
        return self.chi.poles

    def vorticity(self, x):
        return self.biot_savart.vorticity(x)


def neumann_solver_for(domain: DomainSpec, boundary: BoundarySampleSet, pole_offset=None,
                       n_poles=None, compat_tol=1e-3) -> NeumannSolver:
    """Prefactored domain Neumann solver shared by all reconstructions."""
    if pole_offset is None:
        pole_offset = 0.5 * domain.feature_size()
    if n_poles is None:
        n_poles = max(4, len(boundary) // 4)
    return NeumannSolver(pole_offset=pole_offset, n_poles=n_poles, compat_tol=compat_tol).fit(
        boundary, surface=domain.boundary_mesh())


def div_curl_reconstruct(cloud: MarkerCloud, boundary: BoundarySampleSet, normal_data, Q_basis=(),
                         sigma: Optional[float] = None, solver: Optional[NeumannSolver] = None,
                         domain: Optional[DomainSpec] = None, quadrature=None, t: float = 0.0):
    """Divergence-free ``v`` with ``curl v = omega`` and ``v . n = normal_data``.

    ``v = BS[omega] + grad chi`` where ``chi`` solves the Neumann problem
    with data ``normal_data - BS[omega] . n``.  For a nonempty ``Q_basis``
    the components ``int v . Q_i`` are projected out using ``quadrature``
    ``(points, weights)``.  Raises ``CompatibilityError`` when the data has
    net flux.
    """
    normal_data = np.asarray(normal_data, float).reshape(-1)
    if len(normal_data) != len(boundary):
        raise ParameterError("one normal value per boundary sample required")
    if sigma is None:
        sigma = 2.0 * cloud.mean_spacing() if len(cloud) else 1.0
    bs = BiotSavartField(cloud.x, cloud.strengths, sigma)
    if solver is None:
        if domain is None:
            raise ParameterError("either a prefitted solver or a domain is required")
        solver = neumann_solver_for(domain, boundary)
    bn = np.einsum("ij,ij->i", bs(t, boundary.points), boundary.normals)
    data = normal_data - bn
    if not np.any(data):
        chi = PointSourcePotential.zero()
        chi.info = {"residual": 0.0, "relative_residual": 0.0}
    else:
        chi = solver.solve(data)
    report = {"neumann_residual": float(chi.info.get("residual", 0.0)),
              "neumann_relative_residual": float(chi.info.get("relative_residual", 0.0)),
              "markers": len(cloud), "core_radius": float(sigma)}
    coeffs = []
    if Q_basis:
        if quadrature is None:
            raise ParameterError("a volume quadrature is needed to project out the basis")
        pts, w = quadrature
        G = check_cohomology_basis(Q_basis, pts, w)
        v0 = bs(t, pts) + chi.gradient(pts)
        b = np.array([np.sum(w * np.einsum("ij,ij->i", v0, q(t, pts))) for q in Q_basis])
        coeffs = -np.linalg.solve(G, b)
    return ReconstructedField(bs, chi, Q_basis, coeffs, report)


def lambda_update(u, vorticity, u0, Q_basis, times, quadrature, v=None) -> np.ndarray:
    """Cohomology coefficients ``lambda_i(t)`` at each of ``times``.

    Solves ``G lambda(t) = int u0 . Q - int v(t) . Q - int_0^t int (u x omega) . Q``
    with ``G`` the Gram matrix, the time integral by the trapezoid rule over
    ``times`` (which must start at 0).  ``u``, ``vorticity`` and ``v`` are
    callables ``(t, x)``; ``v`` may be omitted when its projections vanish.
    Returns an array (len(times), g); empty basis gives shape (len(times), 0).
    """
    times = np.asarray(times, float)
    if not Q_basis:
        return np.zeros((len(times), 0))
    if times[0] != 0.0:
        raise ParameterError("the time grid must start at 0")
    pts, w = quadrature
    G = check_cohomology_basis(Q_basis, pts, w)
    Qv = [[np.asarray(q(t, pts)) for q in Q_basis] for t in times]

    def proj(vals, k):
        return np.array([np.sum(w * np.einsum("ij,ij->i", vals, q)) for q in Qv[k]])

    base = proj(np.asarray(u0(0.0, pts)), 0)
    integrand = np.array([proj(np.cross(u(t, pts), vorticity(t, pts)), k) for k, t in enumerate(times)])
    running = np.zeros_like(integrand)
    if len(times) > 1:
        dt = np.diff(times)[:, None]
        running[1:] = np.cumsum(0.5 * dt * (integrand[1:] + integrand[:-1]), axis=0)
    out = np.empty((len(times), len(Q_basis)))
    for k, t in enumerate(times):
        rhs = base - running[k]
        if v is not None:
            rhs = rhs - proj(np.asarray(v(t, pts)), k)
        out[k] = np.linalg.solve(G, rhs)
    return out


# -- time framed fields -----------------------------------------------------------------------

class TimeFramedField(VelocityField):
    """Field given on uniform time frames, interpolated in time.

    ``interpolation="cubic"`` uses Catmull-Rom weights on four neighbouring
    frames (quadratic extrapolation supplies the ghost frames at the ends);
    ``"linear"`` blends the two neighbours.  Times outside the frame range
    are clamped.
    """

    def __init__(self, times, frames, interpolation: str = "cubic"):
        self.times = np.asarray(times, float)
        self.frames = list(frames)
        if len(self.times) != len(self.frames) or len(self.times) < 1:
            raise ParameterError("one frame per time required")
        if len(self.times) > 1:
            d = np.diff(self.times)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * d.mean():
                raise ParameterError("frame times must be uniform and increasing")
        if interpolation not in ("cubic", "linear"):
            raise ParameterError(f"unknown interpolation {interpolation!r}")
        self.interpolation = interpolation

    def weights(self, t):
        """List of ``(frame index, weight)`` at time ``t``."""
        n = len(self.times)
        if n == 1:
            return [(0, 1.0)]
        t = min(max(float(t), self.times[0]), self.times[-1])
        dt = self.times[1] - self.times[0]
        j = min(int((t - self.times[0]) / dt), n - 2)
        s = (t - self.times[j]) / dt
        if self.interpolation == "linear" or n < 3:
            pairs = [(j, 1.0 - s), (j + 1, s)]
        else:
            cw = [0.5 * (-s ** 3 + 2 * s ** 2 - s), 0.5 * (3 * s ** 3 - 5 * s ** 2 + 2),
                  0.5 * (-3 * s ** 3 + 4 * s ** 2 + s), 0.5 * (s ** 3 - s ** 2)]
            acc = {}
            for k, c in zip(range(j - 1, j + 3), cw):
                if k < 0:  # ghost = 3 f0 - 3 f1 + f2
                    terms = [(0, 3.0), (1, -3.0), (2, 1.0)]
                elif k >= n:
                    terms = [(n - 1, 3.0), (n - 2, -3.0), (n - 3, 1.0)]
                else:
                    terms = [(k, 1.0)]
                for i, a in terms:
                    acc[i] = acc.get(i, 0.0) + a * c
            pairs = sorted(acc.items())
        return [(i, w) for i, w in pairs if w != 0.0]

    def __call__(self, t, x):
        x = as_points(x)
        out = np.zeros_like(x)
        for i, w in self.weights(t):
            out += w * self.frames[i](self.times[i], x)
        return out

    def value_and_gradient(self, t, x):
        x = as_points(x)
        val = np.zeros_like(x)
        jac = np.zeros((len(x), 3, 3))
        pots = []
        for i, w in self.weights(t):
            for a, f in _leaves(self.frames[i], w):
                if isinstance(f, ReconstructedField) and not f.basis:
                    # the potentials usually share the solver's poles: sum them first
                    v, g = f.biot_savart.value_and_gradient(self.times[i], x)
                    if f.chi.n_poles or np.any(f.chi.linear):
                        pots.append((a, f.chi))
                else:
                    v, g = f.value_and_gradient(self.times[i], x)
                val += a * v
                jac += a * g
        if pots:
            v, g = _sum_potentials(pots).gradient_and_hessian(x)
            val += v
            jac += g
        return val, jac

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]

    def singularities(self):
        pts = [f.singularities() for f in self.frames]
        return np.unique(np.vstack(pts), axis=0) if pts else np.zeros((0, 3))

    def frame_vorticity(self, i, x):
        f = self.frames[i]
        return f.vorticity(x) if hasattr(f, "vorticity") else curl_fd(f, self.times[i], x)

    def combined(self, other: "TimeFramedField", a: float, b: float) -> "TimeFramedField":
        """Frame-wise ``a * self + b * other`` (same time frames)."""
        if len(other.times) != len(self.times) or np.any(other.times != self.times):
            raise ParameterError("frame times differ")
        frames = [_FrameSum([(a, f), (b, g)]) for f, g in zip(self.frames, other.frames)]
        return TimeFramedField(self.times, frames, self.interpolation)


def _leaves(frame, w):
    if isinstance(frame, _FrameSum):
        for a, f in frame.terms:
            yield from _leaves(f, w * a)
    else:
        yield w, frame


def _sum_potentials(pots) -> PointSourcePotential:
    first = pots[0][1]
    if all(p.n_poles == first.n_poles and (p.poles is first.poles or np.array_equal(p.poles, first.poles))
           for _, p in pots):
        return PointSourcePotential(first.poles, sum(a * p.weights for a, p in pots),
                                    sum(a * p.constant for a, p in pots), sum(a * p.linear for a, p in pots))
    out = PointSourcePotential.zero()
    for a, p in pots:
        out = out.combine(p, 1.0, a)
    return out


class _FrameSum(VelocityField):
    def __init__(self, terms):
        self.terms = [(float(a), f) for a, f in terms if a != 0.0]

    def __call__(self, t, x):
        x = as_points(x)
        out = np.zeros_like(x)
        for a, f in self.terms:
            out += a * f(t, x)
        return out

    def value_and_gradient(self, t, x):
        x = as_points(x)
        val = np.zeros_like(x)
        jac = np.zeros((len(x), 3, 3))
        for a, f in self.terms:
            v, g = f.value_and_gradient(t, x)
            val += a * v
            jac += a * g
        return val, jac

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]

    def singularities(self):
        pts = [f.singularities() for _, f in self.terms]
        return np.vstack(pts) if pts else np.zeros((0, 3))

    def vorticity(self, x):
        x = as_points(x)
        out = np.zeros_like(x)
        for a, f in self.terms:
            out += a * f.vorticity(x)
        return out


class _ZeroFrame(ZeroField):
    def vorticity(self, x):
        return np.zeros_like(as_points(x))


class EulerVelocity(VelocityField):
    """``u = ybar + W``: reference flow plus a time-framed correction."""

    def __init__(self, ybar, correction: Optional[TimeFramedField] = None):
        self.ybar = ybar
        self.correction = correction

    def __call__(self, t, x):
        out = self.ybar(t, x)
        if self.correction is not None:
            out = out + self.correction(t, x)
        return out

    def value_and_gradient(self, t, x):
        v, g = self.ybar.value_and_gradient(t, x)
        if self.correction is not None:
            cv, cg = self.correction.value_and_gradient(t, x)
            v, g = v + cv, g + cg
        return v, g

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]

    def singularities(self):
        s = [self.ybar.singularities()]
        if self.correction is not None:
            s.append(self.correction.singularities())
        return np.vstack(s)


# -- fixed point --------------------------------------------------------------------------

@dataclass
class EulerConfig:
    """Numerical settings of the fixed-point map.

    Lengths are in domain units.  ``None`` entries are derived from the
    domain and the initial data in :class:`EulerContext`.
    """

    ball_radius: Optional[float] = None
    marker_spacing: float = 0.08
    core_factor: float = 2.0
    transport_steps: int = 40
    n_frames: int = 21
    interpolation: str = "cubic"
    delta: float = 0.1
    lattice_spacing: float = 0.25
    neumann_pole_offset: Optional[float] = None
    neumann_pole_count: Optional[int] = None
    compat_tol: float = 1e-3
    boundary_level: Optional[int] = None

    def to_dict(self):
        return dict(self.__dict__)


class EulerContext:
    """Everything ``F`` needs: data, reference flow, domain and discretization.

    Parameters
    ----------
    u0 : VelocityField
        Initial velocity (steady, solenoidal, tangent on the sealed boundary).
    ybar : VelocityField
        Reference potential flow ``grad theta`` on [0, 1].
    domain : DomainSpec
    Q_basis : list, optional
        Cohomology generators; empty for simply connected domains.
    """

    def __init__(self, u0, ybar, domain: DomainSpec, Q_basis=(), config: Optional[EulerConfig] = None):
        self.u0 = u0 if u0 is not None else ZeroField()
        self.ybar = ybar
        self.domain = domain
        self.Q_basis = list(Q_basis)
        cfg = EulerConfig(**(config or EulerConfig()).__dict__)
        check_positive(cfg.marker_spacing, "marker spacing")
        if cfg.transport_steps % (cfg.n_frames - 1 if cfg.n_frames > 1 else 1):
            raise ParameterError("transport_steps must be a multiple of n_frames - 1")
        if cfg.ball_radius is None:
            cfg.ball_radius = 1.5 * (domain.extent_radius() + np.linalg.norm(domain.c))
        self.config = cfg
        self.mu = TimeCutoff(cfg.delta)
        self.frame_times = np.linspace(0.0, 1.0, cfg.n_frames)
        self.boundary = domain.boundary_samples(cfg.boundary_level)
        self._solver = None
        self._seeds = None
        self._probes = None
        self._quad = None

    @property
    def R(self) -> float:
        return self.config.ball_radius

    @property
    def solver(self) -> NeumannSolver:
        if self._solver is None:
            self._solver = neumann_solver_for(self.domain, self.boundary, self.config.neumann_pole_offset,
                                              self.config.neumann_pole_count, self.config.compat_tol)
        return self._solver

    def extended_u0(self) -> ExtendedField:
        return extend_field(self.u0, self.domain, self.R)

    def seeds(self) -> MarkerCloud:
        """Markers carrying ``curl pi(u0)``."""
        if self._seeds is None:
            if isinstance(self.u0, ZeroField):
                self._seeds = MarkerCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
            else:
                self._seeds = seed_markers(self.extended_u0(), self.domain.c, self.R,
                                           self.config.marker_spacing)
        return self._seeds

    @property
    def core_radius(self) -> float:
        return self.config.core_factor * self.config.marker_spacing

    def probes(self) -> np.ndarray:
        """Lattice over the domain plus the boundary samples."""
        if self._probes is None:
            lat = self.domain.interior_lattice(self.config.lattice_spacing)
            self._probes = np.vstack([lat, self.boundary.points])
        return self._probes

    def quadrature(self):
        if self._quad is None:
            self._quad = solid_volume_quadrature(self.domain, self.config.lattice_spacing)
        return self._quad

    def normal_data(self, t) -> np.ndarray:
        """``mu(t) u0 . n`` on the boundary samples (the ``ybar . n`` part is carried by ``ybar``)."""
        m = self.mu(t)
        if m == 0.0 or isinstance(self.u0, ZeroField):
            return np.zeros(len(self.boundary))
        return m * np.einsum("ij,ij->i", self.u0(0.0, self.boundary.points), self.boundary.normals)

    def reference(self) -> EulerVelocity:
        return EulerVelocity(self.ybar, None)

    def sup_norm(self, f, t=None) -> float:
        """Sup of ``|f|`` over probes and frame times (or one time)."""
        times = self.frame_times if t is None else [t]
        pts = self.probes()
        return float(max(np.linalg.norm(f(tt, pts), axis=1).max() for tt in times))


def apply_F(u: EulerVelocity, ctx: EulerContext, return_frames: bool = False):
    """One application of the fixed-point map.

    Extends ``u`` to ``B_R``, transports the seeded vorticity along it,
    reconstructs each time frame by :func:`div_curl_reconstruct` and adds
    the cohomology term.  Returns the new :class:`EulerVelocity`; with
    ``return_frames`` also the transported clouds.
    """
    seeds = ctx.seeds()
    times = ctx.frame_times
    data = [ctx.normal_data(t) for t in times]
    if len(seeds) == 0 and not any(np.any(d) for d in data) and not ctx.Q_basis:
        out = EulerVelocity(ctx.ybar, None)
        return (out, []) if return_frames else out
    utilde = extend_field(u, ctx.domain, ctx.R)
    clouds = transport_vorticity(utilde, seeds, 1.0, ctx.config.transport_steps, t0=0.0,
                                 frame_times=list(times))
    frames = [div_curl_reconstruct(c, ctx.boundary, d, (), ctx.core_radius, ctx.solver, t=t)
              for c, d, t in zip(clouds, data, times)]
    if ctx.Q_basis:
        W = TimeFramedField(times, frames, ctx.config.interpolation)
        full = EulerVelocity(ctx.ybar, W)
        lam = lambda_update(u, lambda t, x: W.frame_vorticity(int(np.argmin(np.abs(times - t))), x),
                            ctx.u0, ctx.Q_basis, times, ctx.quadrature(), v=full)
        frames = [ReconstructedField(f.biot_savart, f.chi, ctx.Q_basis, lam[k], f.report)
                  for k, f in enumerate(frames)]
    W = TimeFramedField(times, frames, ctx.config.interpolation)
    out = EulerVelocity(ctx.ybar, W)
    return (out, clouds) if return_frames else out


@dataclass
class FixedPointState:
    iteration: int
    residual: float
    ball_norm: float
    damping: float
    lambda_norm: float = 0.0

    def to_row(self):
        return {"iter": self.iteration, "residual": self.residual, "ball_norm": self.ball_norm,
                "lambda_norms": self.lambda_norm}


@dataclass
class PicardResult:
    u_fixed: EulerVelocity
    states: List[FixedPointState]
    converged: bool
    clouds: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def residuals(self):
        return [s.residual for s in self.states]

    @property
    def iterations(self):
        return len(self.states)

    def contraction_factor(self) -> float:
        """Geometric mean ratio of successive residuals (nan with fewer than 2)."""
        r = np.asarray(self.residuals)
        r = r[r > 0]
        if len(r) < 2:
            return float("nan")
        return float(np.exp(np.mean(np.diff(np.log(r)))))

    def log_rows(self):
        return [s.to_row() for s in self.states]


def _correction_difference(a: EulerVelocity, b: EulerVelocity, ctx: EulerContext) -> float:
    pts = ctx.probes()
    worst = 0.0
    for t in ctx.frame_times:
        va = a.correction(t, pts) if a.correction is not None else 0.0
        vb = b.correction(t, pts) if b.correction is not None else 0.0
        d = np.asarray(va - vb)
        if np.ndim(d):
            worst = max(worst, float(np.linalg.norm(d, axis=1).max()))
    return worst


def _lambda_norm(u: EulerVelocity) -> float:
    if u.correction is None:
        return 0.0
    norms = [np.linalg.norm(getattr(f, "coeffs", np.zeros(0))) for f in u.correction.frames]
    return float(max(norms)) if norms else 0.0


def picard_solve(ctx: EulerContext, nu: float, tol: float = 1e-4, max_iter: int = 20,
                 damping: float = 1.0) -> PicardResult:
    """Damped Picard iteration ``u <- (1 - d) u + d F(u)`` from ``u = ybar``.

    Stops once the sup-lattice change of the iterate is below ``tol``.
    Raises ``BallViolationError`` when ``|u_k - ybar|`` exceeds ``nu`` and
    ``NonConvergenceError`` after ``max_iter`` iterations; both carry the
    residual history.
    """
    check_positive(nu, "nu")
    check_positive(tol, "tol")
    if not 0.0 < damping <= 1.0:
        raise ParameterError(f"damping must lie in (0, 1], got {damping}")
    start = _time.perf_counter()
    u = ctx.reference()
    states: List[FixedPointState] = []
    clouds = []
    for k in range(1, int(max_iter) + 1):
        Fu, clouds = apply_F(u, ctx, return_frames=True)
        if damping == 1.0 or u.correction is None and Fu.correction is None:
            new = Fu
        elif u.correction is None:
            new = EulerVelocity(ctx.ybar, Fu.correction.combined(Fu.correction, damping, 0.0))
        elif Fu.correction is None:
            new = EulerVelocity(ctx.ybar, u.correction.combined(u.correction, 1.0 - damping, 0.0))
        else:
            new = EulerVelocity(ctx.ybar, u.correction.combined(Fu.correction, 1.0 - damping, damping))
        res = _correction_difference(new, u, ctx)
        ball = _correction_difference(new, ctx.reference(), ctx)
        states.append(FixedPointState(k, res, ball, damping, _lambda_norm(new)))
        logger.info("picard iter %d residual %.3e ball %.3e", k, res, ball)
        if ball > nu:
            raise BallViolationError(
                f"iterate {k} left the ball: |u - ybar| = {ball:.3e} > nu = {nu:.3e}; "
                "reduce the data (smaller rho)", history=[s.to_row() for s in states])
        u = new
        if res < tol:
            return PicardResult(u, states, True, clouds, _time.perf_counter() - start)
    raise NonConvergenceError(
        f"no convergence in {max_iter} iterations (last residual {states[-1].residual:.3e})",
        history=[s.to_row() for s in states])


# -- time rescaling ----------------------------------------------------------------------------

class RescaledField(VelocityField):
    """``u_rho(t, x) = u(t / rho, x) / rho`` on [0, rho]."""

    def __init__(self, u, rho: float):
        if not 0.0 < rho <= 1.0:
            raise ParameterError(f"rho must lie in (0, 1], got {rho}")
        self.u = u
        self.rho = float(rho)

    def __call__(self, t, x):
        return self.u(t / self.rho, x) / self.rho

    def value_and_gradient(self, t, x):
        v, g = self.u.value_and_gradient(t / self.rho, x)
        return v / self.rho, g / self.rho

    def gradient(self, t, x):
        return self.u.gradient(t / self.rho, x) / self.rho

    def singularities(self):
        return self.u.singularities() if hasattr(self.u, "singularities") else np.zeros((0, 3))


def time_rescale(u, rho: float) -> RescaledField:
    """Reparameterize a field on [0, 1] to [0, rho]; flow maps agree at the end points."""
    return RescaledField(u, rho)


# -- initial data ------------------------------------------------------------------------------

class CurlBumpField(VelocityField):
    """``u0 = scale * grad b x e`` with ``b = (1 - |y|^2 / r^2)^4`` on the ball
    ``|y| < r``, ``y = x - center``.  Solenoidal, supported in the ball."""

    def __init__(self, center, radius: float, scale: float = 1.0, axis=(0.0, 0.0, 1.0)):
        self.center = np.asarray(center, float).reshape(3)
        check_positive(radius, "bump radius")
        self.radius = float(radius)
        self.scale = float(scale)
        e = np.asarray(axis, float).reshape(3)
        self.axis = e / np.linalg.norm(e)

    @staticmethod
    def peak_factor(radius: float) -> float:
        """``max |u0| / scale``, attained at ``|y| = r / sqrt 7`` on the equator."""
        return 8.0 / (radius * np.sqrt(7.0)) * (6.0 / 7.0) ** 3

    @classmethod
    def with_peak(cls, center, radius, peak, axis=(0.0, 0.0, 1.0)):
        return cls(center, radius, peak / cls.peak_factor(radius), axis)

    @property
    def peak(self) -> float:
        return abs(self.scale) * self.peak_factor(self.radius)

    def scaled(self, a: float) -> "CurlBumpField":
        return CurlBumpField(self.center, self.radius, a * self.scale, self.axis)

    def __call__(self, t, x):
        y = as_points(x) - self.center
        q = np.einsum("ij,ij->i", y, y) / self.radius ** 2
        g = np.where(q < 1.0, -8.0 * np.clip(1.0 - q, 0.0, None) ** 3 / self.radius ** 2, 0.0)
        return self.scale * g[:, None] * np.cross(y, self.axis)

    def value_and_gradient(self, t, x):
        y = as_points(x) - self.center
        r2 = self.radius ** 2
        q = np.einsum("ij,ij->i", y, y) / r2
        inside = q < 1.0
        m = np.clip(1.0 - q, 0.0, None)
        g = np.where(inside, -8.0 * m ** 3 / r2, 0.0)
        dg = np.where(inside, 48.0 * m ** 2 / r2 ** 2, 0.0)[:, None] * y
        yxe = np.cross(y, self.axis)
        val = self.scale * g[:, None] * yxe
        jac = self.scale * (yxe[:, :, None] * dg[:, None, :] - g[:, None, None] * skew(self.axis)[None])
        return val, jac

    def gradient(self, t, x):
        return self.value_and_gradient(t, x)[1]


# -- discretization error of the vortex representation ------------------------------------

def _blob_terms(frame):
    """Biot-Savart parts of a frame as ``(weight, BiotSavartField)`` pairs."""
    if isinstance(frame, BiotSavartField):
        return [(1.0, frame)]
    if isinstance(frame, ReconstructedField):
        return [(1.0, frame.biot_savart)]
    if isinstance(frame, _FrameSum):
        return [(a * b, bs) for a, f in frame.terms for b, bs in _blob_terms(f)]
    return []


def vortex_commutator(u, blobs, x) -> np.ndarray:
    """Transport defect of the smoothed vorticity, probe by probe.

    For particles moving with ``u`` whose strengths obey ``d alpha/dt =
    grad u(x_p) alpha``, the smoothed field ``sum_p zeta_s(x - x_p) alpha_p``
    misses the vorticity equation by
    ``sum_p ((u(x) - u(x_p)) . grad zeta_s) alpha_p - zeta_s (grad u(x) - grad u(x_p)) alpha_p``,
    which vanishes as the core radius goes to zero.  ``u`` is a callable
    ``x -> (u, grad u)`` at one time.
    """
    x = as_points(x)
    out = np.zeros_like(x)
    ux, gx = u(x)
    for a, bs in blobs:
        if len(bs.positions) == 0:
            continue
        up, gp = u(bs.positions)
        for s in _chunks(len(x), len(bs.positions)):
            r = x[s, None, :] - bs.positions[None]
            r2 = np.einsum("npk,npk->np", r, r)
            z = blob_density(r2, bs.sigma)
            fz = blob_density_gradient_factor(r2, bs.sigma)
            du = ux[s, None, :] - up[None]
            adv = fz * np.einsum("npk,npk->np", du, r)
            dg = gx[s, None] - gp[None]
            stretch = np.einsum("npab,pb->npa", dg, bs.strengths)
            out[s] += a * (adv @ bs.strengths - np.einsum("np,npa->na", z, stretch))
    return np.linalg.norm(out, axis=1)


def model_error_estimate(u: "EulerVelocity", t: float, x) -> np.ndarray:
    """Size of the curl of the Euler residual caused by the discretization.

    Sum of the vortex-blob commutator at the frame nearest ``t`` and the
    time-interpolation error of ``d_t curl W`` estimated from third
    differences of the frame vorticities.
    """
    x = as_points(x)
    W = u.correction
    if W is None:
        return np.zeros(len(x))
    j = int(np.argmin(np.abs(W.times - t)))
    tj = W.times[j]
    est = vortex_commutator(lambda y: u.value_and_gradient(tj, y), _blob_terms(W.frames[j]), x)
    n = len(W.times)
    if n >= 4:
        k = min(max(j - 1, 0), n - 4)
        om = [W.frame_vorticity(i, x) for i in range(k, k + 4)]
        d3 = om[3] - 3.0 * om[2] + 3.0 * om[1] - om[0]
        dt = W.times[1] - W.times[0]
        est = est + np.linalg.norm(d3, axis=1) / (6.0 * dt)
    return est


# -- full pipeline ----------------------------------------------------------------------------

@dataclass
class EulerRun:
    """Everything produced by :func:`solve_controlled_euler`."""

    control: object
    synthesis_report: list
    picard: PicardResult
    rho: float
    u0_sup: float
    ybar_sup: float
    field: VelocityField
    trajectory: list
    final_surface: object
    distance: object
    containment: object
    diagnostics: object
    timings: dict
    context: Optional[EulerContext] = None

    @property
    def final_distance(self) -> float:
        return self.distance.hausdorff

    def summary(self) -> dict:
        """Deterministic summary (no wall-clock values)."""
        d = self.distance
        return {
            "final_hausdorff": d.hausdorff, "final_mean_distance": d.mean,
            "final_normal_deviation": d.normal_deviation,
            "containment_passed": self.containment.passed,
            "min_clearance": self.containment.min_clearance,
            "rho": self.rho, "u0_sup": self.u0_sup, "ybar_sup": self.ybar_sup,
            "picard_iterations": self.picard.iterations, "picard_converged": self.picard.converged,
            "picard_final_residual": self.picard.states[-1].residual if self.picard.states else 0.0,
            "picard_contraction": self.picard.contraction_factor(),
            "snapshots": len(self.control.times),
            "diagnostics_passed": self.diagnostics.passed,
        }


def residual_probes(domain: DomainSpec, count: int, clearance: float, seed: int = 0, center=None,
                    spread=None) -> np.ndarray:
    """Random interior probes (rejection sampling) with the given clearance."""
    rng = np.random.default_rng(seed)
    c = domain.c if center is None else np.asarray(center, float)
    r = domain.extent_radius() if spread is None else float(spread)
    out = []
    while sum(len(o) for o in out) < count:
        p = c + rng.uniform(-r, r, size=(4 * count, 3))
        p = p[np.linalg.norm(p - c, axis=1) <= r]
        out.append(p[domain.signed_distance(p) <= -clearance])
    return np.vstack(out)[:count]


def solve_controlled_euler(scenario, synthesized=None) -> EulerRun:
    """Control the scenario's surface with an Euler flow starting from ``u0``.

    Steps: synthesize the potential control for zero data; pick
    ``rho = min(1, c_bar / |u0|)`` (or the scenario's fixed ``rho``); solve
    the fixed point for data ``rho u0`` on [0, 1]; rescale time back to
    [0, rho]; advect ``gamma0`` and compare with ``gamma1``.  ``synthesized``
    may pass a prebuilt ``ControlSynthesizer`` for the same scenario.
    """
    from .control import ControlSynthesizer
    from .diagnostics import DiagnosticsReport, containment_check, euler_residual, gronwall_audit
    from .exceptions import ContainmentError
    from .fields import LinearCombination
    from .geometry.distance import surface_distance
    from .geometry.flow import advect_surface
    from .geometry.mesh import enclosed_volume

    timings = {}
    clock = _time.perf_counter()

    def lap(name):
        nonlocal clock
        now = _time.perf_counter()
        timings[name] = now - clock
        clock = now

    d = scenario.data
    domain = scenario.domain()
    g0, g1 = scenario.gamma0(), scenario.gamma1()
    if synthesized is None:
        X = scenario.isotopy(domain, g0)
        synthesized = ControlSynthesizer(domain, scenario.synthesis_config()).fit(X, g0)
    control = synthesized.control_
    ybar = control.field()
    lap("synthesis")

    ecfg = scenario.euler_config()
    ref_ctx = EulerContext(None, ybar, domain, config=ecfg)
    ybar_sup = ref_ctx.sup_norm(ybar)
    u0 = scenario.u0(ybar_sup)
    checks = scenario.check_initial_velocity(u0, domain)
    u0_sup = float(u0.peak) if isinstance(u0, CurlBumpField) else (
        0.0 if isinstance(u0, ZeroField) else ref_ctx.sup_norm(u0, 0.0))
    pic = d["picard"]
    if pic["rho"] is not None:
        rho = float(pic["rho"])
    elif pic["c_bar"] is not None and u0_sup > 0:
        rho = min(1.0, float(pic["c_bar"]) / u0_sup)
    else:
        rho = 1.0
    if isinstance(u0, ZeroField):
        v0 = u0
    elif isinstance(u0, CurlBumpField):
        v0 = u0.scaled(rho)
    else:
        v0 = LinearCombination([(rho, u0)])
    ctx = EulerContext(v0, ybar, domain, config=ecfg)
    ctx._solver = ref_ctx._solver
    lap("setup")

    result = picard_solve(ctx, float(pic["nu"]), float(pic["tol"]), int(pic["max_iter"]), float(pic["damping"]))
    lap("picard")

    field_rho = time_rescale(result.u_fixed, rho)
    sim = d["simulation"]
    final, traj = advect_surface(g0, field_rho, 0.0, rho, int(sim["rk4_steps"]),
                                 record_every=max(1, int(sim["record_every"])))
    lap("advection")

    containment = containment_check(traj, domain)
    if not containment.passed:
        raise ContainmentError(
            f"surface left the domain (clearance {containment.min_clearance:.3e} at t={containment.time:.4g})",
            time=containment.time)
    dist = surface_distance(final, g1)
    lap("distance")

    diag = DiagnosticsReport()
    dg = d["diagnostics"]
    probes = residual_probes(domain, int(dg["residual_probes"]), float(dg["probe_clearance"]), scenario.seed,
                             center=(u0.center if isinstance(u0, CurlBumpField) else None),
                             spread=(u0.radius * 1.5 if isinstance(u0, CurlBumpField) else None))
    worst = None
    for t in dg["residual_times"]:
        model = model_error_estimate(result.u_fixed, float(t), probes)
        r = euler_residual(result.u_fixed, probes, float(t), float(dg["residual_dt"]), float(dg["residual_h"]),
                           domain, model)
        if worst is None or r.ratio > worst.ratio:
            worst = r
        diag.add(f"euler_residual_ratio_t{t:g}", r.ratio, 5.0)
    diag.add("euler_residual", worst.residual, 5.0 * worst.estimate, "1/time^2")
    log = result.clouds[0].log if result.clouds else None
    if log is not None and len(log.times):
        g = gronwall_audit(log)
        diag.add("gronwall_margin", g.margin, 1.2, kind="min")
        diag.add_series("omega_sup", log.times, log.omega_sup)
        diag.add_series("transport_rate", log.times, log.rate())
    diag.add("picard_final_residual", result.states[-1].residual, float(pic["tol"]))
    diag.add("picard_iterations", result.iterations, int(pic["max_iter"]))
    diag.add("min_clearance", containment.min_clearance, 0.0, kind="min")
    diag.add("u0_divergence_ratio", checks["divergence_ratio"], float(d["u0"]["check_tolerance"]))
    diag.add("u0_normal_ratio", checks["normal_ratio"], float(d["u0"]["check_tolerance"]))
    vols = [enclosed_volume(s, validate=False) for _, s in traj]
    diag.add_series("volume", [t for t, _ in traj], vols)
    diag.add("volume_drift", abs(vols[-1] - vols[0]) / vols[0], 5e-3)
    if d["acceptance"]["final_hausdorff_max"] is not None:
        diag.add("final_hausdorff", dist.hausdorff, float(d["acceptance"]["final_hausdorff_max"]))
    lap("diagnostics")

    return EulerRun(control, list(control.report), result, rho, u0_sup, ybar_sup, field_rho, traj, final,
                    dist, containment, diag, timings, ctx)
