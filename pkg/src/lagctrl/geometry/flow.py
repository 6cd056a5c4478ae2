"""Fixed-step RK4 flow maps of time-dependent velocity fields."""

import numpy as np

from ..exceptions import BlowUpError, ParameterError
from .mesh import DEGENERACY_FACTOR, TriangulatedSurface


def rk4_step(field, t, x, dt):
    k1 = field(t, x)
    k2 = field(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = field(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = field(t + dt, x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_points(points, field, t0, t1, steps, callback=None):
    """Advance points with classical RK4 at uniform step ``(t1 - t0) / steps``.

    ``callback(k, t, x)`` is called after every step; a truthy return value
    is ignored.  Raises ``BlowUpError`` at the first non-finite position.
    """
    if int(steps) != steps or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps!r}")
    steps = int(steps)
    x = np.array(points, dtype=float)
    dt = (t1 - t0) / steps
    for k in range(steps):
        t = t0 + k * dt
        x = rk4_step(field, t, x, dt)
        if not np.all(np.isfinite(x)):
            bad = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
            raise BlowUpError(f"non-finite position at t={t + dt:.6g}", time=t + dt, index=bad)
        if callback is not None:
            callback(k + 1, t0 + (k + 1) * dt, x)
    return x


def advect_surface(surface: TriangulatedSurface, field, t0: float, t1: float,
                   steps: int, record_every: int = 0):
    """Move every vertex along the flow of ``field`` from ``t0`` to ``t1``.

    Parameters
    ----------
    record_every : int
        When positive, also return a list of ``(t, surface)`` snapshots taken
        every ``record_every`` steps (the initial surface included).

    Raises
    ------
    BlowUpError
        Non-finite vertex or a triangle degenerating below the area threshold.
    """
    diag2 = surface.bbox_diagonal() ** 2
    faces = surface.faces
    trajectory = [(float(t0), surface)] if record_every else None

    def check(k, t, x):
        a, b, c = x[faces[:, 0]], x[faces[:, 1]], x[faces[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        if areas.min() <= DEGENERACY_FACTOR * diag2:
            raise BlowUpError(f"triangle degenerated at t={t:.6g}", time=t,
                              index=int(np.argmin(areas)))
        if record_every and (k % record_every == 0 or k == steps):
            trajectory.append((float(t), surface.with_vertices(x.copy())))

    x = flow_points(surface.vertices, field, t0, t1, steps, callback=check)
    out = surface.with_vertices(x)
    if record_every:
        return out, trajectory
    return out
