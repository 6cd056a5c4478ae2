"""Callable velocity fields.

Every field maps ``(t, x)`` with ``x`` of shape (n, 3) to velocities of
shape (n, 3).  ``gradient`` returns the Jacobian ``J[i, a, b] = du_a/dx_b``
of shape (n, 3, 3); subclasses override it with closed forms when they
have one, otherwise centered differences are used.
"""

import numpy as np

FD_STEP = 1e-5


def as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, 3)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {x.shape}")
    return x


def fd_gradient(field, t, x, h=FD_STEP) -> np.ndarray:
    """Centered-difference Jacobian of ``field`` at points ``x``."""
    x = as_points(x)
    n = len(x)
    stencil = np.concatenate([x + h * e for e in np.eye(3)] + [x - h * e for e in np.eye(3)])
    vals = np.asarray(field(t, stencil)).reshape(6, n, 3)
    jac = (vals[:3] - vals[3:]) / (2.0 * h)  # (b, n, a)
    return np.transpose(jac, (1, 2, 0))


class VelocityField:
    """Base class for time-dependent velocity fields."""

    def __call__(self, t, x):
        raise NotImplementedError

    def gradient(self, t, x):
        return fd_gradient(self, t, x)

    def value_and_gradient(self, t, x):
        """``(u, grad u)`` at ``x``; override when both share work."""
        return self(t, x), self.gradient(t, x)

    def singularities(self) -> np.ndarray:
        """Points where a closed-form field is singular (poles), shape (k, 3)."""
        return np.zeros((0, 3))

    def __add__(self, other):
        return LinearCombination([(1.0, self), (1.0, other)])

    def __rmul__(self, a):
        return LinearCombination([(float(a), self)])


class ZeroField(VelocityField):
    def __call__(self, t, x):
        return np.zeros_like(as_points(x))

    def gradient(self, t, x):
        return np.zeros((len(as_points(x)), 3, 3))


class ConstantField(VelocityField):
    def __init__(self, c):
        self.c = np.asarray(c, float).reshape(3)

    def __call__(self, t, x):
        return np.broadcast_to(self.c, as_points(x).shape).copy()

    def gradient(self, t, x):
        return np.zeros((len(as_points(x)), 3, 3))


class LinearField(VelocityField):
    """Steady linear field ``x -> A @ (x - x0)``; rotation when A is skew."""

    def __init__(self, A, x0=(0.0, 0.0, 0.0)):
        self.A = np.asarray(A, float).reshape(3, 3)
        self.x0 = np.asarray(x0, float).reshape(3)

    @classmethod
    def rotation(cls, a, x0=(0.0, 0.0, 0.0)):
        """Rigid rotation ``x -> a x (x - x0)``."""
        return cls(skew(a), x0)

    def __call__(self, t, x):
        return (as_points(x) - self.x0) @ self.A.T

    def gradient(self, t, x):
        return np.broadcast_to(self.A, (len(as_points(x)), 3, 3)).copy()


class FunctionField(VelocityField):
    """Wrap a plain callable ``f(t, x)`` and optional ``grad(t, x)``."""

    def __init__(self, f, grad=None):
        self.f = f
        self.grad = grad

    def __call__(self, t, x):
        return np.asarray(self.f(t, as_points(x)), float)

    def gradient(self, t, x):
        if self.grad is None:
            return fd_gradient(self, t, x)
        return np.asarray(self.grad(t, as_points(x)), float)


class LinearCombination(VelocityField):
    """``sum_k a_k * u_k`` for fields ``u_k``."""

    def __init__(self, terms):
        self.terms = [(float(a), u) for a, u in terms]

    def __call__(self, t, x):
        x = as_points(x)
        out = np.zeros_like(x)
        for a, u in self.terms:
            if a != 0.0:
                out += a * u(t, x)
        return out

    def gradient(self, t, x):
        x = as_points(x)
        out = np.zeros((len(x), 3, 3))
        for a, u in self.terms:
            if a != 0.0:
                out += a * u.gradient(t, x)
        return out

    def value_and_gradient(self, t, x):
        x = as_points(x)
        val = np.zeros_like(x)
        jac = np.zeros((len(x), 3, 3))
        for a, u in self.terms:
            if a != 0.0:
                v, g = u.value_and_gradient(t, x)
                val += a * v
                jac += a * g
        return val, jac

    def singularities(self):
        pts = [u.singularities() for a, u in self.terms if a != 0.0]
        return np.vstack(pts) if pts else np.zeros((0, 3))


def skew(a) -> np.ndarray:
    """Matrix of ``v -> a x v``."""
    a1, a2, a3 = np.asarray(a, float).reshape(3)
    return np.array([[0.0, -a3, a2], [a3, 0.0, -a1], [-a2, a1, 0.0]])


def divergence(field, t, x, h=FD_STEP) -> np.ndarray:
    """Centered-difference divergence at points ``x``."""
    return np.trace(fd_gradient(field, t, x, h), axis1=1, axis2=2)
