"""Verification instruments: Euler residuals, pressure, Grönwall audit, containment.

Every function here is a pure function of its inputs, so rerunning it on a
stored log reproduces the verdicts.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_positive
from .exceptions import AuditFailure, ParameterError
from .fields import as_points

_EYE = np.eye(3)


# -- report container -------------------------------------------------------------------

@dataclass
class Metric:
    value: float
    tolerance: float
    unit: str = ""
    kind: str = "max"  # "max": pass iff value <= tolerance; "min": value >= tolerance

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.value):
            return False
        return self.value <= self.tolerance if self.kind == "max" else self.value >= self.tolerance

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class DiagnosticsReport:
    """Named scalar metrics with their tolerances, plus time series."""

    metrics: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    def add(self, name, value, tolerance, unit="", kind="max") -> Metric:
        m = Metric(float(value), float(tolerance), unit, kind)
        self.metrics[name] = m
        return m

    def add_series(self, name, times, values):
        self.series[name] = (list(map(float, times)), list(map(float, values)))

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.metrics.values())

    def failures(self):
        return [k for k, m in self.metrics.items() if not m.passed]

    def to_dict(self):
        return {"passed": self.passed,
                "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
                "series": {k: {"time": t, "value": v} for k, (t, v) in self.series.items()}}

    def to_json(self, path=None, indent=2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def write_series_csv(self, path):
        """Long-format CSV: series, time, value."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["series", "time", "value"])
            for name, (ts, vs) in self.series.items():
                for t, v in zip(ts, vs):
                    w.writerow([name, repr(t), repr(v)])

    @classmethod
    def from_dict(cls, d):
        rep = cls()
        for k, m in d.get("metrics", {}).items():
            rep.add(k, m["value"], m["tolerance"], m.get("unit", ""), m.get("kind", "max"))
        for k, s in d.get("series", {}).items():
            rep.add_series(k, s["time"], s["value"])
        return rep


# -- Euler residual -----------------------------------------------------------------------

def _acceleration(u, t, x, dt, h):
    """``d_t u + (grad u) u`` by centered differences."""
    dudt = (u(t + dt, x) - u(t - dt, x)) / (2.0 * dt)
    n = len(x)
    st = np.concatenate([x + h * e for e in _EYE] + [x - h * e for e in _EYE])
    vals = u(t, st).reshape(6, n, 3)
    jac = np.transpose((vals[:3] - vals[3:]) / (2.0 * h), (1, 2, 0))
    return dudt + np.einsum("nab,nb->na", jac, u(t, x))


def _curl_of(fn, x, h):
    n = len(x)
    st = np.concatenate([x + h * e for e in _EYE] + [x - h * e for e in _EYE])
    vals = fn(st).reshape(6, n, 3)
    g = np.transpose((vals[:3] - vals[3:]) / (2.0 * h), (1, 2, 0))  # g[i, a, b] = d_b f_a
    return np.stack([g[:, 2, 1] - g[:, 1, 2], g[:, 0, 2] - g[:, 2, 0], g[:, 1, 0] - g[:, 0, 1]], axis=1)


def curl_acceleration(u, t, probes, dt, h) -> np.ndarray:
    """``curl(d_t u + (u . grad) u)`` at the probes, centered differences only."""
    x = as_points(probes)
    return _curl_of(lambda y: _acceleration(u, t, y, dt, h), x, h)


@dataclass
class EulerResidual:
    """Sup residual with its discretization estimate.

    ``fd_estimate`` is the Richardson estimate of the finite-difference error
    from a second evaluation at ``(2 dt, 2 h)``; ``model_estimate`` is any
    additional discretization error of the field itself supplied by the
    caller.  ``estimate`` is their sum.
    """

    residual: float
    estimate: float
    fd_estimate: float
    model_estimate: float
    ratio: float
    per_probe: Optional[np.ndarray] = None

    def to_dict(self):
        return {"residual": self.residual, "estimate": self.estimate, "fd_estimate": self.fd_estimate,
                "model_estimate": self.model_estimate, "ratio": self.ratio}


def euler_residual(u, probes, t, dt, h, domain=None, model_estimate=None) -> EulerResidual:
    """``sup_probes |curl(d_t u + (u . grad) u)|`` by centered differences.

    Parameters
    ----------
    u : VelocityField
        Callable ``u(t, x)``.
    probes : (n, 3) array
        Interior points; with ``domain`` given they must keep a clearance of
        at least ``2 h`` from the boundary.
    dt, h : float
        Time and space steps.
    model_estimate : float or (n,) array, optional
        Extra error bound for the field's own discretization, added to the
        Richardson estimate probe by probe.
    """
    check_positive(dt, "dt")
    check_positive(h, "h")
    x = as_points(probes)
    if domain is not None:
        sd = domain.signed_distance(x)
        if np.any(sd > -2.0 * h):
            i = int(np.argmax(sd))
            raise ParameterError(f"probe {i} at {x[i]} is within 2h = {2 * h:g} of the boundary")
    r1 = curl_acceleration(u, t, x, dt, h)
    r2 = curl_acceleration(u, t, x, 2.0 * dt, 2.0 * h)
    res = np.linalg.norm(r1, axis=1)
    fd = np.linalg.norm(r2 - r1, axis=1) / 3.0
    model = np.zeros(len(x)) if model_estimate is None else np.broadcast_to(
        np.asarray(model_estimate, float), (len(x),))
    est = fd + model
    i = int(np.argmax(res))
    residual = float(res.max())
    estimate = float(est.max())
    ratio = residual / estimate if estimate > 0 else (0.0 if residual == 0 else math.inf)
    return EulerResidual(residual, estimate, float(fd.max()), float(model.max()), ratio, res)


def convergence_order(u, probes, t, dt, h, factor=2.0) -> float:
    """Observed order of the residual under ``(dt, h) -> (dt, h) / factor``."""
    a = np.linalg.norm(curl_acceleration(u, t, probes, dt, h), axis=1).max()
    b = np.linalg.norm(curl_acceleration(u, t, probes, dt / factor, h / factor), axis=1).max()
    if b == 0.0 or a == 0.0:
        return math.inf
    return float(math.log(a / b) / math.log(factor))


# -- pressure -------------------------------------------------------------------------

def bernoulli_pressure(theta, t, x) -> np.ndarray:
    """``p = -d_t theta - |grad theta|^2 / 2`` for the potential flow ``grad theta``."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t must lie in [0, 1], got {t}")
    x = as_points(x)
    g = theta.velocity(t, x)
    return -theta.dtheta_dt(t, x) - 0.5 * np.einsum("ij,ij->i", g, g)


def momentum_residual(theta, probes, t, dt, h):
    """``|d_t u + (u . grad) u + grad p|`` with the Bernoulli pressure.

    Returns ``(sup residual, Richardson estimate)``.
    """
    x = as_points(probes)
    u = theta.field()

    def res(dt_, h_):
        acc = _acceleration(u, t, x, dt_, h_)
        gp = np.stack([(bernoulli_pressure(theta, t, x + h_ * e) - bernoulli_pressure(theta, t, x - h_ * e))
                       / (2.0 * h_) for e in _EYE], axis=1)
        return acc + gp

    r1, r2 = res(dt, h), res(2.0 * dt, 2.0 * h)
    return float(np.linalg.norm(r1, axis=1).max()), float(np.linalg.norm(r2 - r1, axis=1).max() / 3.0)


# -- Grönwall audit ----------------------------------------------------------------------

@dataclass
class GronwallVerdict:
    margin: float
    passed: bool
    worst_time: float
    constant: float
    slack: float

    def to_dict(self):
        return asdict(self)


def gronwall_audit(log, C: float = 1.0, slack: float = 2.0, raise_on_failure: bool = True) -> GronwallVerdict:
    """Check ``|omega(t)| <= slack |omega(0)| exp(C int_0^t V)`` on a transport log.

    ``log`` has ``times``, ``omega_sup`` and a rate ``V`` (``rate()`` or
    ``grad_sup`` plus ``div_sup``).  The margin is the smallest ratio of
    the bound to the measured sup; the check passes iff it is at least 1.
    """
    times = np.asarray(log.times if hasattr(log, "times") else log["time"], float)
    om = np.asarray(log.omega_sup if hasattr(log, "omega_sup") else log["omega_sup"], float)
    if hasattr(log, "rate"):
        V = np.asarray(log.rate(), float)
    else:
        V = np.asarray(log["grad_sup"], float) + np.asarray(log["div_sup"], float)
    if len(times) == 0:
        raise ParameterError("empty transport log")
    integral = np.r_[0.0, np.cumsum(0.5 * np.diff(times) * (V[1:] + V[:-1]))]
    bound = slack * om[0] * np.exp(C * np.abs(integral))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(om > 0, bound / np.where(om > 0, om, 1.0), np.inf)
    if np.all(om == 0):
        ratio = np.full(len(om), float(slack))
    k = int(np.argmin(ratio))
    margin = float(ratio[k])
    verdict = GronwallVerdict(margin, margin >= 1.0, float(times[k]), float(C), float(slack))
    if raise_on_failure and not verdict.passed:
        raise AuditFailure(f"Grönwall bound violated at t={times[k]:.4g} (margin {margin:.3g} < 1)")
    return verdict


# -- containment ---------------------------------------------------------------------------

@dataclass
class ContainmentVerdict:
    passed: bool
    min_clearance: float
    time: float

    def to_dict(self):
        return asdict(self)


def containment_check(trajectory, domain) -> ContainmentVerdict:
    """Minimum over snapshots and vertices of the distance to the boundary.

    ``trajectory`` is a list of surfaces or of ``(t, surface)`` pairs.
    Passes iff the clearance is positive.
    """
    if not trajectory:
        raise ParameterError("empty trajectory")
    best, when = math.inf, 0.0
    for k, item in enumerate(trajectory):
        t, surf = item if isinstance(item, tuple) else (float(k), item)
        c = float(-domain.signed_distance(surf.vertices).max())
        if c < best:
            best, when = c, float(t)
    return ContainmentVerdict(best > 0.0, best, when)
