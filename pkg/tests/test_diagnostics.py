import json
import math

import numpy as np
import pytest

from lagctrl.control import (SynthesisConfig, TimePartitionedControl, build_translation_isotopy,
                             synthesize_control, time_partition)
from lagctrl.diagnostics import (DiagnosticsReport, Metric, bernoulli_pressure, containment_check,
                                 convergence_order, euler_residual, gronwall_audit, momentum_residual)
from lagctrl.euler import MarkerCloud, TransportLog, transport_vorticity
from lagctrl.exceptions import AuditFailure, ParameterError
from lagctrl.fields import FunctionField, LinearField, ZeroField
from lagctrl.geometry import DomainSpec, mesh_sphere
from lagctrl.harmonic import PointSourcePotential

DOMAIN = DomainSpec(radius=2.0, cap_cos=0.8)


@pytest.fixture(scope="module")
def control():
    gamma0 = mesh_sphere((-0.8, 0, 0), 0.5, 2)
    X = build_translation_isotopy(gamma0, (0.4, 0, 0), DOMAIN, 0.35)
    cfg = SynthesisConfig(variation_tol=0.1, approx_pole_count=200, correction_pole_count=200)
    return synthesize_control(X, gamma0, DOMAIN, cfg)


def probes(n=60, radius=1.2, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1)[:, None] * (radius * rng.random(n) ** (1 / 3))[:, None]


# -- Euler residual ------------------------------------------------------------------------

def test_potential_phase_residual_within_estimate(control):
    u = control.field()
    r = euler_residual(u, probes(), 0.5, 1e-3, 1e-3, domain=DOMAIN)
    assert r.residual <= 5.0 * r.estimate


def test_potential_phase_convergence_order(control):
    assert convergence_order(control.field(), probes(), 0.5, 4e-3, 4e-3) >= 1.8


def test_rigid_rotation_has_no_residual():
    r = euler_residual(LinearField.rotation((0.3, 0.1, 1.0)), probes(), 0.5, 1e-3, 1e-3)
    assert r.residual <= 1e-8


def test_uniform_acceleration_is_curl_free():
    u = FunctionField(lambda t, x: np.tile([t, 0.0, 0.0], (len(x), 1)))
    r = euler_residual(u, probes(), 0.5, 1e-2, 1e-2)
    assert r.residual <= 1e-10


def test_probe_clearance_enforced():
    with pytest.raises(ParameterError):
        euler_residual(ZeroField(), [[0, 0, 1.99]], 0.5, 1e-3, 1e-2, domain=DOMAIN)


# -- pressure ----------------------------------------------------------------------------------

def test_zero_potential_has_zero_pressure():
    c = TimePartitionedControl(time_partition([0.0], [1.5]), [PointSourcePotential.zero()])
    assert np.abs(bernoulli_pressure(c, 0.3, probes())).max() == 0.0


def test_steady_potential_pressure():
    p = PointSourcePotential(np.array([[3.0, 0, 0]]), [1.0], 0.0, (0.2, 0.0, 0.0))
    c = TimePartitionedControl(time_partition([0.0], [1.5]), [p])
    x = probes()
    g = p.gradient(x)
    assert np.allclose(bernoulli_pressure(c, 0.4, x), -0.5 * np.sum(g * g, axis=1), atol=1e-14)
    with pytest.raises(ParameterError):
        bernoulli_pressure(c, 1.5, x)


def test_momentum_residual_within_estimate(control):
    res, est = momentum_residual(control, probes(), 0.5, 1e-3, 1e-3)
    assert res <= est


# -- Grönwall ------------------------------------------------------------------------------

def _log(times, omega, grad, div=None):
    return TransportLog(list(times), list(omega), list(grad), list(div if div is not None else np.zeros(len(times))))


def test_gronwall_without_flow_has_margin_two():
    c = MarkerCloud(probes(10), probes(10, seed=1), np.ones(10))
    out = transport_vorticity(ZeroField(), c, 1.0, 10)
    v = gronwall_audit(out.log)
    assert v.passed and v.margin == pytest.approx(2.0)


def test_gronwall_rotation_isometric():
    c = MarkerCloud(probes(10), probes(10, seed=1), np.ones(10))
    out = transport_vorticity(LinearField.rotation((0, 0, 2.0)), c, 1.0, 40)
    assert np.allclose(out.log.omega_sup, out.log.omega_sup[0], rtol=1e-8)
    assert gronwall_audit(out.log).passed


def test_gronwall_stretching_flow_respects_bound():
    c = MarkerCloud(probes(10), probes(10, seed=1), np.ones(10))
    out = transport_vorticity(LinearField(np.diag([1.0, 0.5, -1.5])), c, 1.0, 40)
    v = gronwall_audit(out.log)
    assert v.passed and v.margin >= 1.0


def test_gronwall_violation_raises():
    log = _log([0.0, 0.5, 1.0], [1.0, 3.0, 5.0], [0.0, 0.0, 0.0])
    with pytest.raises(AuditFailure):
        gronwall_audit(log)
    v = gronwall_audit(log, raise_on_failure=False)
    assert not v.passed and v.margin == pytest.approx(0.4)
    assert v.worst_time == 1.0


def test_gronwall_accepts_stored_dict():
    log = _log([0.0, 0.5, 1.0], [1.0, 1.2, 1.5], [0.4, 0.6, 0.8])
    a = gronwall_audit(log)
    b = gronwall_audit(json.loads(json.dumps(log.to_dict())))
    assert a == b


# -- containment ---------------------------------------------------------------------------

def test_static_sphere_clearance():
    s = mesh_sphere((0, 0, 0), 0.5, 2)
    v = containment_check([s, s], DOMAIN)
    assert v.passed and v.min_clearance == pytest.approx(1.5, abs=1e-12)


def test_touching_surface_fails():
    s = mesh_sphere((0, 0, 0), 0.5, 2)
    touching = s.translated((1.5 - s.vertices[:, 0].max() + 1.5, 0, 0))
    v = containment_check([(0.0, s), (0.7, touching)], DOMAIN)
    assert not v.passed and v.min_clearance <= 0.0 and v.time == 0.7
    with pytest.raises(ParameterError):
        containment_check([], DOMAIN)


# -- report -------------------------------------------------------------------------------------

def test_report_roundtrip_reproduces_verdicts(tmp_path):
    rep = DiagnosticsReport()
    rep.add("residual", 1e-5, 1e-4)
    rep.add("margin", 1.1, 1.2, kind="min")
    rep.add_series("volume", [0.0, 1.0], [1.0, 1.0001])
    text = rep.to_json(tmp_path / "d.json")
    back = DiagnosticsReport.from_dict(json.loads(text))
    assert back.to_dict() == rep.to_dict()
    assert back.failures() == ["margin"] and not back.passed
    rep.write_series_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "series,time,value"


def test_nan_metric_fails():
    assert not Metric(math.nan, 1.0).passed
    assert Metric(0.5, 1.0).passed and not Metric(0.5, 1.0, kind="min").passed
