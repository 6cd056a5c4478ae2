import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from lagctrl.control import (CompositeIsotopy, SynthesisConfig, TimePartitionedControl, build_translation_isotopy,
                             default_half_widths, sample_schedule, speed_integral, speed_profile,
                             synthesize_control, time_partition)
from lagctrl.exceptions import GeometryError, ParameterError, ValidationError
from lagctrl.fields import divergence
from lagctrl.geometry import DomainSpec, advect_surface, enclosed_volume, mesh_sphere, surface_distance
from lagctrl.harmonic import PointSourcePotential

DOMAIN = DomainSpec(radius=2.0, cap_cos=0.8)
GAMMA0 = mesh_sphere((0, -0.8, 0), 0.5, 3)


def translation(d=(0, 1.6, 0)):
    return build_translation_isotopy(GAMMA0, d, DOMAIN, 0.35)


# -- profiles and partitions ----------------------------------------------------------

def test_speed_profile_has_unit_mass():
    assert quad(lambda t: float(speed_profile(t)), 0, 1, limit=200)[0] == pytest.approx(1.0, abs=1e-10)
    assert speed_integral(0.5) == pytest.approx(0.5, abs=1e-12)
    assert speed_integral(-1.0) == 0.0 and speed_integral(2.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(t=st.floats(0.0, 1.0), n=st.integers(1, 12))
def test_partition_of_unity(t, n):
    times = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.0])
    p = time_partition(times, default_half_widths(times))
    w = p(t)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(p.derivative(t).sum()) <= 1e-8 * max(1.0, np.abs(p.derivative(t)).max())


def test_partition_gap_rejected():
    with pytest.raises(ParameterError):
        time_partition([0.0, 1.0], [0.3, 0.3])
    with pytest.raises(ParameterError):
        time_partition([0.0, 0.5], [0.1, -1.0])


# -- isotopies ------------------------------------------------------------------------------

@pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
def test_translation_isotopy_divergence_free(t):
    X = translation()
    x = X.center(t) + np.random.default_rng(1).uniform(-0.9, 0.9, (200, 3))
    div = divergence(X, t, x, h=1e-5)
    assert np.abs(div).max() <= 1e-6 * max(1.0, np.abs(X(t, x)).max())


def test_translation_plateau_and_support():
    X = translation()
    t = 0.5
    c = X.center(t)
    inner = c + 0.55 * np.eye(3)
    assert np.allclose(X(t, inner), X.center_velocity(t), atol=1e-14)
    outer = c + (0.5 + 0.36) * np.eye(3)
    assert np.abs(X(t, outer)).max() == 0.0
    assert np.abs(X(0.0, inner)).max() == 0.0 and np.abs(X(1.0, inner)).max() == 0.0


def test_translation_carries_gamma0_to_target():
    X = translation()
    out = advect_surface(GAMMA0, X, 0.0, 1.0, 400)
    assert surface_distance(out, GAMMA0.translated((0, 1.6, 0))).hausdorff <= 1e-6


def test_clearance_enforced():
    with pytest.raises(GeometryError):
        build_translation_isotopy(GAMMA0, (0, 0, 1.5), DOMAIN, 0.35)


def test_composite_preserves_volume_and_reaches_scales():
    s = np.array([1.2, 1 / 1.2, 1.0])
    X = CompositeIsotopy(GAMMA0.vertices.mean(0), 0.5, [(0.45, (0, 0.8, 0), s), (0.9, (0, 1.6, 0), (1, 1, 1))],
                         0.35, DOMAIN)
    X.check_clearance()
    half = advect_surface(GAMMA0, X, 0.0, 0.45, 200)
    assert enclosed_volume(half) == pytest.approx(enclosed_volume(GAMMA0), rel=1e-6)
    ext = np.ptp(half.vertices, axis=0) / np.ptp(GAMMA0.vertices, axis=0)
    assert ext == pytest.approx(s, rel=1e-5)
    t = 0.3
    x = X.center(t) + np.random.default_rng(2).uniform(-0.9, 0.9, (200, 3))
    assert np.abs(divergence(X, t, x, h=1e-5)).max() <= 1e-5


def test_composite_rejects_volume_change():
    with pytest.raises(ValidationError):
        CompositeIsotopy((0, 0, 0), 0.5, [(0.5, (0, 0, 0), (1.1, 1.0, 1.0))], 0.35)


def test_schedule_bounds_variation():
    X = translation()
    tol = 0.05
    sch = sample_schedule(X, GAMMA0, tol, diameter=DOMAIN.diameter)
    assert sch.times[0] == 0.0 and sch.times[-1] == 1.0
    for a, b in zip(sch.surfaces, sch.surfaces[1:]):
        assert np.linalg.norm(b.vertices - a.vertices, axis=1).max() <= tol * DOMAIN.diameter


def test_zero_isotopy_single_snapshot():
    sch = sample_schedule(translation((0, 0, 0)), GAMMA0, 0.02)
    assert sch.times.tolist() == [0.0]


# -- time-partitioned control ------------------------------------------------------------

def _control():
    rng = np.random.default_rng(4)
    poles = 3.0 * rng.normal(size=(5, 3)) / np.sqrt(3) + [0, 0, 3]
    pots = [PointSourcePotential(poles, rng.normal(size=5), 0.0, rng.normal(size=3)) for _ in range(4)]
    times = np.linspace(0, 1, 4)
    return TimePartitionedControl(time_partition(times, default_half_widths(times)), pots)


def test_control_blends_potentials():
    c = _control()
    x = np.random.default_rng(5).uniform(-0.5, 0.5, (10, 3))
    t = 0.4
    w = c.partition(t)
    expect = sum(wi * p.gradient(x) for wi, p in zip(w, c.potentials))
    assert np.allclose(c.velocity(t, x), expect, atol=1e-13)
    assert np.abs(c.velocity(1.2, x)).max() == 0.0


def test_control_time_derivative():
    c = _control()
    x = np.random.default_rng(6).uniform(-0.5, 0.5, (10, 3))
    h = 1e-6
    fd = (c.theta(0.4 + h, x) - c.theta(0.4 - h, x)) / (2 * h)
    assert np.allclose(c.dtheta_dt(0.4, x), fd, rtol=1e-5, atol=1e-7)


def test_control_dict_roundtrip():
    c = _control()
    d = TimePartitionedControl.from_dict(c.to_dict())
    x = np.random.default_rng(7).uniform(-0.5, 0.5, (10, 3))
    assert np.array_equal(c.velocity(0.3, x), d.velocity(0.3, x))


# -- synthesis ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def coarse_control():
    gamma0 = mesh_sphere((0, -0.8, 0), 0.5, 2)
    X = build_translation_isotopy(gamma0, (0, 0.4, 0), DOMAIN, 0.35)
    cfg = SynthesisConfig(variation_tol=0.1, approx_pole_count=200, correction_pole_count=200)
    return synthesize_control(X, gamma0, DOMAIN, cfg), X


def test_synthesis_report_per_snapshot(coarse_control):
    control, _ = coarse_control
    assert len(control.report) == len(control.times)
    assert all(np.isfinite(r.seal_residual) for r in control.report)


def test_synthesized_control_is_potential_flow(coarse_control):
    control, _ = coarse_control
    x = DOMAIN.interior_lattice(0.5)
    H = control.velocity_gradient(0.5, x)
    scale = np.abs(H).max()
    assert np.allclose(H, np.transpose(H, (0, 2, 1)), atol=1e-10 * scale)
    assert np.abs(np.trace(H, axis1=1, axis2=2)).max() <= 1e-9 * scale
