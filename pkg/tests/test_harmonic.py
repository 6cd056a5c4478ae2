import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lagctrl.exceptions import BasisError, CompatibilityError, ParameterError
from lagctrl.fields import FunctionField, ZeroField
from lagctrl.geometry import CONTROL_PATCH, BoundarySampleSet, DomainSpec, mesh_sphere
from lagctrl.harmonic import (HarmonicApproximator, NeumannSolver, PointSourcePotential, boundary_correction,
                              check_cohomology_basis, cohomology_basis, fibonacci_sphere, harmonic_approx,
                              place_poles, solid_volume_quadrature, solve_neumann)

UNIT = mesh_sphere((0, 0, 0), 1.0, 4)
UNIT_SAMPLES = BoundarySampleSet.from_surface(UNIT)


def interior_probes(n=50, radius=0.7, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1)[:, None] * (radius * rng.random(n) ** (1 / 3))[:, None]


def ball_points(radius, seed=0, n=500):
    return interior_probes(n, radius, seed)


# -- point sources ------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_and_hessian_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = PointSourcePotential(rng.normal(size=(7, 3)) * 0.3 + [3, 0, 0], rng.normal(size=7),
                             0.2, rng.normal(size=3))
    x = rng.normal(size=(5, 3)) * 0.5
    h = 1e-5
    fd = np.stack([(p.value(x + h * e) - p.value(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    assert np.allclose(p.gradient(x), fd, atol=1e-7)
    g, H = p.gradient_and_hessian(x)
    fdH = np.stack([(p.gradient(x + h * e) - p.gradient(x - h * e)) / (2 * h) for e in np.eye(3)], axis=2)
    assert np.allclose(H, fdH, atol=1e-6)
    # harmonic: trace of the Hessian vanishes
    assert np.abs(np.trace(H, axis1=1, axis2=2)).max() <= 1e-10 * np.abs(H).max()
    assert np.allclose(H, np.transpose(H, (0, 2, 1)), atol=1e-12 * np.abs(H).max())


def test_potential_dict_roundtrip():
    p = PointSourcePotential(np.eye(3) * 2, [1.0, -2.0, 0.5], 0.3, (1, 2, 3))
    q = PointSourcePotential.from_dict(p.to_dict())
    x = np.random.default_rng(0).normal(size=(4, 3)) * 0.2
    assert np.array_equal(p.gradient(x), q.gradient(x))


# -- pole placement -------------------------------------------------------------------------

@pytest.mark.parametrize("side,lo,hi", [("outside", 1.4, 1.6), ("inside", 0.4, 0.6)])
def test_pole_offsets(side, lo, hi):
    poles = place_poles(UNIT, side, 0.5, 100)
    r = np.linalg.norm(poles, axis=1)
    assert len(poles) == 100
    assert np.all((r >= lo) & (r <= hi))


def test_four_distinct_poles():
    poles = place_poles(mesh_sphere((1, 0, 0), 0.3, 2), "outside", 0.1, 4)
    assert len(poles) == 4
    d = np.linalg.norm(poles[:, None] - poles[None], axis=2) + np.eye(4)
    assert d.min() > 0


def test_pole_arguments_checked():
    with pytest.raises(ParameterError):
        place_poles(UNIT, "outside", 0.5, 3)
    with pytest.raises(ParameterError):
        place_poles(UNIT, "sideways", 0.5, 10)


# -- Neumann problem ------------------------------------------------------------------------

def _neumann_error(grad_fn):
    flux = np.einsum("ij,ij->i", grad_fn(UNIT_SAMPLES.points), UNIT_SAMPLES.normals)
    phi = solve_neumann(UNIT_SAMPLES, flux, surface=UNIT, pole_offset=0.5, n_poles=400)
    x = interior_probes()
    exact = grad_fn(x)
    return np.linalg.norm(phi.gradient(x) - exact, axis=1).max() / np.linalg.norm(exact, axis=1).max()


def test_neumann_linear():
    assert _neumann_error(lambda x: np.tile([1.0, 0.0, 0.0], (len(x), 1))) <= 1e-6


def test_neumann_quadratic():
    assert _neumann_error(lambda x: np.stack([x[:, 1], x[:, 0], 0 * x[:, 0]], axis=1)) <= 1e-4


def test_neumann_zero_data():
    phi = solve_neumann(UNIT_SAMPLES, np.zeros(len(UNIT_SAMPLES)), surface=UNIT, n_poles=400)
    assert np.linalg.norm(phi.gradient(interior_probes(radius=0.95)), axis=1).max() <= 1e-8


def test_neumann_rejects_net_flux():
    with pytest.raises(CompatibilityError):
        solve_neumann(UNIT_SAMPLES, np.ones(len(UNIT_SAMPLES)), surface=UNIT, n_poles=100)


def test_neumann_solver_estimator():
    s = NeumannSolver(pole_offset=0.5, n_poles=200)
    assert clone(s).get_params() == s.get_params()
    with pytest.raises(NotFittedError):
        s.solve(np.zeros(len(UNIT_SAMPLES)))
    s.fit(UNIT_SAMPLES, UNIT_SAMPLES.normals[:, 2], surface=UNIT)
    v = s.predict(interior_probes(5))
    assert np.allclose(v, [0, 0, 1], atol=1e-6)


# -- Runge approximation --------------------------------------------------------------

TARGET = PointSourcePotential(np.array([[2.0, 0.5, 0.3]]), np.array([1.0]))
MATCH = np.vstack([mesh_sphere((0, 0, 0), r, 3).vertices for r in (0.5, 0.35, 0.2)] + [np.zeros((1, 3))])


def runge_sweep(counts=(50, 100, 200, 400), radius=1.5):
    """Match residuals and sup gradient errors on the ball of radius 0.5."""
    x = ball_points(0.5)
    ref = np.linalg.norm(TARGET.gradient(x), axis=1).max()
    res, err = [], []
    for n in counts:
        phi = harmonic_approx(TARGET, MATCH, None, radius * fibonacci_sphere(n), smallness_weight=0.0)
        res.append(phi.info["relative_residual"])
        err.append(np.linalg.norm(phi.gradient(x) - TARGET.gradient(x), axis=1).max() / ref)
    return res, err


def test_runge_convergence():
    res, err = runge_sweep()
    assert all(b < a for a, b in zip(res, res[1:]))
    assert err[-1] <= 1e-4


def test_affine_target_exact():
    target = PointSourcePotential.affine(linear=(1.0, 0.0, 0.0))
    small = mesh_sphere((0, 0, 0), 1.0, 2).vertices * 1.2
    phi = harmonic_approx(target, MATCH, small, 1.5 * fibonacci_sphere(50), smallness_weight=0.0)
    assert phi.info["relative_residual"] <= 1e-10


def test_smallness_weight_limit():
    small = np.array([[0.0, 0.0, 1.2]]) + 0.1 * fibonacci_sphere(30)
    poles = 2.0 * fibonacci_sphere(100)
    match_res, small_res = [], []
    for w in (1e-2, 1e2, 1e6):
        phi = harmonic_approx(TARGET, MATCH, small, poles, smallness_weight=w)
        match_res.append(phi.info["relative_residual"])
        small_res.append(phi.info["small_residual"])
    assert small_res[-1] < small_res[0]
    assert match_res[-1] > match_res[0]
    assert small_res[-1] <= 1e-2 * small_res[0]


def test_approximator_rejects_pole_on_probe():
    with pytest.raises(ParameterError):
        HarmonicApproximator(poles=MATCH[:5]).fit(TARGET, MATCH)


# -- boundary correction --------------------------------------------------------------

DOMAIN = DomainSpec(radius=2.0, cap_cos=0.8)


def test_correction_of_sealed_free_candidate():
    b = DOMAIN.boundary_samples()
    # a constant potential has zero normal derivative everywhere
    cand = PointSourcePotential.affine(constant=3.0)
    out = boundary_correction(cand, b, DOMAIN, "continuation")
    x = DOMAIN.interior_lattice(0.5)
    assert np.linalg.norm(out.info["h"].gradient(x), axis=1).max() <= 1e-8
    assert np.linalg.norm(out.gradient(x), axis=1).max() <= 1e-8


def test_correction_of_vertical_flow():
    b = DOMAIN.boundary_samples()
    cand = PointSourcePotential.affine(linear=(0.0, 0.0, 1.0))
    out = boundary_correction(cand, b, DOMAIN, "continuation")
    assert out.info["tol_seal"] <= 1e-4 * out.info["candidate_gradient_scale"]


def test_correction_without_sealed_boundary():
    b = DOMAIN.boundary_samples()
    full = BoundarySampleSet(b.points, b.normals, b.weights, np.full(len(b), CONTROL_PATCH))
    cand = PointSourcePotential.affine(linear=(0.0, 0.0, 1.0))
    out = boundary_correction(cand, full)
    x = DOMAIN.interior_lattice(0.5)
    assert np.allclose(out.gradient(x), cand.gradient(x), atol=1e-12)


# -- cohomology -----------------------------------------------------------------------------

def test_simply_connected_domains_have_no_basis():
    assert cohomology_basis(DOMAIN) == []
    assert cohomology_basis(DomainSpec(shape="ellipsoid", semi_axes=(2.0, 1.5, 1.0))) == []


def test_degenerate_basis_rejected():
    pts, w = solid_volume_quadrature(DOMAIN, 0.5)
    with pytest.raises(BasisError):
        check_cohomology_basis([ZeroField()], pts, w)
    ok = check_cohomology_basis([FunctionField(lambda t, x: np.tile([1.0, 0, 0], (len(x), 1)))], pts, w)
    assert ok[0, 0] == pytest.approx(np.sum(w))
