import numpy as np
import pytest

from flowgrad.geom import (
    CoordinateChart,
    DomainError,
    GeometryError,
    MetricSnapshot,
    TensorComponents,
    christoffel_at,
    eikonal_residual,
    geodesic_distance,
    laplace_beltrami,
    metric_at,
    orthonormality_defect,
    scalar_curvature_conformal,
    tensor_basis_convert,
)

TWO_PI = 2 * np.pi


def torus(N=32, L=TWO_PI, n=2):
    return CoordinateChart("periodic-box", (L,) * n, (N,) * n)


def snapshot(chart, u, u_t=None):
    return MetricSnapshot(0.0, chart, u, np.zeros_like(u) if u_t is None else u_t)


def bump(chart, eps=0.4):
    X, Y = chart.mesh()
    return eps * np.exp(np.cos(X) + np.cos(Y) - 2)


# --------------------------------------------------------------------------
# charts

def test_chart_rejects_bad_input():
    with pytest.raises(ValueError):
        CoordinateChart("periodic-box", (1.0,), (8,))
    with pytest.raises(ValueError):
        CoordinateChart("periodic-box", (0.0,), (32,))
    with pytest.raises(ValueError):
        CoordinateChart("torus", (1.0,), (32,))


def test_normalize_is_idempotent():
    chart = torus()
    x = np.array([[7.0, -3.0], [100.0, 0.5]])
    once = chart.normalize(x)
    assert np.all((once >= 0) & (once < TWO_PI))
    np.testing.assert_array_equal(chart.normalize(once), once)


def test_plane_box_rejects_outside_points():
    chart = CoordinateChart("plane-box", (4.0, 4.0), (33, 33))
    with pytest.raises(DomainError):
        chart.normalize([3.0, 0.0])
    snap = snapshot(chart, np.zeros(chart.resolution))
    with pytest.raises(DomainError):
        metric_at(snap, [0.0, 2.5])


def test_spectral_derivative_of_sine():
    chart = torus(N=32)
    X, _ = chart.mesh()
    np.testing.assert_allclose(chart.derivative(np.sin(2 * X), 0), 2 * np.cos(2 * X), atol=1e-12)
    np.testing.assert_allclose(chart.derivative(np.sin(2 * X), 0, 2), -4 * np.sin(2 * X), atol=1e-11)


# --------------------------------------------------------------------------
# metric and connection

def test_flat_metric_is_identity():
    chart = torus()
    snap = snapshot(chart, np.zeros(chart.resolution))
    np.testing.assert_array_equal(metric_at(snap, [0.37, 5.1]), np.eye(2))


def test_constant_conformal_factor():
    chart = torus()
    snap = snapshot(chart, np.full(chart.resolution, 0.3))
    np.testing.assert_allclose(metric_at(snap, [1.234, 0.5]), np.exp(0.6) * np.eye(2), rtol=1e-12)


def test_bump_metric_off_node_matches_closed_form():
    chart = torus(N=64)
    snap = snapshot(chart, bump(chart))
    x = np.array([0.811, 2.093])
    u = 0.4 * np.exp(np.cos(x[0]) + np.cos(x[1]) - 2)
    np.testing.assert_allclose(metric_at(snap, x), np.exp(2 * u) * np.eye(2), rtol=1e-5)


def test_metric_positive_definite_on_grid():
    chart = torus()
    snap = snapshot(chart, bump(chart, eps=1.0))
    eig = np.linalg.eigvalsh(snap.g())
    assert eig.min() > 0


def test_christoffel_flat_is_zero():
    chart = torus()
    snap = snapshot(chart, np.zeros(chart.resolution))
    assert np.abs(christoffel_at(snap, [0.3, 0.9])).max() == 0.0


def test_conformal_christoffel_identities():
    chart = torus(N=64)
    snap = snapshot(chart, bump(chart))
    x = np.array([0.9, 2.2])
    gam = christoffel_at(snap, x)
    d1 = snap.fields.at("d0:u", x[None])[0]
    d2 = snap.fields.at("d1:u", x[None])[0]
    np.testing.assert_allclose(gam[0, 0, 0], d1, rtol=1e-12)
    np.testing.assert_allclose(gam[0, 1, 1], -d1, rtol=1e-12)
    np.testing.assert_allclose(gam[0, 0, 1], d2, rtol=1e-12)
    np.testing.assert_allclose(gam, np.swapaxes(gam, 1, 2), atol=0)


def test_christoffel_matches_metric_finite_differences(rng):
    chart = torus(N=64)
    snap = snapshot(chart, bump(chart))
    h = 1e-4
    for x in rng.uniform(0, TWO_PI, size=(5, 2)):
        dg = np.stack([(metric_at(snap, x + h * e) - metric_at(snap, x - h * e)) / (2 * h)
                       for e in np.eye(2)], axis=-1)  # dg[i, j, k] = d_k g_ij
        ginv = np.linalg.inv(metric_at(snap, x))
        term = np.einsum("ljk->ljk", dg.transpose(0, 2, 1)) + dg - np.einsum("jkl->ljk", dg)
        ref = 0.5 * np.einsum("il,ljk->ijk", ginv, term)
        np.testing.assert_allclose(christoffel_at(snap, x), ref, atol=1e-4)


def test_arclength_circle_christoffel_is_zero():
    chart = CoordinateChart("closed-curve", (TWO_PI,), (64,))
    snap = snapshot(chart, np.zeros(chart.resolution))
    assert np.abs(christoffel_at(snap, [1.0])).max() == 0.0


def test_singular_metric_is_reported():
    chart = torus()
    u = np.zeros(chart.resolution)
    u[3, 4] = np.inf
    with pytest.raises(GeometryError, match="grid node"):
        snapshot(chart, u)


# --------------------------------------------------------------------------
# curvature

def test_constant_factor_has_zero_curvature():
    chart = torus()
    R = scalar_curvature_conformal(np.full(chart.resolution, 0.7), chart)
    assert np.abs(R).max() < 1e-12


def test_linearized_curvature_of_small_sine():
    chart = torus(N=32)
    X, _ = chart.mesh()
    eps = 1e-4
    R = scalar_curvature_conformal(eps * np.sin(X), chart)
    np.testing.assert_allclose(R, 2 * eps * np.sin(X), atol=10 * eps ** 2)


def test_stereographic_sphere_curvature():
    chart = CoordinateChart("plane-box", (4.0, 4.0), (129, 129))
    X, Y = chart.mesh()
    rho = 1.5
    u = np.log(2 * rho / (1 + X ** 2 + Y ** 2))
    R = scalar_curvature_conformal(u, chart)
    interior = (np.abs(X) < 1.5) & (np.abs(Y) < 1.5)
    np.testing.assert_allclose(R[interior], 2 / rho ** 2, rtol=1e-4)


def test_three_dimensional_curvature_of_one_coordinate_factor():
    chart = torus(N=32, n=3)
    X = chart.mesh()[0]
    eps = 0.1
    u = eps * np.sin(X)
    R = scalar_curvature_conformal(u, chart)
    ref = -np.exp(-2 * u) * (4 * (-eps * np.sin(X)) + 2 * (eps * np.cos(X)) ** 2)
    np.testing.assert_allclose(R, ref, atol=1e-12)


def test_laplace_beltrami_flat():
    chart = torus()
    X, Y = chart.mesh()
    f = np.sin(X) * np.cos(2 * Y)
    np.testing.assert_allclose(laplace_beltrami(f, np.zeros_like(f), chart), -5 * f, atol=1e-11)


# --------------------------------------------------------------------------
# tensors

def test_identity_frame_leaves_components_unchanged():
    t = TensorComponents((1, 1), np.arange(4.0))
    out = tensor_basis_convert(t, np.eye(2), "to-frame")
    np.testing.assert_array_equal(out.comps, t.comps)
    assert out.basis == "frame"


def test_scalar_is_frame_independent():
    t = TensorComponents((0, 0), [3.5])
    out = tensor_basis_convert(t, np.array([[2.0, 1.0], [0.0, 3.0]]), "to-frame")
    assert out.comps[0] == 3.5


def test_one_form_with_scaled_frame():
    t = TensorComponents((0, 1), [1.0, 0.0])
    out = tensor_basis_convert(t, 2 * np.eye(2), "to-frame")
    np.testing.assert_allclose(out.comps, [2.0, 0.0])


def test_basis_round_trip(rng):
    U = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    t = TensorComponents((1, 2), rng.normal(size=27))
    back = tensor_basis_convert(tensor_basis_convert(t, U, "to-frame"), U, "to-coordinates")
    np.testing.assert_allclose(back.comps, t.comps, atol=1e-12)


def test_basis_tag_is_enforced():
    t = TensorComponents((0, 1), [1.0, 0.0])
    with pytest.raises(ValueError):
        tensor_basis_convert(t, np.eye(2), "to-coordinates")
    with pytest.raises(GeometryError):
        tensor_basis_convert(t, np.zeros((2, 2)), "to-frame")


def test_component_count_is_checked():
    with pytest.raises(ValueError):
        TensorComponents((0, 2), np.zeros(5))
    with pytest.raises(ValueError):
        TensorComponents((0, 0), np.zeros(2))


def test_orthonormality_defect():
    g = np.exp(0.4) * np.eye(2)
    U = np.exp(-0.2) * np.eye(2)
    assert orthonormality_defect(U, g) < 1e-15
    assert orthonormality_defect(np.eye(2), g) > 0.4


# --------------------------------------------------------------------------
# geodesic distance

def test_flat_torus_distance():
    chart = torus(N=64)
    snap = snapshot(chart, np.zeros(chart.resolution))
    x0 = np.array([1.0, 2.0])
    df = geodesic_distance(snap, x0)
    X, Y = chart.mesh()
    dx = (X - x0[0] + np.pi) % TWO_PI - np.pi
    dy = (Y - x0[1] + np.pi) % TWO_PI - np.pi
    exact = np.hypot(dx, dy)
    mask = exact < df.validity_radius
    assert np.abs(df.rho - exact)[mask].max() < 2 * chart.spacing.max()
    assert df(x0[None])[0] == pytest.approx(0.0, abs=1e-12)
    assert df.rho.min() >= 0


def test_constant_factor_scales_distance():
    chart = torus(N=64)
    x0 = [3.0, 3.0]
    flat = geodesic_distance(snapshot(chart, np.zeros(chart.resolution)), x0)
    scaled = geodesic_distance(snapshot(chart, np.full(chart.resolution, 0.25)), x0)
    np.testing.assert_allclose(scaled.rho, np.exp(0.25) * flat.rho, rtol=1e-12)


def test_eikonal_residual_on_bump():
    chart = torus(N=64)
    snap = snapshot(chart, bump(chart))
    df = geodesic_distance(snap, [0.8, 0.3])
    res = eikonal_residual(df, snap)
    assert np.nanmax(res) < 2 * chart.spacing.max()
    assert df.validity_radius > 1.0


def test_too_coarse_grid_is_rejected():
    chart = CoordinateChart("periodic-box", (1.0, 1.0), (16, 16))
    u = np.zeros(chart.resolution)
    u[8, 8] = 5.0  # one huge cell dwarfs the half-period cap
    snap = snapshot(chart, u)
    with pytest.raises(GeometryError):
        geodesic_distance(snap, [0.0, 0.0])
