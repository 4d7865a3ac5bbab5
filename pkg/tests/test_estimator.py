import math

import numpy as np
import pytest

from flowgrad.estimator import (
    F_CAP,
    CutoffError,
    EstimatorError,
    TransportOperators,
    build_cutoff,
    control_profile,
    fbar_profile,
    integrate_Q_step,
    make_coefficients,
    martingale_diagnostic,
    op_norm,
    run_derivative_estimate,
    singular_extremes,
)
from flowgrad.flows import reparametrize_history
from flowgrad.stoch import NoiseStream, bm_step, frame_rate_matrix, initial_state

from .conftest import backward, forward

X0 = [0.8, 0.3]


def probe_dict(n, **fields):
    return {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in fields.items()}


# --------------------------------------------------------------------------
# coefficients

def test_coefficients_need_backward_time():
    with pytest.raises(EstimatorError):
        make_coefficients(forward("ricci_bump"))


def test_yamabe_history_must_be_scaled():
    with pytest.raises(EstimatorError, match="lambda"):
        make_coefficients(reparametrize_history(forward("yamabe_sine")))


def test_yamabe_scalar_coefficient():
    c = make_coefficients(backward("yamabe_sine"))
    F = c.F(0.0, probe_dict(3, a=0.5), np.eye(3)[None])
    assert F[0, 0, 0] == pytest.approx(-0.25)


def test_curve_shortening_scalar_coefficient():
    c = make_coefficients(backward("csf_circle"))
    assert c.F(0.0, probe_dict(1, a=2.0), np.eye(1)[None])[0, 0, 0] == pytest.approx(-4.0)
    assert c.F_hat(0.0, probe_dict(1, a=2.0), np.eye(1)[None])[0, 0, 0] == pytest.approx(-12.0)


def test_heat_coefficients_vanish():
    c = make_coefficients(backward("heat_flat"))
    U = np.eye(2)[None]
    assert np.all(c.F(0.0, probe_dict(2, a=1.0), U) == 0)
    assert np.all(c.F_hat(0.0, probe_dict(2, a=1.0), U) == 0)


def test_ricci_coefficients_and_bounds():
    h = backward("ricci_bump")
    c = make_coefficients(h)
    U = np.eye(2)[None]
    assert c.F(0.0, probe_dict(2, a=0.4), U)[0, 0, 0] == pytest.approx(-0.4)
    np.testing.assert_allclose(c.F_hat(0.0, probe_dict(2, a=0.4), U)[0], -0.6 * np.eye(2))
    assert c.sup_F >= h.bounds["K"]
    assert c.valence == (0, 0) and c.dim == 1 and c.dim_hat == 2


def test_second_order_is_limited_to_supported_families():
    with pytest.raises(EstimatorError):
        make_coefficients(backward("csf_ellipse"), order=2)


# --------------------------------------------------------------------------
# transport operators

def test_singular_extremes_closed_forms(rng):
    for d in (1, 2, 3):
        M = rng.normal(size=(20, d, d))
        smax, smin = singular_extremes(M)
        sv = np.linalg.svd(M, compute_uv=False)
        np.testing.assert_allclose(smax, sv[:, 0], rtol=1e-10)
        np.testing.assert_allclose(smin, sv[:, -1], rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(op_norm(2 * np.eye(2)[None]), [2.0])


class _ConstantF:
    """Coefficient stub with a constant scalar reaction term."""

    def __init__(self, c, n=2):
        self.c, self.n = c, n
        self.valence = (0, 0)

    def F(self, s, pr, U):
        return np.full((U.shape[0], 1, 1), self.c)

    def F_hat(self, s, pr, U):
        return self.c * np.broadcast_to(np.eye(self.n), (U.shape[0], self.n, self.n))


def test_constant_reaction_gives_exponential():
    h = backward("heat_flat")
    c, dt, steps = 0.7, h.stride, 200
    st = initial_state(h, X0, 2)
    ops = TransportOperators.identity(2, 1, 2)
    G = np.zeros((2, 2, 2))
    for _ in range(steps):
        ops = integrate_Q_step(ops, _ConstantF(c), st, G, dt)
    np.testing.assert_allclose(ops.Q[:, 0, 0], math.exp(-c * steps * dt), rtol=1e-6)
    np.testing.assert_allclose(ops.Q_hat[0], math.exp(-c * steps * dt) * np.eye(2), rtol=1e-6)


def test_ricci_scalar_transport_is_pathwise_exponential():
    h = backward("ricci_bump")
    coeffs = make_coefficients(h)
    P, dt = 8, h.stride
    st = initial_state(h, X0, P, coeffs.fields)
    noise = NoiseStream(9, np.arange(P), 2)
    ops = TransportOperators.identity(P, 1, 2)
    integral = np.zeros(P)
    for j in range(200):
        G0 = frame_rate_matrix(st.U, st.cache["u"], st.cache["u_t"])
        new, _ = bm_step(st, h, dt, noise, coeffs.fields)
        G1 = frame_rate_matrix(new.U, new.cache["u"], new.cache["u_t"])
        M0 = (coeffs.F(st.t, st.cache, st.U), coeffs.F_hat(st.t, st.cache, st.U))
        M1 = (coeffs.F(new.t, new.cache, new.U), coeffs.F_hat(new.t, new.cache, new.U))
        ops = integrate_Q_step(ops, coeffs, st, 0.5 * (G0 + G1), dt, M0, M1)
        integral += 0.5 * dt * (st.cache["a"] + new.cache["a"])
        st = new
    np.testing.assert_allclose(ops.Q[:, 0, 0], np.exp(integral), rtol=1e-5)


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_transport_is_an_error():
    h = backward("heat_flat")
    st = initial_state(h, X0, 1)
    ops = TransportOperators.identity(1, 1, 2)
    with pytest.raises(FloatingPointError):
        integrate_Q_step(ops, _ConstantF(np.inf), st, np.zeros((1, 2, 2)), 0.1)


# --------------------------------------------------------------------------
# cutoff and control profile

def test_fbar_endpoints_and_smoothness():
    r = 1.2
    s, f, df, _ = fbar_profile(r)
    assert f[0] == 1.0 and f[-1] == 0.0
    assert np.all(np.diff(f) <= 1e-15)
    assert np.all(df <= 1e-12)
    # the mollified profile is flat at both ends
    assert abs(df[0]) < 1e-6 and abs(df[-1]) < 1e-6
    np.testing.assert_allclose(np.gradient(f, s)[5:-5], df[5:-5], rtol=5e-3, atol=1e-3)


def test_cutoff_clamps_beyond_radius():
    cut = build_cutoff(1.0, backward("ricci_bump"), X0)
    np.testing.assert_array_equal(cut.fbar(np.array([0.0, 1.0, 1.5, 7.0])), [1.0, 0.0, 0.0, 0.0])


def test_cutoff_radius_is_certified():
    h = backward("ricci_bump")
    with pytest.raises(CutoffError, match="max admissible r"):
        build_cutoff(50.0, h, X0)
    with pytest.raises(CutoffError):
        build_cutoff(-1.0, h, X0)


def test_global_cutoff_is_trivial():
    cut = build_cutoff(None, None, None, mode="global")
    fm2, capped = cut.f_inv_sq(0.0, np.zeros((3, 2)))
    np.testing.assert_array_equal(fm2, 1.0)
    assert not capped.any()


def test_cutoff_caps_large_inverse_squares():
    class Far:
        min_validity = 10.0

        def __call__(self, s, x):
            return np.full(x.shape[0], 0.999)

    cut = build_cutoff(1.0, None, None, distance=Far())
    fm2, capped = cut.f_inv_sq(0.0, np.zeros((2, 2)))
    assert np.all(fm2 == F_CAP) and capped.all()


def test_global_profile_endpoints():
    p = control_profile("global", [3.0, 4.0], 0.5)
    np.testing.assert_allclose(p(0.0), [0.6, 0.8])
    np.testing.assert_allclose(p(0.5), [0.0, 0.0])
    assert p.v_norm == 5.0 and p.energy == pytest.approx(2.0)


def test_local_profile_endpoints_and_energy():
    p = control_profile("local", [1.0, 0.0], 0.25, (0.5, 1.0))
    assert p.C == pytest.approx(1.5)
    assert p.phi(0.0) == pytest.approx(1.0)
    assert p.phi(0.25) == pytest.approx(0.0, abs=1e-15)
    t = np.linspace(0, 0.25, 200001)
    quad = float(np.sum(p.dphi(0.5 * (t[1:] + t[:-1])) ** 2 * np.diff(t)))
    assert quad == pytest.approx(p.energy, rel=1e-6)


def test_local_profile_concentrates_for_large_rate():
    p = control_profile("local", [1.0], 1.0, (0.0, 0.05))  # C = 400
    assert p.phi(0.02) < math.exp(-7)
    assert p.energy == pytest.approx(p.C / 2 * (1 + math.exp(-p.C)) / (1 - math.exp(-p.C)))
    assert p.energy == pytest.approx(p.C / 2, rel=1e-12)


def test_profile_rejects_bad_horizon():
    with pytest.raises(ValueError):
        control_profile("global", [1.0], 0.0)


# --------------------------------------------------------------------------
# estimator behaviour

def test_zero_noise_estimate_is_zero():
    h = backward("ricci_bump")
    res = run_derivative_estimate(h, make_coefficients(h), X0, np.eye(2), n_paths=50, seed=1,
                                  zero_noise=True)
    assert np.all(res.estimate == 0)


def test_estimate_is_linear_in_direction():
    h = backward("ricci_bump")
    c = make_coefficients(h)
    V = np.array([[1.0, 0.0], [0.0, 1.0], [0.3, -2.0]])
    res = run_derivative_estimate(h, c, X0, V, n_paths=400, seed=2, dt=4 * h.stride)
    np.testing.assert_allclose(res.estimate[2], 0.3 * res.estimate[0] - 2.0 * res.estimate[1],
                               atol=1e-13)


def test_estimate_is_independent_of_chunking(monkeypatch):
    h = backward("ricci_bump")
    c = make_coefficients(h)
    kw = dict(n_paths=300, seed=3, dt=4 * h.stride, keep_payoffs=True)
    a = run_derivative_estimate(h, c, X0, np.eye(2), chunk=300, **kw)
    b = run_derivative_estimate(h, c, X0, np.eye(2), chunk=70, **kw)
    monkeypatch.setenv("FLOWGRAD_WORKERS", "3")
    w = run_derivative_estimate(h, c, X0, np.eye(2), chunk=70, **kw)
    np.testing.assert_array_equal(a.payoffs, b.payoffs)
    np.testing.assert_array_equal(a.payoffs, w.payoffs)


def test_result_records_structural_diagnostics():
    h = backward("ricci_bump")
    res = run_derivative_estimate(h, make_coefficients(h), X0, np.eye(2), mode="local", r=1.0,
                                  n_paths=200, seed=4, dt=2 * h.stride)
    assert res.q_bound_violations == 0
    assert res.max_frame_defect < 1e-8
    assert res.lambda_ok
    assert res.n_effective + sum(res.discards.values()) == res.n_paths
    assert res.mode["r"] == 1.0 and res.mode["C_rate"] > 0
    assert sum(res.stop_reasons.values()) == res.n_paths
    d = res.to_dict()
    assert "wall_clock" not in d and d["n_paths"] == 200


def test_direction_dimension_is_checked():
    h = backward("ricci_bump")
    with pytest.raises(ValueError, match="components"):
        run_derivative_estimate(h, make_coefficients(h), X0, [1.0, 0.0, 0.0], n_paths=10)


def test_horizon_must_fit_the_history():
    h = backward("ricci_bump")
    with pytest.raises(ValueError):
        run_derivative_estimate(h, make_coefficients(h), X0, [1.0, 0.0], n_paths=10,
                                horizon=2 * h.T)


def test_static_martingale_is_constant():
    h = backward("heat_flat")
    rep = martingale_diagnostic(h, make_coefficients(h), [1.0, 1.0], np.eye(2), n_paths=500,
                                seed=1, checkpoints=[0, 50, 100])
    assert rep["passed"]


def test_martingale_needs_paths():
    h = backward("heat_flat")
    with pytest.raises(EstimatorError):
        martingale_diagnostic(h, make_coefficients(h), [1.0, 1.0], np.eye(2), n_paths=10)
