import math

import numpy as np
import pytest

from flowgrad.flows import FlowHistory
from flowgrad.geom import CoordinateChart, MetricSnapshot, TensorComponents
from flowgrad.stoch import (
    EXITED,
    RUNNING,
    NoiseStream,
    PathState,
    bm_step,
    frame_defect,
    g_operator,
    g_operator_matrix,
    gram_schmidt,
    gram_schmidt_conformal,
    initial_state,
    ito_drift_check,
    probe,
)

from .conftest import backward, forward

TWO_PI = 2 * np.pi


def inflating_history(c=0.8, T=0.5, steps=50, N=16):
    """Flat torus with d/dt g = c g, i.e. u = c t / 2."""
    chart = CoordinateChart("periodic-box", (TWO_PI, TWO_PI), (N, N))
    times = np.linspace(0, T, steps + 1)
    snaps = [MetricSnapshot(t, chart, np.full((N, N), 0.5 * c * t), np.full((N, N), 0.5 * c),
                            {"a": np.zeros((N, N))}) for t in times]
    return FlowHistory("HeatStatic", chart, times, snaps)


def simulate(history, x0, n_paths, dt, seed, steps, renormalize=True):
    st = initial_state(history, x0, n_paths)
    noise = NoiseStream(seed, np.arange(n_paths), history.n)
    defects = []
    for _ in range(steps):
        st, _ = bm_step(st, history, dt, noise, renormalize=renormalize)
        defects.append(float(frame_defect(st).max()))
    return st, np.array(defects)


# --------------------------------------------------------------------------
# noise

def test_noise_is_independent_of_partition():
    full = NoiseStream(11, np.arange(100), 2)
    a = NoiseStream(11, np.arange(0, 37), 2)
    b = NoiseStream(11, np.arange(37, 100), 2)
    for _ in range(3):
        np.testing.assert_array_equal(full.next(), np.vstack([a.next(), b.next()]))


def test_noise_subset_and_scattered_indices():
    full = NoiseStream(5, np.arange(20), 3)
    mask = np.zeros(20, dtype=bool)
    mask[[1, 4, 5, 17]] = True
    sub = full.subset(mask)
    np.testing.assert_array_equal(sub.normals(7), full.normals(7)[mask])


def test_noise_moments():
    z = NoiseStream(3, np.arange(200000), 1).normals(0)[:, 0]
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 0.02


def test_zero_noise():
    assert np.all(NoiseStream(1, np.arange(4), 2, zero=True).next() == 0)


# --------------------------------------------------------------------------
# Brownian motion and frames

def test_flat_torus_mean_square_displacement():
    h = backward("heat_flat")
    n_paths, dt, steps = 20000, h.stride, 40
    st = initial_state(h, [1.0, 1.0], n_paths)
    noise = NoiseStream(2, np.arange(n_paths), 2)
    disp = np.zeros((n_paths, 2))
    U0 = st.U.copy()
    for _ in range(steps):
        new, _ = bm_step(st, h, dt, noise)
        d = new.x - st.x
        disp += d - TWO_PI * np.round(d / TWO_PI)
        st = new
    t = steps * dt
    sq = (disp ** 2).sum(axis=1)
    se = sq.std(ddof=1) / math.sqrt(n_paths)
    assert abs(sq.mean() - 2 * 2 * t) < 3 * se
    np.testing.assert_array_equal(st.U, U0)


def test_frame_shrinks_under_conformal_inflation():
    c = 0.8
    h = inflating_history(c)
    st = initial_state(h, [1.0, 2.0], 4)
    noise = NoiseStream(0, np.arange(4), 2, zero=True)
    for _ in range(50):
        st, _ = bm_step(st, h, h.stride, noise)
    np.testing.assert_allclose(st.U[0], math.exp(-c * st.t / 2) * np.eye(2), rtol=1e-12)
    assert frame_defect(st).max() < 1e-12


def test_zero_step_leaves_state_unchanged():
    h = backward("ricci_bump")
    st = initial_state(h, [0.8, 0.3], 3)
    new, dW = bm_step(st, h, 0.0, NoiseStream(0, np.arange(3), 2))
    np.testing.assert_array_equal(new.x, st.x)
    np.testing.assert_array_equal(new.U, st.U)
    assert new.t == st.t and np.all(dW == 0)


def test_renormalized_frames_stay_orthonormal_for_many_steps():
    h = backward("ricci_bump")
    dt = h.T / 10000
    _, defects = simulate(h, [0.8, 0.3], 4, dt, 1, 10000)
    assert defects.max() < 1e-8


def test_unrenormalized_defect_grows_at_most_linearly():
    h = backward("ricci_bump")
    dt, steps = h.stride, 100
    _, defects = simulate(h, [0.8, 0.3], 64, dt, 1, steps, renormalize=False)
    per_step = defects / np.arange(1, steps + 1)
    assert per_step.max() < 5 * dt


def test_paths_leaving_a_plane_box_are_stopped():
    chart = CoordinateChart("plane-box", (1.0, 1.0), (17, 17))
    snaps = [MetricSnapshot(t, chart, np.zeros((17, 17)), np.zeros((17, 17)),
                            {"a": np.zeros((17, 17))}) for t in (0.0, 0.5)]
    h = FlowHistory("HeatStatic", chart, [0.0, 0.5], snaps)
    st = initial_state(h, [0.45, 0.0], 200)
    noise = NoiseStream(4, np.arange(200), 2)
    for _ in range(10):
        st, _ = bm_step(st, h, 0.01, noise)
    assert np.any(st.status == EXITED)
    assert np.all(chart.inside(st.x))
    assert set(np.unique(st.status)) <= {RUNNING, EXITED}


def test_gram_schmidt_variants_agree(rng):
    P, n = 5, 3
    U = rng.normal(size=(P, n, n)) + 3 * np.eye(n)
    u = rng.normal(size=P) * 0.3
    g = np.exp(2 * u)[:, None, None] * np.eye(n)
    np.testing.assert_allclose(gram_schmidt(U, g), gram_schmidt_conformal(U, u), atol=1e-12)


def test_state_reports_reasons():
    st = PathState(0.0, np.zeros((3, 2)), np.eye(2))
    st.status[1] = EXITED
    assert st.reasons() == {"running": 2, "exited-certified-region": 1}


# --------------------------------------------------------------------------
# metric-rate operator

def test_g_operator_on_scalars_is_zero():
    assert g_operator((0, 0), -2 * np.eye(2), np.array(1.7)) == 0


def test_g_operator_hand_values():
    G = -2.0 * np.eye(2)  # 2D Ricci frame data G = -R I with R = 2
    np.testing.assert_allclose(g_operator((0, 1), G, np.array([1.0, 0.0])), [-1.0, 0.0])
    np.testing.assert_allclose(g_operator((1, 0), G, np.array([1.0, 0.0])), [1.0, 0.0])


def test_g_operator_accepts_frame_components_only():
    G = np.eye(2)
    out = g_operator((0, 1), G, TensorComponents((0, 1), [1.0, 2.0], "frame"))
    assert isinstance(out, TensorComponents) and out.basis == "frame"
    with pytest.raises(ValueError):
        g_operator((0, 1), G, TensorComponents((0, 1), [1.0, 2.0], "coordinate"))
    with pytest.raises(ValueError):
        g_operator((0, 2), G, np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        g_operator((0, 1), np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([1.0, 2.0]))


def test_g_operator_matrix_matches_direct_evaluation(rng):
    n = 2
    A = rng.normal(size=(n, n))
    G = A + A.T
    for valence in [(0, 1), (0, 2), (1, 1), (0, 3)]:
        rank = sum(valence)
        comps = rng.normal(size=(n,) * rank)
        M = g_operator_matrix(valence, G[None])[0]
        np.testing.assert_allclose(M @ comps.ravel(), g_operator(valence, G, comps).ravel(),
                                   atol=1e-12)


# --------------------------------------------------------------------------
# Ito drift of transported fields

def test_drift_of_linear_function_is_zero():
    h = backward("heat_flat")
    rep = ito_drift_check(h, lambda y: 0.7 * y[:, 0] - 0.2 * y[:, 1], (0, 0), [1.0, 2.0],
                          4000, 1e-3, seed=3)
    np.testing.assert_allclose(rep["expected"], 0.0, atol=1e-6)
    assert rep["max_standardized"] < 3


def test_drift_of_sine_is_its_laplacian():
    h = backward("heat_flat")
    x0 = [1.1, 0.4]
    rep = ito_drift_check(h, lambda y: np.sin(y[:, 0]), (0, 0), x0, 20000, 1e-3, seed=4,
                          laplacian=-np.sin(x0[0]))
    assert rep["max_standardized"] < 3


def test_drift_of_the_metric_on_a_ricci_history():
    h = backward("ricci_bump")
    x0 = [0.8, 0.3]

    def metric(y):
        return np.exp(2 * h.field_at("u", h.times[0], y))[:, None, None] * np.eye(2)

    rep = ito_drift_check(h, metric, (0, 2), x0, 20000, 1e-4, seed=5, laplacian=np.zeros((2, 2)))
    u_t = probe(h, h.times[0], np.array([x0]))["u_t"][0]
    # frame components of g are the identity; G = 2 u_t I, so -G(g) = -2 u_t I
    np.testing.assert_allclose(rep["expected"], -2 * u_t * np.eye(2), rtol=1e-10)
    assert rep["max_standardized"] < 3


def test_drift_check_needs_enough_paths():
    with pytest.raises(ValueError):
        ito_drift_check(backward("heat_flat"), lambda y: y[:, 0], (0, 0), [0.0, 0.0], 10, 1e-3)


def test_weak_error_against_heat_semigroup():
    h = backward("heat_flat")
    x0, T, n_paths = np.array([0.5, 0.2]), 0.25, 40000
    st, _ = simulate(h, x0, n_paths, T / 25, 6, 25)
    vals = np.cos(st.x[:, 0]) * np.cos(2 * st.x[:, 1])
    exact = np.cos(x0[0]) * np.cos(2 * x0[1]) * math.exp(-5 * T)
    se = vals.std(ddof=1) / math.sqrt(n_paths)
    assert abs(vals.mean() - exact) < 3 * se
