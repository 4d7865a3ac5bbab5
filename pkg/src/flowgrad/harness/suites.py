"""Check suites behind ``flowgrad verify``.

``trivial``     closed-form identities (flat metrics, round objects, endpoints)
``oracle``      Monte Carlo estimates against deterministic oracles
``martingale``  drift-free checkpoints, and rejection when the correction is dropped
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import geom, stoch
from ..estimator import (
    TransportOperators,
    build_cutoff,
    control_profile,
    integrate_Q_step,
    make_coefficients,
    martingale_diagnostic,
    run_derivative_estimate,
)
from ..flows import FlowConfig, reparametrize_history, run_flow
from .audit import audit_inequality
from .oracles import fd_gradient_oracle, heat_kernel_oracle_flat_torus
from .runner import backward_history
from .scenarios import heat_initial_grid, reference_history


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def _flat_chart(n=2, N=32):
    return geom.CoordinateChart("periodic-box", (2 * np.pi,) * n, (N,) * n)


# --------------------------------------------------------------------------
# trivial suite

def _metric_flat():
    snap = geom.MetricSnapshot(0.0, _flat_chart(), np.zeros((32, 32)), np.zeros((32, 32)))
    g = geom.metric_at(snap, [1.1, 2.3])
    return bool(np.allclose(g, np.eye(2), atol=1e-14)), f"max dev {np.abs(g - np.eye(2)).max():.1e}"


def _metric_constant():
    snap = geom.MetricSnapshot(0.0, _flat_chart(), np.full((32, 32), 0.3), np.zeros((32, 32)))
    g = geom.metric_at(snap, [0.4, 5.0])
    return bool(np.allclose(g, math.exp(0.6) * np.eye(2), rtol=1e-12)), ""


def _christoffel_flat():
    snap = geom.MetricSnapshot(0.0, _flat_chart(), np.zeros((32, 32)), np.zeros((32, 32)))
    return bool(np.abs(geom.christoffel_at(snap, [0.3, 0.9])).max() == 0.0), ""


def _christoffel_circle():
    chart = geom.CoordinateChart("closed-curve", (2 * np.pi,), (64,))
    snap = geom.MetricSnapshot(0.0, chart, np.zeros(64), np.zeros(64))
    return bool(np.abs(geom.christoffel_at(snap, [1.0])).max() == 0.0), ""


def _curvature_constant_u():
    R = geom.scalar_curvature_conformal(np.full((32, 32), 0.7), _flat_chart(), 2)
    return bool(np.abs(R).max() < 1e-12), f"max |R| {np.abs(R).max():.1e}"


def _distance_zero_at_center():
    snap = geom.MetricSnapshot(0.0, _flat_chart(N=48), np.zeros((48, 48)), np.zeros((48, 48)))
    d = geom.geodesic_distance(snap, [np.pi, np.pi])
    return bool(abs(float(d([np.pi, np.pi])[0])) < 1e-12 and d.rho.min() >= 0), ""


def _distance_scaling():
    chart = _flat_chart(N=48)
    z = np.zeros((48, 48))
    flat = geom.geodesic_distance(geom.MetricSnapshot(0.0, chart, z, z), [1.0, 1.0])
    scaled = geom.geodesic_distance(geom.MetricSnapshot(0.0, chart, z + 0.2, z), [1.0, 1.0])
    err = float(np.abs(scaled.rho - math.exp(0.2) * flat.rho).max())
    return err < 1e-10, f"max dev {err:.1e}"


def _tensor_identity_frame():
    t = geom.TensorComponents((1, 1), np.arange(4.0))
    out = geom.tensor_basis_convert(t, np.eye(2), "to-frame")
    s = geom.TensorComponents((0, 0), [2.5])
    out_s = geom.tensor_basis_convert(s, 3 * np.eye(2), "to-frame")
    return bool(np.array_equal(out.comps, t.comps) and out_s.comps[0] == 2.5), ""


def _ricci_flat_static():
    h = run_flow(FlowConfig("Ricci2D", {"preset": "flat"}, T=0.05, dt=0.01, resolution=(16, 16)))
    dev = max(float(np.abs(s.u).max() + np.abs(s.fields.grid("R")).max()) for s in h.snapshots)
    return dev == 0.0, ""


def _yamabe_constant_static():
    h = run_flow(FlowConfig("Yamabe3DConformal", {"preset": "constant", "c": 0.2}, T=0.02,
                            dt=0.01, resolution=(16, 16, 16)))
    dev = max(float(np.abs(s.u - 0.2).max()) for s in h.snapshots)
    return dev < 1e-14, f"max drift {dev:.1e}"


def _forced_circle_stationary():
    h = reference_history("forced2_circle")
    k = h.snapshots[-1].fields.grid("a")
    return bool(np.abs(k - 1.0).max() < 1e-9), f"max |k - 1| {np.abs(k - 1).max():.1e}"


def _reverse_static_and_twice():
    h = run_flow(FlowConfig("Ricci2D", {"preset": "flat"}, T=0.05, dt=0.01, resolution=(16, 16)))
    r1 = reparametrize_history(h)
    r2 = reparametrize_history(r1)
    same = all(np.array_equal(a.u, b.u) for a, b in zip(h.snapshots, r1.snapshots))
    back = np.allclose(r2.times, h.times, atol=1e-14) and all(
        np.array_equal(a.u, b.u) and np.array_equal(a.u_t, b.u_t)
        for a, b in zip(h.snapshots, r2.snapshots))
    return bool(same and back), ""


def _bm_zero_dt():
    h = backward_history(reference_history("ricci_flat"))
    st = stoch.initial_state(h, [1.0, 2.0], 4)
    noise = stoch.NoiseStream(0, np.arange(4), 2)
    new, dW = stoch.bm_step(st, h, 0.0, noise)
    return bool(np.array_equal(new.x, st.x) and np.array_equal(new.U, st.U)), ""


def _g_operator_scalar():
    out = stoch.g_operator((0, 0), np.diag([1.0, 2.0]), np.array(3.0))
    return bool(np.all(np.asarray(out) == 0)), ""


def _q_identity_static():
    h = backward_history(reference_history("heat_flat"))
    coeffs = make_coefficients(h)
    st = stoch.initial_state(h, [0.5, 0.5], 3, coeffs.fields)
    ops = TransportOperators.identity(3, coeffs.dim, coeffs.dim_hat)
    G = np.zeros((3, 2, 2))
    for _ in range(5):
        ops = integrate_Q_step(ops, coeffs, st, G, h.stride)
    dev = max(float(np.abs(ops.Q - np.eye(1)).max()), float(np.abs(ops.Q_hat - np.eye(2)).max()))
    return dev == 0.0, ""


def _profile_endpoints():
    p = control_profile("global", [1.0, 0.0], 0.3)
    q = control_profile("local", [1.0, 0.0], 0.3, (0.5, 1.0))
    ok = p.phi(0.0) == 1.0 and p.phi(0.3) == 0.0 and abs(q.phi(0.0) - 1) < 1e-15 and q.phi(0.3) == 0
    return bool(ok), ""


def _fbar_endpoints():
    cut = build_cutoff(1.0, None, None, "local", distance=_Const(10.0))
    ok = cut.fbar(0.0) == 1.0 and cut.fbar(1.0) == 0.0 and cut.fbar(3.0) == 0.0
    return bool(ok), ""


class _Const:
    def __init__(self, v):
        self.min_validity = v

    def __call__(self, s, x):
        return np.zeros(np.atleast_2d(x).shape[0])


def _round_sphere_gradient(n_paths=4000):
    h = backward_history(reference_history("round_sphere_ricci"))
    res = run_derivative_estimate(h, make_coefficients(h), [0.2, -0.1], np.eye(2), "global",
                                  n_paths, h.stride, seed=11)
    z = np.abs(np.asarray(res.estimate)) / np.maximum(np.asarray(res.se), 1e-300)
    ok = bool(np.all((z <= 3) | (np.abs(res.estimate) < 1e-12)))
    return ok, f"estimate {np.round(res.estimate, 6).tolist()}"


def _zero_noise_estimate():
    h = backward_history(reference_history("heat_flat"))
    res = run_derivative_estimate(h, make_coefficients(h), [0.4, 0.0], np.eye(2), "global", 50,
                                  h.stride, seed=1, zero_noise=True)
    return bool(np.all(np.asarray(res.estimate) == 0.0)), ""


def _static_martingale_constant():
    h = backward_history(reference_history("heat_flat"))
    coeffs = make_coefficients(h)
    rep = martingale_diagnostic(h, coeffs, [0.4, 0.0], np.eye(2), n_paths=200, seed=2)
    return bool(rep["passed"]), ""


def _oracle_constant_field():
    h = reference_history("ricci_flat")
    o = fd_gradient_oracle(h, h.times[-1], [1.0, 2.0])
    return bool(np.abs(o.frame).max() == 0.0), ""


def _oracle_bump_center():
    h = reference_history("ricci_bump", T=0.05, dt=0.005)
    o = fd_gradient_oracle(h, h.times[-1], [0.0, 0.0])
    return bool(np.abs(o.frame).max() < 1e-12), f"|grad| {np.abs(o.frame).max():.1e}"


def _heat_oracle_constant_and_t0():
    chart = _flat_chart()
    ones = np.ones(chart.resolution)
    g = heat_kernel_oracle_flat_torus(ones, 0.7, [1.0, 1.0], 1, chart)
    X, _ = chart.mesh()
    a0 = np.sin(X) + 0.3 * np.cos(2 * X)
    g0 = heat_kernel_oracle_flat_torus(a0, 0.0, [0.4, 0.2], 1, chart)
    h = run_flow(FlowConfig("HeatStatic", {"modes": [[1, 0, 0.0, 1.0], [2, 0, 0.3, 0.0]]},
                            T=0.01, dt=0.01, resolution=(32, 32)))
    o = fd_gradient_oracle(h, 0.0, [0.4, 0.2])
    ok = np.abs(g).max() < 1e-14 and np.abs(g0 - o.coordinate.comps).max() < 1e-12
    return bool(ok), ""


def _sphere_mcf_audit():
    h = reference_history("sphere_mcf")
    rec = audit_inequality(h, "4.3", [0.1, 0.2], 1.0)
    return bool(rec.valid and rec.c_star < 1e-20 and rec.passed), f"C* {rec.c_star:.1e}"


TRIVIAL_CHECKS: dict[str, Callable] = {
    "metric_at flat torus is the identity": _metric_flat,
    "metric_at constant factor": _metric_constant,
    "christoffel_at flat metric is zero": _christoffel_flat,
    "christoffel_at arclength circle is zero": _christoffel_circle,
    "scalar curvature of a constant factor is zero": _curvature_constant_u,
    "geodesic distance vanishes at the center": _distance_zero_at_center,
    "geodesic distance scales with a constant factor": _distance_scaling,
    "basis conversion with identity frame and scalars": _tensor_identity_frame,
    "flat Ricci flow is static": _ricci_flat_static,
    "constant-factor Yamabe flow is static": _yamabe_constant_static,
    "type-II forced circle is stationary": _forced_circle_stationary,
    "reverse of static history and reverse twice": _reverse_static_and_twice,
    "bm_step with dt = 0 leaves the state unchanged": _bm_zero_dt,
    "g_operator vanishes on scalars": _g_operator_scalar,
    "Q stays the identity for F = 0 on a static metric": _q_identity_static,
    "global and local control endpoints": _profile_endpoints,
    "cutoff profile endpoints": _fbar_endpoints,
    "round-sphere gradient estimate is zero": _round_sphere_gradient,
    "zero-noise estimate is zero": _zero_noise_estimate,
    "static martingale is drift-free": _static_martingale_constant,
    "oracle of a constant field is zero": _oracle_constant_field,
    "oracle at a symmetric bump center is zero": _oracle_bump_center,
    "heat oracle for constants and T = 0": _heat_oracle_constant_and_t0,
    "shrinking sphere audit has C* = 0": _sphere_mcf_audit,
}


# --------------------------------------------------------------------------
# oracle and martingale suites

def _heat_degeneration(n_paths=20000):
    fwd = reference_history("heat_flat")
    h = backward_history(fwd)
    x0 = [0.3, 1.1]
    res = run_derivative_estimate(h, make_coefficients(h), x0, np.eye(2)[0], "global", n_paths,
                                  h.stride, seed=5)
    ref = heat_kernel_oracle_flat_torus(heat_initial_grid(fwd), fwd.T, x0, 1, fwd.chart)[0]
    z = float((res.estimate[0] - ref) / res.se[0])
    return abs(z) <= 3, f"estimate {res.estimate[0]:.5f} oracle {ref:.5f} z {z:+.2f}"


def _ricci_bump_gradient(n_paths=20000):
    fwd = reference_history("ricci_bump")
    h = backward_history(fwd)
    x0 = [0.8, 0.3]
    res = run_derivative_estimate(h, make_coefficients(h), x0, np.eye(2), "global", n_paths,
                                  h.stride, seed=6)
    ref = fd_gradient_oracle(fwd, fwd.times[-1], x0).frame
    z = (np.asarray(res.estimate) - ref) / np.asarray(res.se)
    return bool(np.all(np.abs(z) <= 3)), f"z {np.round(z, 2).tolist()}"


def _ricci_martingale(n_paths=10000):
    h = backward_history(reference_history("ricci_bump"))
    rep = martingale_diagnostic(h, make_coefficients(h), [0.8, 0.3], np.eye(2), n_paths=n_paths,
                                seed=8)
    return bool(rep["passed"]), f"{len(rep['intervals'])} intervals"


def _ricci_fault_injection(n_paths=10000):
    h = backward_history(reference_history("ricci_bump"))
    rep = martingale_diagnostic(h, make_coefficients(h), [0.8, 0.3], np.eye(2), n_paths=n_paths,
                                seed=9, fault_injection=True, pilot_paths=2000)
    return (not rep["passed"]), f"calibrated paths {rep.get('calibrated_paths')}"


ORACLE_CHECKS = {
    "heat degeneration against the flat-torus heat kernel": _heat_degeneration,
    "Ricci bump gradient against the finite-difference oracle": _ricci_bump_gradient,
}

MARTINGALE_CHECKS = {
    "Ricci bump checkpoints are drift-free": _ricci_martingale,
    "dropping the metric-rate correction is rejected": _ricci_fault_injection,
}

SUITES = {"trivial": TRIVIAL_CHECKS, "oracle": ORACLE_CHECKS, "martingale": MARTINGALE_CHECKS}


def run_suite(name: str) -> list[CheckResult]:
    if name == "all":
        out = []
        for key in SUITES:
            out.extend(run_suite(key))
        return out
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    results = []
    for label, fn in SUITES[name].items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(label, bool(ok), detail))
    return results
