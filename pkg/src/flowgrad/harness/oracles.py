"""Deterministic ground truth for the Monte Carlo derivative estimates.

Nothing here touches the estimator: gradients come straight from the stored
grid fields of a flow history, evaluated either by an exact trigonometric
sum (periodic charts) or by fourth-order differences plus cubic
interpolation (plane boxes).  Every value carries a refinement error
estimate obtained by repeating the evaluation on every other grid node.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ..geom import (
    CoordinateChart,
    GridFields,
    MetricSnapshot,
    TensorComponents,
    christoffel_at,
    tensor_basis_convert,
)


class OracleError(ValueError):
    """The oracle cannot certify the requested accuracy."""


@dataclass
class OracleResult:
    """Covariant derivative of order 1 or 2 of a scalar field at one point."""

    order: int
    coordinate: TensorComponents
    frame: np.ndarray
    error: float
    norm: float
    x0: np.ndarray
    t: float

    def pairing(self, v) -> np.ndarray:
        """``<derivative, v>`` for frame-component directions ``v`` (one per row)."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        return v @ self.frame

    def to_dict(self) -> dict:
        return {"order": self.order, "coordinate": self.coordinate.comps.tolist(),
                "frame": self.frame.tolist(), "error": self.error, "norm": self.norm,
                "x0": self.x0.tolist(), "t": self.t}


def fourier_derivative_at(values: np.ndarray, periods, x0, alpha) -> float:
    """Mixed partial ``d^alpha`` of the trigonometric interpolant of ``values`` at ``x0``.

    Grid nodes sit at ``j * L / N`` on each axis.  Nyquist modes are dropped so
    the interpolant is real for every derivative order.
    """
    values = np.asarray(values, dtype=float)
    coef = np.fft.fftn(values) / values.size
    term = coef
    for axis, (N, L) in enumerate(zip(values.shape, periods)):
        freq = np.fft.fftfreq(N, d=1.0 / N)
        k = 2 * np.pi / L * freq
        factor = (1j * k) ** alpha[axis] * np.exp(1j * k * x0[axis])
        if N % 2 == 0:
            factor = np.where(np.abs(freq) == N // 2, 0.0, factor)
        shape = [1] * values.ndim
        shape[axis] = N
        term = term * factor.reshape(shape)
    return float(np.real(term.sum()))


def _multi_indices(n: int, order: int):
    """Coordinate slots ``(i, j, ...)`` paired with multi-index exponents."""
    for slots in itertools.product(range(n), repeat=order):
        alpha = [0] * n
        for s in slots:
            alpha[s] += 1
        yield slots, tuple(alpha)


def _partials_fourier(values, periods, x0, order):
    n = values.ndim
    out = np.empty((n,) * order)
    cache = {}
    for slots, alpha in _multi_indices(n, order):
        if alpha not in cache:
            cache[alpha] = fourier_derivative_at(values, periods, x0, alpha)
        out[slots] = cache[alpha]
    return out


def _partials_box(values, chart, x0, order):
    fields = GridFields(chart, {"a": values})
    n = chart.n
    out = np.empty((n,) * order)
    for slots, _ in _multi_indices(n, order):
        key = f"d{slots[0]}:a" if order == 1 else f"d{min(slots)}{max(slots)}:a"
        out[slots] = float(fields.at(key, np.asarray(x0)[None])[0])
    return out


def coordinate_partials(values: np.ndarray, chart: CoordinateChart, x0, order: int):
    """Plain partial derivatives of order 1 or 2 and a refinement error estimate."""
    x0 = np.asarray(x0, dtype=float)
    if chart.periodic:
        x0 = chart.normalize(x0)
        fine = _partials_fourier(values, chart.periods, x0, order)
        coarse_vals = values[tuple(slice(None, None, 2) for _ in range(chart.n))]
        coarse = _partials_fourier(coarse_vals, chart.periods, x0, order)
    else:
        chart.normalize(x0)
        fine = _partials_box(values, chart, x0, order)
        coarse_vals = values[tuple(slice(None, None, 2) for _ in range(chart.n))]
        coarse_chart = chart.with_resolution(coarse_vals.shape)
        coarse = _partials_box(coarse_vals, coarse_chart, x0, order)
    return fine, float(np.abs(fine - coarse).max())


def _snapshot_at(history, t: float) -> MetricSnapshot:
    times = np.asarray(history.times)
    i = int(np.argmin(np.abs(times - t)))
    if abs(times[i] - t) > 1e-9 * max(1.0, abs(times[-1])):
        raise OracleError(f"no stored snapshot at t = {t:g}")
    return history.snapshots[i]


def fd_gradient_oracle(history, t: float, x0, order: int = 1, tol: float | None = None,
                       field: str = "a") -> OracleResult:
    """Covariant derivative of the stored field ``field`` at ``(t, x0)``.

    Order 2 subtracts the Christoffel contraction of the metric at ``x0``.
    Frame components use the orthonormal frame ``exp(-u(x0)) I``, which is the
    starting frame of the estimator paths.  With ``tol`` set, an error
    estimate above it raises :class:`OracleError`.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    snap = _snapshot_at(history, t)
    chart = snap.chart
    values = snap.fields.grid(field)
    x0 = np.asarray(x0, dtype=float)
    partial, err = coordinate_partials(values, chart, x0, order)
    if order == 2:
        grad, err1 = coordinate_partials(values, chart, x0, 1)
        gamma = christoffel_at(snap, x0)
        partial = partial - np.einsum("lij,l->ij", gamma, grad)
        err = max(err, err1 * float(np.abs(gamma).max()) * chart.n)
    if tol is not None and err > tol:
        raise OracleError(f"refinement error {err:.3g} exceeds tolerance {tol:.3g}")
    coord = TensorComponents((0, order), partial, "coordinate")
    u0 = float(snap.fields.at("u", x0[None])[0])
    frame = tensor_basis_convert(coord, math.exp(-u0) * np.eye(chart.n), "to-frame").comps
    return OracleResult(order, coord, frame, err, float(np.linalg.norm(frame)), x0, float(snap.t))


def gradient_norm_field(snapshot: MetricSnapshot, field: str = "a") -> np.ndarray:
    """``|grad a|_g`` on the grid from spectral or finite-difference grid derivatives."""
    chart = snapshot.chart
    values = snapshot.fields.grid(field)
    grad2 = sum(chart.derivative(values, i) ** 2 for i in range(chart.n))
    return np.sqrt(grad2) * np.exp(-snapshot.fields.grid("u"))


def heat_kernel_oracle_flat_torus(a0: np.ndarray, T: float, x0, order: int = 1,
                                  chart: CoordinateChart | None = None,
                                  periods=None) -> np.ndarray:
    """Exact heat solution ``a_T = exp(T lap) a0`` on a flat torus, differentiated at ``x0``.

    ``a0`` is sampled on the periodic grid (its mode count is the grid size).
    Returns the order-``order`` partial derivative tensor; order 0 gives the value.
    """
    a0 = np.asarray(a0, dtype=float)
    if chart is not None:
        if not chart.periodic:
            raise ValueError("the heat kernel oracle needs a periodic chart")
        periods = chart.periods
    if periods is None:
        raise ValueError("pass a chart or the periods")
    if T < 0:
        raise ValueError("T must be nonnegative")
    coef = np.fft.fftn(a0)
    k2 = np.zeros(a0.shape)
    for axis, (N, L) in enumerate(zip(a0.shape, periods)):
        k = 2 * np.pi / L * np.fft.fftfreq(N, d=1.0 / N)
        shape = [1] * a0.ndim
        shape[axis] = N
        k2 = k2 + (k ** 2).reshape(shape)
    aT = np.real(np.fft.ifftn(coef * np.exp(-k2 * T)))
    x0 = np.mod(np.asarray(x0, dtype=float), np.asarray(periods))
    if order == 0:
        return np.array(fourier_derivative_at(aT, periods, x0, (0,) * a0.ndim))
    return _partials_fourier(aT, periods, x0, order)
