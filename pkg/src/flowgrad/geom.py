"""Desk-scale manifolds carrying a time-dependent conformal metric.

Every metric handled here has the form ``g = exp(2u) * delta`` in a fixed
coordinate chart, where ``u`` is sampled on a regular grid.  Three chart kinds
are supported:

* ``periodic-box``   flat torus coordinates, spectral derivatives;
* ``closed-curve``   the parameter circle of a closed plane curve (n = 1);
* ``plane-box``      a bounded, non-periodic box (used for the stereographic
                     chart of a round sphere), fourth-order finite differences.

Values between grid nodes come from cubic B-spline interpolation of the grid
samples.  Derivative fields are differentiated on the grid first and then
interpolated, so Christoffel symbols evaluated along a path are smooth.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CHART_KINDS = ("periodic-box", "closed-curve", "plane-box")

CONFORMAL_R_FORMULAS = {
    2: "R = exp(-2u) * (R0 - 2*lap0(u)), R0 = 0 (flat base)",
    3: "R = -exp(-2u) * (4*lap0(u) + 2*|grad0 u|^2)",
}


class DomainError(ValueError):
    """A point lies outside a non-periodic chart."""


class GeometryError(ArithmeticError):
    """Singular or non-finite metric data."""


@dataclass(frozen=True)
class CoordinateChart:
    kind: str
    periods: tuple
    resolution: tuple

    def __post_init__(self):
        if self.kind not in CHART_KINDS:
            raise ValueError(f"unknown chart kind {self.kind!r}")
        object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if len(self.periods) != len(self.resolution) or not 1 <= len(self.periods) <= 3:
            raise ValueError("periods and resolution must have matching length 1..3")
        if min(self.periods) <= 0:
            raise ValueError("chart periods must be positive")
        if min(self.resolution) < 16:
            raise ValueError("chart resolution must be at least 16 per axis")
        if self.kind == "closed-curve" and len(self.periods) != 1:
            raise ValueError("closed-curve charts are one-dimensional")

    @property
    def n(self) -> int:
        return len(self.periods)

    @property
    def periodic(self) -> bool:
        return self.kind != "plane-box"

    @property
    def spacing(self) -> np.ndarray:
        if self.periodic:
            return np.array(self.periods) / np.array(self.resolution)
        return np.array(self.periods) / (np.array(self.resolution) - 1)

    @property
    def lower(self) -> np.ndarray:
        if self.periodic:
            return np.zeros(self.n)
        return -0.5 * np.array(self.periods)

    def axes(self) -> list:
        return [self.lower[i] + self.spacing[i] * np.arange(self.resolution[i]) for i in range(self.n)]

    def mesh(self) -> list:
        return np.meshgrid(*self.axes(), indexing="ij")

    def normalize(self, x):
        """Map points into the fundamental domain; raise outside a plane box."""
        x = np.asarray(x, dtype=float)
        if self.periodic:
            L = np.array(self.periods)
            y = np.mod(x, L)
            # tiny negative inputs round up to exactly L
            return np.where(y >= L, 0.0, y)
        half = 0.5 * np.array(self.periods)
        if np.any(np.abs(x) > half * (1 + 1e-12)):
            raise DomainError("point outside the plane-box chart")
        return x

    def inside(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.periodic:
            return np.ones(x.shape[0], dtype=bool)
        return np.all(np.abs(x) <= 0.5 * np.array(self.periods), axis=1)

    def to_index(self, x) -> np.ndarray:
        """Fractional grid indices of points, shape (n, P)."""
        x = np.atleast_2d(x)
        return ((x - self.lower) / self.spacing).T

    def wavenumbers(self, axis: int) -> np.ndarray:
        N, L = self.resolution[axis], self.periods[axis]
        return 2 * np.pi / L * np.fft.fftfreq(N, d=1.0 / N)

    def derivative(self, f: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
        """Grid derivative of ``f`` (spectral if periodic, 4th-order FD otherwise)."""
        if self.periodic:
            return _spectral_derivative(f, self.wavenumbers(axis), axis, order)
        return _fd_derivative(f, self.spacing[axis], axis, order)

    def gradient(self, f: np.ndarray) -> np.ndarray:
        return np.stack([self.derivative(f, i) for i in range(self.n)])

    def laplacian0(self, f: np.ndarray) -> np.ndarray:
        """Flat (coordinate) Laplacian."""
        return sum(self.derivative(f, i, 2) for i in range(self.n))

    def with_resolution(self, resolution) -> "CoordinateChart":
        return CoordinateChart(self.kind, self.periods, tuple(resolution))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "periods": list(self.periods), "resolution": list(self.resolution)}

    @classmethod
    def from_dict(cls, d: dict) -> "CoordinateChart":
        return cls(d["kind"], tuple(d["periods"]), tuple(d["resolution"]))


def _spectral_derivative(f, k, axis, order):
    shape = [1] * f.ndim
    shape[axis] = -1
    mult = (1j * k.reshape(shape)) ** order
    if order % 2 == 1 and len(k) % 2 == 0:
        # the Nyquist mode has no odd derivative on a real grid
        mult = mult.copy()
        mult[tuple(slice(len(k) // 2, len(k) // 2 + 1) if i == axis else slice(None)
                   for i in range(f.ndim))] = 0.0
    return np.real(np.fft.ifft(np.fft.fft(f, axis=axis) * mult, axis=axis))


def _fd_derivative(f, h, axis, order):
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    out = np.empty_like(f)
    if order == 1:
        out[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * h)
        edge = np.gradient(f, h, axis=0, edge_order=2)
        out[:2], out[-2:] = edge[:2], edge[-2:]
    elif order == 2:
        out[2:-2] = (-f[:-4] + 16 * f[1:-3] - 30 * f[2:-2] + 16 * f[3:-1] - f[4:]) / (12 * h * h)
        out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
        out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
        out[1] = (f[0] - 2 * f[1] + f[2]) / h**2
        out[-2] = (f[-3] - 2 * f[-2] + f[-1]) / h**2
    else:
        raise ValueError("only first and second derivatives are supported")
    return np.moveaxis(out, 0, axis)


class SplineField:
    """Cubic B-spline interpolant of a grid field on a chart."""

    def __init__(self, chart: CoordinateChart, values: np.ndarray, order: int = 3):
        self.chart = chart
        self.order = order
        self.mode = "grid-wrap" if chart.periodic else "mirror"
        values = np.asarray(values, dtype=float)
        if order > 1:
            self.coeffs = ndimage.spline_filter(values, order=order, mode=self.mode)
        else:
            self.coeffs = values

    def __call__(self, x) -> np.ndarray:
        idx = self.chart.to_index(x)
        return ndimage.map_coordinates(self.coeffs, idx, order=self.order,
                                       mode=self.mode, prefilter=False)


class GridFields:
    """Named grid arrays with lazily computed derivatives and interpolants.

    Derived names: ``d{i}:{name}`` is the first derivative along axis ``i`` and
    ``d{i}{j}:{name}`` the mixed second derivative.
    """

    def __init__(self, chart: CoordinateChart, base: dict):
        self.chart = chart
        self.base = dict(base)
        self._derived = {}
        self._splines = {}

    def __contains__(self, name):
        return name in self.base

    def grid(self, name: str) -> np.ndarray:
        if name in self.base:
            return self.base[name]
        if name in self._derived:
            return self._derived[name]
        if ":" not in name or not name.startswith("d"):
            raise KeyError(name)
        spec, target = name.split(":", 1)
        axes = [int(c) for c in spec[1:]]
        if len(axes) == 1:
            out = self.chart.derivative(self.grid(target), axes[0])
        elif len(axes) == 2 and axes[0] == axes[1]:
            out = self.chart.derivative(self.grid(target), axes[0], 2)
        elif len(axes) == 2:
            out = self.chart.derivative(self.grid(f"d{axes[1]}:{target}"), axes[0])
        else:
            raise KeyError(name)
        self._derived[name] = out
        return out

    def spline(self, name: str, order: int = 3) -> SplineField:
        key = (name, order)
        if key not in self._splines:
            self._splines[key] = SplineField(self.chart, self.grid(name), order=order)
        return self._splines[key]

    def at(self, name: str, x) -> np.ndarray:
        return self.spline(name)(x)


class MetricSnapshot:
    """Conformal metric ``exp(2u) delta`` and its rate at one time.

    ``u_t`` is the time derivative of the log conformal factor, so
    ``d/dt g = 2 u_t g``.  ``curvature`` holds derived scalar fields (``R``,
    ``k`` ...).  Treated as immutable after construction.
    """

    def __init__(self, t: float, chart: CoordinateChart, u: np.ndarray, u_t: np.ndarray,
                 curvature: dict | None = None):
        self.t = float(t)
        self.chart = chart
        u = np.asarray(u, dtype=float)
        u_t = np.asarray(u_t, dtype=float)
        if u.shape != chart.resolution or u_t.shape != chart.resolution:
            raise ValueError("snapshot arrays must match the chart resolution")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(u_t))):
            bad = np.argwhere(~np.isfinite(u) | ~np.isfinite(u_t))[0]
            raise GeometryError(f"non-finite metric data at grid node {tuple(bad)}")
        base = {"u": u, "u_t": u_t}
        base.update(curvature or {})
        self.fields = GridFields(chart, base)

    @property
    def u(self):
        return self.fields.base["u"]

    @property
    def u_t(self):
        return self.fields.base["u_t"]

    @property
    def n(self):
        return self.chart.n

    def g(self) -> np.ndarray:
        """Metric components on the grid, shape ``resolution + (n, n)``."""
        return np.exp(2 * self.u)[..., None, None] * np.eye(self.n)

    def dg(self) -> np.ndarray:
        return (2 * self.u_t * np.exp(2 * self.u))[..., None, None] * np.eye(self.n)


def metric_at(snapshot: MetricSnapshot, x) -> np.ndarray:
    """Metric matrix at one point ``(n,)`` or a batch ``(P, n)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if not snapshot.chart.periodic and not np.all(snapshot.chart.inside(xs)):
        raise DomainError("point outside the plane-box chart")
    u = snapshot.fields.at("u", xs)
    g = np.exp(2 * u)[:, None, None] * np.eye(snapshot.n)
    return g[0] if single else g


def conformal_christoffel(du: np.ndarray) -> np.ndarray:
    """Christoffel symbols ``Gamma[..., i, j, k]`` of ``exp(2u) delta`` from grad u."""
    n = du.shape[-1]
    eye = np.eye(n)
    return (eye[:, :, None] * du[..., None, None, :]
            + eye[:, None, :] * du[..., None, :, None]
            - eye[None, :, :] * du[..., :, None, None])


def christoffel_at(snapshot: MetricSnapshot, x) -> np.ndarray:
    """Christoffel symbols ``Gamma^i_{jk}`` at points, from the general formula.

    The metric derivative ``d_k g_ij = 2 d_k u exp(2u) delta_ij`` is taken from
    the interpolated derivative fields.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    n = snapshot.n
    u = snapshot.fields.at("u", xs)
    du = np.stack([snapshot.fields.at(f"d{i}:u", xs) for i in range(n)], axis=-1)
    e2u = np.exp(2 * u)
    if not np.all(np.isfinite(e2u)) or np.any(e2u <= 0):
        bad = xs[~(np.isfinite(e2u) & (e2u > 0))][0]
        raise GeometryError(f"singular metric at {bad}")
    eye = np.eye(n)
    dg = 2 * (du * e2u[:, None])[:, None, None, :] * eye[None, :, :, None]  # dg[p, i, j, k] = d_k g_ij
    ginv = eye[None] / e2u[:, None, None]
    # indices (l, j, k): d_j g_lk + d_k g_lj - d_l g_jk
    term = dg.transpose(0, 1, 3, 2) + dg - np.einsum("pjkl->pljk", dg)
    gamma = 0.5 * np.einsum("pil,pljk->pijk", ginv, term)
    return gamma[0] if single else gamma


def scalar_curvature_conformal(u: np.ndarray, chart: CoordinateChart, n: int | None = None,
                               base_curvature: float = 0.0) -> np.ndarray:
    """Scalar curvature of ``exp(2u) g0`` over a flat (or constant-R0, n=2) base."""
    n = chart.n if n is None else n
    if n == 2:
        return np.exp(-2 * u) * (base_curvature - 2 * chart.laplacian0(u))
    if n == 3:
        if base_curvature:
            raise ValueError("n=3 requires a flat base")
        grad2 = sum(chart.derivative(u, i) ** 2 for i in range(chart.n))
        return -np.exp(-2 * u) * (4 * chart.laplacian0(u) + 2 * grad2)
    raise ValueError("conformal scalar curvature is defined for n in {2, 3}")


def conformal_ricci(fields: GridFields, n: int) -> dict:
    """Coordinate Ricci components ``ric{i}{j}`` of ``exp(2u) delta`` (n = 2, 3)."""
    lap = sum(fields.grid(f"d{i}{i}:u") for i in range(n))
    grad2 = sum(fields.grid(f"d{i}:u") ** 2 for i in range(n))
    out = {}
    for i in range(n):
        for j in range(i, n):
            hess = fields.grid(f"d{i}{j}:u") if i != j else fields.grid(f"d{i}{i}:u")
            val = -(n - 2) * (hess - fields.grid(f"d{i}:u") * fields.grid(f"d{j}:u"))
            if i == j:
                val = val - (lap + (n - 2) * grad2)
            out[f"ric{i}{j}"] = val
    return out


def laplace_beltrami(f: np.ndarray, u: np.ndarray, chart: CoordinateChart) -> np.ndarray:
    """Laplace-Beltrami of a scalar under ``exp(2u) delta``."""
    n = chart.n
    out = chart.laplacian0(f)
    if n != 2:
        out = out + (n - 2) * sum(chart.derivative(u, i) * chart.derivative(f, i) for i in range(n))
    return np.exp(-2 * u) * out


# --------------------------------------------------------------------------
# tensors

@dataclass
class TensorComponents:
    valence: tuple
    comps: np.ndarray
    basis: str = "coordinate"

    def __post_init__(self):
        self.valence = tuple(int(v) for v in self.valence)
        self.comps = np.asarray(self.comps, dtype=float).ravel()
        if self.basis not in ("coordinate", "frame"):
            raise ValueError("basis must be 'coordinate' or 'frame'")
        rank = sum(self.valence)
        if rank == 0:
            if self.comps.size != 1:
                raise ValueError("a scalar has exactly one component")
        else:
            n = round(self.comps.size ** (1.0 / rank))
            if n ** rank != self.comps.size:
                raise ValueError("component count must equal n**(m+k)")

    @property
    def n(self) -> int:
        rank = sum(self.valence)
        return 0 if rank == 0 else round(self.comps.size ** (1.0 / rank))

    def array(self) -> np.ndarray:
        rank = sum(self.valence)
        return self.comps.reshape((self.n,) * rank) if rank else self.comps.reshape(())


def _contract_slots(arr, valence, upper_mat, lower_mat):
    """Apply ``upper_mat`` to upper slots and ``lower_mat`` (as U^i_a) to lower slots."""
    m, k = valence
    out = arr
    for s in range(m + k):
        mat = upper_mat if s < m else lower_mat.T
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [s])), 0, s)
    return out


def tensor_basis_convert(t: TensorComponents, frame: np.ndarray, direction: str) -> TensorComponents:
    """Read a tensor in the frame ``U`` (columns = frame vectors) or back.

    to-frame contracts upper indices with ``U^-1`` and lower indices with ``U``.
    """
    frame = np.asarray(frame, dtype=float)
    if sum(t.valence) == 0:
        return TensorComponents(t.valence, t.comps.copy(),
                                "frame" if direction == "to-frame" else "coordinate")
    if abs(np.linalg.det(frame)) < 1e-14:
        raise GeometryError("singular frame")
    inv = np.linalg.inv(frame)
    if direction == "to-frame":
        if t.basis != "coordinate":
            raise ValueError("tensor is not in the coordinate basis")
        out = _contract_slots(t.array(), t.valence, inv, frame)
        return TensorComponents(t.valence, out, "frame")
    if direction == "to-coordinates":
        if t.basis != "frame":
            raise ValueError("tensor is not in the frame basis")
        out = _contract_slots(t.array(), t.valence, frame, inv)
        return TensorComponents(t.valence, out, "coordinate")
    raise ValueError("direction must be 'to-frame' or 'to-coordinates'")


def orthonormality_defect(frames: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``max |U^T g U - I|`` per frame; accepts batched inputs."""
    frames = np.asarray(frames)
    g = np.asarray(g)
    m = np.einsum("...ia,...ij,...jb->...ab", frames, g, frames)
    n = frames.shape[-1]
    return np.abs(m - np.eye(n)).max(axis=(-2, -1))


# --------------------------------------------------------------------------
# geodesic distance

@dataclass
class DistanceField:
    t: float
    rho: np.ndarray
    center: np.ndarray
    validity_radius: float
    chart: CoordinateChart = field(repr=False)
    apex_scale: float | None = None

    def __post_init__(self):
        self._interp = SplineField(self.chart, self.rho, order=1)

    def __call__(self, x) -> np.ndarray:
        out = self._interp(x)
        if self.apex_scale is None:
            return out
        # inside the seeded cells the field is the cone exp(u(x0)) |x - x0|;
        # evaluating it directly keeps rho(x0) = 0 off the grid nodes
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        d = _min_image((xs - self.center).T, self.chart).T
        r = np.sqrt((d * d).sum(axis=1))
        near = r <= self.chart.spacing.max()
        return np.where(near, self.apex_scale * r, out)


def _neighbors(chart: CoordinateChart):
    shape = chart.resolution
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    nb = []
    for ax in range(chart.n):
        for step in (-1, 1):
            rolled = np.roll(idx, -step, axis=ax)
            if not chart.periodic:
                edge = [slice(None)] * chart.n
                edge[ax] = 0 if step == -1 else -1
                rolled = rolled.copy()
                rolled[tuple(edge)] = -1
            nb.append(rolled.ravel())
    return np.stack(nb, axis=1)  # (size, 2n): axis-major, (-1, +1)


def _fmm(slowness: np.ndarray, chart: CoordinateChart, seeds: dict) -> np.ndarray:
    h = chart.spacing
    n = chart.n
    size = slowness.size
    s = slowness.ravel().tolist()
    nb = _neighbors(chart).tolist()
    INF = math.inf
    T = [INF] * size
    known = [False] * size
    heap = []
    for i, v in seeds.items():
        T[i] = v
        heapq.heappush(heap, (v, i))
    inv_h2 = [1.0 / (hh * hh) for hh in h]

    def solve(i):
        terms = []
        for ax in range(n):
            best, best2 = INF, INF
            for side in (0, 1):
                j = nb[i][2 * ax + side]
                if j >= 0 and known[j] and T[j] < best:
                    best = T[j]
                    j2 = nb[j][2 * ax + side]
                    best2 = T[j2] if (j2 >= 0 and known[j2] and T[j2] <= T[j]) else INF
            if best < INF:
                if best2 < INF:
                    terms.append((2.25 * inv_h2[ax], (4 * best - best2) / 3.0, inv_h2[ax], best))
                else:
                    terms.append((inv_h2[ax], best, inv_h2[ax], best))
        if not terms:
            return INF
        for use_second in (True, False):
            cand = sorted(((a, b) if use_second else (a1, b1)) for a, b, a1, b1 in terms)
            cand.sort(key=lambda ab: ab[1])
            A = B = C = 0.0
            sol = INF
            for a, b in cand:
                if sol < INF and sol <= b:
                    break
                A += a
                B += a * b
                C += a * b * b
                disc = B * B - A * (C - s[i] ** 2)
                if disc < 0:
                    sol = INF
                    break
                sol = (B + math.sqrt(disc)) / A
            if sol < INF:
                return sol
        a, b = min(((a1, b1) for _, _, a1, b1 in terms), key=lambda ab: ab[1])
        return b + s[i] / math.sqrt(a)

    while heap:
        v, i = heapq.heappop(heap)
        if known[i] or v > T[i]:
            continue
        known[i] = True
        for j in nb[i]:
            if j >= 0 and not known[j]:
                new = solve(j)
                if new < T[j]:
                    T[j] = new
                    heapq.heappush(heap, (new, j))
    return np.array(T).reshape(chart.resolution)


def _min_image(d: np.ndarray, chart: CoordinateChart) -> np.ndarray:
    if not chart.periodic:
        return d
    L = np.array(chart.periods).reshape((-1,) + (1,) * (d.ndim - 1))
    return d - L * np.round(d / L)


def geodesic_distance(snapshot: MetricSnapshot, x0) -> DistanceField:
    """Fast-marching solution of ``|grad rho|_g = 1`` from ``x0``.

    The validity radius is the smallest distance at which a two-sided arrival
    (a ridge of ``rho`` along some axis) is found, less two effective cells, and
    never more than half the shortest period scaled by ``min exp(u)``.
    """
    chart = snapshot.chart
    x0 = chart.normalize(np.asarray(x0, dtype=float).reshape(chart.n))
    u = snapshot.u
    slowness = np.exp(u)
    mesh = np.stack(chart.mesh())
    d = _min_image(mesh - x0.reshape((-1,) + (1,) * chart.n), chart)
    dist0 = np.sqrt((d**2).sum(axis=0))
    u0 = float(snapshot.fields.at("u", x0[None])[0])
    h = chart.spacing
    hmax = float(h.max())
    seed_mask = dist0 <= 1.5 * hmax
    seed_vals = 0.5 * (np.exp(u0) + slowness) * dist0
    seeds = {int(i): float(seed_vals.ravel()[i]) for i in np.flatnonzero(seed_mask.ravel())}
    rho = _fmm(slowness, chart, seeds)

    cell = hmax * float(np.exp(u.max()))
    ridge = np.zeros(chart.resolution, dtype=bool)
    for ax in range(chart.n):
        if chart.periodic:
            lo, hi = np.roll(rho, 1, axis=ax), np.roll(rho, -1, axis=ax)
            ridge |= (rho >= lo) & (rho >= hi) & (rho > 2 * cell)
        else:
            sl = [slice(None)] * chart.n
            sl[ax] = slice(1, -1)
            inner = rho[tuple(sl)]
            lo = np.take(rho, np.arange(0, chart.resolution[ax] - 2), axis=ax)
            hi = np.take(rho, np.arange(2, chart.resolution[ax]), axis=ax)
            r = np.zeros_like(ridge)
            r[tuple(sl)] = (inner >= lo) & (inner >= hi) & (inner > 2 * cell)
            ridge |= r
    if not chart.periodic:
        boundary = np.zeros(chart.resolution, dtype=bool)
        for ax in range(chart.n):
            sl = [slice(None)] * chart.n
            sl[ax] = 0
            boundary[tuple(sl)] = True
            sl[ax] = -1
            boundary[tuple(sl)] = True
        ridge |= boundary
    ridge_min = float(rho[ridge].min()) if ridge.any() else math.inf
    if chart.periodic:
        cap = 0.5 * min(chart.periods) * float(np.exp(u.min()))
    else:
        cap = math.inf
    validity = min(ridge_min - 2 * cell, cap)
    if not np.isfinite(validity) or validity <= 2 * cell:
        raise GeometryError("grid too coarse to certify any validity radius")
    return DistanceField(snapshot.t, rho, x0, validity, chart, apex_scale=float(np.exp(u0)))


def eikonal_residual(df: DistanceField, snapshot: MetricSnapshot) -> np.ndarray:
    """``| |grad rho|_g - 1 |`` at nodes with ``2 cells < rho < validity``; NaN elsewhere."""
    chart = df.chart
    h = chart.spacing
    grads = []
    for ax in range(chart.n):
        if chart.periodic:
            g = (np.roll(df.rho, -1, axis=ax) - np.roll(df.rho, 1, axis=ax)) / (2 * h[ax])
        else:
            g = np.gradient(df.rho, h[ax], axis=ax)
        grads.append(g)
    norm = np.sqrt(sum(g**2 for g in grads)) * np.exp(-snapshot.u)
    cell = h.max() * np.exp(snapshot.u.max())
    mask = (df.rho > 2 * cell) & (df.rho < df.validity_radius)
    return np.where(mask, np.abs(norm - 1.0), np.nan)
