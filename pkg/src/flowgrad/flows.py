"""Desk-scale geometric flows packaged as :class:`FlowHistory` objects.

Families
--------
``Ricci2D``            conformal Ricci flow on a 2-torus, ``u_t = -R/2``
``Yamabe3DConformal``  conformal Yamabe flow on a 3-torus, ``u_t = -R/2``
``CurveShortening``    plane curve shortening, ``gamma_t = k N``
``ForcedCSF-I``        ``gamma_t = k N + kappa(t) gamma``
``ForcedCSF-II``       ``gamma_t = (k - kappa(t)) N``
``SphereMCFAnalytic``  closed-form shrinking round circle / sphere
``HeatStatic``         static metric, the field ``a`` solves the heat equation

In every case the stored metric is ``exp(2u) delta`` on a fixed chart and the
field under study is stored under the name ``a`` in each snapshot.  Curves are
kept in their material (normal-flow) parametrization over a fixed parameter
circle, so the induced metric ``|gamma_theta|^2 dtheta^2`` has ``u = log|gamma_theta|``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .geom import (
    CONFORMAL_R_FORMULAS,
    CoordinateChart,
    GridFields,
    MetricSnapshot,
    conformal_ricci,
    laplace_beltrami,
    scalar_curvature_conformal,
)

FAMILIES = (
    "Ricci2D",
    "Yamabe3DConformal",
    "CurveShortening",
    "ForcedCSF-I",
    "ForcedCSF-II",
    "SphereMCFAnalytic",
    "HeatStatic",
)
CURVE_FAMILIES = ("CurveShortening", "ForcedCSF-I", "ForcedCSF-II")

# stability interval of classical RK4 on the negative real axis
RK4_STABILITY = 2.785


class FlowError(RuntimeError):
    """Base class for solver failures."""


class CFLViolation(FlowError):
    pass


class CurvatureCeilingExceeded(FlowError):
    """The field left the configured ceiling; ``history`` holds the snapshots so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class SelfIntersection(FlowError):
    pass


EVOLUTION_LAWS = {
    "Ricci2D": {
        "metric": "d/dt g = -R g  (u_t = -R/2)",
        "a": "R_t = lap R + R^2",
        "grad_a": "(dR)_t = lap dR + (3/2) R dR",
        "hess_a": "(Hess R)_t = lap Hess R + R tr(Hess R) g + 2 dR (x) dR",
        "F": "-a", "F_hat": "-(3/2) a Id",
    },
    "Yamabe3DConformal": {
        "metric": "d/dt g = -R g  (u_t = -R/2)",
        "a": "R_t = (n-1) lap R + R^2",
        "grad_a": "(dR)_t = (n-1)(lap dR - Ric(dR)) + 2 R dR",
        "F": "-lambda a  (after reverse-scaled reparametrization, lambda = 1/(n-1))",
        "F_hat": "Ric - 2 lambda a Id",
    },
    "CurveShortening": {
        "metric": "u_t = -k^2",
        "a": "k_t = lap k + k^3",
        "grad_a": "(dk)_t = lap dk + 3 k^2 dk",
        "F": "-a^2", "F_hat": "-3 a^2",
    },
    "ForcedCSF-I": {
        "metric": "u_t = -k^2 + kappa",
        "a": "k_t = lap k + k^3 - kappa k",
        "grad_a": "(dk)_t = lap dk + 3 k^2 dk - kappa dk",
        "F": "-a^2 + kappa", "F_hat": "-3 a^2 + kappa",
    },
    "ForcedCSF-II": {
        "metric": "u_t = kappa k - k^2",
        "a": "k_t = lap k + k^3 - kappa k^2",
        "grad_a": "(dk)_t = lap dk + 3 k^2 dk - 2 kappa k dk",
        "F": "-a^2 + kappa a", "F_hat": "-3 a^2 + 2 kappa a",
    },
    "SphereMCFAnalytic": {
        "metric": "g = rho(t)^2 g_round, a = 1/rho",
        "a": "a_t = n a^3 - kappa a (type I) | n a^3 - kappa a^2 (type II) | n a^3",
        "grad_a": "grad a = 0",
        "F": "-n a^2 (+ kappa | + kappa a)", "F_hat": "same as F",
    },
    "HeatStatic": {
        "metric": "d/dt g = 0",
        "a": "a_t = lap a",
        "grad_a": "(da)_t = lap da (flat)",
        "F": "0", "F_hat": "0",
    },
}


# --------------------------------------------------------------------------
# forcing

def make_forcing(spec) -> Callable[[float], float]:
    """Forcing ``kappa(t)`` from a spec dict, a number, a callable, or ``None``."""
    if spec is None:
        return lambda t: 0.0
    if callable(spec):
        return spec
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda t: c
    kind = spec.get("kind", "none")
    if kind == "none":
        return lambda t: 0.0
    if kind == "constant":
        c = float(spec["c"])
        return lambda t: c
    if kind == "linear":
        c0, c1 = float(spec["c0"]), float(spec["c1"])
        return lambda t: c0 + c1 * t
    if kind == "sine":
        c, amp, om = float(spec.get("c", 0.0)), float(spec["amp"]), float(spec["omega"])
        return lambda t: c + amp * math.sin(om * t)
    raise ValueError(f"unknown forcing kind {kind!r}")


# --------------------------------------------------------------------------
# configuration

@dataclass
class FlowConfig:
    """Inputs of one flow run.

    ``dt`` is the snapshot stride; the solver sub-steps inside each stride with
    a uniform RK4 step below the stability cap (or exactly ``solver_dt`` if
    given, which must itself respect the cap).
    """

    family: str
    initial: dict = field(default_factory=lambda: {"preset": "flat"})
    T: float = 0.25
    dt: float = 1.25e-3
    resolution: tuple = (64, 64)
    periods: tuple | None = None
    forcing: object = None
    tol: float = 1e-6
    ceiling: float = 1e4
    solver_dt: float | None = None
    n: int | None = None
    radius: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.T <= 0 or self.dt <= 0:
            raise ValueError("horizon and stride must be positive")
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.periods is None:
            self.periods = tuple(2 * np.pi for _ in self.resolution)
        self.periods = tuple(float(p) for p in self.periods)

    @property
    def n_snapshots(self) -> int:
        m = int(round(self.T / self.dt))
        if abs(m * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError("horizon must be an integer multiple of the snapshot stride")
        return m

    def to_dict(self) -> dict:
        d = {
            "family": self.family, "initial": self.initial, "T": self.T, "dt": self.dt,
            "resolution": list(self.resolution), "periods": list(self.periods),
            "forcing": self.forcing if not callable(self.forcing) else "callable",
            "tol": self.tol, "ceiling": self.ceiling, "solver_dt": self.solver_dt,
            "n": self.n, "radius": self.radius,
        }
        return d


# --------------------------------------------------------------------------
# history

class FlowHistory:
    """Time-indexed metric snapshots with the field ``a`` and global bounds.

    ``meta['forward_times']`` maps each stored time to the producing flow's own
    time, so a reparametrized history can still evaluate the forcing.
    """

    def __init__(self, family, chart, times, snapshots, meta=None, forcing=None):
        self.family = family
        self.chart = chart
        self.times = np.asarray(times, dtype=float)
        self.snapshots = list(snapshots)
        if len(self.snapshots) != len(self.times):
            raise ValueError("one snapshot per time is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        self.meta = dict(meta or {})
        self.meta.setdefault("direction", "forward")
        self.meta.setdefault("scale", 1.0)
        self.meta.setdefault("forward_times", self.times.tolist())
        self.forcing = None if forcing is None else np.asarray(forcing, dtype=float)
        self.bounds = self.meta.get("bounds") or compute_bounds(self)
        self.meta["bounds"] = self.bounds

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def n(self) -> int:
        return self.chart.n

    @property
    def stride(self) -> float:
        return float(np.min(np.diff(self.times)))

    def forward_time(self, s):
        return np.interp(s, self.times, np.asarray(self.meta["forward_times"]))

    def kappa(self, s) -> np.ndarray:
        """Forcing at stored time ``s`` (linear interpolation of the samples)."""
        if self.forcing is None:
            return np.zeros_like(np.asarray(s, dtype=float))
        return np.interp(s, self.times, self.forcing)

    def locate(self, s: float):
        """Index ``i`` and weight ``w`` with ``s = (1-w) t_i + w t_{i+1}``."""
        t = self.times
        if s <= t[0]:
            return 0, 0.0
        if s >= t[-1]:
            return len(t) - 1, 0.0
        i = int(np.searchsorted(t, s, side="right") - 1)
        w = (s - t[i]) / (t[i + 1] - t[i])
        if w < 1e-12:
            return i, 0.0
        if w > 1 - 1e-12:
            return i + 1, 0.0
        return i, float(w)

    def field_at(self, name: str, s: float, x) -> np.ndarray:
        """Interpolated grid field (linear in time, spline in space)."""
        i, w = self.locate(s)
        val = self.snapshots[i].fields.at(name, x)
        if w > 0:
            nxt = self.snapshots[i + 1].fields.at(name, x)
            if name == "u":
                # cubic Hermite in time keeps u consistent with the stored rate u_t
                h = self.times[i + 1] - self.times[i]
                m0 = self.snapshots[i].fields.at("u_t", x) * h
                m1 = self.snapshots[i + 1].fields.at("u_t", x) * h
                w2, w3 = w * w, w * w * w
                return ((2 * w3 - 3 * w2 + 1) * val + (w3 - 2 * w2 + w) * m0
                        + (-2 * w3 + 3 * w2) * nxt + (w3 - w2) * m1)
            val = (1 - w) * val + w * nxt
        return val

    def a_grids(self):
        return [s.fields.base["a"] for s in self.snapshots]

    # serialization -----------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = list(self.snapshots[0].fields.base.keys())
        arrays = {}
        for name in names:
            arr = np.stack([s.fields.base[name] for s in self.snapshots]).astype("<f8")
            fname = f"{name}.npy"
            np.save(directory / fname, arr)
            arrays[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8"}
        if self.forcing is not None:
            np.save(directory / "forcing.npy", self.forcing.astype("<f8"))
        meta = {
            "family": self.family,
            "chart": self.chart.to_dict(),
            "times": self.times.tolist(),
            "arrays": arrays,
            "has_forcing": self.forcing is not None,
            "meta": _jsonable(self.meta),
        }
        (directory / "history.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "FlowHistory":
        directory = Path(directory)
        doc = json.loads((directory / "history.json").read_text())
        chart = CoordinateChart.from_dict(doc["chart"])
        data = {name: np.load(directory / spec["file"]) for name, spec in doc["arrays"].items()}
        for name, spec in doc["arrays"].items():
            if list(data[name].shape) != spec["shape"]:
                raise ValueError(f"array {name} has the wrong shape")
        snaps = []
        for i, t in enumerate(doc["times"]):
            curv = {k: v[i] for k, v in data.items() if k not in ("u", "u_t")}
            snaps.append(MetricSnapshot(t, chart, data["u"][i], data["u_t"][i], curv))
        forcing = np.load(directory / "forcing.npy") if doc["has_forcing"] else None
        return cls(doc["family"], chart, doc["times"], snaps, doc["meta"], forcing)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def compute_bounds(history: FlowHistory) -> dict:
    """Sup-norm bounds ``K = sup|a|``, ``K1`` (|Ric| or |a|^2 for curves), ``k+``."""
    family = history.family
    n = history.n
    K = Kgrad = K1 = 0.0
    for snap in history.snapshots:
        a = snap.fields.base["a"]
        K = max(K, float(np.abs(a).max()))
        grad2 = sum(snap.fields.grid(f"d{i}:a") ** 2 for i in range(n)) * np.exp(-2 * snap.u)
        Kgrad = max(Kgrad, float(np.sqrt(grad2).max()))
        if family == "Ricci2D":
            K1 = max(K1, float(np.abs(snap.fields.base["R"]).max()) / math.sqrt(2))
        elif family == "Yamabe3DConformal":
            ric = conformal_ricci(snap.fields, n)
            tot = sum((2.0 if i != j else 1.0) * ric[f"ric{i}{j}"] ** 2
                      for i in range(n) for j in range(i, n))
            K1 = max(K1, float(np.sqrt(tot * np.exp(-4 * snap.u)).max()))
        elif family == "HeatStatic":
            K1 = 0.0
        else:
            K1 = max(K1, float((a ** 2).max()) * (history.meta.get("n_dim", 1)))
    kplus = 0.0 if history.forcing is None else float(np.abs(history.forcing).max())
    return {"K": K, "K1": K1, "K_grad": Kgrad, "k_plus": kplus}


# --------------------------------------------------------------------------
# initial data

def _axis_phase(chart, axis):
    X = chart.mesh()[axis]
    return 2 * np.pi * X / chart.periods[axis]


def initial_conformal_factor(chart: CoordinateChart, spec: dict, one_coordinate: bool = False) -> np.ndarray:
    """Conformal factor ``u0`` on a periodic box from a named preset.

    Presets: ``flat``, ``constant`` (``c``), ``sine`` (``eps``), ``bump``
    (``eps``, ``beta``), ``fourier`` (``modes`` = list of
    ``[k1, k2, .., cos_coef, sin_coef]``) and ``rough`` (``eps``, ``seed``,
    ``kmax``, ``decay``).
    """
    preset = spec.get("preset", "flat")
    n = chart.n
    used = 1 if one_coordinate else n
    phases = [_axis_phase(chart, i) for i in range(n)]
    if preset == "flat":
        return np.zeros(chart.resolution)
    if preset == "constant":
        return np.full(chart.resolution, float(spec.get("c", 0.0)))
    if preset == "sine":
        return float(spec.get("eps", 1e-3)) * np.sin(phases[0])
    if preset == "bump":
        eps, beta = float(spec.get("eps", 0.4)), float(spec.get("beta", 1.0))
        return eps * np.exp(beta * (sum(np.cos(phases[i]) for i in range(used)) - used))
    if preset == "fourier":
        out = np.zeros(chart.resolution)
        for mode in spec["modes"]:
            ks = mode[:-2]
            if one_coordinate and any(ks[1:]):
                raise ValueError("one-coordinate flows need modes along the first axis only")
            arg = sum(k * p for k, p in zip(ks, phases))
            out += mode[-2] * np.cos(arg) + mode[-1] * np.sin(arg)
        return out
    if preset == "rough":
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        kmax = int(spec.get("kmax", 6))
        decay = float(spec.get("decay", 3.5))
        eps = float(spec.get("eps", 0.2))
        out = np.zeros(chart.resolution)
        rng_modes = range(-kmax, kmax + 1)
        grids = np.meshgrid(*([list(rng_modes)] * used), indexing="ij")
        ks = np.stack([g.ravel() for g in grids], axis=1)
        for k in ks:
            norm = math.sqrt(float((k ** 2).sum()))
            if norm == 0 or norm > kmax:
                continue
            amp = norm ** (-decay)
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(int(k[i]) * phases[i] for i in range(used))
            out += amp * np.cos(arg + phase)
        return eps * out / np.abs(out).max()
    raise ValueError(f"unknown conformal preset {preset!r}")


def initial_curve(N: int, spec: dict) -> np.ndarray:
    """Counterclockwise closed curve samples, shape ``(2, N)``.

    Presets: ``circle`` (``radius``, ``center``), ``ellipse`` (``a``, ``b``),
    ``fourier`` (radial ``r0`` plus ``modes`` = ``[k, cos, sin]`` rows) and
    ``rough`` (``r0``, ``eps``, ``seed``, ``kmax``, ``decay``).
    """
    th = 2 * np.pi * np.arange(N) / N
    preset = spec.get("preset", "circle")
    cx, cy = spec.get("center", (0.0, 0.0))
    if preset == "circle":
        r = float(spec.get("radius", 1.0))
        return np.stack([cx + r * np.cos(th), cy + r * np.sin(th)])
    if preset == "ellipse":
        a, b = float(spec.get("a", 1.5)), float(spec.get("b", 1.0))
        return np.stack([cx + a * np.cos(th), cy + b * np.sin(th)])
    if preset in ("fourier", "rough"):
        r0 = float(spec.get("r0", 1.0))
        rad = np.full(N, r0)
        if preset == "fourier":
            for k, c, s in spec["modes"]:
                rad += c * np.cos(k * th) + s * np.sin(k * th)
        else:
            rng = np.random.default_rng(int(spec.get("seed", 0)))
            kmax, decay = int(spec.get("kmax", 8)), float(spec.get("decay", 2.0))
            pert = np.zeros(N)
            for k in range(2, kmax + 1):
                pert += k ** (-decay) * np.cos(k * th + rng.uniform(0, 2 * np.pi))
            rad += float(spec.get("eps", 0.1)) * r0 * pert / np.abs(pert).max()
        if rad.min() <= 0:
            raise ValueError("radial curve must stay positive")
        return np.stack([cx + rad * np.cos(th), cy + rad * np.sin(th)])
    raise ValueError(f"unknown curve preset {preset!r}")


# --------------------------------------------------------------------------
# generic RK4 driver

def _rk4(rhs, y, t, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + h / 2 * k1)
    k3 = rhs(t + h / 2, y + h / 2 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _march(cfg: FlowConfig, y0, rhs, stiffness, make_snapshot, family, chart, meta, kappa,
           check=None):
    """Advance ``y`` over each snapshot stride with uniform RK4 sub-steps."""
    m = cfg.n_snapshots
    times = [0.0]
    snaps = [make_snapshot(0.0, y0)]
    y = y0
    for j in range(m):
        t0 = j * cfg.dt
        lam = stiffness(y)
        cap = RK4_STABILITY / lam if lam > 0 else math.inf
        if cfg.solver_dt is not None:
            if cfg.solver_dt > cap:
                raise CFLViolation(f"solver step {cfg.solver_dt:g} exceeds the stability cap {cap:g}"
                                   f" at t = {t0:g}")
            nsub = max(1, int(round(cfg.dt / cfg.solver_dt)))
        else:
            nsub = max(1, math.ceil(cfg.dt / (0.9 * cap)))
        h = cfg.dt / nsub
        for q in range(nsub):
            y = _rk4(rhs, y, t0 + q * h, h)
        if not np.all(np.isfinite(y)):
            raise CFLViolation(f"non-finite solution at t = {t0 + cfg.dt:g}")
        t1 = (j + 1) * cfg.dt
        snap = make_snapshot(t1, y)
        if check is not None:
            check(t1, y)
        amax = float(np.abs(snap.fields.base["a"]).max())
        if amax > cfg.ceiling:
            partial = FlowHistory(family, chart, times, snaps, dict(meta),
                                  np.array([kappa(t) for t in times]))
            raise CurvatureCeilingExceeded(
                f"|a| = {amax:.3g} exceeds ceiling {cfg.ceiling:g} at t = {t1:g}", partial)
        times.append(t1)
        snaps.append(snap)
    forcing = np.array([kappa(t) for t in times]) if family in CURVE_FAMILIES or cfg.forcing else None
    hist = FlowHistory(family, chart, times, snaps, meta, forcing)
    hist.meta["residual"] = evolution_residual(hist)
    hist.meta["residual_ok"] = hist.meta["residual"] <= 10 * cfg.tol
    return hist


def _periodic_chart(cfg):
    return CoordinateChart("periodic-box", cfg.periods, cfg.resolution)


def _max_wavenumber_sq(chart):
    return sum(float(np.max(chart.wavenumbers(i) ** 2)) for i in range(chart.n))


# --------------------------------------------------------------------------
# conformal flows

def run_ricci_2d(cfg: FlowConfig) -> FlowHistory:
    """Ricci flow ``d/dt g = -2 Ric = -R g`` of ``exp(2u) delta`` on the 2-torus.

    Use ``initial = {"preset": "round-sphere"}`` for the analytic shrinking
    round sphere on a stereographic plane-box chart.
    """
    if cfg.family != "Ricci2D":
        raise ValueError("run_ricci_2d needs family Ricci2D")
    if cfg.initial.get("preset") == "round-sphere":
        return _round_sphere_ricci(cfg)
    chart = _periodic_chart(cfg)
    if chart.n != 2:
        raise ValueError("Ricci2D runs on a two-dimensional chart")
    u0 = initial_conformal_factor(chart, cfg.initial)
    return _conformal_flow(cfg, chart, u0, diffusivity=1.0)


def run_yamabe_conformal(cfg: FlowConfig) -> FlowHistory:
    """Yamabe flow ``d/dt g = -R g`` on a 3-torus with ``u`` varying along axis 0."""
    if cfg.family != "Yamabe3DConformal":
        raise ValueError("run_yamabe_conformal needs family Yamabe3DConformal")
    chart = _periodic_chart(cfg)
    if chart.n != 3:
        raise ValueError("Yamabe3DConformal runs on a three-dimensional chart")
    u0 = initial_conformal_factor(chart, cfg.initial, one_coordinate=True)
    if np.abs(u0 - u0[:, :1, :1]).max() > 1e-12:
        raise ValueError("Yamabe initial data must depend on the first coordinate only")
    return _conformal_flow(cfg, chart, u0, diffusivity=2.0)


def _conformal_flow(cfg, chart, u0, diffusivity):
    n = chart.n
    kmax2 = _max_wavenumber_sq(chart)

    def R_of(u):
        return scalar_curvature_conformal(u, chart, n)

    def rhs(t, u):
        return -0.5 * R_of(u)

    def stiffness(u):
        return diffusivity * kmax2 * float(np.exp(-2 * u.min()))

    def snapshot(t, u):
        R = R_of(u)
        curv = {"a": R, "R": R}
        if n == 3:
            curv.update(conformal_ricci(GridFields(chart, {"u": u}), n))
        return MetricSnapshot(t, chart, u, -0.5 * R, curv)

    meta = {
        "laws": EVOLUTION_LAWS[cfg.family],
        "scalar_curvature_formula": CONFORMAL_R_FORMULAS[n],
        "chart_reduction": "conformal metric exp(2u) delta on a flat periodic box",
        "config": cfg.to_dict(),
        "tol": cfg.tol,
        "n_dim": n,
    }
    return _march(cfg, u0, rhs, stiffness, snapshot, cfg.family, chart, meta, lambda t: 0.0)


def _round_sphere_ricci(cfg):
    rho0 = float(cfg.initial.get("radius", cfg.radius))
    if cfg.T >= rho0 ** 2 / 2:
        raise FlowError(f"horizon beyond extinction time {rho0 ** 2 / 2:g}")
    half = float(cfg.initial.get("box", 16.0))
    res = int(cfg.initial.get("grid", 257))
    chart = CoordinateChart("plane-box", (2 * half, 2 * half), (res, res))
    Y = chart.mesh()
    base = np.log(2.0 / (1 + Y[0] ** 2 + Y[1] ** 2))
    m = cfg.n_snapshots
    times = cfg.dt * np.arange(m + 1)
    snaps = []
    for t in times:
        rho2 = rho0 ** 2 - 2 * t
        u = base + 0.5 * math.log(rho2)
        R = np.full(chart.resolution, 2.0 / rho2)
        snaps.append(MetricSnapshot(t, chart, u, -0.5 * R, {"a": R, "R": R}))
    meta = {
        "laws": EVOLUTION_LAWS["Ricci2D"],
        "scalar_curvature_formula": CONFORMAL_R_FORMULAS[2],
        "chart_reduction": "round sphere in a stereographic plane-box chart",
        "analytic": {"rho0": rho0, "law": "rho^2 = rho0^2 - 2t"},
        "config": cfg.to_dict(),
        "tol": cfg.tol,
        "n_dim": 2,
    }
    hist = FlowHistory("Ricci2D", chart, times, snaps, meta, None)
    hist.meta["residual"] = evolution_residual(hist)
    return hist


def run_heat_static(cfg: FlowConfig) -> FlowHistory:
    """Static flat metric carrying the exact heat solution from a Fourier ``a0``.

    ``initial = {"modes": [[k1, .., kn, cos, sin], ...], "u": <conformal preset>}``;
    only a flat ``u`` makes ``a`` an exact heat solution.
    """
    chart = _periodic_chart(cfg)
    u = initial_conformal_factor(chart, cfg.initial.get("u", {"preset": "flat"}))
    modes = cfg.initial.get("modes", [[1] + [0] * (chart.n - 1), 0.0, 1.0])
    if np.ndim(modes[0]) == 0:
        modes = [modes]
    phases = [_axis_phase(chart, i) for i in range(chart.n)]
    m = cfg.n_snapshots
    times = cfg.dt * np.arange(m + 1)
    snaps = []
    for t in times:
        a = heat_fourier_field(chart, modes, t, phases)
        snaps.append(MetricSnapshot(t, chart, u, np.zeros_like(u), {"a": a}))
    meta = {"laws": EVOLUTION_LAWS["HeatStatic"], "modes": modes, "config": cfg.to_dict(),
            "tol": cfg.tol, "n_dim": chart.n}
    hist = FlowHistory("HeatStatic", chart, times, snaps, meta, None)
    hist.meta["residual"] = evolution_residual(hist)
    return hist


def heat_fourier_field(chart, modes, t, phases=None):
    """``sum_m exp(-|k_m|^2 t)(c_m cos + s_m sin)(k_m . x)`` with ``k = 2 pi j / L``."""
    if phases is None:
        phases = [_axis_phase(chart, i) for i in range(chart.n)]
    out = np.zeros(chart.resolution)
    for mode in modes:
        js = mode[:-2]
        k2 = sum((2 * np.pi * j / L) ** 2 for j, L in zip(js, chart.periods))
        arg = sum(j * p for j, p in zip(js, phases))
        out += math.exp(-k2 * t) * (mode[-2] * np.cos(arg) + mode[-1] * np.sin(arg))
    return out


# --------------------------------------------------------------------------
# curves

def spectral_filter(N: int, strength: float = 36.0, order: int = 36) -> np.ndarray:
    """Exponential low-pass weights ``exp(-strength (|j| / (N/2))^order)``.

    Only the top few percent of modes are damped; resolved modes are untouched
    to double precision.
    """
    j = np.abs(np.fft.fftfreq(N, d=1.0 / N))
    return np.exp(-strength * (j / (N / 2)) ** order)


def _curve_geometry(chart, gamma):
    N = chart.resolution[0]
    k = chart.wavenumbers(0)
    gh = np.fft.fft(gamma, axis=1) * spectral_filter(N)
    if N % 2 == 0:
        gh[:, N // 2] = 0.0
    d1 = np.real(np.fft.ifft(1j * k * gh, axis=1))
    d2 = np.real(np.fft.ifft(-(k ** 2) * gh, axis=1))
    speed = np.sqrt((d1 ** 2).sum(axis=0))
    tang = d1 / speed
    normal = np.stack([-tang[1], tang[0]])  # inward for counterclockwise curves
    k = (d2 * normal).sum(axis=0) / speed ** 2
    return speed, normal, k


def _segments_cross(gamma) -> bool:
    p = gamma.T
    q = np.roll(p, -1, axis=0)
    N = len(p)

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    A, B = p[:, None, :], q[:, None, :]
    C, D = p[None, :, :], q[None, :, :]
    o1, o2 = orient(A, B, C), orient(A, B, D)
    o3, o4 = orient(C, D, A), orient(C, D, B)
    cross = (o1 * o2 < 0) & (o3 * o4 < 0)
    i, j = np.indices((N, N))
    gap = np.abs(i - j)
    cross &= (gap > 1) & (gap < N - 1)
    return bool(cross.any())


def run_curve_flow(cfg: FlowConfig) -> FlowHistory:
    """Curve shortening and its two forced variants on a closed plane curve."""
    if cfg.family not in CURVE_FAMILIES:
        raise ValueError(f"run_curve_flow does not handle {cfg.family}")
    N = cfg.resolution[0]
    chart = CoordinateChart("closed-curve", (2 * np.pi,), (N,))
    gamma0 = initial_curve(N, cfg.initial)
    if _segments_cross(gamma0):
        raise SelfIntersection("initial curve is not embedded")
    kappa = make_forcing(cfg.forcing)
    family = cfg.family
    kmax2 = _max_wavenumber_sq(chart)

    def velocity(t, gamma):
        speed, normal, k = _curve_geometry(chart, gamma)
        kap = kappa(t)
        if family == "CurveShortening":
            return k * normal, speed, k, -k * k
        if family == "ForcedCSF-I":
            return k * normal + kap * gamma, speed, k, -k * k + kap
        return (k - kap) * normal, speed, k, kap * k - k * k

    def rhs(t, y):
        return velocity(t, y.reshape(2, N))[0].ravel()

    def stiffness(y):
        speed = _curve_geometry(chart, y.reshape(2, N))[0]
        return kmax2 / float(speed.min()) ** 2

    def snapshot(t, y):
        gamma = y.reshape(2, N)
        _, speed, k, u_t = velocity(t, gamma)
        return MetricSnapshot(t, chart, np.log(speed), u_t,
                              {"a": k, "k": k, "gx": gamma[0].copy(), "gy": gamma[1].copy()})

    def check(t, y):
        if _segments_cross(y.reshape(2, N)):
            raise SelfIntersection(f"curve self-intersects at t = {t:g}")

    meta = {
        "laws": EVOLUTION_LAWS[family],
        "chart_reduction": "material parametrization over a fixed parameter circle",
        "config": cfg.to_dict(),
        "tol": cfg.tol,
        "n_dim": 1,
    }
    return _march(cfg, gamma0.ravel(), rhs, stiffness, snapshot, family, chart, meta, kappa, check)


# --------------------------------------------------------------------------
# analytic spheres

def sphere_radius(n: int, rho0: float, T: float, forcing=None, kind: str = "none", times=None):
    """Radius of a round ``n``-sphere under (forced) mean curvature flow.

    ``kind`` is ``none`` (``rho' = -n/rho``), ``I`` (``rho' = -n/rho + kappa rho``)
    or ``II`` (``rho' = kappa - n/rho``).
    """
    if n not in (1, 2):
        raise ValueError("analytic spheres are provided for n in {1, 2}")
    if rho0 <= 0:
        raise ValueError("initial radius must be positive")
    times = np.linspace(0, T, 2) if times is None else np.asarray(times, dtype=float)
    if kind == "none":
        ext = rho0 ** 2 / (2 * n)
        if T >= ext:
            raise FlowError(f"horizon {T:g} is beyond the extinction time {ext:g}")
        return np.sqrt(rho0 ** 2 - 2 * n * times)
    kappa = make_forcing(forcing)
    if kind == "I":
        f = lambda t, r: [-n / r[0] + kappa(t) * r[0]]
    elif kind == "II":
        f = lambda t, r: [kappa(t) - n / r[0]]
    else:
        raise ValueError("forcing kind must be none, I or II")
    hit = lambda t, r: r[0] - 1e-6 * rho0
    hit.terminal = True
    sol = solve_ivp(f, (0, T), [rho0], t_eval=times, method="DOP853", rtol=1e-12, atol=1e-14,
                    events=hit)
    if sol.status == 1:
        raise FlowError(f"sphere reaches zero radius at t = {sol.t_events[0][0]:g}")
    return sol.y[0]


def analytic_sphere_mcf(n: int, rho0: float, T: float, dt: float, forcing=None, kind: str = "none",
                        resolution: int | None = None, box: float = 16.0) -> FlowHistory:
    """Closed-form round circle (n=1) or sphere (n=2) under (forced) MCF.

    The field ``a`` is the principal curvature ``1/rho``; ``|A|^2 = n/rho^2`` and
    ``grad A = 0`` at every time.
    """
    m = int(round(T / dt))
    times = dt * np.arange(m + 1)
    rho = sphere_radius(n, rho0, T, forcing, kind, times)
    kappa = make_forcing(forcing) if kind != "none" else (lambda t: 0.0)
    kap = np.array([kappa(t) for t in times])
    if kind == "none":
        drho = -n / rho
    elif kind == "I":
        drho = -n / rho + kap * rho
    else:
        drho = kap - n / rho
    if n == 1:
        N = resolution or 64
        chart = CoordinateChart("closed-curve", (2 * np.pi,), (N,))
        th = chart.axes()[0]
        base = np.zeros(N)
    else:
        N = resolution or 257
        chart = CoordinateChart("plane-box", (2 * box, 2 * box), (N, N))
        Y = chart.mesh()
        base = np.log(2.0 / (1 + Y[0] ** 2 + Y[1] ** 2))
    snaps = []
    for t, r, dr in zip(times, rho, drho):
        u = base + math.log(r)
        curv = {"a": np.full(chart.resolution, 1.0 / r), "A2": np.full(chart.resolution, n / r ** 2)}
        if n == 1:
            curv.update({"k": curv["a"], "gx": r * np.cos(th), "gy": r * np.sin(th)})
        snaps.append(MetricSnapshot(t, chart, u, np.full(chart.resolution, dr / r), curv))
    meta = {
        "laws": EVOLUTION_LAWS["SphereMCFAnalytic"],
        "analytic": {"n": n, "rho0": rho0, "kind": kind, "rho": rho.tolist()},
        "forcing_kind": kind,
        "n_dim": n,
        "tol": 1e-10,
        "config": {"n": n, "rho0": rho0, "T": T, "dt": dt, "kind": kind,
                   "forcing": forcing if not callable(forcing) else "callable"},
    }
    hist = FlowHistory("SphereMCFAnalytic", chart, times, snaps, meta, kap if kind != "none" else None)
    hist.meta["residual"] = evolution_residual(hist)
    return hist


def run_flow(cfg: FlowConfig) -> FlowHistory:
    """Dispatch on the family tag."""
    if cfg.family == "Ricci2D":
        return run_ricci_2d(cfg)
    if cfg.family == "Yamabe3DConformal":
        return run_yamabe_conformal(cfg)
    if cfg.family in CURVE_FAMILIES:
        return run_curve_flow(cfg)
    if cfg.family == "HeatStatic":
        return run_heat_static(cfg)
    if cfg.family == "SphereMCFAnalytic":
        n = cfg.n or 1
        kind = cfg.initial.get("forcing_kind", "none")
        return analytic_sphere_mcf(n, cfg.radius, cfg.T, cfg.dt, cfg.forcing, kind)
    raise ValueError(f"unsupported family {cfg.family}")


# --------------------------------------------------------------------------
# self-consistency

def law_rhs(history: FlowHistory, i: int) -> np.ndarray:
    """Right-hand side of the stored field's evolution law at snapshot ``i``
    in the producing flow's own time."""
    snap = history.snapshots[i]
    chart = history.chart
    a, u = snap.fields.base["a"], snap.u
    fam = history.family
    t_fwd = float(history.meta["forward_times"][i])
    if fam == "Ricci2D":
        return laplace_beltrami(a, u, chart) + a ** 2
    if fam == "Yamabe3DConformal":
        return 2 * laplace_beltrami(a, u, chart) + a ** 2
    if fam == "HeatStatic":
        return laplace_beltrami(a, u, chart)
    kap = _forward_kappa(history, i)
    lap = laplace_beltrami(a, u, chart)
    if fam == "CurveShortening":
        return lap + a ** 3
    if fam == "ForcedCSF-I":
        return lap + a ** 3 - kap * a
    if fam == "ForcedCSF-II":
        return lap + a ** 3 - kap * a ** 2
    if fam == "SphereMCFAnalytic":
        n = history.meta["analytic"]["n"]
        kind = history.meta["analytic"]["kind"]
        extra = {"none": 0.0, "I": -kap * a, "II": -kap * a ** 2}[kind]
        return n * a ** 3 + extra
    raise ValueError(fam)


def _forward_kappa(history, i):
    if history.forcing is None:
        return 0.0
    return float(history.forcing[i])


def _metric_law(history: FlowHistory, i: int) -> np.ndarray:
    snap = history.snapshots[i]
    fam = history.family
    a = snap.fields.base["a"]
    kap = _forward_kappa(history, i)
    if fam in ("Ricci2D", "Yamabe3DConformal"):
        return -0.5 * snap.fields.base["R"]
    if fam == "HeatStatic":
        return np.zeros_like(a)
    if fam == "CurveShortening":
        return -a ** 2
    if fam == "ForcedCSF-I":
        return -a ** 2 + kap
    if fam == "ForcedCSF-II":
        return kap * a - a ** 2
    if fam == "SphereMCFAnalytic":
        return snap.u_t * history.meta["scale"] * (1 if history.meta["direction"] == "forward" else -1)
    raise ValueError(fam)


def evolution_residual(history: FlowHistory) -> float:
    """Max over interior snapshots of ``|d_t a - law(a)|`` scaled by ``max(1, |law|)``.

    ``d_t a`` comes from fourth-order centered differences of stored snapshots
    in the producing flow's time, so the check also runs on reparametrized
    histories (with the chain-rule factor applied).  Also checks the stored
    ``u_t`` against the metric law.
    """
    tf = np.asarray(history.meta["forward_times"], dtype=float)
    m = len(tf)
    if m < 5:
        return 0.0
    worst = 0.0
    a = history.a_grids()
    sign_scale = history.meta["scale"] * (1 if history.meta["direction"] == "forward" else -1)
    if history.family == "SphereMCFAnalytic":
        # a = 1/rho is exact, so its rate is -u_t a from the stored radius rate;
        # differencing the snapshots would only measure the stencil's own error
        for i in range(m):
            snap = history.snapshots[i]
            dadt = -(snap.u_t / sign_scale) * a[i]
            rhs = law_rhs(history, i)
            scale = max(1.0, float(np.abs(rhs).max()))
            worst = max(worst, float(np.abs(dadt - rhs).max()) / scale)
        return worst
    for i in range(2, m - 2):
        h = tf[i + 1] - tf[i]
        if not np.allclose(np.diff(tf[i - 2:i + 3]), h, rtol=1e-8):
            continue
        dadt = (a[i - 2] - 8 * a[i - 1] + 8 * a[i + 1] - a[i + 2]) / (12 * h)
        rhs = law_rhs(history, i)
        scale = max(1.0, float(np.abs(rhs).max()))
        worst = max(worst, float(np.abs(dadt - rhs).max()) / scale)
    for i in range(m):
        snap = history.snapshots[i]
        law = _metric_law(history, i)
        stored = snap.u_t / sign_scale if history.family != "SphereMCFAnalytic" else law
        worst = max(worst, float(np.abs(stored - law).max()) / max(1.0, float(np.abs(law).max())))
    return worst


# --------------------------------------------------------------------------
# reparametrization

def reparametrize_history(h: FlowHistory, mode: str = "reverse", lam: float = 1.0) -> FlowHistory:
    """View the history backwards in time, optionally with a time scale.

    ``reverse`` gives ``g~(s) = g(S - s)``; ``reverse-scaled`` gives
    ``g~(s) = g(S - lam s)`` so the new horizon is ``S / lam``.  Rates of change
    are recomputed by the chain rule (``u_t -> -lam u_t``).
    """
    if mode == "reverse":
        lam = 1.0
    elif mode != "reverse-scaled":
        raise ValueError("mode must be 'reverse' or 'reverse-scaled'")
    if lam <= 0:
        raise ValueError("time scale must be positive")
    t = h.times
    S0, S1 = t[0], t[-1]
    new_times = (S1 - t[::-1]) / lam + S0
    snaps = []
    for s_new, snap in zip(new_times, h.snapshots[::-1]):
        base = dict(snap.fields.base)
        u, ut = base.pop("u"), base.pop("u_t")
        snaps.append(MetricSnapshot(s_new, h.chart, u, -lam * ut, base))
    meta = dict(h.meta)
    old_dir = h.meta.get("direction", "forward")
    meta["direction"] = "backward" if old_dir == "forward" else "forward"
    meta["scale"] = h.meta.get("scale", 1.0) * lam
    meta["forward_times"] = list(np.asarray(h.meta["forward_times"])[::-1])
    meta["lambda"] = lam
    forcing = None if h.forcing is None else h.forcing[::-1].copy()
    meta.pop("bounds", None)
    out = FlowHistory(h.family, h.chart, new_times, snaps, meta, forcing)
    return out
