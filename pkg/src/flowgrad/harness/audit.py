"""Gradient-bound audits with every unspecified constant set to one.

Each audited bound has the shape ``|grad a_T(x0)|^2 <= C * RHS(K, K1, k+, r, T)``.
An audit evaluates the left side with the deterministic oracle, the right side
with ``C = 1``, and reports the implied constant ``C* = LHS / RHS``.  The
implied constants are compared with ceilings frozen from reference runs
(``data/ceilings.json``).  Audits whose hypotheses fail on the given history
are reported as invalid rather than passed or failed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from ..estimator import CutoffError, CutoffState, DistanceSeries, build_cutoff
from ..flows import compute_bounds
from ..geom import GeometryError
from .oracles import fd_gradient_oracle, gradient_norm_field

AUDIT_TAGS = ("4.1", "4.2", "4.3", "4.4", "4.5", "4.6",
              "remark-4.1-scaling", "remark-4.3-eta", "remark-4.5")

# which flow families each bound speaks about
TAG_FAMILIES = {
    "4.1": ("Ricci2D",),
    "4.2": ("Ricci2D",),
    "4.3": ("CurveShortening", "SphereMCFAnalytic"),
    "4.4": ("ForcedCSF-I", "SphereMCFAnalytic"),
    "4.5": ("ForcedCSF-II", "SphereMCFAnalytic"),
    "4.6": ("Yamabe3DConformal",),
    "remark-4.1-scaling": ("Ricci2D", "CurveShortening"),
    "remark-4.3-eta": ("Ricci2D",),
    "remark-4.5": ("Yamabe3DConformal",),
}


@dataclass
class AuditRecord:
    tag: str
    lhs: float
    rhs: float
    c_star: float
    ceiling: float | None
    passed: bool
    valid: bool
    inputs: dict
    reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def load_ceilings() -> dict:
    """Frozen implied-constant ceilings keyed by audit tag."""
    text = resources.files("flowgrad.data").joinpath("ceilings.json").read_text()
    return json.loads(text)["ceilings"]


def _saturating(rate: float, T: float) -> float:
    """``rate / (1 - exp(-rate T))``, the common time factor of the bounds."""
    return rate / -math.expm1(-rate * T)


def structural_rhs(tag: str, K: float, K1: float, k_plus: float, r: float, T: float) -> float:
    """Right-hand side of the audited bound with the constant set to one.

    Squared-gradient forms for the ``4.x`` tags and ``remark-4.5``; the
    ``4.2`` (second derivative) and ``remark-4.1-scaling`` (first derivative)
    tags are unsquared powers of ``T``.
    """
    if T <= 0 or r <= 0:
        raise ValueError("T and r must be positive")
    ir2 = r ** -2
    if tag in ("4.1", "remark-4.3-eta"):
        return math.exp(K * T) * K * K * _saturating(K1 + ir2, T)
    if tag == "4.2":
        return 1.0 / T
    if tag == "remark-4.1-scaling":
        return T ** -0.5
    if tag == "4.3":
        return math.exp(K * K * T) * K * K * _saturating(K * K + ir2, T)
    if tag == "4.4":
        return math.exp((K * K + k_plus) * T) * K * K * _saturating(K * K + k_plus + ir2, T)
    if tag == "4.5":
        return math.exp((K + k_plus) * K * T) * K * K * _saturating(K * K + k_plus * K + ir2, T)
    if tag == "4.6":
        return math.exp(K1 * T) * K1 * K1 * _saturating(K1 + ir2, T)
    if tag == "remark-4.5":
        return K1 * K1 * (K1 + ir2 + 1.0 / T)
    raise ValueError(f"unknown audit tag {tag!r}")


def certified_radius(history, x0) -> float:
    """Largest radius whose geodesic balls around ``x0`` stay pre-cut-locus at all times."""
    chart = history.chart
    if chart.kind == "closed-curve":
        # half the length of the shortest stored curve
        lengths = [float(np.exp(s.u).mean()) * chart.periods[0] for s in history.snapshots]
        return 0.5 * min(lengths)
    if history.family == "SphereMCFAnalytic":
        return math.pi * float(min(history.meta["analytic"]["rho"]))
    return DistanceSeries(history, x0, max_fields=9).min_validity


def _bounds_hold(history) -> tuple[bool, str]:
    recorded = history.bounds
    rescanned = compute_bounds(history)
    for key in ("K", "K1", "k_plus"):
        if recorded[key] < rescanned[key] * (1 - 1e-12):
            return False, f"recorded {key} = {recorded[key]:g} below rescanned {rescanned[key]:g}"
    return True, ""


def audit_inequality(history, tag: str, x0, r: float, ceilings: dict | None = None,
                     radius: float | None = None) -> AuditRecord:
    """Evaluate one bound at the end of a forward-time history.

    ``radius`` overrides the certified radius (used by the eta variant, whose
    region is a sublevel set of ``eta`` rather than a geodesic ball).
    """
    if tag not in AUDIT_TAGS:
        raise ValueError(f"unknown audit tag {tag!r}")
    if history.family not in TAG_FAMILIES[tag]:
        raise ValueError(f"tag {tag} does not apply to family {history.family}")
    if history.meta.get("direction", "forward") != "forward":
        raise ValueError("audits read a forward-time history")
    T = float(history.times[-1] - history.times[0])
    b = history.bounds
    inputs = {"K": b["K"], "K1": b["K1"], "k_plus": b["k_plus"], "r": float(r), "T": T,
              "m": 2 if tag == "4.2" else 1, "x0": np.asarray(x0, dtype=float).tolist()}
    ceilings = load_ceilings() if ceilings is None else ceilings
    ceiling = ceilings.get(tag)

    def invalid(reason):
        return AuditRecord(tag, math.nan, math.nan, math.nan, ceiling, False, False, inputs, reason)

    ok, reason = _bounds_hold(history)
    if not ok:
        return invalid(reason)
    try:
        rmax = certified_radius(history, x0) if radius is None else radius
    except GeometryError as exc:
        return invalid(f"no certified radius: {exc}")
    inputs["certified_radius"] = rmax
    if r > rmax:
        return invalid(f"r = {r:g} exceeds the certified radius {rmax:g}")
    K, K1 = b["K"], b["K1"]
    if tag in ("4.2", "remark-4.1-scaling"):
        limit = 1.0 / (K + r ** -2)
        if tag == "4.2":
            limit = min(limit, 1.0)
        if T > limit:
            return invalid(f"T = {T:g} exceeds the short-time limit {limit:g}")

    order = 2 if tag == "4.2" else 1
    orc = fd_gradient_oracle(history, history.times[-1], x0, order=order)
    lhs = orc.norm if tag in ("4.2", "remark-4.1-scaling") else orc.norm ** 2
    rhs = structural_rhs(tag, K, K1, b["k_plus"], r, T)
    c_star = lhs / rhs
    passed = bool(math.isfinite(c_star) and (ceiling is None or c_star <= ceiling))
    return AuditRecord(tag, float(lhs), float(rhs), float(c_star), ceiling, passed, True, inputs,
                       extra={"oracle_error": orc.error})


# --------------------------------------------------------------------------
# horizon sweep

def scaling_sweep(history, fractions=(0.125, 0.25, 0.5, 1.0), field: str = "a") -> dict:
    """Fit the log-log slope of ``sup_x |grad a_T|_g`` over dyadic horizons.

    All horizons are read from one forward history, so the initial data is
    shared.  Returns the horizons, sup norms, fitted slope and intercept.
    """
    T0 = float(history.times[-1])
    Ts, sups = [], []
    for frac in fractions:
        t = frac * T0
        i = int(np.argmin(np.abs(history.times - t)))
        if abs(history.times[i] - t) > 1e-9 * max(1.0, T0):
            raise ValueError(f"horizon {t:g} is not a stored snapshot time")
        Ts.append(float(history.times[i]))
        sups.append(float(gradient_norm_field(history.snapshots[i], field).max()))
    slope, intercept = np.polyfit(np.log(Ts), np.log(sups), 1)
    return {"T": Ts, "sup_grad": sups, "slope": float(slope), "intercept": float(intercept)}


# --------------------------------------------------------------------------
# eta cutoff variant

class EtaDistance:
    """``sqrt(eta(s, x))`` in the role of a geodesic distance for the cutoff."""

    def __init__(self, eta, min_validity: float):
        self.eta = eta
        self.min_validity = float(min_validity)

    def __call__(self, s, x):
        return np.sqrt(np.maximum(self.eta(s, np.atleast_2d(x)), 0.0))


def chart_distance_squared(chart, x0, drift: float = 0.0, scale: float = 1.0):
    """``eta(s, x) = scale * |x - x0|^2 + drift * s`` with minimal-image periodic differences."""
    x0 = np.asarray(x0, dtype=float)
    periods = np.array(chart.periods)

    def eta(s, x):
        d = np.atleast_2d(x) - x0
        if chart.periodic:
            d = d - periods * np.round(d / periods)
        return scale * (d * d).sum(axis=-1) + drift * s

    return eta


def _eta_on_grid(eta, snap):
    pts = np.stack([m.ravel() for m in snap.chart.mesh()], axis=1)
    return eta(float(snap.t), pts).reshape(snap.chart.resolution)


def _grid_fd(f, chart, axis):
    h = chart.spacing[axis]
    fwd = np.roll(f, -1, axis=axis)
    bwd = np.roll(f, 1, axis=axis)
    return (fwd - bwd) / (2 * h), (fwd - 2 * f + bwd) / (h * h)


def eta_cutoff_variant(history, eta_spec=None, r: float = 1.0, x0=None, C: float | None = None,
                       validity: float | None = None, max_times: int = 9) -> CutoffState:
    """Cutoff ``f = fbar(sqrt(eta))`` after a grid scan of the bounds on ``eta``.

    ``eta_spec`` is ``None`` (squared chart distance from ``x0``), a dict with
    ``kind`` in {``chart-distance-squared``, ``chart-distance``} and optional
    ``drift``, or a callable ``eta(s, points)``.  On the region
    ``{eta <= r^2}`` the scan requires ``|d_s eta - lap eta| <= C`` and
    ``|grad eta|_g^2 <= C eta``; ``C`` defaults to ``4 n sup exp(-2u)``.
    A failed scan raises :class:`CutoffError` naming the worst node.
    """
    chart = history.chart
    if not chart.periodic or chart.kind == "closed-curve":
        raise CutoffError("the eta cutoff is provided for periodic boxes")
    if x0 is None:
        raise ValueError("x0 is required")
    n = chart.n
    spec = {"kind": "chart-distance-squared"} if eta_spec is None else eta_spec
    if callable(spec):
        eta = spec
        if validity is None:
            raise ValueError("a callable eta needs an explicit validity radius")
    else:
        kind = spec.get("kind", "chart-distance-squared")
        drift = float(spec.get("drift", 0.0))
        sq = chart_distance_squared(chart, x0, drift)
        if kind == "chart-distance-squared":
            eta = sq
        elif kind == "chart-distance":
            eta = lambda s, x: np.sqrt(np.maximum(sq(s, x), 0.0))
        else:
            raise ValueError(f"unknown eta kind {kind!r}")
        if validity is None:
            validity = 0.5 * min(chart.periods)
    if C is None:
        C = 4.0 * n * max(float(np.exp(-2 * s.u).max()) for s in history.snapshots)
    idx = np.unique(np.linspace(0, len(history.times) - 1,
                                min(max_times, len(history.times))).round().astype(int))
    worst = (0.0, None)
    for i in idx:
        snap = history.snapshots[i]
        e = _eta_on_grid(eta, snap)
        region = e <= r * r
        if i + 1 < len(history.times):
            nxt = history.snapshots[i + 1]
            e_t = (_eta_on_grid(eta, nxt) - e) / (nxt.t - snap.t)
        else:
            prv = history.snapshots[i - 1]
            e_t = (e - _eta_on_grid(eta, prv)) / (snap.t - prv.t)
        u = snap.fields.grid("u")
        grad_sq = np.zeros_like(e)
        lap0 = np.zeros_like(e)
        du_de = np.zeros_like(e)
        for ax in range(n):
            d1, d2 = _grid_fd(e, chart, ax)
            grad_sq += d1 * d1
            lap0 += d2
            du_de += snap.fields.grid(f"d{ax}:u") * d1
        e2 = np.exp(-2 * u)
        lap = e2 * (lap0 + (n - 2) * du_de)
        heat_excess = np.where(region, np.abs(e_t - lap) - C, -np.inf)
        grad_excess = np.where(region, e2 * grad_sq - C * e - 1e-10, -np.inf)
        for excess, what in ((heat_excess, "|d_t eta - lap eta| <= C"),
                             (grad_excess, "|grad eta|^2 <= C eta")):
            j = np.unravel_index(int(np.argmax(excess)), excess.shape)
            if excess[j] > worst[0]:
                node = [float(m[j]) for m in chart.mesh()]
                worst = (float(excess[j]), f"{what} fails at t = {snap.t:g}, node {node}")
    if worst[1] is not None:
        raise CutoffError(f"eta bound scan failed (C = {C:g}): {worst[1]}")
    cut = build_cutoff(r, history, x0, "local", distance=EtaDistance(eta, validity))
    cut.meta.update({"eta": spec if not callable(spec) else "callable", "eta_C": C})
    return cut


# --------------------------------------------------------------------------
# calibration

CEILING_HEADROOM = 1.2


def run_reference_audit(tag: str, history=None) -> AuditRecord:
    """Audit ``tag`` on its reference scenario without a ceiling."""
    from .scenarios import REFERENCE_AUDITS, reference_history

    scenario, x0, r = REFERENCE_AUDITS[tag]
    history = reference_history(scenario) if history is None else history
    radius = 0.5 * min(history.chart.periods) if tag == "remark-4.3-eta" else None
    return audit_inequality(history, tag, x0, r, ceilings={}, radius=radius)


def calibrate_ceilings(headroom: float = CEILING_HEADROOM) -> dict:
    """Reference implied constants and the ceilings frozen from them."""
    from .scenarios import REFERENCE_AUDITS, reference_history

    cache, reference, ceilings = {}, {}, {}
    for tag, (scenario, _, _) in REFERENCE_AUDITS.items():
        if scenario not in cache:
            cache[scenario] = reference_history(scenario)
        rec = run_reference_audit(tag, cache[scenario])
        if not rec.valid:
            raise RuntimeError(f"reference audit {tag} is invalid: {rec.reason}")
        reference[tag] = rec.c_star
        ceilings[tag] = float(f"{headroom * rec.c_star:.3g}")
    return {"version": 1, "headroom": headroom, "reference": reference, "ceilings": ceilings}
