"""Monte Carlo derivative formula for fields evolving under a geometric flow.

The history handed to the estimator runs in backward time: at stored time
``s`` it carries the forward field at ``T - s`` and the metric ``g~_s``.  Along
Brownian paths of ``g~`` the damped processes

    N = Q (frame components of a),   N^ = Q^ (frame components of grad a)

are local martingales once ``Q`` and ``Q^`` solve

    dQ/ds = -Q (F - Gop),   dQ^/ds = -Q^ (F^ - Gop),

where ``Gop`` is the metric-rate correction on frame components.  With a
deterministic profile ``h^`` from ``v`` to ``0`` and

    dl = (sqrt(2)/2) (Q^T)^{-1} sum_i [Q^^T dh]_i dW_i / ds,

the gradient of the forward field at time ``T`` satisfies
``<grad a(x0), v> = -E <N_stop, l_stop>``.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from .geom import GeometryError, geodesic_distance
from .stoch import (
    CAP,
    EXITED,
    NUMERIC_FAILURE,
    REACHED_T,
    RUNNING,
    STATUS_NAMES,
    TAU,
    NoiseStream,
    bm_step,
    frame_defect,
    frame_rate_matrix,
    g_operator_matrix,
    initial_state,
)

F_CAP = 1e6
C_N = 1.0  # dimensional constant in the local control rate


class EstimatorError(RuntimeError):
    pass


class QBoundViolation(EstimatorError):
    pass


class CutoffError(ValueError):
    pass


# --------------------------------------------------------------------------
# coefficients

@dataclass
class FlowCoefficients:
    """Reaction coefficients of the backward system in frame components.

    Evaluators take ``(s, probe, U)`` where ``probe`` holds interpolated fields
    at the path points and return batched matrices.  ``a_frame`` and
    ``grad_frame`` give the frame components of ``a`` and of ``grad a`` (the
    derivative index first).
    """

    valence: tuple
    n: int
    F: Callable
    F_hat: Callable
    a_frame: Callable
    grad_frame: Callable
    fields: tuple
    sup_F: float
    sup_F_hat: float
    sup_G: float
    source: Callable | None = None
    family: str = ""
    description: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.n ** sum(self.valence)

    @property
    def dim_hat(self) -> int:
        return self.n ** (sum(self.valence) + 1)

    def without_source(self) -> "FlowCoefficients":
        out = FlowCoefficients(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.source = None
        return out


def _scalar_matrix(vals, d):
    return vals[:, None, None] * np.eye(d)


def _frame_grad(pr, U, name="a"):
    n = U.shape[-1]
    da = np.stack([pr[f"d{i}:{name}"] for i in range(n)], axis=-1)
    return np.matmul(da[:, None, :], U)[:, 0, :]


def _frame_hess(pr, U, name="a"):
    n = U.shape[-1]
    da = np.stack([pr[f"d{i}:{name}"] for i in range(n)], axis=-1)
    H = np.empty((U.shape[0], n, n))
    for i in range(n):
        for j in range(n):
            key = f"d{min(i, j)}{max(i, j)}:{name}"
            H[:, i, j] = pr[key]
    du = pr["du"]
    # conformal Christoffel contraction Gamma^l_ij da_l
    H = H - (da[:, :, None] * du[:, None, :] + du[:, :, None] * da[:, None, :]
             - (du * da).sum(axis=1)[:, None, None] * np.eye(n))
    return np.matmul(np.matmul(np.swapaxes(U, 1, 2), H), U).reshape(U.shape[0], n * n)


def _sup_u_t(history) -> float:
    return max(float(np.abs(s.u_t).max()) for s in history.snapshots)


def make_coefficients(history, order: int = 1, margin: float = 0.02) -> FlowCoefficients:
    """Reaction coefficients ``F``, ``F^`` (and the source for ``order=2``).

    The history must be in backward time.  ``order=2`` studies ``a = dR`` (the
    Ricci2D and HeatStatic families) and supplies the Hessian source term.
    Recorded norm bounds carry a relative ``margin`` over the grid maxima to
    absorb interpolation overshoot.
    """
    fam = history.family
    if history.meta.get("direction") != "backward":
        raise EstimatorError("coefficients need a history reparametrized to backward time")
    n = history.n
    scale = float(history.meta.get("scale", 1.0))
    b = history.bounds
    K, K1, kp = b["K"], b["K1"], b["k_plus"]
    m = 1.0 + margin
    sup_ut = _sup_u_t(history)
    if fam == "Yamabe3DConformal":
        lam = 1.0 / (n - 1)
        if abs(scale - lam) > 1e-12:
            raise EstimatorError(f"Yamabe histories must be reverse-scaled with lambda = {lam:g}")
    elif abs(scale - 1.0) > 1e-12:
        raise EstimatorError("only Yamabe histories use a scaled time reversal")
    grad_names = tuple(f"d{i}:a" for i in range(n))
    hess_names = tuple(f"d{i}{j}:a" for i in range(n) for j in range(i, n))
    desc = dict(history.meta.get("laws", {}))

    if order == 2:
        if fam not in ("Ricci2D", "HeatStatic"):
            raise EstimatorError("second-order coefficients are provided for Ricci2D and HeatStatic")
        a_frame = lambda s, pr, U: _frame_grad(pr, U)
        grad_frame = lambda s, pr, U: _frame_hess(pr, U)
        fields = ("a",) + grad_names + hess_names
        vecI = np.eye(n).ravel()
        if fam == "HeatStatic":
            zero = lambda d: (lambda s, pr, U: np.zeros((U.shape[0], d, d)))
            return FlowCoefficients((0, 1), n, zero(n), zero(n * n), a_frame, grad_frame, fields,
                                    0.0, 0.0, 2 * sup_ut * m, None, fam, desc)
        F = lambda s, pr, U: _scalar_matrix(-1.5 * pr["a"], n)
        Fh = lambda s, pr, U: -pr["a"][:, None, None] * np.outer(vecI, vecI)[None]

        def source(s, pr, U):
            w = _frame_grad(pr, U)
            return -2.0 * (w[:, :, None] * w[:, None, :]).reshape(U.shape[0], n * n)

        return FlowCoefficients((0, 1), n, F, Fh, a_frame, grad_frame, fields,
                                1.5 * K * m, n * K * m, 2 * sup_ut * m, source, fam, desc)

    if order != 1:
        raise ValueError("order must be 1 or 2")
    a_frame = lambda s, pr, U: pr["a"][:, None]
    grad_frame = lambda s, pr, U: _frame_grad(pr, U)
    fields = ("a",) + grad_names
    sup_G = sup_ut * m  # Gop on 1-forms is u_s times the identity; zero on scalars

    if fam == "HeatStatic":
        F = lambda s, pr, U: np.zeros((U.shape[0], 1, 1))
        Fh = lambda s, pr, U: np.zeros((U.shape[0], n, n))
        return FlowCoefficients((0, 0), n, F, Fh, a_frame, grad_frame, fields, 0.0, 0.0, sup_G,
                                None, fam, desc)
    if fam == "Ricci2D":
        F = lambda s, pr, U: -pr["a"][:, None, None]
        Fh = lambda s, pr, U: _scalar_matrix(-1.5 * pr["a"], n)
        return FlowCoefficients((0, 0), n, F, Fh, a_frame, grad_frame, fields, K * m, 1.5 * K * m,
                                sup_G, None, fam, desc)
    if fam == "Yamabe3DConformal":
        lam = 1.0 / (n - 1)
        ric_names = tuple(f"ric{i}{j}" for i in range(n) for j in range(i, n))
        F = lambda s, pr, U: -lam * pr["a"][:, None, None]

        def Fh(s, pr, U):
            Ric = np.empty((U.shape[0], n, n))
            for i in range(n):
                for j in range(n):
                    Ric[:, i, j] = pr[f"ric{min(i, j)}{max(i, j)}"]
            return np.matmul(np.matmul(np.swapaxes(U, 1, 2), Ric), U) - _scalar_matrix(2 * lam * pr["a"], n)

        return FlowCoefficients((0, 0), n, F, Fh, a_frame, grad_frame, fields + ric_names,
                                lam * K * m, (K1 + 2 * lam * K) * m, sup_G, None, fam, desc)
    if fam in ("CurveShortening", "ForcedCSF-I", "ForcedCSF-II", "SphereMCFAnalytic"):
        if fam == "SphereMCFAnalytic":
            nd = history.meta["analytic"]["n"]
            kind = history.meta["analytic"]["kind"]
            cF, cFh = float(nd), float(nd)
            lin_F = {"none": 0, "I": 1, "II": 0}[kind]
            kap_a = {"none": 0, "I": 0, "II": 1}[kind]
            lin_Fh, kap_a_hat = lin_F, kap_a
        else:
            cF, cFh = 1.0, 3.0
            lin_F = lin_Fh = 1 if fam == "ForcedCSF-I" else 0
            kap_a = 1 if fam == "ForcedCSF-II" else 0
            kap_a_hat = 2 if fam == "ForcedCSF-II" else 0

        def F(s, pr, U):
            a, kap = pr["a"], float(history.kappa(s))
            return (-cF * a * a + lin_F * kap + kap_a * kap * a)[:, None, None]

        def Fh(s, pr, U):
            a, kap = pr["a"], float(history.kappa(s))
            return _scalar_matrix(-cFh * a * a + lin_Fh * kap + kap_a_hat * kap * a, n)

        supF = (cF * K * K + lin_F * kp + kap_a * kp * K) * m
        supFh = (cFh * K * K + lin_Fh * kp + kap_a_hat * kp * K) * m
        return FlowCoefficients((0, 0), n, F, Fh, a_frame, grad_frame, fields, supF, supFh,
                                sup_G, None, fam, desc)
    raise EstimatorError(f"unsupported family {fam}")


# --------------------------------------------------------------------------
# transport operators

@dataclass
class TransportOperators:
    Q: np.ndarray
    Q_hat: np.ndarray
    log_norm_max: float = 0.0
    log_norm_hat_max: float = 0.0

    @classmethod
    def identity(cls, P, d, dn):
        return cls(np.broadcast_to(np.eye(d), (P, d, d)).copy(),
                   np.broadcast_to(np.eye(dn), (P, dn, dn)).copy())


def singular_extremes(M: np.ndarray):
    """Largest and smallest singular values of a batch of small square matrices."""
    d = M.shape[-1]
    if d == 1:
        v = np.abs(M[:, 0, 0])
        return v, v
    S = np.matmul(np.swapaxes(M, 1, 2), M)
    if d == 2:
        tr = S[:, 0, 0] + S[:, 1, 1]
        det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
        disc = np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
        return np.sqrt(0.5 * tr + disc), np.sqrt(np.maximum(0.5 * tr - disc, 0.0))
    ev = np.linalg.eigvalsh(S)
    return np.sqrt(ev[:, -1]), np.sqrt(np.maximum(ev[:, 0], 0.0))


def op_norm(M: np.ndarray) -> np.ndarray:
    """Spectral norm of a batch of small square matrices."""
    return singular_extremes(M)[0]


def _generators(coeffs, s, pr, U, drop_G=False):
    P = U.shape[0]
    F = coeffs.F(s, pr, U)
    Fh = coeffs.F_hat(s, pr, U)
    G = frame_rate_matrix(U, pr["u"], pr["u_t"])
    k = coeffs.valence[1]
    GQ = g_operator_matrix((0, k), G) if k > 0 else np.zeros((P, 1, 1))
    GQh = g_operator_matrix((0, k + 1), G)
    if drop_G:
        return F, Fh
    return F - GQ, Fh - GQh


def integrate_Q_step(ops: TransportOperators, coeffs: FlowCoefficients, state, G, dt,
                     M_left=None, M_right=None) -> TransportOperators:
    """One Heun (RK2) step of ``dQ = -Q (F - Gop) ds`` and the hat analog.

    ``M_left``/``M_right`` are the generator pairs ``(F - Gop, F^ - Gop)`` at the
    two ends of the step; if omitted they are evaluated from ``state.cache`` and
    ``G`` (frozen-coefficient step).
    """
    if M_left is None:
        pr = state.cache
        F = coeffs.F(state.t, pr, state.U)
        Fh = coeffs.F_hat(state.t, pr, state.U)
        k = coeffs.valence[1]
        P = state.U.shape[0]
        GQ = g_operator_matrix((0, k), G) if k > 0 else np.zeros((P, 1, 1))
        M_left = (F - GQ, Fh - g_operator_matrix((0, k + 1), G))
    if M_right is None:
        M_right = M_left
    Q = _heun(ops.Q, M_left[0], M_right[0], dt)
    Qh = _heun(ops.Q_hat, M_left[1], M_right[1], dt)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(Qh))):
        raise FloatingPointError("non-finite transport operator")
    out = TransportOperators(Q, Qh, ops.log_norm_max, ops.log_norm_hat_max)
    out.log_norm_max = max(out.log_norm_max, float(np.log(op_norm(Q)).max()))
    out.log_norm_hat_max = max(out.log_norm_hat_max, float(np.log(op_norm(Qh)).max()))
    return out


def _mv(M, v):
    return np.matmul(M, v[:, :, None])[:, :, 0]


def _solve_transposed(Q, y):
    """``(Q^T)^{-1} y`` for ``Q (P, d, d)`` and ``y (P, J, d)``."""
    d = Q.shape[-1]
    if d == 1:
        return y / Q[:, None, 0, :]
    return np.linalg.solve(np.swapaxes(Q, 1, 2)[:, None], y[..., None])[..., 0]


def _heun(Q, M0, M1, dt):
    k1 = -Q @ M0
    k2 = -(Q + dt * k1) @ M1
    return Q + 0.5 * dt * (k1 + k2)


# --------------------------------------------------------------------------
# cutoff

def fbar_profile(r: float, n_table: int = 8001):
    """Tabulate the mollified quadratic cutoff on ``[0, r]``.

    Returns ``(s, f, df, d2f)`` arrays.  The unmollified profile is ``1`` up to
    ``r/3``, the quadratic ``(r^2 - 9 (s - r/3)^2)/r^2`` up to ``2r/3`` and ``0``
    beyond; it is convolved with the standard bump of half-width ``r/3``.
    """
    eps = r / 3.0
    s = np.linspace(0.0, r, n_table)
    y = np.linspace(-eps, eps, 4001)[1:-1]
    z = y / eps
    bump = np.exp(-1.0 / (1.0 - z * z))
    wts = bump / trapezoid(bump, y)

    def f1(t):
        q = (r * r - 9.0 * (t - r / 3.0) ** 2) / (r * r)
        return np.where(t <= r / 3.0, 1.0, np.where(t >= 2 * r / 3.0, 0.0, q))

    def df1(t):
        return np.where((t > r / 3.0) & (t < 2 * r / 3.0), -18.0 * (t - r / 3.0) / (r * r), 0.0)

    vals = trapezoid(f1(s[:, None] - y[None, :]) * wts[None, :], y, axis=1)
    dvals = trapezoid(df1(s[:, None] - y[None, :]) * wts[None, :], y, axis=1)
    vals[0] = 1.0
    vals[-1] = 0.0
    vals = np.clip(vals, 0.0, 1.0)
    d2 = np.gradient(dvals, s)
    return s, vals, dvals, d2


class DistanceSeries:
    """Geodesic distance fields at a subset of stored times, linear in time."""

    def __init__(self, history, x0, max_fields: int = 33):
        idx = np.unique(np.linspace(0, len(history.times) - 1,
                                    min(max_fields, len(history.times))).round().astype(int))
        self.times = history.times[idx]
        self.fields = [geodesic_distance(history.snapshots[i], x0) for i in idx]
        self.min_validity = min(f.validity_radius for f in self.fields)

    def __call__(self, s, x):
        t = self.times
        if s <= t[0]:
            return self.fields[0](x)
        if s >= t[-1]:
            return self.fields[-1](x)
        i = int(np.searchsorted(t, s, side="right") - 1)
        w = (s - t[i]) / (t[i + 1] - t[i])
        out = self.fields[i](x)
        if w > 1e-12:
            out = (1 - w) * out + w * self.fields[i + 1](x)
        return out


@dataclass
class CutoffState:
    """Localization by ``f = fbar(rho)`` and the clock ``Lambda = int f^-2``."""

    mode: str
    r: float = math.inf
    table: tuple | None = None
    distance: Callable | None = None
    C1: float = 0.0
    C2: float = 0.0
    cap: float = F_CAP
    meta: dict = field(default_factory=dict)

    def fbar(self, rho):
        if self.mode == "global":
            return np.ones_like(np.asarray(rho, dtype=float))
        s, f = self.table[0], self.table[1]
        rho = np.asarray(rho, dtype=float)
        return np.where(rho >= self.r, 0.0, np.where(rho <= 0, 1.0, np.interp(rho, s, f)))

    def f_inv_sq(self, s, x):
        """``min(f^-2, cap)`` at the path points; the second output flags capped paths."""
        if self.mode == "global":
            return np.ones(x.shape[0]), np.zeros(x.shape[0], dtype=bool)
        fb = self.fbar(self.distance(s, x))
        with np.errstate(divide="ignore"):
            inv = np.where(fb > 0, 1.0 / (fb * fb), np.inf)
        capped = inv >= self.cap
        return np.minimum(inv, self.cap), capped


def build_cutoff(r: float | None, history, x0, mode: str = "local", distance=None) -> CutoffState:
    """Global (``f = 1``) or local distance-based cutoff of radius ``r``."""
    if mode == "global":
        return CutoffState("global", meta={"mode": "global"})
    if mode != "local":
        raise ValueError("mode must be 'global' or 'local'")
    if r is None or r <= 0:
        raise CutoffError("local mode needs a positive radius")
    if distance is None:
        distance = DistanceSeries(history, x0)
    rmax = distance.min_validity
    if r > rmax:
        raise CutoffError(f"radius {r:g} exceeds the certified validity radius; "
                          f"max admissible r = {rmax:.6g}")
    table = fbar_profile(r)
    C1 = float(np.abs(table[2]).max()) * r
    C2 = float(np.abs(table[3]).max()) * r * r
    return CutoffState("local", r, table, distance, C1, C2,
                       meta={"mode": "local", "r": r, "max_admissible_r": rmax, "C1": C1, "C2": C2})


# --------------------------------------------------------------------------
# control profile

@dataclass
class ControlProfile:
    """``h^(t) = phi(t) v`` with ``phi(0) = 1`` and ``phi(T) = 0``."""

    mode: str
    v: np.ndarray
    T: float
    C: float = 0.0
    v_norm: float = 1.0

    def phi(self, t):
        t = np.minimum(np.asarray(t, dtype=float), self.T)
        if self.mode == "global":
            return 1.0 - t / self.T
        e = math.exp(-self.C * self.T)
        return (np.exp(-self.C * t) - e) / (1.0 - e)

    def dphi(self, t):
        t = np.asarray(t, dtype=float)
        if self.mode == "global":
            return np.where(t < self.T, -1.0 / self.T, 0.0)
        e = math.exp(-self.C * self.T)
        return np.where(t < self.T, -self.C * np.exp(-self.C * t) / (1.0 - e), 0.0)

    def __call__(self, t):
        return np.multiply.outer(self.phi(t), self.v)

    @property
    def energy(self) -> float:
        """``int_0^T |h^'|^2 dt`` for the normalized direction."""
        if self.mode == "global":
            return 1.0 / self.T
        e = math.exp(-self.C * self.T)
        return 0.5 * self.C * (1 + e) / (1 - e)


def control_profile(mode: str, v, T: float, constants=None) -> ControlProfile:
    """Deterministic control from ``v`` at ``t = 0`` to ``0`` at ``t = T``.

    ``constants = (K1, r)`` sets the local rate ``C = C(n) (K1 + r^-2)``.
    ``v`` is normalized; ``v_norm`` records the factor to rescale pairings.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv == 0:
        raise ValueError("direction must be nonzero")
    if mode == "global":
        return ControlProfile("global", v / nv, T, 0.0, nv)
    if mode != "local":
        raise ValueError("mode must be 'global' or 'local'")
    K1, r = constants
    C = C_N * (K1 + r ** -2)
    return ControlProfile("local", v / nv, T, C, nv)


# --------------------------------------------------------------------------
# estimation

@dataclass
class EstimateResult:
    estimate: np.ndarray
    se: np.ndarray
    n_paths: int
    n_effective: int
    discards: dict
    stop_reasons: dict
    q_bound_max: float
    q_bound_violations: int
    max_frame_defect: float
    lambda_ok: bool
    tail_stats: list
    mode: dict
    wall_clock: float
    config: dict
    payoffs: np.ndarray | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimate": np.asarray(self.estimate).tolist(),
            "se": np.asarray(self.se).tolist(),
            "n_paths": self.n_paths,
            "n_effective": self.n_effective,
            "discards": self.discards,
            "stop_reasons": self.stop_reasons,
            "q_bound_max": self.q_bound_max,
            "q_bound_violations": self.q_bound_violations,
            "max_frame_defect": self.max_frame_defect,
            "lambda_ok": self.lambda_ok,
            "tail_stats": self.tail_stats,
            "mode": self.mode,
            "config": self.config,
        }


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("FLOWGRAD_WORKERS", "1")))
    except ValueError:
        return 1


def _simulate_chunk(history, coeffs, x0, V, profile, cutoff, dt, nsteps, seed, path_idx,
                    zero_noise=False, drop_G=False, checkpoints=(), use_source=True):
    """Run one chunk of paths; returns per-path payoffs and diagnostics."""
    P = len(path_idx)
    n = history.n
    d, dn = coeffs.dim, coeffs.dim_hat
    J = V.shape[0]
    state = initial_state(history, x0, P, coeffs.fields)
    noise = NoiseStream(seed, path_idx, n, zero=zero_noise)
    Q = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    Qh = np.broadcast_to(np.eye(dn), (P, dn, dn)).copy()
    lam = np.zeros(P)
    l = np.zeros((P, J, d))
    src = np.zeros((P, J))
    status = np.zeros(P, dtype=np.int8)
    N_stop = np.zeros((P, d))
    capped_any = np.zeros(P, dtype=bool)
    C_Q = coeffs.sup_F + coeffs.valence[1] * coeffs.sup_G
    C_Qh = coeffs.sup_F_hat + (coeffs.valence[1] + 1) * coeffs.sup_G
    q_ratio = 0.0
    violations = 0
    defect = float(frame_defect(state).max())
    lam_ok = True
    T_h = profile.T
    t0 = float(history.times[0])
    M = _generators(coeffs, t0, state.cache, state.U, drop_G)
    zcp = {}
    s_stop = np.full(P, np.nan)
    cps = set(checkpoints)

    def record_Z(j):
        run_or_stop = state.cache
        N = _mv(Q, coeffs.a_frame(state.t, run_or_stop, state.U))
        Nh = _mv(Qh, coeffs.grad_frame(state.t, run_or_stop, state.U))
        # stopped paths keep their frozen N
        N = np.where((status == RUNNING)[:, None], N, N_stop)
        h = np.multiply.outer(profile.phi(np.minimum(lam, T_h)), V)  # (P, J, dn)
        zcp[j] = (np.matmul(h, Nh[:, :, None])[..., 0] - np.matmul(l, N[:, :, None])[..., 0] - src)

    if 0 in cps:
        record_Z(0)
    for j in range(nsteps):
        s = t0 + j * dt
        run = status == RUNNING
        if not run.any():
            # keep the noise counter aligned with the step index
            noise.next()
            if (j + 1) in cps:
                zcp[j + 1] = zcp[max(k for k in zcp)]
            continue
        fm2, capped = cutoff.f_inv_sq(s, state.x)
        if cutoff.mode == "global":
            lam_new = np.full(P, (j + 1) * dt)
        else:
            lam_new = lam + fm2 * dt
        lam_new = np.where(run, lam_new, lam)
        dphi = profile.phi(np.minimum(lam_new, T_h)) - profile.phi(np.minimum(lam, T_h))
        dphi = np.where(run, dphi, 0.0)
        if use_source and coeffs.source is not None:
            Gs = coeffs.source(s, state.cache, state.U)
            h_now = np.multiply.outer(profile.phi(np.minimum(lam, T_h)), V)
            QG = _mv(Qh, Gs)
            src += np.where(run[:, None], np.matmul(h_now, QG[:, :, None])[..., 0] * dt, 0.0)
        state.status = status.copy()
        new, dW = bm_step(state, history, dt, noise, coeffs.fields)
        # l increment with left-point Q, Q^
        dh = dphi[:, None, None] * V[None]  # (P, J, dn)
        y = np.matmul(dh, Qh).reshape(P, J, n, d)            # rows of Q^^T dh
        y = (y * dW[:, None, :, None]).sum(axis=2) / dt
        dl = (math.sqrt(2.0) / 2.0) * _solve_transposed(Q, y)
        l += np.where(run[:, None, None], dl, 0.0)
        # transport operators at the two ends
        M_new = _generators(coeffs, s + dt, new.cache, new.U, drop_G)
        Qn = _heun(Q, M[0], M_new[0], dt)
        Qhn = _heun(Qh, M[1], M_new[1], dt)
        bad = ~(np.all(np.isfinite(Qn), axis=(1, 2)) & np.all(np.isfinite(Qhn), axis=(1, 2))
                & np.all(np.isfinite(l), axis=(1, 2)))
        st_new = new.status.copy()
        st_new[run & bad] = NUMERIC_FAILURE
        upd = run & (st_new == RUNNING) | (run & (st_new == EXITED))
        Q = np.where(upd[:, None, None], Qn, Q)
        Qh = np.where(upd[:, None, None], Qhn, Qh)
        M = tuple(np.where(upd[:, None, None], a, b) for a, b in zip(M_new, M))
        # bounds along the path
        tt = (j + 1) * dt
        if upd.any():
            smax, smin = singular_extremes(Q[upd])
            lq, linv = np.log(smax), -np.log(smin)
            smax, smin = singular_extremes(Qh[upd])
            lqh, lqhinv = np.log(smax), -np.log(smin)
            tol = 1e-9 + 1e-6 * tt
            viol = ((lq > C_Q * tt + tol) | (linv > C_Q * tt + tol)
                    | (lqh > C_Qh * tt + tol) | (lqhinv > C_Qh * tt + tol))
            violations += int(viol.sum())
            denom_q = max(C_Q * tt, 1e-300)
            denom_h = max(C_Qh * tt, 1e-300)
            q_ratio = max(q_ratio, float(max(lq.max(), linv.max())) / denom_q if C_Q > 0 else
                          (0.0 if max(lq.max(), linv.max()) <= tol else math.inf))
            q_ratio = max(q_ratio, float(max(lqh.max(), lqhinv.max())) / denom_h if C_Qh > 0 else
                          (0.0 if max(lqh.max(), lqhinv.max()) <= tol else math.inf))
        # stopping
        still = run & (st_new == RUNNING)
        hit_tau = still & (lam_new >= T_h - 1e-12 * T_h)
        capped_any |= run & capped
        st_new[hit_tau] = TAU
        if cutoff.mode == "global":
            st_new[hit_tau] = REACHED_T
        reach = still & ~hit_tau & (j + 1 == nsteps)
        st_new[reach] = REACHED_T
        lam_ok &= bool(np.all(lam_new[run] >= tt - 1e-12 * max(1.0, tt)))
        lam = lam_new
        state = new
        state.status = st_new
        defect = max(defect, float(frame_defect(state)[run & (st_new != NUMERIC_FAILURE)].max()
                                   if (run & (st_new != NUMERIC_FAILURE)).any() else 0.0))
        just = run & (st_new != RUNNING) & (st_new != NUMERIC_FAILURE) & (st_new != EXITED)
        if just.any():
            af = coeffs.a_frame(s + dt, state.cache, state.U)
            N_stop[just] = _mv(Q[just], af[just])
            s_stop[just] = s + dt
        status = st_new
        if (j + 1) in cps:
            record_Z(j + 1)
    payoff = -np.matmul(l, N_stop[:, :, None])[..., 0] - src
    return {
        "payoff": payoff, "status": status, "capped": capped_any, "q_ratio": q_ratio,
        "violations": violations, "defect": defect, "lam_ok": lam_ok, "Z": zcp,
        "s_stop": s_stop,
    }


def _pairwise_mean_se(x: np.ndarray):
    n = x.shape[0]
    mean = np.sum(x, axis=0) / n
    var = np.sum((x - mean) ** 2, axis=0) / max(n - 1, 1)
    return mean, np.sqrt(var / n)


def _tail_stats(x: np.ndarray) -> list:
    out = []
    for j in range(x.shape[1]):
        col = x[:, j]
        if col.size < 4 or np.all(col == col[0]):
            out.append({"kurtosis": 0.0, "max_abs": float(np.abs(col).max()) if col.size else 0.0,
                        "q001": 0.0, "q999": 0.0, "kurtosis_alarm": False})
            continue
        k = float(stats.kurtosis(col))
        out.append({
            "kurtosis": k,
            "max_abs": float(np.abs(col).max()),
            "q001": float(np.quantile(col, 0.001)),
            "q999": float(np.quantile(col, 0.999)),
            "kurtosis_alarm": bool(k > 50.0),
        })
    return out


def _run(history, coeffs, x0, V, mode, n_paths, dt, seed, cutoff=None, r=None, horizon=None,
         zero_noise=False, drop_G=False, checkpoints=(), use_source=True, chunk=25000,
         keep_payoffs=False):
    t_start = time.perf_counter()
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape[1] != coeffs.dim_hat:
        raise ValueError(f"directions need {coeffs.dim_hat} components")
    if dt <= 0:
        raise ValueError("dt must be positive")
    T_h = history.T if horizon is None else float(horizon)
    if T_h > history.T + 1e-12:
        raise ValueError("horizon exceeds the history")
    nsteps = int(round(T_h / dt))
    if abs(nsteps * dt - T_h) > 1e-9 * T_h:
        raise ValueError("horizon must be an integer multiple of dt")
    if cutoff is None:
        cutoff = build_cutoff(r, history, x0, mode)
    if mode == "local":
        profile = control_profile("local", np.eye(1), T_h, (history.bounds["K1"], cutoff.r))
    else:
        profile = control_profile("global", np.eye(1), T_h)
    chunks = [np.arange(a, min(a + chunk, n_paths)) for a in range(0, n_paths, chunk)]
    args = dict(zero_noise=zero_noise, drop_G=drop_G, checkpoints=tuple(checkpoints),
                use_source=use_source)
    work = lambda idx: _simulate_chunk(history, coeffs, x0, V, profile, cutoff, dt, nsteps, seed,
                                       idx, **args)
    nw = _workers()
    if nw > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(nw) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    payoff = np.concatenate([p["payoff"] for p in parts])
    status = np.concatenate([p["status"] for p in parts])
    capped = np.concatenate([p["capped"] for p in parts])
    good = (status != NUMERIC_FAILURE) & (status != EXITED)
    reasons = {STATUS_NAMES[int(k)]: int(c) for k, c in zip(*np.unique(status, return_counts=True))}
    discards = {"numeric-failure": int((status == NUMERIC_FAILURE).sum()),
                "exited-certified-region": int((status == EXITED).sum())}
    if discards["numeric-failure"] > 0.01 * n_paths:
        raise EstimatorError(f"{discards['numeric-failure']} of {n_paths} paths failed numerically")
    violations = sum(p["violations"] for p in parts)
    q_ratio = max(p["q_ratio"] for p in parts)
    if violations:
        raise QBoundViolation(f"{violations} transport-operator bound violations")
    mean, se = _pairwise_mean_se(payoff[good])
    mode_meta = dict(cutoff.meta)
    mode_meta.update({"profile": profile.mode, "horizon": T_h, "C_rate": profile.C, "C_n": C_N,
                      "control_energy": profile.energy, "cap": F_CAP,
                      "cap_hits": int(capped.sum())})
    Z = None
    if checkpoints:
        Z = {c: np.concatenate([p["Z"][c] for p in parts]) for c in checkpoints}
    res = EstimateResult(
        estimate=mean, se=se, n_paths=n_paths, n_effective=int(good.sum()), discards=discards,
        stop_reasons=reasons, q_bound_max=q_ratio, q_bound_violations=violations,
        max_frame_defect=max(p["defect"] for p in parts),
        lambda_ok=all(p["lam_ok"] for p in parts), tail_stats=_tail_stats(payoff[good]),
        mode=mode_meta, wall_clock=time.perf_counter() - t_start,
        config={"x0": np.asarray(x0, dtype=float).tolist(), "v": V.tolist(), "mode": mode,
                "n_paths": n_paths, "dt": dt, "seed": seed, "family": history.family,
                "valence": list(coeffs.valence)},
        payoffs=payoff if keep_payoffs else None,
        diagnostics={"Z": Z, "good": good} if checkpoints else {},
    )
    return res


def run_derivative_estimate(history, coeffs, x0, v, mode="global", n_paths=10000, dt=None,
                            seed=0, r=None, cutoff=None, horizon=None, zero_noise=False,
                            chunk=25000, keep_payoffs=False) -> EstimateResult:
    """Estimate ``<grad a(x0), v>`` for the forward field at the history's end.

    ``v`` may be one direction or a stack of directions (one estimate each,
    all on the same paths).
    """
    dt = history.stride if dt is None else dt
    return _run(history, coeffs, x0, v, mode, n_paths, dt, seed, cutoff=cutoff, r=r,
                horizon=horizon, zero_noise=zero_noise, chunk=chunk, keep_payoffs=keep_payoffs)


def run_second_order_estimate(history, coeffs, x0, v, mode="global", n_paths=10000, dt=None,
                              seed=0, r=None, cutoff=None, horizon=None, chunk=25000,
                              keep_payoffs=False) -> EstimateResult:
    """Estimate ``<Hess-type derivative of a(x0), v>`` with the source correction.

    ``coeffs`` comes from ``make_coefficients(history, order=2)``; the control
    runs over half the history horizon unless ``horizon`` is given.
    """
    dt = history.stride if dt is None else dt
    if horizon is None:
        horizon = 0.5 * history.T
        horizon = dt * round(horizon / dt)
    return _run(history, coeffs, x0, v, mode, n_paths, dt, seed, cutoff=cutoff, r=r,
                horizon=horizon, chunk=chunk, keep_payoffs=keep_payoffs)


# --------------------------------------------------------------------------
# martingale diagnostic

def _interval_tests(Z: dict, good, level: float):
    keys = sorted(Z)
    zc = stats.norm.ppf(0.5 + level / 2)
    out = []
    for a, b in zip(keys[:-1], keys[1:]):
        inc = (Z[b] - Z[a])[good]
        mu = inc.mean(axis=0)
        sd = inc.std(axis=0, ddof=1)
        se = sd / math.sqrt(inc.shape[0])
        lo, hi = mu - zc * se, mu + zc * se
        out.append({"from": a, "to": b, "mean": mu.tolist(), "sd": sd.tolist(),
                    "ci_low": lo.tolist(), "ci_high": hi.tolist(),
                    "contains_zero": bool(np.all((lo <= 0) & (hi >= 0)))})
    return out


def _power(tests, n, level, drift=None):
    """Probability that at least one interval CI excludes 0 with ``n`` paths.

    ``drift`` overrides the per-interval means as the assumed true drift.
    """
    zc = stats.norm.ppf(0.5 + level / 2)
    miss = 1.0
    for i, t in enumerate(tests):
        mus = t["mean"] if drift is None else drift[i]
        for mu, sd in zip(mus, t["sd"]):
            if sd <= 0:
                continue
            eff = abs(mu) * math.sqrt(n) / sd
            p = stats.norm.cdf(eff - zc) + stats.norm.cdf(-eff - zc)
            miss *= 1 - p
    return 1 - miss


def _paired_drift(clean, faulty, level):
    """Drift of the faulted run measured against a clean run on common noise.

    The clean ``Z`` is a martingale, so the mean paired increment difference is
    an unbiased drift estimate with far smaller variance than the faulted
    increments alone.  Each component is shrunk toward zero by its confidence
    half-width so that sampling error cannot inflate the calibrated power.
    """
    zc = stats.norm.ppf(0.5 + level / 2)
    good = clean.diagnostics["good"] & faulty.diagnostics["good"]
    Zc, Zf = clean.diagnostics["Z"], faulty.diagnostics["Z"]
    keys = sorted(Zc)
    out = []
    for a, b in zip(keys[:-1], keys[1:]):
        d = ((Zf[b] - Zf[a]) - (Zc[b] - Zc[a]))[good]
        mu = d.mean(axis=0)
        half = zc * d.std(axis=0, ddof=1) / math.sqrt(d.shape[0])
        out.append((np.sign(mu) * np.maximum(np.abs(mu) - half, 0.0)).tolist())
    return out


def martingale_diagnostic(history, coeffs, x0, v, n_paths=10000, checkpoints=None, dt=None,
                          seed=0, mode="global", r=None, fault_injection=False, level=0.99,
                          pilot_paths=None, min_power=0.95, max_paths=10 ** 6, horizon=None):
    """Check that ``Z = <N^, h> - <N, l>`` has no drift between checkpoints.

    With ``fault_injection`` the metric-rate correction is dropped from the
    transport ODEs.  When ``pilot_paths`` is given, a pilot pair of faulted and
    clean runs on common noise calibrates the path count needed for rejection
    power ``min_power``; the returned report then carries ``calibrated_paths``.
    """
    dt = history.stride if dt is None else dt
    T_h = history.T if horizon is None else horizon
    nsteps = int(round(T_h / dt))
    if checkpoints is None:
        checkpoints = sorted(set(np.linspace(0, nsteps, 5).round().astype(int).tolist()))
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    report = {"level": level, "checkpoints": list(checkpoints), "fault_injection": fault_injection}
    if pilot_paths is not None:
        pilot_args = dict(r=r, checkpoints=checkpoints, horizon=horizon)
        faulty = _run(history, coeffs, x0, v, mode, pilot_paths, dt, seed + 7919, drop_G=True,
                      **pilot_args)
        clean = _run(history, coeffs, x0, v, mode, pilot_paths, dt, seed + 7919, drop_G=False,
                     **pilot_args)
        tests = _interval_tests(faulty.diagnostics["Z"], faulty.diagnostics["good"], level)
        drift = _paired_drift(clean, faulty, level)
        n = 1000
        while _power(tests, n, level, drift) < min_power:
            n *= 2
            if n > max_paths:
                raise EstimatorError("too few paths available for the requested power")
        report["calibrated_paths"] = n
        report["pilot_power"] = _power(tests, n, level, drift)
        report["pilot_drift"] = drift
        n_paths = max(n_paths, n) if fault_injection else n_paths
    if n_paths < 100:
        raise EstimatorError("too few paths for a confidence interval")
    res = _run(history, coeffs, x0, v, mode, n_paths, dt, seed, r=r, drop_G=fault_injection,
               checkpoints=checkpoints, horizon=horizon)
    tests = _interval_tests(res.diagnostics["Z"], res.diagnostics["good"], level)
    report.update({"n_paths": n_paths, "intervals": tests,
                   "passed": all(t["contains_zero"] for t in tests),
                   "q_bound_violations": res.q_bound_violations,
                   "max_frame_defect": res.max_frame_defect})
    return report
