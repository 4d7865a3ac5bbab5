"""Brownian motion under a time-changing conformal metric, with moving frames.

Paths are simulated in batches.  A :class:`PathState` holds positions
``x (P, n)``, frames ``U (P, n, n)`` (columns are the frame vectors) and a
status code per path.  The position uses the Ito form of the horizontal SDE,

    dX = sqrt(2) U dW - g^{jk} Gamma^i_{jk} dt,

so that the generator is the Laplace-Beltrami operator of ``g_t``.  The frame
is carried along ``dX`` by parallel transport (Heun predictor-corrector on the
realized increment) with the metric-rate correction ``-1/2 g^{-1} d_t g U dt``,
then re-orthonormalized by Gram-Schmidt in ``g_{t+dt}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .geom import TensorComponents, conformal_christoffel

RUNNING, REACHED_T, EXITED, NUMERIC_FAILURE, TAU, CAP = 0, 1, 2, 3, 4, 5
FD_STEP = 1e-4  # step of the centered differences used by the drift check
STATUS_NAMES = {
    RUNNING: "running",
    REACHED_T: "reached-T",
    EXITED: "exited-certified-region",
    NUMERIC_FAILURE: "numeric-failure",
    TAU: "tau",
    CAP: "cap",
}


# --------------------------------------------------------------------------
# noise

class NoiseStream:
    """Counter-based Gaussian increments keyed by ``(seed, step)``.

    Path ``p`` at step ``j`` reads the Philox block with counter ``p`` under
    the key derived from ``(seed, j)``, so any partition of paths over workers
    or chunks reproduces the same numbers.
    """

    def __init__(self, seed: int, path_index, n: int, zero: bool = False):
        if n > 4:
            raise ValueError("at most four noise components per path")
        self.seed = int(seed)
        self.path_index = np.atleast_1d(np.asarray(path_index, dtype=np.int64))
        self.n = n
        self.step = 0
        self.zero = zero

    def normals(self, step: int) -> np.ndarray:
        P = len(self.path_index)
        if self.zero:
            return np.zeros((P, self.n))
        key = np.random.SeedSequence([self.seed, int(step)]).generate_state(2, np.uint64)
        out = np.empty((P, self.n))
        # contiguous runs of path indices share one Philox stream
        idx = self.path_index
        breaks = np.flatnonzero(np.diff(idx) != 1) + 1
        for lo, hi in zip(np.r_[0, breaks], np.r_[breaks, P]):
            bg = np.random.Philox(key=key, counter=int(idx[lo]))
            raw = bg.random_raw(4 * (hi - lo)).reshape(hi - lo, 4)[:, :self.n]
            unif = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
            out[lo:hi] = ndtri(unif)
        return out

    def next(self) -> np.ndarray:
        z = self.normals(self.step)
        self.step += 1
        return z

    def subset(self, mask) -> "NoiseStream":
        out = NoiseStream(self.seed, self.path_index[mask], self.n, self.zero)
        out.step = self.step
        return out


# --------------------------------------------------------------------------
# path state

@dataclass
class PathState:
    t: float
    x: np.ndarray
    U: np.ndarray
    status: np.ndarray = None
    cache: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.U = np.asarray(self.U, dtype=float)
        if self.U.ndim == 2:
            self.U = np.broadcast_to(self.U, (self.x.shape[0],) + self.U.shape).copy()
        if self.status is None:
            self.status = np.zeros(self.x.shape[0], dtype=np.int8)

    @property
    def running(self) -> np.ndarray:
        return self.status == RUNNING

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def reasons(self) -> dict:
        names, counts = np.unique(self.status, return_counts=True)
        return {STATUS_NAMES[int(k)]: int(c) for k, c in zip(names, counts)}


def probe(history, t: float, x: np.ndarray, extra=(), with_gamma: bool = False) -> dict:
    """Metric data (``u``, ``du``, ``u_t``, optionally ``gamma``) and extra fields at points."""
    n = history.n
    out = {
        "u": history.field_at("u", t, x),
        "du": np.stack([history.field_at(f"d{i}:u", t, x) for i in range(n)], axis=-1),
        "u_t": history.field_at("u_t", t, x),
    }
    if with_gamma:
        out["gamma"] = conformal_christoffel(out["du"])
    for name in extra:
        out[name] = history.field_at(name, t, x)
    return out


def initial_state(history, x0, n_paths: int, extra=()) -> PathState:
    """All paths at ``x0`` with the frame ``exp(-u) I`` (orthonormal for g at ``t0``)."""
    chart = history.chart
    x0 = chart.normalize(np.asarray(x0, dtype=float).reshape(chart.n))
    x = np.repeat(x0[None], n_paths, axis=0)
    t0 = float(history.times[0])
    pr = probe(history, t0, x[:1], extra)
    U0 = np.exp(-pr["u"][0]) * np.eye(chart.n)
    state = PathState(t0, x, U0)
    state.cache = {k: (np.repeat(v, n_paths, axis=0)) for k, v in pr.items()}
    return state


def gram_schmidt(U: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Column-ordered Gram-Schmidt of batched frames in the metric ``g`` (no pivoting)."""
    U = U.copy()
    n = U.shape[-1]
    for a in range(n):
        col = U[..., :, a]
        for b in range(a):
            prev = U[..., :, b]
            proj = np.einsum("pi,pij,pj->p", col, g, prev)
            col = col - proj[:, None] * prev
        norm = np.sqrt(np.einsum("pi,pij,pj->p", col, g, col))
        U[..., :, a] = col / norm[:, None]
    return U


def gram_schmidt_conformal(U: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Gram-Schmidt in ``exp(2u) delta``: Euclidean Gram-Schmidt of ``exp(u) U``."""
    V = U * np.exp(u)[:, None, None]
    n = V.shape[-1]
    cols = []
    for a in range(n):
        col = V[:, :, a]
        for prev in cols:
            col = col - (col * prev).sum(axis=1)[:, None] * prev
        col = col / np.sqrt((col * col).sum(axis=1))[:, None]
        cols.append(col)
    return np.stack(cols, axis=2) * np.exp(-u)[:, None, None]


def transport_term(du: np.ndarray, dX: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``Gamma^i_{jk} dX^j U^k_a`` for the conformal Christoffel symbols."""
    w = np.matmul(du[:, None, :], U)[:, 0, :]          # du . U_a
    e = np.matmul(dX[:, None, :], U)[:, 0, :]          # dX . U_a
    c = (du * dX).sum(axis=1)
    return dX[:, :, None] * w[:, None, :] + U * c[:, None, None] - du[:, :, None] * e[:, None, :]


def _conformal_g(u, n):
    return np.exp(2 * u)[:, None, None] * np.eye(n)


def bm_step(state: PathState, history, dt: float, noise: NoiseStream, extra=(),
            renormalize: bool = True):
    """Advance running paths by one step; returns ``(new_state, dW)``.

    ``state.cache`` must hold the probe at ``(state.t, state.x)`` (as set by
    :func:`initial_state` and by this function), which is reused so each step
    evaluates the history only at the new points.
    """
    P, n = state.x.shape
    z = noise.next()
    if dt == 0:
        return PathState(state.t, state.x.copy(), state.U.copy(), state.status.copy(), state.cache), np.zeros((P, n))
    dW = math.sqrt(dt) * z
    run = state.running
    c = state.cache
    U = state.U
    drift = (n - 2) * np.exp(-2 * c["u"])[:, None] * c["du"]
    dX = math.sqrt(2.0) * np.matmul(U, dW[:, :, None])[:, :, 0] + drift * dt
    dX[~run] = 0.0
    x_new = state.x + dX
    chart = history.chart
    status = state.status.copy()
    inside = chart.inside(x_new)
    status[run & ~inside] = EXITED
    x_new[~inside] = state.x[~inside]
    if chart.periodic:
        x_new = chart.normalize(x_new)
    t_new = state.t + dt
    cn = probe(history, t_new, x_new, extra)
    # transport: dU = -Gamma(dX, U) - u_t U dt, Heun on the realized increment
    k1 = -transport_term(c["du"], dX, U) - c["u_t"][:, None, None] * U * dt
    Up = U + k1
    k2 = -transport_term(cn["du"], dX, Up) - cn["u_t"][:, None, None] * Up * dt
    U_new = U + 0.5 * (k1 + k2)
    if renormalize:
        U_new = gram_schmidt_conformal(U_new, cn["u"])
    bad = ~(np.all(np.isfinite(x_new), axis=1) & np.all(np.isfinite(U_new), axis=(1, 2)))
    bad |= ~np.isfinite(cn["u"])
    status[run & bad] = NUMERIC_FAILURE
    keep = ~run | (status != RUNNING)
    x_new[keep] = state.x[keep]
    U_new[keep] = U[keep]
    for k in cn:
        cn[k][keep] = c[k][keep] if k in c else cn[k][keep]
    out = PathState(t_new, x_new, U_new, status, cn)
    return out, np.where(run[:, None], dW, 0.0)


def frame_defect(state: PathState) -> np.ndarray:
    """``max |U^T g U - I|`` per path at the state's own time."""
    U = state.U
    m = np.matmul(np.swapaxes(U, 1, 2), U) * np.exp(2 * state.cache["u"])[:, None, None]
    return np.abs(m - np.eye(U.shape[-1])).max(axis=(1, 2))


# --------------------------------------------------------------------------
# the G operator

def g_operator(valence, G, comps):
    """Metric-rate correction on frame components.

    Each lower index contributes ``+1/2 G`` contracted into that slot and each
    upper index ``-1/2 G``.  ``comps`` is a :class:`TensorComponents` in the
    frame basis or an array of shape ``(n,)*(m+k)``.
    """
    m, k = (int(v) for v in valence)
    G = np.asarray(G, dtype=float)
    if G.shape[-1] != G.shape[-2] or not np.allclose(G, np.swapaxes(G, -1, -2)):
        raise ValueError("G must be symmetric")
    if isinstance(comps, TensorComponents):
        if comps.basis != "frame":
            raise ValueError("components must be in the frame basis")
        if comps.valence != (m, k):
            raise ValueError("valence mismatch")
        arr = comps.array()
        wrap = True
    else:
        arr = np.asarray(comps, dtype=float)
        wrap = False
        if arr.ndim != m + k:
            raise ValueError("valence mismatch")
    if m + k == 0:
        out = np.zeros_like(arr)
    else:
        if any(s != G.shape[0] for s in arr.shape):
            raise ValueError("valence mismatch")
        out = np.zeros_like(arr)
        for s in range(m + k):
            sign = -0.5 if s < m else 0.5
            out = out + sign * np.moveaxis(np.tensordot(G, arr, axes=([1], [s])), 0, s)
    if wrap:
        return TensorComponents((m, k), out, "frame")
    return out


def g_operator_matrix(valence, G: np.ndarray) -> np.ndarray:
    """Batched matrix of :func:`g_operator` on flattened components, ``(P, d, d)``."""
    m, k = valence
    rank = m + k
    G = np.asarray(G, dtype=float)
    P, n = G.shape[0], G.shape[-1]
    d = n ** rank
    out = np.zeros((P, d, d))
    for s in range(rank):
        sign = -0.5 if s < m else 0.5
        left, right = n ** s, n ** (rank - s - 1)
        blk = (np.eye(left)[None, :, None, None, :, None, None]
               * G[:, None, :, None, None, :, None]
               * np.eye(right)[None, None, None, :, None, None, :])
        out += sign * blk.reshape(P, d, d)
    return out


def frame_rate_matrix(U: np.ndarray, u: np.ndarray, u_t: np.ndarray) -> np.ndarray:
    """``G = U^T (d_t g) U`` for the conformal metric."""
    return np.matmul(np.swapaxes(U, 1, 2), U) * (2 * u_t * np.exp(2 * u))[:, None, None]


# --------------------------------------------------------------------------
# frame components of covariant tensor fields

def to_frame(comps: np.ndarray, U: np.ndarray, k: int) -> np.ndarray:
    """Frame components of batched ``(0, k)`` coordinate components ``(P, n, .., n)``."""
    out = comps
    for s in range(k):
        out = np.moveaxis(np.einsum("pi...,pia->pa...", np.moveaxis(out, s + 1, 1), U), 1, s + 1)
    return out


def covariant_derivative_fd(field, x: np.ndarray, gamma_fn, k: int, eps: float = FD_STEP):
    """``nabla_i f_{j..}`` of a ``(0, k)`` coordinate-component callable by centered differences."""
    P, n = x.shape
    f0 = field(x)
    parts = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        parts.append((field(x + e) - field(x - e)) / (2 * eps))
    d = np.stack(parts, axis=1)  # (P, i, j..)
    if k == 0:
        return d
    gam = gamma_fn(x)  # (P, l, i, j)
    out = d.copy()
    for s in range(k):
        # subtract Gamma^l_{i j_s} f_{.. l ..}
        moved = np.moveaxis(f0, s + 1, 1)  # (P, l, ...)
        corr = np.einsum("plij,pl...->pij...", gam, moved)  # (P, i, j_s, rest)
        out = out - np.moveaxis(corr, 2, s + 2)
    return out


def connection_laplacian_fd(field, x, gamma_fn, ginv_fn, k: int, eps: float = FD_STEP):
    """``g^{ij} nabla_i nabla_j f`` by nested centered differences."""
    grad = lambda y: covariant_derivative_fd(field, y, gamma_fn, k, eps)
    hess = covariant_derivative_fd(grad, x, gamma_fn, k + 1, eps)
    return np.einsum("pij,pij...->p...", ginv_fn(x), hess)


def ito_drift_check(history, field, valence, x0, n_paths: int, dt: float, seed: int = 0,
                    t0: float | None = None, laplacian=None) -> dict:
    """Monte Carlo drift of the frame components of a fixed field over one step.

    Compares ``E[Y_dt - Y_0]/dt`` against ``U^T Lap f - G f`` at ``x0``.  The
    leading martingale term ``sqrt(2) <nabla f, U dW>`` is subtracted as a
    control variate, leaving an ``O(dt)`` fluctuation.  ``laplacian`` may
    supply the coordinate components of ``Lap f`` at ``x0`` (shape
    ``(n,)*k``); otherwise nested finite differences are used.
    """
    m, k = valence
    if m != 0:
        raise ValueError("drift check handles covariant (0, k) fields")
    if n_paths < 1000:
        raise ValueError("need at least 1000 paths for a 3-SE drift comparison")
    n = history.n
    t0 = float(history.times[0]) if t0 is None else t0
    x0 = np.asarray(x0, dtype=float).reshape(1, n)
    st = initial_state(history, x0[0], n_paths)
    st.t = t0
    st.cache = {kk: np.repeat(v, n_paths, axis=0) for kk, v in probe(history, t0, x0).items()}
    st.U[:] = np.exp(-st.cache["u"][0]) * np.eye(n)
    noise = NoiseStream(seed, np.arange(n_paths), n)
    new, dW = bm_step(st, history, dt, noise)
    f = lambda y: np.asarray(field(y), dtype=float)
    Y0 = to_frame(f(x0), st.U[:1], k)[0]
    Y1 = to_frame(f(new.x), new.U, k)
    gamma_fn = lambda y: probe(history, t0, y, with_gamma=True)["gamma"]
    grad0 = covariant_derivative_fd(f, x0, gamma_fn, k)  # (1, i, j..)
    grad_frame = to_frame(grad0, st.U[:1], k + 1)[0]      # (a, j..)
    mart = math.sqrt(2.0) * np.tensordot(dW, grad_frame, axes=([1], [0]))
    incr = (Y1 - Y0 - mart) / dt
    est = incr.mean(axis=0)
    se = incr.std(axis=0, ddof=1) / math.sqrt(n_paths)
    ginv_fn = lambda y: np.exp(-2 * probe(history, t0, y)["u"])[:, None, None] * np.eye(n)
    if laplacian is None:
        lap = connection_laplacian_fd(f, x0, gamma_fn, ginv_fn, k)
    else:
        lap = np.asarray(laplacian, dtype=float)[None]
    lap_frame = to_frame(lap, st.U[:1], k)[0]
    G = frame_rate_matrix(st.U[:1], st.cache["u"][:1], st.cache["u_t"][:1])[0]
    expected = lap_frame - g_operator((0, k), G, Y0)
    # exact cancellations leave only rounding noise, so floor the SE at that level;
    # a nested-difference Laplacian adds rounding of order eps |f| / h^2
    scale = np.finfo(float).eps * max(1.0, float(np.abs(Y0).max()))
    floor = 64 * scale / dt + (256 * scale / FD_STEP ** 2 if laplacian is None else 0.0)
    z = np.abs(est - expected) / np.sqrt(se ** 2 + floor ** 2)
    return {
        "estimate": est, "expected": expected, "se": se,
        "max_standardized": float(np.max(z)) if np.size(z) else 0.0,
        "n_paths": n_paths, "dt": dt,
    }


# --------------------------------------------------------------------------
# debug dumps

def dump_paths_csv(path, records) -> None:
    """Write per-step states ``[(step, t, x, U, status), ...]`` of a few paths as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "path", "t", "x", "U", "status"])
        for step, t, x, U, status in records:
            for p in range(len(x)):
                w.writerow([step, p, f"{t:.17g}", " ".join(f"{v:.17g}" for v in x[p]),
                            " ".join(f"{v:.17g}" for v in U[p].ravel()), STATUS_NAMES[int(status[p])]])
