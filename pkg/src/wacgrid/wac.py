"""Per-group wide-area controller: canonical state-space realization of the
selected loop, discrete LQR by backward Riccati iteration, and a Kalman
filter estimating the loop state from the remote speed measurement.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.linalg import solve_discrete_are

from .modal import LoopChoice, ModalDecomposition, reduced_model
from .sysid import ArxCommonDen

log = logging.getLogger(__name__)

U_LIMIT = 0.05
RHO = 1.0
Q_NOISE = 1e-5
R_NOISE = 1e-3
DLQR_TOL = 1e-9
DLQR_MAX_ITER = 10000


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


# -- realization -------------------------------------------------------------

@dataclass(eq=False)
class StateSpace:
    """SISO discrete realization x+ = A x + B u, y = C x + D u."""

    a_mat: np.ndarray
    b_mat: np.ndarray
    c_mat: np.ndarray
    d_scalar: float = 0.0
    ts: float = 0.1

    def __post_init__(self):
        self.a_mat = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        p = self.a_mat.shape[0]
        self.b_mat = np.asarray(self.b_mat, dtype=float).reshape(p, 1)
        self.c_mat = np.asarray(self.c_mat, dtype=float).reshape(1, p)
        if self.a_mat.shape != (p, p):
            raise ValueError("A must be square")
        self.d_scalar = float(self.d_scalar)

    @property
    def order(self) -> int:
        return self.a_mat.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.a_mat)))) if self.order else 0.0

    def freqresp(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        eye = np.eye(self.order)
        out = [(self.c_mat @ np.linalg.solve(zi * eye - self.a_mat, self.b_mat))[0, 0] + self.d_scalar for zi in z]
        return np.array(out)

    def to_dict(self) -> dict:
        return {"A": self.a_mat.tolist(), "B": self.b_mat.ravel().tolist(), "C": self.c_mat.ravel().tolist(),
                "D": self.d_scalar, "ts": self.ts}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateSpace":
        return cls(np.array(d["A"], dtype=float), d["B"], d["C"], d.get("D", 0.0), float(d["ts"]))


def realize_tf(num_w, den_w, ts: float) -> StateSpace:
    """Controllable canonical form of n(w)/a(w), w = z^-1 (ascending).

    Common factors of z are cancelled first, so 1/(z - 0.5) (num [0, 1],
    den [1, -0.5]) realizes as A = 0.5, B = 1, C = 1, D = 0.
    """
    n = np.atleast_1d(np.asarray(num_w, dtype=float))
    a = np.atleast_1d(np.asarray(den_w, dtype=float))
    if a.size == 0 or a[0] == 0:
        raise ValueError("denominator must have a nonzero constant term")
    deg = max(n.size, a.size) - 1
    # descending powers of z after multiplying through by z^deg
    nz = np.concatenate([n, np.zeros(deg + 1 - n.size)])
    dz = np.concatenate([a, np.zeros(deg + 1 - a.size)])
    nz, dz = nz / dz[0], dz / dz[0]
    scale = max(np.max(np.abs(nz)), 1e-300)
    while dz.size > 1 and dz[-1] == 0 and abs(nz[-1]) <= 1e-14 * scale:
        nz, dz = nz[:-1], dz[:-1]
    p = dz.size - 1
    d = float(nz[0])
    beta = (nz - d * dz)[1:]
    a_mat = np.zeros((p, p))
    if p:
        a_mat[0] = -dz[1:]
        a_mat[1:, :-1] = np.eye(p - 1)
    b_mat = np.zeros((p, 1))
    if p:
        b_mat[0, 0] = 1.0
    ss = StateSpace(a_mat, b_mat, beta.reshape(1, p), d, ts)
    if p and ss.spectral_radius >= 1.0:
        log.warning("realized loop is not asymptotically stable (spectral radius %.4f)", ss.spectral_radius)
    return ss


def realize(model, pair) -> StateSpace:
    """State-space realization of one (output, input) loop.

    ``model`` is an ArxCommonDen (typically reduced) or a
    ModalDecomposition, which is first rebuilt as a reduced ARX model. The
    one-sample input delay adds a state at z = 0 whenever the last
    numerator coefficient is nonzero, so the state count is the retained
    pole count plus at most one.
    """
    if isinstance(model, ModalDecomposition):
        model = reduced_model(model)
    pair = tuple(pair)
    if pair not in model.num:
        raise KeyError(f"pair {pair} not present in model")
    num, den = model.tf(pair)
    return realize_tf(num, den, model.ts)


# -- LQR -------------------------------------------------------------------

@dataclass(eq=False)
class LqrSolution:
    gain: np.ndarray
    riccati: np.ndarray
    rho: float
    horizon_used: int
    converged: bool
    trace_history: list = field(default_factory=list, repr=False)


def riccati_step(p_mat, a, b, q, r):
    """One backward step: returns (P_next, K) with K computed from P."""
    btp = b.T @ p_mat
    k = np.linalg.solve(r + btp @ b, btp @ a)
    p_next = q + a.T @ p_mat @ a - a.T @ p_mat @ b @ k
    return _sym(p_next), k


def dlqr(ss: StateSpace, rho: float = RHO, tol: float = DLQR_TOL, max_iter: int = DLQR_MAX_ITER) -> LqrSolution:
    """Infinite-horizon discrete LQR with Q = C'C, R = rho.

    Riccati iteration from P = 0 until the max-abs change is at most
    ``tol``; K = (R + B'PB)^-1 B'PA with the final P. Non-convergence
    returns the last iterate flagged ``converged=False``.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    a, b = ss.a_mat, ss.b_mat
    q = ss.c_mat.T @ ss.c_mat
    r = np.array([[float(rho)]])
    p_mat = np.zeros_like(a)
    traces = [0.0]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p_next, _ = riccati_step(p_mat, a, b, q, r)
        delta = np.max(np.abs(p_next - p_mat)) if p_mat.size else 0.0
        p_mat = p_next
        traces.append(float(np.trace(p_mat)))
        if delta <= tol:
            converged = True
            break
    if not converged:
        log.warning("Riccati iteration did not converge in %d steps", max_iter)
    btp = b.T @ p_mat
    k = np.linalg.solve(r + btp @ b, btp @ a)
    return LqrSolution(k, p_mat, float(rho), it, converged, traces)


# -- Kalman filter -----------------------------------------------------------

@dataclass(eq=False)
class KalmanState:
    """Estimate ``x_hat``/``cov`` plus the latest prediction and gain."""

    x_hat: np.ndarray
    cov: np.ndarray
    q_noise: np.ndarray
    r_noise: float
    h_mat: np.ndarray
    x_bar: np.ndarray | None = None
    cov_bar: np.ndarray | None = None
    gain: np.ndarray | None = None

    @classmethod
    def initial(cls, ss: StateSpace, q_noise=Q_NOISE, r_noise: float = R_NOISE, h_mat=None) -> "KalmanState":
        p = ss.order
        qn = np.asarray(q_noise, dtype=float)
        qn = qn * np.eye(p) if qn.ndim == 0 else qn.reshape(p, p)
        h = ss.c_mat.copy() if h_mat is None else np.asarray(h_mat, dtype=float).reshape(-1, p)
        return cls(np.zeros(p), np.eye(p), qn, float(r_noise), h)


def kalman_predict(kf: KalmanState, ss: StateSpace, u: float) -> KalmanState:
    if not np.isfinite(u):
        raise ValueError("control input must be finite")
    a = ss.a_mat
    x_bar = a @ kf.x_hat + ss.b_mat[:, 0] * u
    cov_bar = _sym(a @ kf.cov @ a.T + kf.q_noise)
    return replace(kf, x_bar=x_bar, cov_bar=cov_bar, gain=None)


def kalman_gain(kf: KalmanState) -> np.ndarray:
    """G = L_bar H' (H L_bar H' + R_n)^-1."""
    lb = kf.cov if kf.cov_bar is None else kf.cov_bar
    h = kf.h_mat
    s = h @ lb @ h.T + kf.r_noise * np.eye(h.shape[0])
    if not np.all(np.isfinite(s)) or abs(np.linalg.det(s)) <= 1e-300:
        raise np.linalg.LinAlgError("singular innovation covariance")
    return np.linalg.solve(s.T, (lb @ h.T).T).T


def kalman_correct(kf: KalmanState, z) -> KalmanState:
    """x_hat = x_bar + G (z - H x_bar); L = L_bar - G H L_bar."""
    x_bar = kf.x_hat if kf.x_bar is None else kf.x_bar
    lb = kf.cov if kf.cov_bar is None else kf.cov_bar
    g = kalman_gain(kf) if kf.gain is None else kf.gain
    z = np.atleast_1d(np.asarray(z, dtype=float))
    x_hat = x_bar + g @ (z - kf.h_mat @ x_bar)
    cov = _sym(lb - g @ kf.h_mat @ lb)
    return replace(kf, x_hat=x_hat, cov=cov, x_bar=None, cov_bar=None, gain=g)


def steady_state_gain(ss: StateSpace, q_noise, r_noise: float, h_mat=None, tol: float = 1e-12,
                      max_iter: int = 20000) -> np.ndarray:
    """Fixed point of the predict/gain/correct covariance recursion.

    The prior covariance is seeded from scipy's discrete algebraic Riccati
    solver and then polished by the recursion itself until the gain changes
    by at most ``tol`` relative to its largest entry. Badly scaled canonical
    realizations stall at a rounding floor above ``tol``; the iteration then
    stops once the change has not halved for 50 steps.
    """
    kf = KalmanState.initial(ss, q_noise, r_noise, h_mat)
    h = kf.h_mat
    try:
        lbar = solve_discrete_are(ss.a_mat.T, h.T, kf.q_noise, kf.r_noise * np.eye(h.shape[0]))
        g0 = kalman_gain(replace(kf, cov_bar=lbar))
        kf = replace(kf, cov=_sym(lbar - g0 @ h @ lbar))
    except (np.linalg.LinAlgError, ValueError):
        log.info("Riccati solver failed; iterating the filter recursion from L = I")
    g_prev = None
    g = None
    best, stall = np.inf, 0
    for _ in range(max_iter):
        kf = kalman_predict(kf, ss, 0.0)
        g = kalman_gain(kf)
        kf = kalman_correct(replace(kf, gain=g), np.zeros(h.shape[0]))
        if g_prev is not None:
            change = np.max(np.abs(g - g_prev)) / max(1.0, np.max(np.abs(g)))
            if change <= tol:
                return g
            # rounding floor: no progress for a while
            best, stall = (change, 0) if change < 0.5 * best else (best, stall + 1)
            if stall >= 50 and best <= 1e-8:
                return g
        g_prev = g
    if np.max(np.abs(g - g_prev)) > 1e-6 * max(1.0, np.max(np.abs(g))):
        log.warning("steady-state Kalman gain did not converge")
    return g


# -- controller --------------------------------------------------------------

@dataclass(eq=False)
class WacController:
    loop: LoopChoice
    ss: StateSpace
    lqr: LqrSolution
    kf: KalmanState
    u_limit: float = U_LIMIT
    elapsed: float = 0.0
    u_prev: float = 0.0
    _g_ss: np.ndarray | None = field(default=None, repr=False)
    _kf0: KalmanState | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.u_limit > 0:
            raise ValueError("u_limit must be positive")
        self._kf0 = replace(self.kf)

    @property
    def group(self) -> int:
        return self.loop.group

    @property
    def output(self) -> int:
        return self.loop.output

    @property
    def input(self) -> int:
        return self.loop.input

    @property
    def ts(self) -> float:
        return self.ss.ts

    @property
    def order(self) -> int:
        return self.ss.order

    def steady_gain(self) -> np.ndarray:
        if self._g_ss is None:
            self._g_ss = steady_state_gain(self.ss, self.kf.q_noise, self.kf.r_noise, self.kf.h_mat)
        return self._g_ss

    def reset(self) -> None:
        self.kf = replace(self._kf0)
        self.u_prev = 0.0

    def step(self, z: float) -> float:
        return controller_step(self, z)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "group": self.group,
            "output": self.output,
            "input": self.input,
            "residue": self.loop.residue,
            "order": self.order,
            "K": self.lqr.gain.ravel().tolist(),
            "P": self.lqr.riccati.tolist(),
            "rho": self.lqr.rho,
            "converged": self.lqr.converged,
            "u_limit": self.u_limit,
            "kf": {"Q": self.kf.q_noise.tolist(), "R": self.kf.r_noise, "H": self.kf.h_mat.ravel().tolist()},
            "ss": self.ss.to_dict(),
        }
        if timing:
            d["elapsed_s"] = self.elapsed
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "WacController":
        ss = StateSpace.from_dict(d["ss"])
        p = ss.order
        lqr = LqrSolution(np.array(d["K"], dtype=float).reshape(1, p), np.array(d["P"], dtype=float).reshape(p, p),
                          float(d["rho"]), 0, bool(d.get("converged", True)))
        kfd = d["kf"]
        kf = KalmanState.initial(ss, np.array(kfd["Q"], dtype=float), float(kfd["R"]), kfd["H"])
        loop = LoopChoice(int(d["group"]), int(d["output"]), int(d["input"]), float(d.get("residue", 1.0)))
        return cls(loop, ss, lqr, kf, float(d.get("u_limit", U_LIMIT)), float(d.get("elapsed_s", 0.0)))


def controller_step(c: WacController, z: float) -> float:
    """Predict with the previous output, correct with ``z``, emit the
    saturated LQR output."""
    kf = kalman_predict(c.kf, c.ss, c.u_prev)
    kf = replace(kf, gain=kalman_gain(kf))
    c.kf = kalman_correct(kf, z)
    u = float(-(c.lqr.gain @ c.kf.x_hat)[0])
    u = float(np.clip(u, -c.u_limit, c.u_limit))
    c.u_prev = u
    return u


def synthesize(model, loop: LoopChoice, rho: float = RHO, q_noise=Q_NOISE, r_noise: float = R_NOISE,
               u_limit: float = U_LIMIT) -> WacController:
    """Realize the loop, solve the LQR and initialize the estimator."""
    t0 = time.perf_counter()
    ss = realize(model, (loop.output, loop.input))
    lqr = dlqr(ss, rho)
    kf = KalmanState.initial(ss, q_noise, r_noise)
    elapsed = time.perf_counter() - t0
    return WacController(loop, ss, lqr, kf, u_limit, elapsed)


def controllers_to_json(controllers, timing: bool = False) -> str:
    return json.dumps({"controllers": [c.to_dict(timing) for c in controllers]}, indent=2)


def controllers_from_dict(d: Mapping) -> list[WacController]:
    items = d["controllers"] if "controllers" in d else [d]
    return [WacController.from_dict(x) for x in items]


__all__ = [
    "StateSpace", "realize_tf", "realize", "LqrSolution", "riccati_step", "dlqr", "KalmanState",
    "kalman_predict", "kalman_gain", "kalman_correct", "steady_state_gain", "WacController",
    "controller_step", "synthesize", "controllers_to_json", "controllers_from_dict", "ArxCommonDen",
]
