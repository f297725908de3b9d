"""Common-denominator MIMO ARX identification by alternating least squares.

Every transfer function G_mp shares one denominator. With the convention
used throughout the package the difference equation of a pair is

    dw_m(j) = sum_{i=0..k} b_i u_p(j-1-i) - sum_{i=1..k} a_i dw_m(j-i)

i.e. G_mp(z) = z^-1 (b_0 + ... + b_k z^-k) / (1 + a_1 z^-1 + ... + a_k z^-k).
The numerator carries a one-sample delay: the exciter reference cannot move
rotor speed within the same sample.

Identification alternates a stacked denominator solve over all pairs with
per-pair numerator solves until the stacked equation residual falls below a
tolerance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .measurements import MeasurementWindow, ProbeSignal

log = logging.getLogger(__name__)

RIDGE = 1e-8
INIT_B0 = 1e-3


def pair_key(pair) -> str:
    return f"{pair[0]},{pair[1]}"


def parse_pair(key: str) -> tuple[int, int]:
    m, p = key.split(",")
    return int(m), int(p)


@dataclass(eq=False)
class ArxCommonDen:
    """Identified MIMO model: one shared denominator, one numerator per
    (output, input) pair."""

    order_k: int
    den: np.ndarray
    num: dict
    ts: float
    pairs: list
    fit: float = 0.0
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.den = np.asarray(self.den, dtype=float)
        self.num = {tuple(p): np.asarray(b, dtype=float) for p, b in self.num.items()}
        self.pairs = [tuple(p) for p in self.pairs]
        if self.den.shape != (self.order_k,):
            raise ValueError("denominator length must equal the model order")
        for p, b in self.num.items():
            if b.shape != (self.order_k + 1,):
                raise ValueError(f"numerator of pair {p} must have order_k + 1 coefficients")

    @property
    def outputs(self) -> list[int]:
        return sorted({m for m, _ in self.pairs})

    @property
    def inputs(self) -> list[int]:
        return sorted({p for _, p in self.pairs})

    @property
    def poles(self) -> np.ndarray:
        return np.roots(np.concatenate([[1.0], self.den])) if self.order_k else np.empty(0)

    @property
    def stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))

    def tf(self, pair) -> tuple[np.ndarray, np.ndarray]:
        """``(num, den)`` as ascending coefficients of z^-1."""
        return np.concatenate([[0.0], self.num[tuple(pair)]]), np.concatenate([[1.0], self.den])

    def freqresp(self, pair, z) -> np.ndarray:
        num, den = self.tf(pair)
        w = 1.0 / np.asarray(z, dtype=complex)
        return np.polyval(num[::-1], w) / np.polyval(den[::-1], w)

    def scaled_inputs(self, c: float) -> "ArxCommonDen":
        return ArxCommonDen(self.order_k, self.den, {p: c * b for p, b in self.num.items()}, self.ts,
                            self.pairs, self.fit, self.iterations, self.converged)

    def to_dict(self) -> dict:
        return {
            "order": self.order_k,
            "ts": self.ts,
            "den": [float(a) for a in self.den],
            "num": {pair_key(p): [float(b) for b in self.num[p]] for p in self.pairs},
            "fit": float(self.fit),
            "iterations": int(self.iterations),
            "stable": self.stable,
            "converged": bool(self.converged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArxCommonDen":
        num = {parse_pair(k): v for k, v in d["num"].items()}
        return cls(int(d["order"]), d["den"], num, float(d["ts"]), list(num), float(d.get("fit", 0.0)),
                   int(d.get("iterations", 0)), bool(d.get("converged", True)))


@dataclass(eq=False)
class Equation:
    """Rows of one data record for one output.

    ``x_num`` maps each pair contributing to this output to its input-lag
    matrix (N x (k+1)); ``x_den`` is the output-lag matrix (N x k) and
    ``x_his`` the target vector.
    """

    output: int
    x_his: np.ndarray
    x_den: np.ndarray
    x_num: dict


@dataclass(eq=False)
class RegressorSet:
    equations: list
    pairs: list
    order_k: int
    window_n: int
    sample_j: int
    ts: float

    @property
    def x_his(self) -> np.ndarray:
        return np.concatenate([e.x_his for e in self.equations])

    @property
    def x_den_basis(self) -> np.ndarray:
        return np.vstack([e.x_den for e in self.equations])

    def x_num(self, num: Mapping) -> np.ndarray:
        """Stacked numerator contribution for the given coefficients."""
        return np.concatenate([sum(u @ num[p] for p, u in e.x_num.items()) for e in self.equations])

    def residual(self, den, num) -> np.ndarray:
        """X_His - (X_Num + X_Den) with X_Den = -(output lags) a."""
        return self.x_his - (self.x_num(num) - self.x_den_basis @ np.asarray(den))


def lag_matrix(x: np.ndarray, j: int, n_rows: int, first_lag: int, n_lags: int) -> np.ndarray:
    """Rows r = 0..n_rows-1 hold x[j - r - first_lag - i] for i = 0..n_lags-1."""
    r = np.arange(n_rows)[:, None]
    i = np.arange(n_lags)[None, :]
    idx = j - r - first_lag - i
    if idx.size and idx.min() < 0:
        raise ValueError("insufficient samples for the requested window and order")
    return x[idx]


def _records(outputs, inputs):
    """Normalize to a list of (window, [probe, ...]) records."""
    if isinstance(outputs, MeasurementWindow):
        return [(outputs, list(inputs))]
    probes = {p.machine: p for p in inputs}
    recs = []
    for p, win in outputs.items():
        if p not in probes:
            raise ValueError(f"no probe signal for input machine {p}")
        recs.append((win, [probes[p]]))
    return recs


def build_regressors(outputs, inputs: Sequence[ProbeSignal], order_k: int, N: int | None = None,
                     output_ids: Sequence[int] | None = None, j: int | None = None) -> RegressorSet:
    """Lag matrices for every (output, input) pair.

    ``outputs`` is either one window recorded while all ``inputs`` were
    applied together (one equation per output, all inputs contributing), or a
    mapping ``input machine -> window`` of sequential experiments (one
    equation per pair). ``j`` is the index of the most recent target sample
    (default: last sample); rows run j, j-1, ..., j-N+1.
    """
    if order_k < 1:
        raise ValueError("model order must be >= 1")
    recs = _records(outputs, inputs)
    ts = recs[0][0].ts
    lengths = set()
    for win, probes in recs:
        for pr in probes:
            if len(pr) != win.n:
                raise ValueError(f"probe u{pr.machine} length {len(pr)} != response length {win.n}")
            if abs(pr.ts - win.ts) > 1e-12 or abs(win.ts - ts) > 1e-12:
                raise ValueError("probe and response sample periods differ")
        lengths.add(win.n)
    length = min(lengths)
    jj = length - 1 if j is None else int(j)
    n_avail = jj - order_k
    N = n_avail if N is None else int(N)
    if N < 1 or N > n_avail or jj >= length:
        raise ValueError(f"insufficient samples: need length >= N + order_k + 1 = {N + order_k + 1}, have {length}")

    eqs, pairs = [], []
    for win, probes in recs:
        outs = win.machines if output_ids is None else output_ids
        for m in outs:
            y = np.asarray(win.column(m))
            x_num = {}
            for pr in probes:
                x_num[(m, pr.machine)] = lag_matrix(pr.values, jj, N, 1, order_k + 1)
                pairs.append((m, pr.machine))
            eqs.append(Equation(m, y[jj - np.arange(N)], lag_matrix(y, jj, N, 1, order_k), x_num))
    if len(set(pairs)) != len(pairs):
        raise ValueError("each (output, input) pair must come from exactly one record")
    order = sorted(pairs)
    return RegressorSet(eqs, order, order_k, N, jj, ts)


def least_squares(x: np.ndarray, y: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """QR least squares; falls back to ridge-regularized normal equations
    (ridge scaled to the mean column energy) when x is rank deficient."""
    if x.shape[1] == 0:
        return np.zeros(0)
    q, r = np.linalg.qr(x)
    d = np.abs(np.diag(r))
    if d.size and d.min() > rcond * max(d.max(), 1e-300) and x.shape[0] >= x.shape[1]:
        return solve_triangular(r, q.T @ y)
    g = x.T @ x
    lam = RIDGE * max(np.trace(g) / g.shape[0], 1e-300)
    sol = np.linalg.solve(g + lam * np.eye(g.shape[0]), x.T @ y)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("rank deficiency persists after regularization")
    return sol


def solve_denominator(r: RegressorSet, current_num: Mapping) -> np.ndarray:
    """Stacked LS for a_1..a_k given the numerators."""
    rhs = r.x_his - r.x_num(current_num)
    return -least_squares(r.x_den_basis, rhs)


def solve_numerators(r: RegressorSet, den) -> dict:
    """Per-output LS for the numerators contributing to each equation."""
    den = np.asarray(den)
    out = {}
    k1 = r.order_k + 1
    for e in r.equations:
        rhs = e.x_his + e.x_den @ den
        keys = list(e.x_num)
        theta = least_squares(np.hstack([e.x_num[p] for p in keys]), rhs)
        for i, p in enumerate(keys):
            out[p] = theta[i * k1:(i + 1) * k1]
    return out


def initial_numerators(pairs, order_k: int) -> dict:
    b = np.zeros(order_k + 1)
    b[0] = INIT_B0
    return {p: b.copy() for p in pairs}


class _Anderson:
    """Type-II Anderson mixing for the fixed-point map a -> den(num(a))."""

    def __init__(self, memory: int):
        self.memory = memory
        self.xs, self.gs = [], []

    def reset(self):
        self.xs, self.gs = [], []

    def __call__(self, x, g):
        self.xs.append(x.copy())
        self.gs.append(g.copy())
        if len(self.xs) > self.memory + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        if len(self.xs) < 2:
            return g
        f = np.array([gi - xi for xi, gi in zip(self.xs, self.gs)])
        df = np.diff(f, axis=0).T
        dg = np.diff(np.array(self.gs), axis=0).T
        gamma, *_ = np.linalg.lstsq(df, f[-1], rcond=None)
        return g - dg @ gamma


def identify(outputs, inputs: Sequence[ProbeSignal], order_k: int = 10, N: int | None = None,
             tol: float = 1e-4, max_iter: int = 100, init_num: Mapping | None = None,
             output_ids: Sequence[int] | None = None, accelerate: bool = True) -> ArxCommonDen:
    """Alternate denominator and numerator solves until the stacked residual
    norm is at most ``tol``.

    Each iteration solves the stacked denominator problem for the current
    numerators, then every numerator for that denominator. With
    ``accelerate`` the denominator iterate is Anderson-mixed with its recent
    history before the numerator solve; the fixed point (the joint
    least-squares solution) is unchanged, but the linear convergence of plain
    alternation becomes near-exact within about ``order_k + 1`` iterations. A
    mixed step that raises the residual is discarded in favor of the plain one.

    The returned coefficients are those of the iteration with the smallest
    residual. If ``max_iter`` is reached first the model is still returned,
    with ``converged=False`` and a logged warning.
    """
    r = build_regressors(outputs, inputs, order_k, N, output_ids)
    num = initial_numerators(r.pairs, order_k) if init_num is None else {
        tuple(p): np.asarray(b, dtype=float) for p, b in init_num.items()}
    mixer = _Anderson(order_k) if accelerate else None
    best = (np.inf, None, None)
    history = []
    converged = False
    den_prev = None
    it = 0
    for it in range(1, max_iter + 1):
        den = solve_denominator(r, num)
        if mixer is not None and den_prev is not None:
            mixed = mixer(den_prev, den)
            num_mixed = solve_numerators(r, mixed)
            res_mixed = float(np.linalg.norm(r.residual(mixed, num_mixed)))
            if res_mixed <= best[0]:
                den = mixed
            else:
                mixer.reset()
        num = solve_numerators(r, den)
        res = float(np.linalg.norm(r.residual(den, num)))
        history.append(res)
        den_prev = den
        if res < best[0]:
            best = (res, den.copy(), {p: b.copy() for p, b in num.items()})
        if res <= tol:
            converged = True
            break
    if not converged:
        log.warning("identification stopped at max_iter=%d with residual %.3g > tol %.3g", max_iter, best[0], tol)
    model = ArxCommonDen(order_k, best[1], best[2], r.ts, r.pairs, best[0], it, converged, history)
    if not model.stable:
        log.warning("identified denominator has roots on or outside the unit circle")
    return model
