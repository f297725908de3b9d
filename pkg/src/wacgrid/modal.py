"""Modal analysis of the identified model: partial fractions, the matched
z -> s map, order reduction, dominant-mode search and residue-based loop
selection.

All transfer functions share the model's denominator, so one eigenvalue
problem gives the poles of every pair. With w = z^-1 a pair is
G(z) = n(w) / a(w); its expansion is

    G(z) = sum_j r_j / (z - p_j) + sum_i d_i z^-i

where the finite FIR part ``d`` absorbs any pole at z = 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.polynomial import polynomial as P

from .sysid import ArxCommonDen, pair_key, parse_pair

log = logging.getLogger(__name__)

INTER_AREA_BAND = (0.1, 0.8)
REPEAT_TOL = 1e-7
REJECT_BELOW = 0.05
_REAL_TOL = 1e-10


# -- pole bookkeeping --------------------------------------------------------

def _conjugate_closed(poles: np.ndarray) -> np.ndarray:
    """Pair every complex pole with its exact conjugate.

    Output order: for each upper-half-plane pole ``u``, ``u`` then
    ``conj(u)``; real poles stand alone. Sorted by angle then magnitude.
    Falls back to the raw roots if the pairing is inconsistent.
    """
    poles = np.asarray(poles, dtype=complex)
    scale = np.maximum(np.abs(poles), 1.0)
    is_real = np.abs(poles.imag) <= _REAL_TOL * scale
    real = np.sort(poles[is_real].real)[::-1]
    upper = poles[~is_real & (poles.imag > 0)]
    lower = poles[~is_real & (poles.imag < 0)]
    if len(upper) != len(lower):
        return poles
    upper = upper[np.lexsort((-np.abs(upper), np.angle(upper)))]
    out = []
    for u in upper:
        out += [u, np.conj(u)]
    out += [complex(r) for r in real]
    return np.array(out, dtype=complex)


def _clusters(poles: np.ndarray, tol: float = REPEAT_TOL) -> list[list[int]]:
    """Indices of poles grouped by single-linkage within ``tol``."""
    n = len(poles)
    label = list(range(n))
    for i in range(n):
        for j in range(i + 1, n):
            if abs(poles[i] - poles[j]) <= tol:
                old, new = label[j], label[i]
                label = [new if x == old else x for x in label]
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(label):
        groups.setdefault(g, []).append(i)
    return list(groups.values())


def _contour_residue(fn, center: complex, radius: float, n_pts: int = 512) -> complex:
    """(1/2 pi i) of the contour integral of fn around a circle."""
    th = 2 * np.pi * np.arange(n_pts) / n_pts
    dz = radius * np.exp(1j * th)
    return complex(np.mean(fn(center + dz) * dz))


@dataclass(eq=False)
class PartialFractions:
    """Expansion of one rational function.

    ``poles``/``residues`` pair one-to-one; ``multiplicity`` > 1 marks a
    cluster of near-repeated poles merged into one entry carrying the
    cluster's summed residue. ``direct`` is the polynomial part.
    """

    poles: np.ndarray
    residues: np.ndarray
    direct: np.ndarray
    multiplicity: np.ndarray


def _expand(fn, poles, residue_at, repeat_tol):
    """Shared pole clustering + residue evaluation."""
    poles = _conjugate_closed(poles)
    groups = _clusters(poles, repeat_tol)
    if any(len(g) > 1 for g in groups):
        log.warning("near-repeated poles within %.1e merged; summed residues reported", repeat_tol)
    out_p, out_r, mult = [], [], []
    for g in groups:
        c = complex(np.mean(poles[g]))
        if len(g) == 1:
            r = residue_at(poles[g[0]])
        else:
            others = np.delete(poles, g)
            gap = np.min(np.abs(others - c)) if others.size else 1.0
            spread = max(np.max(np.abs(poles[g] - c)), 1e-12)
            r = _contour_residue(fn, c, max(min(0.5 * gap, 1e-3), 10 * spread))
        out_p.append(c)
        out_r.append(r)
        mult.append(len(g))
    p = np.array(out_p, dtype=complex)
    r = np.array(out_r, dtype=complex)
    # exact conjugate symmetry of residues for real-coefficient functions
    for i, pi in enumerate(p):
        if pi.imag < 0:
            j = int(np.argmin(np.abs(p - np.conj(pi))))
            if j != i and abs(p[j] - np.conj(pi)) <= 1e-12 * max(1.0, abs(pi)):
                r[i] = np.conj(r[j])
        elif pi.imag == 0:
            r[i] = complex(r[i].real, 0.0)
    return p, r, np.array(mult)


def rational_partial_fractions(num, den, repeat_tol: float = REPEAT_TOL) -> PartialFractions:
    """Partial fractions of num(x)/den(x), coefficients in descending powers.

    The variable is generic (s or z). Poles are companion-matrix roots of
    ``den``; each residue is rem(p)/den'(p) where rem is the remainder of
    num / den. ``direct`` holds the quotient in descending powers.
    """
    num = np.trim_zeros(np.atleast_1d(np.asarray(num, dtype=float)), "f")
    den = np.trim_zeros(np.atleast_1d(np.asarray(den, dtype=float)), "f")
    if den.size == 0:
        raise ValueError("zero denominator")
    if num.size == 0:
        num = np.zeros(1)
    if den.size == 1:
        return PartialFractions(np.empty(0, complex), np.empty(0, complex), num / den[0], np.empty(0, int))
    q, rem = np.polydiv(num, den) if num.size >= den.size else (np.zeros(1), num)
    dder = np.polyder(den)

    def fn(x):
        return np.polyval(rem, x) / np.polyval(den, x)

    p, r, mult = _expand(fn, np.roots(den), lambda pj: np.polyval(rem, pj) / np.polyval(dder, pj), repeat_tol)
    return PartialFractions(p, r, np.atleast_1d(q), mult)


def z_partial_fractions(num_w, den_w, repeat_tol: float = REPEAT_TOL) -> PartialFractions:
    """Expansion of G(z) = n(w)/a(w), w = z^-1, coefficients ascending in w.

    Returns residues over (z - p_j) for the nonzero roots of the
    denominator and ``direct`` as ascending coefficients of z^-1.
    """
    n = np.atleast_1d(np.asarray(num_w, dtype=float))
    a = np.atleast_1d(np.asarray(den_w, dtype=float))
    a = np.trim_zeros(a, "b")
    if a.size == 0 or a[0] == 0:
        raise ValueError("denominator must have a nonzero constant term")
    n, a = n / a[0], a / a[0]
    if a.size == 1:
        return PartialFractions(np.empty(0, complex), np.empty(0, complex), n.copy(), np.empty(0, int))
    q, _ = P.polydiv(n, a) if n.size >= a.size else (np.zeros(1), n)
    aprime = P.polyder(a)

    def fn(z):
        w = 1.0 / z
        return P.polyval(w, n) / P.polyval(w, a)

    def residue_at(pj):
        # c_j over (1 - p_j w) becomes r_j = c_j p_j over (z - p_j)
        c = -pj * P.polyval(1.0 / pj, n) / P.polyval(1.0 / pj, aprime)
        return c * pj

    # z^k a(1/z) has descending coefficients equal to a's ascending ones
    p, r, mult = _expand(fn, np.roots(a), residue_at, repeat_tol)
    direct = np.zeros(max(q.size, 1))
    direct[1:] = np.atleast_1d(q)[1:]
    direct[0] = n[0]  # G(z -> inf) = n(0)
    return PartialFractions(p, r, direct, mult)


def eval_expansion(pf: PartialFractions, z) -> np.ndarray:
    """Sum of pole terms plus the FIR part at points ``z``."""
    z = np.asarray(z, dtype=complex)
    g = np.zeros_like(z)
    for p, r in zip(pf.poles, pf.residues):
        g = g + r / (z - p)
    return g + P.polyval(1.0 / z, pf.direct)


# -- modal decomposition -----------------------------------------------------

@dataclass(frozen=True)
class ModeDescriptor:
    frequency: float
    damping_ratio: float
    pole_index: int

    def to_dict(self) -> dict:
        return {"hz": self.frequency, "zeta": self.damping_ratio}


def to_continuous(z_poles, residues, ts: float):
    """Matched map s = ln(z)/ts, residues scaled by 1/ts."""
    if not ts > 0:
        raise ValueError("sample period must be positive")
    z = np.asarray(z_poles, dtype=complex)
    if np.any(z == 0):
        raise ValueError("pole at z = 0 has no continuous image")
    if np.any((z.real < 0) & (np.abs(z.imag) <= _REAL_TOL * np.abs(z))):
        log.warning("pole on the negative real axis: principal-branch logarithm used")
    return np.log(z) / ts, np.asarray(residues, dtype=complex) / ts


def mode_of(s: complex, index: int) -> ModeDescriptor:
    mag = abs(s)
    zeta = float(-s.real / mag) if mag > 0 else 1.0
    return ModeDescriptor(float(abs(s.imag) / (2 * np.pi)), zeta, index)


@dataclass(eq=False)
class ModalDecomposition:
    """Shared poles and per-pair residues of a common-denominator model.

    ``residues[i, j, l]`` is the z-domain residue of G_{outputs[i],
    inputs[j]} at ``z_poles[l]``; absent pairs hold 0. ``direct`` maps a
    pair to its FIR coefficients (ascending powers of z^-1).
    """

    z_poles: np.ndarray
    residues: np.ndarray
    direct: dict
    ts: float
    outputs: list
    inputs: list
    multiplicity: np.ndarray = field(default=None)
    order_k: int = 0

    def __post_init__(self):
        if self.multiplicity is None:
            self.multiplicity = np.ones(len(self.z_poles), dtype=int)

    @property
    def s_poles(self) -> np.ndarray:
        return to_continuous(self.z_poles, np.zeros(len(self.z_poles)), self.ts)[0]

    @property
    def s_residues(self) -> np.ndarray:
        return self.residues / self.ts

    @property
    def pairs(self) -> list:
        return list(self.direct)

    def modes(self) -> list[ModeDescriptor]:
        return [mode_of(s, i) for i, s in enumerate(self.s_poles)]

    def index(self, pair) -> tuple[int, int]:
        return self.outputs.index(pair[0]), self.inputs.index(pair[1])

    def expansion(self, pair) -> PartialFractions:
        i, j = self.index(pair)
        return PartialFractions(self.z_poles, self.residues[i, j], self.direct[tuple(pair)], self.multiplicity)

    def freqresp(self, pair, z) -> np.ndarray:
        return eval_expansion(self.expansion(pair), z)

    def pole_strength(self) -> np.ndarray:
        """max over pairs of |r_mp(j)| for each pole."""
        if self.residues.size == 0:
            return np.zeros(len(self.z_poles))
        return np.max(np.abs(self.residues), axis=(0, 1))

    def to_dict(self) -> dict:
        return {
            "ts": self.ts,
            "outputs": list(self.outputs),
            "inputs": list(self.inputs),
            "poles": [[float(p.real), float(p.imag)] for p in self.z_poles],
            "modes": [m.to_dict() for m in self.modes()],
        }


def partial_fractions(model: ArxCommonDen, pair, repeat_tol: float = REPEAT_TOL) -> PartialFractions:
    """z-domain expansion of one identified pair."""
    num, den = model.tf(pair)
    return z_partial_fractions(num, den, repeat_tol)


def decompose(model: ArxCommonDen, repeat_tol: float = REPEAT_TOL) -> ModalDecomposition:
    """Partial fractions of every pair over the shared poles."""
    outputs, inputs = model.outputs, model.inputs
    expansions = {p: partial_fractions(model, p, repeat_tol) for p in model.pairs}
    first = next(iter(expansions.values()))
    poles, mult = first.poles, first.multiplicity
    res = np.zeros((len(outputs), len(inputs), len(poles)), dtype=complex)
    direct = {}
    for p, pf in expansions.items():
        if len(pf.poles) != len(poles) or not np.allclose(pf.poles, poles, rtol=0, atol=1e-12):
            raise RuntimeError("pairs of a common-denominator model disagree on poles")
        res[outputs.index(p[0]), inputs.index(p[1])] = pf.residues
        direct[p] = pf.direct
    return ModalDecomposition(poles, res, direct, model.ts, outputs, inputs, mult, model.order_k)


def reduce_order(decomp: ModalDecomposition, rel_threshold: float = 1e-3) -> ModalDecomposition:
    """Drop poles whose largest residue over all pairs is below
    ``rel_threshold`` times the global largest residue."""
    if not 0 < rel_threshold < 1:
        raise ValueError("rel_threshold must lie in (0, 1)")
    strength = decomp.pole_strength()
    if strength.size == 0:
        return decomp
    keep = strength >= rel_threshold * strength.max()
    # conjugates share |r| exactly, but guard against rounding splitting a pair
    for i, p in enumerate(decomp.z_poles):
        if p.imag != 0:
            j = int(np.argmin(np.abs(decomp.z_poles - np.conj(p))))
            keep[i] = keep[j] = keep[i] or keep[j]
    if not keep.any():
        keep[int(np.argmax(strength))] = True
    idx = np.flatnonzero(keep)
    return ModalDecomposition(decomp.z_poles[idx], decomp.residues[:, :, idx], dict(decomp.direct), decomp.ts,
                              list(decomp.outputs), list(decomp.inputs), decomp.multiplicity[idx],
                              decomp.order_k)


def reduced_model(decomp: ModalDecomposition) -> ArxCommonDen:
    """Rebuild a common-denominator ARX model from the retained poles.

    Exact when every FIR part is of the form d_1 z^-1, the case for models
    with the one-sample input delay: with w = z^-1,
    G = w [sum_l r_l prod_{i!=l} (1 - p_i w) + d_1 prod_i (1 - p_i w)] / prod_i (1 - p_i w).
    """
    poles = decomp.z_poles
    p = len(poles)
    if p == 0:
        raise ValueError("no poles retained")
    num = {}
    for pair, d in decomp.direct.items():
        d = np.asarray(d, dtype=float)
        if (d.size and d[0] != 0) or np.any(d[2:] != 0):
            raise ValueError(f"pair {pair}: FIR part {d} cannot be carried by a reduced ARX model")
        i, j = decomp.index(pair)
        b = np.zeros(p + 1, dtype=complex)
        for l in range(p):
            b[:p] += decomp.residues[i, j, l] * np.atleast_1d(np.poly(np.delete(poles, l)))
        if d.size > 1:
            b += d[1] * np.poly(poles)
        num[pair] = np.real(b)
    return ArxCommonDen(p, np.real(np.poly(poles))[1:], num, decomp.ts, list(decomp.direct))


def dominant_mode(decomp: ModalDecomposition, band=INTER_AREA_BAND) -> ModeDescriptor:
    """Least-damped oscillatory pole with frequency inside ``band`` (Hz)."""
    cands = [m for m, s in zip(decomp.modes(), decomp.s_poles)
             if s.imag > 0 and band[0] <= m.frequency <= band[1]]
    if not cands:
        raise ValueError(f"no oscillatory pole in the {band[0]}-{band[1]} Hz band: no inter-area mode identified")
    return min(cands, key=lambda m: (m.damping_ratio, m.pole_index))


# -- residues and loop selection ---------------------------------------------

@dataclass(eq=False)
class ResidueMatrix:
    """|residue| per (output, input) at one mode, normalized to global max 1.

    A tie at the maximum keeps 1.0 only at the lowest (output, input) index;
    the other tied entries are set to the next float below 1.0.
    """

    values: np.ndarray
    mode: ModeDescriptor
    outputs: list
    inputs: list

    @property
    def argmax(self) -> tuple[int, int]:
        i, j = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return self.outputs[i], self.inputs[j]

    def value(self, output: int, inp: int) -> float:
        return float(self.values[self.outputs.index(output), self.inputs.index(inp)])


def _normalize(mags: np.ndarray) -> np.ndarray:
    top = mags.max() if mags.size else 0.0
    if top <= 0:
        return np.zeros_like(mags)
    vals = mags / top
    first = np.unravel_index(int(np.argmax(mags)), mags.shape)
    tied = vals >= 1.0
    tied[first] = False
    vals[tied] = np.nextafter(1.0, 0.0)
    vals[first] = 1.0
    return vals


def residue_matrix_at_mode(decomp: ModalDecomposition, mode: ModeDescriptor) -> ResidueMatrix:
    if not 0 <= mode.pole_index < len(decomp.z_poles):
        raise IndexError(f"mode references pole {mode.pole_index}, model has {len(decomp.z_poles)}")
    mags = np.abs(decomp.residues[:, :, mode.pole_index])
    return ResidueMatrix(_normalize(mags), mode, list(decomp.outputs), list(decomp.inputs))


@dataclass(frozen=True)
class LoopChoice:
    group: int
    output: int
    input: int
    residue: float

    def to_dict(self) -> dict:
        return {"group": self.group, "output": self.output, "input": self.input, "residue": self.residue}


@dataclass(eq=False)
class ControlLoopSelection:
    loops: list
    rejected: list
    matrix: ResidueMatrix | None = None

    def to_dict(self) -> dict:
        d = {
            "loops": [c.to_dict() for c in self.loops],
            "rejected": [c.to_dict() for c in self.rejected],
        }
        if self.matrix is not None:
            d = {
                "mode": self.matrix.mode.to_dict(),
                "pole_index": self.matrix.mode.pole_index,
                "outputs": list(self.matrix.outputs),
                "inputs": list(self.matrix.inputs),
                "residue_matrix": [[float(v) for v in row] for row in self.matrix.values],
                **d,
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ControlLoopSelection":
        mk = lambda e: LoopChoice(int(e["group"]), int(e["output"]), int(e["input"]), float(e["residue"]))
        rm = None
        if "residue_matrix" in d:
            mode = ModeDescriptor(float(d["mode"]["hz"]), float(d["mode"]["zeta"]), int(d.get("pole_index", 0)))
            rm = ResidueMatrix(np.array(d["residue_matrix"], dtype=float), mode,
                               [int(x) for x in d["outputs"]], [int(x) for x in d["inputs"]])
        return cls([mk(e) for e in d["loops"]], [mk(e) for e in d["rejected"]], rm)


def _group_map(grouping) -> dict[int, list[int]]:
    if hasattr(grouping, "groups"):
        return {int(g): list(v) for g, v in grouping.groups.items()}
    return {int(g): list(v) for g, v in dict(grouping).items()}


def select_loops(rm: ResidueMatrix, grouping, reject_below: float = REJECT_BELOW) -> ControlLoopSelection:
    """Strongest within-group (output, input) pair for every group.

    ``grouping`` is a CoherencyGrouping or a mapping group -> machines.
    Groups whose best residue is below ``reject_below`` (or that contain no
    measured output and probed input) are reported in ``rejected``.
    """
    groups = _group_map(grouping)
    covered = {mach for v in groups.values() for mach in v}
    missing = (set(rm.outputs) | set(rm.inputs)) - covered
    if missing:
        raise ValueError(f"grouping does not cover machines {sorted(missing)}")
    loops, rejected = [], []
    for g in sorted(groups):
        members = set(groups[g])
        best = None
        for i, m in enumerate(rm.outputs):
            if m not in members:
                continue
            for j, p in enumerate(rm.inputs):
                if p in members and (best is None or rm.values[i, j] > best.residue):
                    best = LoopChoice(g, m, p, float(rm.values[i, j]))
        if best is None:
            rejected.append(LoopChoice(g, 0, 0, 0.0))
        elif best.residue < reject_below:
            rejected.append(best)
        else:
            loops.append(best)
    return ControlLoopSelection(loops, rejected, rm)


def analyze(model: ArxCommonDen, grouping, band=INTER_AREA_BAND, reduce_threshold: float = 1e-3,
            reject_below: float = REJECT_BELOW):
    """decompose -> reduce -> dominant mode -> residue matrix -> loops."""
    full = decompose(model)
    red = reduce_order(full, reduce_threshold)
    mode = dominant_mode(red, band)
    rm = residue_matrix_at_mode(red, mode)
    return red, select_loops(rm, grouping, reject_below)


__all__ = [
    "INTER_AREA_BAND", "PartialFractions", "rational_partial_fractions", "z_partial_fractions",
    "eval_expansion", "ModeDescriptor", "to_continuous", "ModalDecomposition", "partial_fractions",
    "decompose", "reduce_order", "reduced_model", "dominant_mode", "ResidueMatrix",
    "residue_matrix_at_mode", "LoopChoice", "ControlLoopSelection", "select_loops", "analyze",
    "pair_key", "parse_pair",
]
