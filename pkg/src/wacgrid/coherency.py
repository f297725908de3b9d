"""Measurement-based coherency grouping.

Machines are the data points: each column of a speed-deviation window is one
point in R^n_samples. The pipeline is Gaussian similarity on a landmark
subset, Nystrom completion of the degree vector, a one-shot orthogonalized
spectral embedding of the normalized Laplacian, and k-means on the
row-normalized eigenvector matrix.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .measurements import MeasurementWindow

A_REG = 1e-10
COND_LIMIT = 1e12
EIG_TOL = 1e-8
KMEANS_MAX_ITER = 300
KMEANS_N_INIT = 10


@dataclass(eq=False)
class SimilarityFactors:
    """Landmark blocks of the similarity matrix.

    ``order`` lists point indices with the ``l`` landmarks first; ``a_block``
    and ``b_block`` are expressed in that order. The (n-l)x(n-l) block is
    never formed.
    """

    a_block: np.ndarray
    b_block: np.ndarray
    sigma: float
    l: int
    n: int
    order: np.ndarray
    squared: bool = False

    @property
    def landmarks(self) -> np.ndarray:
        return self.order[: self.l]


@dataclass(eq=False)
class SpectralEmbedding:
    u_rows: np.ndarray
    eigenvalues: np.ndarray
    degree: np.ndarray
    all_eigenvalues: np.ndarray = field(default_factory=lambda: np.empty(0))
    zero_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def degenerate(self) -> bool:
        return self.zero_rows.size > 0

    def eigengap_k(self) -> int:
        """Cluster count suggested by the largest gap in the Laplacian spectrum
        (reported only; never applied automatically)."""
        ev = self.all_eigenvalues if self.all_eigenvalues.size else self.eigenvalues
        if ev.size < 2:
            return 1
        return int(np.argmax(np.diff(ev)) + 1)


@dataclass(eq=False)
class CoherencyGrouping:
    assignment: dict
    k: int
    centers: np.ndarray
    inertia: float
    elapsed: float = 0.0
    embedding: SpectralEmbedding | None = None
    sigma: float | None = None
    l: int | None = None
    seed: int | None = None
    empty_groups: tuple = ()
    iterations: int = 0

    @property
    def groups(self) -> dict[int, list[int]]:
        out = {g: [] for g in range(1, self.k + 1)}
        for mach, g in sorted(self.assignment.items()):
            out[g].append(mach)
        return out

    def partition(self) -> frozenset:
        return frozenset(frozenset(v) for v in self.groups.values() if v)

    def group_of(self, machine: int) -> int:
        return self.assignment[machine]

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "k": self.k,
            "groups": {str(g): v for g, v in self.groups.items()},
            "eigenvalues": [] if self.embedding is None else [float(x) for x in self.embedding.eigenvalues],
            "sigma": self.sigma,
            "l": self.l,
            "seed": self.seed,
        }
        if timing:
            d["elapsed_s"] = self.elapsed
        if self.embedding is not None:
            d["eigengap_k"] = self.embedding.eigengap_k()
        if self.empty_groups:
            d["empty_groups"] = list(self.empty_groups)
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CoherencyGrouping":
        assignment = {int(mach): int(g) for g, ms in d["groups"].items() for mach in ms}
        k = int(d["k"])
        return cls(assignment, k, np.zeros((k, 0)), 0.0, d.get("elapsed_s", 0.0), None,
                   d.get("sigma"), d.get("l"), d.get("seed"))


def _pairwise(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of x and rows of y."""
    d2 = np.sum(x**2, 1)[:, None] + np.sum(y**2, 1)[None, :] - 2 * x @ y.T
    return np.sqrt(np.maximum(d2, 0.0))


def kernel(dist: np.ndarray, sigma: float, squared: bool = False) -> np.ndarray:
    """exp(-||xi - xj|| / (2 sigma^2)); the exponent uses the squared norm when ``squared``."""
    e = dist**2 if squared else dist
    return np.exp(-e / (2.0 * sigma**2))


def median_sigma(dist: np.ndarray, squared: bool = False) -> float:
    """Scale so that a median-distance pair gets similarity exp(-1).

    For the squared kernel this is median/sqrt(2); for the unsquared kernel it
    is sqrt(median/2). Either way sigma tracks the data scale so the grouping
    is invariant to a common gain on all columns.
    """
    d = dist[dist > 0]
    if d.size == 0:
        return 1.0
    med = float(np.median(d))
    return med / np.sqrt(2.0) if squared else float(np.sqrt(med / 2.0))


def _points(window) -> np.ndarray:
    if isinstance(window, MeasurementWindow):
        return np.asarray(window.samples, dtype=float).T
    return np.asarray(window, dtype=float)


def similarity_factors(window, sigma: float | None = None, l: int | None = None, seed: int = 0,
                       squared: bool = False, landmarks=None) -> SimilarityFactors:
    """Landmark blocks A (l x l) and B (l x (n-l)).

    ``window`` is a MeasurementWindow (points = machine columns) or an
    (n_points, dim) array. Landmarks are the first ``l`` entries of a seeded
    permutation unless given explicitly.
    """
    x = _points(window)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two data points")
    if landmarks is not None:
        landmarks = np.asarray(landmarks, dtype=int)
        l = landmarks.size
        if len(set(landmarks.tolist())) != l or l < 1 or landmarks.min() < 0 or landmarks.max() >= n:
            raise ValueError("landmarks must be distinct valid point indices")
        rest = np.array([i for i in range(n) if i not in set(landmarks.tolist())], dtype=int)
        order = np.concatenate([landmarks, rest])
    else:
        l = n if l is None else int(l)
        if not 1 <= l <= n:
            raise ValueError(f"landmark count must satisfy 1 <= l <= n ({n}), got {l}")
        order = np.random.default_rng(seed).permutation(n)
    if sigma is not None and not sigma > 0:
        raise ValueError("sigma must be positive")
    xl, xr = x[order[:l]], x[order[l:]]
    dist_a = _pairwise(xl, xl)
    np.fill_diagonal(dist_a, 0.0)
    dist_b = _pairwise(xl, xr)
    if sigma is None:
        iu = np.triu_indices(l, 1)
        sigma = median_sigma(dist_a[iu] if l > 1 else dist_b.ravel(), squared)
    a = kernel(dist_a, sigma, squared)
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return SimilarityFactors(a, kernel(dist_b, sigma, squared), float(sigma), l, n, order, squared)


def _unpermute(f: SimilarityFactors, v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    out[f.order] = v
    return out


def _solve_a(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """A^-1 rhs; the 1e-10 ridge is added only when A is numerically singular
    (duplicate landmarks), so a well-posed block is solved exactly."""
    if np.linalg.cond(a) < COND_LIMIT:
        return np.linalg.solve(a, rhs)
    areg = a + A_REG * np.eye(a.shape[0])
    try:
        sol = np.linalg.solve(areg, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("landmark block singular after regularization") from exc
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("landmark block singular after regularization")
    return sol


def approximate_row_sums(f: SimilarityFactors) -> np.ndarray:
    """Row sums of the Nystrom-completed similarity, in original point order.

    Top (landmark) rows: A 1 + B 1. Remaining rows: B^T 1 + B^T A^-1 (B 1).
    """
    a, b = f.a_block, f.b_block
    b1 = b.sum(axis=1)
    top = a.sum(axis=1) + b1
    if b.shape[1] == 0:
        return _unpermute(f, top)
    bottom = b.sum(axis=0) + b.T @ _solve_a(a, b1)
    return _unpermute(f, np.concatenate([top, bottom]))


def _inv_sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T) + A_REG * np.eye(a.shape[0]))
    w = np.maximum(w, A_REG)
    return (v / np.sqrt(w)) @ v.T


def laplacian_embedding(f: SimilarityFactors, d, j: int) -> SpectralEmbedding:
    """Row-normalized eigenvectors of I - D^-1/2 S D^-1/2 for its ``j``
    smallest eigenvalues, using the one-shot Nystrom orthogonalization.

    With A_hat, B_hat the degree-scaled blocks, R = A_hat + A_hat^-1/2 B_hat
    B_hat^T A_hat^-1/2 = U L U^T gives orthonormal approximate eigenvectors
    [A_hat; B_hat^T] A_hat^-1/2 U L^-1/2 of the normalized similarity, whose
    eigenvalues are L; the Laplacian eigenvalues are 1 - L.
    """
    d = np.asarray(d, dtype=float)
    if d.shape != (f.n,):
        raise ValueError("degree vector length must equal the point count")
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ValueError("degree entries must be positive")
    if not 1 <= j <= f.l:
        raise ValueError(f"eigenvector count must satisfy 1 <= j <= l ({f.l}), got {j}")
    dp = d[f.order]
    s = 1.0 / np.sqrt(dp)
    sl, sr = s[: f.l], s[f.l:]
    a_hat = sl[:, None] * f.a_block * sl[None, :]
    b_hat = sl[:, None] * f.b_block * sr[None, :]
    a_is = _inv_sqrt_psd(a_hat)
    r = a_hat + a_is @ (b_hat @ b_hat.T) @ a_is
    lam, ur = np.linalg.eigh(0.5 * (r + r.T))
    # descending similarity eigenvalue == ascending Laplacian eigenvalue
    lam, ur = lam[::-1], ur[:, ::-1]
    lam_safe = np.where(lam > A_REG, lam, np.inf)
    v = np.vstack([a_hat, b_hat.T]) @ a_is @ ur / np.sqrt(lam_safe)
    v = _unpermute(f, v)
    lap = 1.0 - lam
    vj = v[:, :j]
    norms = np.linalg.norm(vj, axis=1)
    zero = np.flatnonzero(norms < 1e-300)
    u = np.divide(vj, norms[:, None], out=np.zeros_like(vj), where=norms[:, None] > 1e-300)
    return SpectralEmbedding(u, lap[:j].copy(), d.copy(), lap.copy(), zero)


def _kmeanspp(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot > 0:
            nxt = int(rng.choice(n, p=d2 / tot))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy()


def _assign(x, centers):
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1), d2


def _lloyd(x, centers, max_iter):
    labels, _ = _assign(x, centers)
    it = 0
    for it in range(1, max_iter + 1):
        for c in range(centers.shape[0]):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        new, _ = _assign(x, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    _, d2 = _assign(x, centers)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    return labels, centers, inertia, it


def kmeans(x, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER, init=None, n_init: int = KMEANS_N_INIT):
    """Plain Lloyd iteration from k-means++ seeds, best of ``n_init`` seedings.

    Returns ``(labels, centers, inertia, iterations, empty)`` with 0-based
    labels. All seedings draw from one generator seeded by ``seed``; the
    lowest inertia wins, the earliest seeding on ties. Ties in the
    nearest-center step go to the lowest center index; an empty cluster keeps
    its previous center and is reported in ``empty``. An explicit ``init``
    runs once from those centers.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("empty embedding")
    if not np.all(np.isfinite(x)):
        raise ValueError("embedding rows must be finite")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cluster count must satisfy 1 <= k <= n ({n}), got {k}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    starts = [np.array(init, dtype=float)] if init is not None else [_kmeanspp(x, k, rng) for _ in range(n_init)]
    best = None
    for c0 in starts:
        run = _lloyd(x, c0, max_iter)
        if best is None or run[2] < best[2]:
            best = run
    labels, centers, inertia, it = best
    empty = tuple(int(c) for c in range(k) if not np.any(labels == c))
    return labels, centers, inertia, it, empty


def kmeans_cluster(embedding: SpectralEmbedding, k: int, seed: int = 0, machines=None) -> CoherencyGrouping:
    """Cluster embedding rows; group ids are renumbered 1..k in order of the
    lowest machine id they contain (empty groups last)."""
    x = embedding.u_rows
    n = x.shape[0]
    machines = tuple(range(1, n + 1)) if machines is None else tuple(machines)
    labels, centers, inertia, it, empty = kmeans(x, k, seed)
    ranking = []
    for lab in labels[np.argsort(machines, kind="stable")]:
        if lab not in ranking:
            ranking.append(int(lab))
    ranking += [c for c in range(k) if c not in ranking]
    relabel = {old: new + 1 for new, old in enumerate(ranking)}
    assignment = {int(mach): relabel[int(lab)] for mach, lab in zip(machines, labels)}
    return CoherencyGrouping(
        assignment=assignment,
        k=k,
        centers=centers[ranking],
        inertia=inertia,
        embedding=embedding,
        empty_groups=tuple(sorted(relabel[c] for c in empty)),
        iterations=it,
        seed=seed,
    )


def default_landmarks(n: int, k: int) -> int:
    return min(n, max(2 * k, 8))


def group_machines(window: MeasurementWindow, k: int, sigma: float | None = None, l: int | None = None,
                   seed: int = 0, squared: bool = False, landmarks=None) -> CoherencyGrouping:
    """Similarity -> Nystrom degrees -> spectral embedding (j = k) -> k-means."""
    t0 = time.perf_counter()
    n = window.m
    if l is None and landmarks is None:
        l = default_landmarks(n, k)
    f = similarity_factors(window, sigma=sigma, l=l, seed=seed, squared=squared, landmarks=landmarks)
    d = approximate_row_sums(f)
    emb = laplacian_embedding(f, d, k)
    g = kmeans_cluster(emb, k, seed=seed, machines=window.machines)
    g.elapsed = time.perf_counter() - t0
    g.sigma, g.l = f.sigma, f.l
    return g
