"""Spherical k-means and von Mises-Fisher sampling on the unit sphere.

The k-means here maximizes cosine similarity: assignment is argmax z . mu,
the centroid update is the l2-normalized cluster mean (the optimizer of the
cosine objective over unit vectors), and the reported objective is
sum_i (1 - z_i . mu_{a(i)}), which is non-increasing across iterations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KMeansResult", "VMFParams", "spherical_kmeans", "assign", "vmf_sample",
    "save_centroids_csv", "load_centroids_csv",
]

_UNIT_TOL = 1e-6


def _check_unit_rows(z, what):
    norms = np.linalg.norm(z, axis=1)
    if not np.all(np.abs(norms - 1.0) < _UNIT_TOL):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"{what} must have unit rows; row {bad} has norm {norms[bad]:.6g}")


@dataclass
class KMeansResult:
    centroids: np.ndarray        # K x d, unit rows
    labels: np.ndarray           # n, ints in [0, K)
    objective: float             # sum of (1 - cos) to assigned centroid
    n_iter: int
    converged: bool
    history: list = field(default_factory=list)  # objective after each assignment


def assign(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid by cosine; ties go to the lowest index."""
    return np.argmax(z @ centroids.T, axis=1)


def _objective(z, centroids, labels):
    cos = np.einsum("ij,ij->i", z, centroids[labels])
    return float((1.0 - cos).sum())


def _plus_plus_init(z, k, rng):
    """k-means++ seeding with (1 - cos)^2 distance weights."""
    n = z.shape[0]
    centers = np.empty((k, z.shape[1]))
    centers[0] = z[rng.integers(n)]
    best_cos = z @ centers[0]
    for j in range(1, k):
        w = np.maximum(1.0 - best_cos, 0.0) ** 2
        total = w.sum()
        if total > 0:
            idx = rng.choice(n, p=w / total)
        else:
            idx = int(rng.integers(n))  # all points coincide with chosen seeds
        centers[j] = z[idx]
        best_cos = np.maximum(best_cos, z @ centers[j])
    return centers


def _update_centroids(z, labels, k, centroids):
    """Normalized per-cluster means; empty clusters re-seed to worst-fit points."""
    d = z.shape[1]
    new = np.zeros((k, d))
    counts = np.bincount(labels, minlength=k)
    np.add.at(new, labels, z)
    nonempty = counts > 0
    norms = np.linalg.norm(new, axis=1)
    # a cluster mean can only vanish in degenerate antipodal ties; keep the old
    # centroid there rather than dividing by zero
    usable = nonempty & (norms > 1e-12)
    new[usable] /= norms[usable, None]
    new[~usable] = centroids[~usable]

    empties = np.flatnonzero(~nonempty)
    if empties.size:
        fit = np.einsum("ij,ij->i", z, new[labels])
        order = np.argsort(fit, kind="stable")  # worst fit first
        for slot, cluster in enumerate(empties):
            new[cluster] = z[order[slot % len(order)]]
    return new


def _lloyd(z, k, rng, max_iter, tol):
    centroids = _plus_plus_init(z, k, rng)
    labels = assign(z, centroids)
    obj = _objective(z, centroids, labels)
    history = [obj]
    converged = False
    n_iter = 0
    for _ in range(max_iter):
        n_iter += 1
        centroids = _update_centroids(z, labels, k, centroids)
        new_labels = assign(z, centroids)
        new_obj = _objective(z, centroids, new_labels)
        history.append(new_obj)
        if new_obj > obj + 1e-9:
            raise AssertionError(
                f"spherical k-means objective increased: {obj:.12g} -> {new_obj:.12g}")
        stable = bool(np.array_equal(new_labels, labels))
        improved = obj - new_obj
        labels, obj = new_labels, new_obj
        if stable or improved < tol:
            converged = True
            break
    return KMeansResult(centroids=centroids, labels=labels, objective=obj,
                        n_iter=n_iter, converged=converged, history=history)


def spherical_kmeans(z: np.ndarray, k: int, seed: int,
                     max_iter: int = 100, tol: float = 1e-6,
                     n_init: int = 24) -> KMeansResult:
    """Best of n_init Lloyd runs, each from its own k-means++ start.

    Deterministic for a given seed (the restarts share one generator). Each
    run stops when its assignment is stable or the objective improves by
    less than tol; the winner's per-assignment objective sequence is
    returned and is asserted non-increasing.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("spherical_kmeans expects a non-empty n x d matrix")
    n = z.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n, got k={k} for n={n}")
    if max_iter < 1 or n_init < 1:
        raise ValueError("max_iter and n_init must be positive")
    _check_unit_rows(z, "spherical_kmeans input")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(z, k, rng, max_iter, tol)
        if best is None or res.objective < best.objective:
            best = res
    return best


@dataclass(frozen=True)
class VMFParams:
    """Mean direction (unit vector, d >= 2) and concentration kappa >= 0."""
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mu must be a vector of dimension >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > _UNIT_TOL:
            raise ValueError("mu must be unit length")
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError("kappa must be finite and >= 0")


def _sample_cosines(kappa, d, n, rng):
    """Rejection-sample the component along mu, density prop. to
    exp(kappa w) (1 - w^2)^((d-3)/2) on [-1, 1]."""
    b = (d - 1) / (2 * kappa + np.sqrt(4 * kappa ** 2 + (d - 1) ** 2))
    x0 = (1 - b) / (1 + b)
    c = kappa * x0 + (d - 1) * np.log(1 - x0 ** 2)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = n - filled
        zb = rng.beta((d - 1) / 2.0, (d - 1) / 2.0, size=m)
        w = (1 - (1 + b) * zb) / (1 - (1 - b) * zb)
        u = rng.random(m)
        ok = kappa * w + (d - 1) * np.log1p(-x0 * w) - c >= np.log(u)
        take = w[ok]
        out[filled:filled + take.size] = take
        filled += take.size
    return out


def vmf_sample(params: VMFParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n unit vectors; kappa = 0 degenerates to the uniform sphere."""
    if n < 0:
        raise ValueError("n must be non-negative")
    mu = params.mu
    d = mu.size
    if n == 0:
        return np.zeros((0, d))
    if params.kappa == 0:
        g = rng.standard_normal((n, d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    w = _sample_cosines(params.kappa, d, n, rng)
    g = rng.standard_normal((n, d))
    g -= np.outer(g @ mu, mu)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    x = g * np.sqrt(np.maximum(1.0 - w ** 2, 0.0))[:, None] + w[:, None] * mu
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def save_centroids_csv(path, centroids: np.ndarray) -> None:
    centroids = np.asarray(centroids, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k"] + [f"dim{j}" for j in range(centroids.shape[1])])
        for i, row in enumerate(centroids):
            writer.writerow([i] + [f"{v:.17g}" for v in row])


def load_centroids_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty centroid file")
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])
