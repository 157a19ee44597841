"""Dense linear algebra, clustering primitives and seeded randomness.

All public operations work on float64 numpy arrays (2-D arrays play the
role of matrices, row-major) and guarantee finite outputs. Randomness
always flows through :class:`RngStream`, a thin wrapper over the Philox
counter-based generator, so that every run is reproducible from a seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ArgumentError, ContractError, NumericalError

__all__ = [
    "RngStream",
    "as_matrix",
    "svd",
    "sym_eig",
    "kmeans",
    "cosine_similarity",
    "softmax",
    "gumbel_noise",
    "gumbel_softmax",
]

# Uniform draws are clipped into the open interval before the double log.
_UNIFORM_EPS = 1e-12


def _stable_hash64(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Seeded stream of pseudo-random numbers (Philox, 64-bit counter-based).

    The same seed and the same call sequence always produce the same
    outputs. ``fork`` derives an independent child stream from a tag, so
    concurrent consumers (per-k cluster searches, per-run seeds) never
    share state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def fork(self, tag) -> "RngStream":
        return RngStream(_stable_hash64(self.seed, tag))

    def random(self, size=None):
        return self._gen.random(size=size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(loc=0.0, scale=scale, size=size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite float64 2-D array or raise ArgumentError."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ArgumentError(f"{name} must be nonempty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ArgumentError(f"{name} contains non-finite entries")
    return m


def _check_finite(a: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values produced by {context}")
    return a


def svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduced SVD: a == u @ diag(s) @ v.T with s sorted descending.

    u has orthonormal columns (d_out x k), v likewise (d_in x k),
    k = min(d_out, d_in). Non-convergence of the underlying LAPACK
    driver is reported as :class:`NumericalError` carrying the residual
    of a fallback reconstruction attempt.
    """
    m = as_matrix(a, "svd input")
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for shape {m.shape}: {exc}") from exc
    _check_finite(u, "svd")
    _check_finite(s, "svd")
    _check_finite(vh, "svd")
    return u, s, vh.T


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns. Inputs asymmetric beyond 1e-10 are rejected.
    """
    m = as_matrix(s, "sym_eig input")
    if m.shape[0] != m.shape[1]:
        raise ContractError(f"sym_eig needs a square matrix, got {m.shape}")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > 1e-10:
        raise ContractError(f"sym_eig input asymmetric: max |s - s.T| = {asym:.3e}")
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    _check_finite(vals, "sym_eig")
    _check_finite(vecs, "sym_eig")
    return vals, vecs


def _kmeans_pp_seeds(points: np.ndarray, k: int, rng: RngStream) -> list[int]:
    n = points.shape[0]
    seeds = [int(rng.integers(0, n))]
    d2 = np.sum((points - points[seeds[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # Duplicate points: force the lowest-index point not yet chosen.
            chosen = next(i for i in range(n) if i not in seeds)
        else:
            r = rng.random() * total
            chosen = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            chosen = min(chosen, n - 1)
        seeds.append(chosen)
        d2 = np.minimum(d2, np.sum((points - points[chosen]) ** 2, axis=1))
    return seeds


def kmeans(points, k: int, rng: RngStream, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding from the given stream.

    Nearest-centroid ties break toward the lowest centroid index. If a
    cluster empties, it is refilled with its original seed point when
    that point's current cluster keeps other members, otherwise with the
    point farthest from its own centroid (ties toward the lowest point
    index). On all-identical inputs this pins the documented degenerate
    result: every label 0 except the forced extra seeds.
    """
    pts = as_matrix(points, "kmeans points")
    n = pts.shape[0]
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if k > n:
        raise ArgumentError(f"k = {k} exceeds point count {n}")

    seeds = _kmeans_pp_seeds(pts, k, rng)
    centroids = pts[seeds].copy()
    labels = np.full(n, -1, dtype=np.int64)
    prev_objective = np.inf
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)  # argmin prefers the lowest index on ties

        repaired = False
        for j in range(k):
            if np.any(new_labels == j):
                continue
            repaired = True
            seed_pt = seeds[j]
            donor_cluster = new_labels[seed_pt]
            if np.sum(new_labels == donor_cluster) > 1:
                new_labels[seed_pt] = j
            else:
                own = d2[np.arange(n), new_labels]
                order = np.lexsort((np.arange(n), -own))
                for cand in order:
                    if np.sum(new_labels == new_labels[cand]) > 1:
                        new_labels[cand] = j
                        break

        for j in range(k):
            centroids[j] = pts[new_labels == j].mean(axis=0)
        objective = float(np.sum((pts - centroids[new_labels]) ** 2))
        if not repaired and objective > prev_objective + 1e-12:
            raise NumericalError("kmeans objective increased")
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        prev_objective = objective
        if converged:
            break
    return labels, centroids


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    uu = np.asarray(u, dtype=np.float64).ravel()
    vv = np.asarray(v, dtype=np.float64).ravel()
    if uu.shape != vv.shape:
        raise ArgumentError(f"cosine_similarity length mismatch: {uu.shape} vs {vv.shape}")
    nu = float(np.linalg.norm(uu))
    nv = float(np.linalg.norm(vv))
    if nu == 0.0 or nv == 0.0:
        raise ArgumentError("cosine_similarity is undefined for zero-norm input")
    return float(np.clip(np.dot(uu, vv) / (nu * nv), -1.0, 1.0))


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax, stabilized by max-subtraction."""
    if temperature <= 0.0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64).ravel() / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_noise(rng: RngStream, size: int) -> np.ndarray:
    """Standard Gumbel draws, -log(-log(U)), with U clipped into (0, 1)."""
    u = np.clip(rng.random(size), _UNIFORM_EPS, 1.0 - _UNIFORM_EPS)
    return -np.log(-np.log(u))


def gumbel_softmax(
    logits,
    temperature: float,
    rng: RngStream | None = None,
    hard: bool = False,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Gumbel-softmax sample over the categories of ``logits``.

    Soft mode returns the relaxed probability vector
    softmax((logits + g) / temperature). Hard mode returns the one-hot
    vector at the soft argmax; the straight-through backward convention
    lives in the autograd op, this function only produces values.
    ``noise`` overrides the stream draw so decisions can be replayed.
    """
    if temperature <= 0.0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64).ravel()
    if noise is None:
        if rng is None:
            raise ArgumentError("gumbel_softmax needs an RngStream or explicit noise")
        noise = gumbel_noise(rng, z.size)
    g = np.asarray(noise, dtype=np.float64).ravel()
    if g.shape != z.shape:
        raise ArgumentError(f"noise length {g.shape} does not match logits {z.shape}")
    soft = softmax(z + g, temperature)
    if not hard:
        return soft
    one_hot = np.zeros_like(soft)
    one_hot[int(np.argmax(soft))] = 1.0
    return one_hot
