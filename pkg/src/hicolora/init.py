"""Adapter initialization strategies.

The semantic-enhanced SVD initializer decomposes a frozen weight,
rescales each singular value by ReLU(1 + lambda * relevance) where the
relevance is the best cosine match between the corresponding right
singular vector and the cluster centroids, splits the modulated
spectrum symmetrically into the two low-rank factors, and keeps the
residual as the layer's frozen base so the initialized layer reproduces
the original weight. Kaiming+zero, top-r (principal) and bottom-r
(minor) spectral initializers are provided for ablations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .numkit import RngStream, as_matrix, cosine_similarity, svd

logger = logging.getLogger(__name__)

SVD_FAMILY = ("semsvd", "pissa", "milora")
STRATEGIES = SVD_FAMILY + ("kaiming",)


@dataclass
class SemSvdFactors:
    u_r: np.ndarray
    sigma_r: np.ndarray
    v_r: np.ndarray
    relevance: np.ndarray
    s_e: np.ndarray
    w_res: np.ndarray
    lam: float

    def summary(self) -> dict:
        return {
            "sigma_r": [float(x) for x in self.sigma_r],
            "relevance": [float(x) for x in self.relevance],
            "s_e": [float(x) for x in self.s_e],
            "lambda": float(self.lam),
            "residual_fro_norm": float(np.linalg.norm(self.w_res)),
        }


@dataclass
class InitPair:
    a: np.ndarray  # r x d_in
    b: np.ndarray  # d_out x r
    base: np.ndarray | None  # frozen matrix the layer keeps (residual or original)
    strategy: str


def relevance_scores(v_r, centroids) -> np.ndarray:
    """Best cosine match of each right singular vector against the centroids."""
    v = as_matrix(v_r, "v_r")
    c = as_matrix(centroids, "centroids")
    if c.shape[1] != v.shape[0]:
        raise ArgumentError(
            f"centroid dim {c.shape[1]} != singular vector dim {v.shape[0]}; "
            "supply matched embeddings or call embed.truncate_or_pad explicitly"
        )
    scores = np.empty(v.shape[1])
    for k in range(v.shape[1]):
        scores[k] = max(cosine_similarity(v[:, k], c[j]) for j in range(c.shape[0]))
    return scores


def _truncated_svd(w0: np.ndarray, r: int, tail: bool = False):
    u, s, v = svd(w0)
    if tail:
        return u[:, -r:], s[-r:], v[:, -r:]
    return u[:, :r], s[:r], v[:, :r]


def _check_rank(w0: np.ndarray, r: int) -> None:
    if not 1 <= r <= min(w0.shape):
        raise ArgumentError(f"rank {r} invalid for weight of shape {w0.shape}")


def semsvd_init(w0, r: int, lam: float, centroids) -> tuple[InitPair, SemSvdFactors]:
    """Semantic-enhanced spectral initialization of one weight matrix.

    Returns the (a, b, residual base) triple plus the full factor record
    for auditing. base + b @ a reconstructs the input weight; singular
    directions whose modulated value hits zero drop out of the adapter
    (their mass stays in the residual) and are logged.
    """
    w = as_matrix(w0, "w0")
    _check_rank(w, r)
    if lam < 0:
        raise ArgumentError(f"lambda must be >= 0, got {lam}")
    u_r, sigma_r, v_r = _truncated_svd(w, r)
    rel = relevance_scores(v_r, centroids)
    s_e = sigma_r * np.maximum(0.0, 1.0 + lam * rel)
    dropped = int(np.sum(s_e == 0.0))
    if dropped:
        logger.info("semsvd_init: %d singular direction(s) fully suppressed", dropped)
    root = np.sqrt(s_e)
    a = root[:, None] * v_r.T
    b = u_r * root[None, :]
    w_res = w - b @ a
    pair = InitPair(a=a, b=b, base=w_res, strategy="semsvd")
    return pair, SemSvdFactors(u_r, sigma_r, v_r, rel, s_e, w_res, float(lam))


def kaiming_zero_init(d_out: int, d_in: int, r: int, rng: RngStream, w0=None) -> InitPair:
    """Kaiming-uniform A (fan_in = d_in), zero B; the layer keeps its original base."""
    if d_out < 1 or d_in < 1 or not 1 <= r <= min(d_out, d_in):
        raise ArgumentError(f"invalid dims d_out={d_out}, d_in={d_in}, r={r}")
    bound = math.sqrt(6.0 / d_in)
    a = rng.uniform(-bound, bound, size=(r, d_in))
    b = np.zeros((d_out, r))
    base = None if w0 is None else as_matrix(w0, "w0").copy()
    return InitPair(a=a, b=b, base=base, strategy="kaiming")


def pissa_init(w0, r: int) -> InitPair:
    """Principal top-r spectral components form the adapter; residual stays frozen."""
    w = as_matrix(w0, "w0")
    _check_rank(w, r)
    u_r, sigma_r, v_r = _truncated_svd(w, r)
    root = np.sqrt(sigma_r)
    a = root[:, None] * v_r.T
    b = u_r * root[None, :]
    return InitPair(a=a, b=b, base=w - b @ a, strategy="pissa")


def milora_init(w0, r: int) -> InitPair:
    """Minor bottom-r spectral components form the adapter; principal mass stays frozen."""
    w = as_matrix(w0, "w0")
    _check_rank(w, r)
    u_r, sigma_r, v_r = _truncated_svd(w, r, tail=True)
    root = np.sqrt(sigma_r)
    a = root[:, None] * v_r.T
    b = u_r * root[None, :]
    return InitPair(a=a, b=b, base=w - b @ a, strategy="milora")


def init_adapter(strategy: str, w0, r: int, lam: float, centroids, rng: RngStream) -> InitPair:
    """Dispatch one strategy name onto its initializer (base always filled in)."""
    if strategy == "semsvd":
        pair, _ = semsvd_init(w0, r, lam, centroids)
        return pair
    if strategy == "pissa":
        return pissa_init(w0, r)
    if strategy == "milora":
        return milora_init(w0, r)
    if strategy == "kaiming":
        w = as_matrix(w0, "w0")
        return kaiming_zero_init(w.shape[0], w.shape[1], r, rng, w0=w)
    raise ArgumentError(f"unknown init strategy {strategy!r}; choose from {STRATEGIES}")
