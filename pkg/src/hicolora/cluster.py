"""Spectral joint clustering of domains and slot prompts.

Builds the two cluster families that drive routing and initialization:
domain groups and slot-prompt groups, each with its cluster count chosen
by silhouette maximization. The affinity kernel is the shifted cosine
(1 + cos)/2 (no bandwidth hyperparameter, consistent with the cosine
relevance scoring downstream); the Laplacian is the symmetric normalized
one, and spectral embeddings are row-normalized before k-means.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .embed import EmbeddingTable, embed_prompt, prompt_key, unit
from .errors import ArgumentError, DegenerateGraphError
from .numkit import RngStream, as_matrix, kmeans, sym_eig

METHOD_NOTES = {
    "affinity": "shifted_cosine",
    "laplacian": "symmetric_normalized",
    "spectral_embedding": "k_smallest_eigvecs_row_normalized",
    "assignment": "kmeans_plus_plus",
    "silhouette_distance": "euclidean",
}


@dataclass
class JointClusterModel:
    domain_names: list
    slot_keys: list
    domain_labels: np.ndarray
    slot_labels: np.ndarray
    domain_centroids: np.ndarray
    slot_centroids: np.ndarray
    m: int
    n: int
    silhouette_by_k: dict
    dim: int


def _affinity(points: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(points, axis=1)
    if np.any(norms == 0.0):
        raise ArgumentError("spectral clustering needs nonzero embedding rows")
    unit_rows = points / norms[:, None]
    cos = np.clip(unit_rows @ unit_rows.T, -1.0, 1.0)
    w = 0.5 * (1.0 + cos)
    np.fill_diagonal(w, 0.0)
    return w


def spectral_cluster(embeddings, k: int, rng: RngStream) -> np.ndarray:
    """Cluster rows of ``embeddings`` into k groups via the normalized Laplacian.

    An isolated point (zero affinity to everything) makes the graph
    degenerate and raises :class:`DegenerateGraphError`. All-identical
    inputs do not error; they fall through to the documented k-means
    tie-break on the degenerate spectral embedding.
    """
    pts = as_matrix(embeddings, "embeddings")
    n = pts.shape[0]
    if not 2 <= k <= n:
        raise ArgumentError(f"k must lie in [2, {n}], got {k}")
    w = _affinity(pts)
    deg = w.sum(axis=1)
    if np.any(deg <= 0.0):
        isolated = int(np.argmin(deg))
        raise DegenerateGraphError(f"point {isolated} has zero affinity degree")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - (inv_sqrt[:, None] * w * inv_sqrt[None, :])
    _, vecs = sym_eig(lap)
    emb = vecs[:, :k]
    row_norms = np.linalg.norm(emb, axis=1)
    safe = row_norms > 0
    emb = emb.copy()
    emb[safe] = emb[safe] / row_norms[safe, None]
    labels, _ = kmeans(emb, k, rng)
    return labels


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Singleton clusters contribute 0 for their point; a single cluster
    overall is undefined and rejected.
    """
    pts = as_matrix(points, "points")
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape[0] != pts.shape[0]:
        raise ArgumentError(f"labels length {lab.shape[0]} != point count {pts.shape[0]}")
    uniq = np.unique(lab)
    if uniq.size < 2:
        raise ArgumentError("silhouette needs at least 2 distinct labels")
    dists = np.sqrt(np.maximum(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2), 0.0))
    scores = np.zeros(pts.shape[0])
    for i in range(pts.shape[0]):
        own = lab == lab[i]
        own_count = int(own.sum())
        if own_count == 1:
            scores[i] = 0.0
            continue
        a = dists[i, own].sum() / (own_count - 1)
        b = min(dists[i, lab == c].mean() for c in uniq if c != lab[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def select_k(embeddings, k_min: int, k_max: int, rng: RngStream):
    """Silhouette-maximizing cluster count over [k_min, k_max].

    Each k runs on an independently forked stream; ties resolve to the
    smallest k. Returns (k_best, {k: silhouette score}).
    """
    pts = as_matrix(embeddings, "embeddings")
    n = pts.shape[0]
    if not (2 <= k_min <= k_max <= n - 1):
        raise ArgumentError(
            f"need 2 <= k_min <= k_max <= {n - 1} (point count - 1), got [{k_min}, {k_max}]"
        )
    curve = {}
    best_k, best_score = None, -np.inf
    for k in range(k_min, k_max + 1):
        labels = spectral_cluster(pts, k, rng.fork(("select_k", k)))
        score = silhouette(pts, labels)
        curve[k] = score
        if score > best_score + 1e-15:
            best_k, best_score = k, score
    return best_k, curve


def _centroids(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((k, points.shape[1]))
    for j in range(k):
        members = points[labels == j]
        if members.shape[0] == 0:
            raise ArgumentError(f"cluster {j} is empty")
        out[j] = unit(members.mean(axis=0))
    return out


def _cluster_family(points: np.ndarray, k_range, rng: RngStream):
    n = points.shape[0]
    if k_range is None:
        k_range = (2, min(8, n - 1))
    k_min, k_max = int(k_range[0]), int(k_range[1])
    if n == 2:
        # Too few points to search: both points become singleton clusters.
        labels = np.array([0, 1], dtype=np.int64)
        return labels, 2, {2: 0.0}
    k_max = min(k_max, n - 1)
    k_best, curve = select_k(points, k_min, k_max, rng)
    labels = spectral_cluster(points, k_best, rng.fork(("select_k", k_best)))
    return labels, k_best, curve


def joint_cluster(
    domain_names,
    slot_prompts,
    table: EmbeddingTable,
    k_ranges=None,
    rng: RngStream | None = None,
) -> JointClusterModel:
    """Cluster the domain family and the slot-prompt family independently.

    ``slot_prompts`` is a list of (domain, slot, question) triples; keys
    are the canonical prompt strings. ``k_ranges`` is an optional pair
    of (k_min, k_max) tuples, one per family; default [2, min(8, n-1)].
    """
    if len(domain_names) < 2:
        raise ArgumentError("joint_cluster needs at least 2 domains")
    if len(slot_prompts) < 2:
        raise ArgumentError("joint_cluster needs at least 2 slot prompts")
    if rng is None:
        rng = RngStream(0)
    dom_range, slot_range = k_ranges if k_ranges is not None else (None, None)

    dom_vecs = np.stack([table.lookup(name) for name in domain_names])
    slot_keys = [prompt_key(d, s, q) for d, s, q in slot_prompts]
    slot_vecs = np.stack([embed_prompt(d, s, q, table) for d, s, q in slot_prompts])

    dom_labels, m, dom_curve = _cluster_family(dom_vecs, dom_range, rng.fork("domains"))
    slot_labels, n, slot_curve = _cluster_family(slot_vecs, slot_range, rng.fork("slots"))

    return JointClusterModel(
        domain_names=list(domain_names),
        slot_keys=slot_keys,
        domain_labels=dom_labels,
        slot_labels=slot_labels,
        domain_centroids=_centroids(dom_vecs, dom_labels, m),
        slot_centroids=_centroids(slot_vecs, slot_labels, n),
        m=m,
        n=n,
        silhouette_by_k={"domain": dom_curve, "slot": slot_curve},
        dim=table.dim,
    )


def to_manifest(model: JointClusterModel) -> dict:
    return {
        "m": model.m,
        "n": model.n,
        "dim": model.dim,
        "domain_labels": {
            name: int(l) for name, l in zip(model.domain_names, model.domain_labels)
        },
        "slot_labels": {key: int(l) for key, l in zip(model.slot_keys, model.slot_labels)},
        "centroids": {
            "domain": [[float(x) for x in row] for row in model.domain_centroids],
            "slot": [[float(x) for x in row] for row in model.slot_centroids],
        },
        "silhouette_by_k": {
            family: {str(k): float(v) for k, v in curve.items()}
            for family, curve in model.silhouette_by_k.items()
        },
        "method": dict(METHOD_NOTES),
    }


def from_manifest(manifest: dict) -> JointClusterModel:
    domain_labels = manifest["domain_labels"]
    slot_labels = manifest["slot_labels"]
    return JointClusterModel(
        domain_names=list(domain_labels.keys()),
        slot_keys=list(slot_labels.keys()),
        domain_labels=np.asarray(list(domain_labels.values()), dtype=np.int64),
        slot_labels=np.asarray(list(slot_labels.values()), dtype=np.int64),
        domain_centroids=np.asarray(manifest["centroids"]["domain"], dtype=np.float64),
        slot_centroids=np.asarray(manifest["centroids"]["slot"], dtype=np.float64),
        m=int(manifest["m"]),
        n=int(manifest["n"]),
        silhouette_by_k={
            family: {int(k): float(v) for k, v in curve.items()}
            for family, curve in manifest.get("silhouette_by_k", {}).items()
        },
        dim=int(manifest["dim"]),
    )


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
