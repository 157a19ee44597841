"""Dense vectors for domain names, slot prompts and dialog words.

Embeddings either come from a JSON file (the drop-in point for encoder
outputs prepared offline) or from a deterministic toy embedder that maps
each whitespace token to a seeded pseudo-random unit vector. Every
vector leaving this module is L2-normalized.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, MissingKeyError
from .numkit import RngStream, _stable_hash64

logger = logging.getLogger(__name__)

_UNIT_TOL = 1e-12


def unit(v: np.ndarray) -> np.ndarray:
    """L2-normalize; vectors already unit within 1e-12 pass through bit-identically."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ArgumentError("cannot normalize a zero vector")
    if abs(n - 1.0) <= _UNIT_TOL:
        return v
    return v / n


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict = field(default_factory=dict)
    provenance: str = "toy"
    fallback_seed: int | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ArgumentError(f"embedding dim must be positive, got {self.dim}")

    def lookup(self, key: str) -> np.ndarray:
        if key in self.entries:
            return self.entries[key]
        if self.fallback_seed is None:
            raise MissingKeyError(f"no embedding for {key!r} and toy fallback is disabled")
        return toy_embed(key, self.dim, self.fallback_seed)


def load_embeddings(path) -> EmbeddingTable:
    """Read an embedding JSON file: {"dim": n, "entries": {key: [floats...]}}.

    Vectors are normalized on load; duplicate keys keep the last value
    with a logged warning; a vector of the wrong length raises
    FormatError naming the offending key.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh, object_pairs_hook=_collect_pairs)
        except json.JSONDecodeError as exc:
            raise FormatError(f"embedding file {path} is not valid JSON: {exc}") from exc
    top = dict(raw)
    if "dim" not in top or "entries" not in top:
        raise FormatError(f"embedding file {path} must contain 'dim' and 'entries'")
    dim = int(top["dim"])
    entries = {}
    seen = set()
    for key, vec in top["entries"]:
        if key in seen:
            logger.warning("duplicate embedding key %r: keeping the last occurrence", key)
        seen.add(key)
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != dim:
            raise FormatError(
                f"embedding for key {key!r} has length {arr.shape}, expected ({dim},)"
            )
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"embedding for key {key!r} contains non-finite values")
        entries[key] = unit(arr)
    return EmbeddingTable(dim=dim, entries=entries, provenance="file")


class _Pairs(list):
    pass


def _collect_pairs(pairs):
    # Keep raw pairs for the entries object so duplicates stay observable.
    keys = [k for k, _ in pairs]
    if "dim" in keys and "entries" in keys:
        return {k: v for k, v in pairs}
    return _Pairs(pairs)


def save_embeddings(table: EmbeddingTable, path) -> None:
    payload = {
        "dim": table.dim,
        "entries": {k: [float(x) for x in v] for k, v in sorted(table.entries.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def toy_embed(text: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic bag-of-words embedding.

    Each whitespace token hashes to a seeded pseudo-random unit vector;
    the result is the L2-normalized token mean, so texts sharing tokens
    land closer than texts with disjoint vocabulary.
    """
    if dim < 2:
        raise ArgumentError(f"toy_embed needs dim >= 2, got {dim}")
    tokens = text.split()
    if not tokens:
        raise ArgumentError("toy_embed needs nonempty text")
    acc = np.zeros(dim)
    for tok in tokens:
        stream = RngStream(_stable_hash64("toy-embed", seed, tok))
        acc += unit(stream.normal(size=dim))
    return unit(acc / len(tokens))


def prompt_key(domain: str, slot: str, question: str) -> str:
    """Canonical key for a structured domain-slot prompt."""
    return f"{domain}-{slot}: {question}"


def embed_prompt(domain: str, slot: str, question: str, table: EmbeddingTable) -> np.ndarray:
    """Exact-key lookup of the canonical prompt string, toy fallback second."""
    return table.lookup(prompt_key(domain, slot, question))


def truncate_or_pad(v: np.ndarray, dim: int) -> np.ndarray:
    """Explicit dimension adapter; never applied implicitly.

    Truncates or zero-pads to ``dim`` and renormalizes. Callers use this
    deliberately when an embedding file's width differs from the layer
    input width; a truncation that zeroes the vector is an error.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ArgumentError(f"truncate_or_pad needs a vector, got shape {v.shape}")
    if dim < 1:
        raise ArgumentError(f"target dim must be positive, got {dim}")
    if v.shape[0] == dim:
        return unit(v)
    if v.shape[0] > dim:
        out = v[:dim]
        if float(np.linalg.norm(out)) == 0.0:
            raise ArgumentError("truncation produced a zero vector")
        return unit(out)
    out = np.zeros(dim)
    out[: v.shape[0]] = v
    return unit(out)
