"""Checkpoint persistence: a JSON manifest plus one float32 blob.

The blob holds every tensor (frozen and trainable, plus the prompt
bundle) as little-endian float32, row-major, concatenated in manifest
order; training runs in float64 and accepts the single-precision round
trip on load. The manifest pins shapes, offsets, the echoed run config
and the hash of the cluster manifest the model was built against; a
hash mismatch on load is refused. All writes are write-then-rename so
an interrupted run never leaves a partial checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .adapter import MergedLayer
from .errors import ConfigError, FormatError
from .model import EncoderConfig, ModelParams, PromptBundle

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "checkpoint.json"
BLOB_NAME = "checkpoint.bin"


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_json(path, payload) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def _bundle_entries(bundle: PromptBundle) -> dict:
    return {
        "bundle.term_vectors": np.asarray(bundle.term_vectors, dtype=np.float64),
        "bundle.description_vectors": np.asarray(bundle.description_vectors, dtype=np.float64),
    }


def _merged_entries(merged: dict) -> dict:
    out = {}
    for (i, p), layer in merged.items():
        out[f"merged.block{i}.{p}.w"] = layer.w_merged
        out[f"merged.block{i}.{p}.bias"] = layer.bias
    return out


def save_checkpoint(
    out_dir,
    model: ModelParams,
    bundle: PromptBundle,
    cluster_manifest_hash: str,
    config_echo: dict,
    merged: dict | None = None,
) -> None:
    """Persist a full model (or its merged-inference form) under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    entries = dict(model.store)
    entries.update(_bundle_entries(bundle))
    kind = "full"
    if merged is not None:
        kind = "merged"
        # merged checkpoints drop the adapter tensors; inference only needs
        # the dense merged weights, backbone, embeddings and head
        entries = {
            k: v
            for k, v in entries.items()
            if not any(t in k for t in (".a_ur", ".b_ur", ".a_sa", ".b_sa", ".beta_logit", ".base"))
        }
        entries.update(_merged_entries(merged))

    names = sorted(entries)
    params = []
    offset = 0
    chunks = []
    for name in names:
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(entries[name], dtype=np.float64, order="C")
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        flat = arr.astype("<f4").tobytes()
        chunks.append(flat)
        offset += arr.size

    manifest = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "params": params,
        "trainable": sorted(model.trainable),
        "modes": list(model.modes),
        "encoder_config": dataclasses.asdict(model.config),
        "temperature": model.temperature,
        "init_strategy": model.init_strategy,
        "class_labels": list(model.class_labels),
        "domain_centroids": [[float(x) for x in row] for row in model.domain_centroids],
        "slot_centroids": [[float(x) for x in row] for row in model.slot_centroids],
        "cluster_manifest_hash": cluster_manifest_hash,
        "config_echo": config_echo,
    }
    atomic_write_bytes(os.path.join(out_dir, BLOB_NAME), b"".join(chunks))
    atomic_write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)


def load_checkpoint(out_dir, expected_cluster_hash: str | None = None):
    """Load a checkpoint directory.

    Returns (model, bundle, merged, manifest); ``merged`` is None for
    full checkpoints. Refuses to load when the recorded cluster manifest
    hash disagrees with ``expected_cluster_hash``.
    """
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    blob_path = os.path.join(out_dir, BLOB_NAME)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if expected_cluster_hash is not None and manifest["cluster_manifest_hash"] != expected_cluster_hash:
        raise ConfigError(
            "cluster manifest hash mismatch: checkpoint was built against "
            f"{manifest['cluster_manifest_hash'][:12]}..., got {expected_cluster_hash[:12]}..."
        )
    raw = np.frombuffer(open(blob_path, "rb").read(), dtype="<f4")

    entries = {}
    for spec in manifest["params"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        if start + size > raw.size:
            raise FormatError(f"blob truncated at parameter {spec['name']!r}")
        entries[spec["name"]] = raw[start : start + size].astype(np.float64).reshape(shape)

    bundle = PromptBundle(
        term_vectors=entries.pop("bundle.term_vectors"),
        description_vectors=entries.pop("bundle.description_vectors"),
    )
    merged = None
    if manifest["kind"] == "merged":
        merged = {}
        for name in [n for n in entries if n.startswith("merged.")]:
            arr = entries.pop(name)
            _, block, rest = name.split(".", 2)
            proj, part = rest.split(".")
            key = (int(block.removeprefix("block")), proj)
            layer = merged.setdefault(key, MergedLayer(w_merged=None, bias=None))
            if part == "w":
                layer.w_merged = arr
            else:
                layer.bias = arr

    model = ModelParams(
        config=EncoderConfig(**manifest["encoder_config"]),
        store=entries,
        trainable=list(manifest["trainable"]),
        modes=list(manifest["modes"]),
        domain_centroids=np.asarray(manifest["domain_centroids"], dtype=np.float64),
        slot_centroids=np.asarray(manifest["slot_centroids"], dtype=np.float64),
        class_labels=list(manifest["class_labels"]),
        temperature=float(manifest["temperature"]),
        init_strategy=manifest["init_strategy"],
        w0=None,
    )
    return model, bundle, merged, manifest
