"""Command-line surface tying the pipeline together.

Subcommands: gen-data, cluster, train, eval, merge, inspect-init,
ablate. Every command is deterministic given its flags and referenced
files; outputs are written atomically. Exit codes: 0 success, 1
numerical failure, 2 configuration or validation error. The
HICOLORA_SEED environment variable, when set, overrides the configured
seed (and is logged).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import cluster as cluster_mod
from . import dstsim, trainer
from .adapter import PHASE_INFER
from .autograd import Tape
from .embed import EmbeddingTable, load_embeddings
from .errors import ConfigError, HicoError, NumericalError
from .init import semsvd_init
from .model import (
    EncoderConfig,
    build_merged_layers,
    build_model,
    make_nodes,
    merged_slot_logits,
    prompt_attend,
    slot_logits_on_tape,
)
from .numkit import RngStream

logger = logging.getLogger("hicolora")

EXTRA_CONFIG_KEYS = {
    "dev_fraction": 0.2,
    "embed_seed": 11,
    "top_k_terms": 8,
    "check_merge": False,
    "kmin": None,
    "kmax": None,
}


def load_run_config(path):
    """Flat JSON config: encoder fields + train fields + pipeline extras."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    enc_fields = {f.name for f in dataclasses.fields(EncoderConfig)}
    train_fields = {f.name for f in dataclasses.fields(trainer.TrainConfig)} - {"lam"}
    enc_kwargs, train_kwargs, extras = {}, {}, dict(EXTRA_CONFIG_KEYS)
    for key, value in raw.items():
        if key == "lambda":
            train_kwargs["lam"] = value
        elif key in train_fields:
            train_kwargs[key] = value
        elif key in enc_fields:
            enc_kwargs[key] = value
        elif key in extras:
            extras[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r} in {path}")
    enc = EncoderConfig(**enc_kwargs)
    cfg = trainer.TrainConfig(**train_kwargs)
    return enc, cfg, extras


def apply_seed_override(cfg):
    env = os.environ.get("HICOLORA_SEED")
    if env is None:
        return cfg
    seed = int(env)
    logger.info("HICOLORA_SEED=%d overrides configured seed %d", seed, cfg.seed)
    return dataclasses.replace(cfg, seed=seed)


def config_echo(enc, cfg, extras) -> dict:
    echo = dataclasses.asdict(enc)
    train_part = dataclasses.asdict(cfg)
    train_part["lambda"] = train_part.pop("lam")
    echo.update(train_part)
    echo.update(extras)
    return echo


def _load_table(args, dim) -> EmbeddingTable:
    if getattr(args, "embeddings", None):
        table = load_embeddings(args.embeddings)
        if getattr(args, "toy_seed", None) is not None:
            table.fallback_seed = args.toy_seed
        return table
    toy_seed = args.toy_seed if getattr(args, "toy_seed", None) is not None else 11
    return EmbeddingTable(dim=dim, entries={}, fallback_seed=toy_seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    schemas = dstsim.schemas_from_json(_read_json(args.schemas))
    seed = int(os.environ.get("HICOLORA_SEED", args.seed))
    if seed != args.seed:
        logger.info("HICOLORA_SEED overrides --seed: %d", seed)
    corpus = dstsim.generate_corpus(schemas, args.dialogs, args.turns, RngStream(seed))
    payload = dstsim.corpus_to_json(schemas, corpus)
    ckpt.atomic_write_json(args.out, payload)
    print(f"wrote {len(corpus)} dialogs across {len(schemas)} domains to {args.out}")
    return 0


def cmd_cluster(args) -> int:
    if args.kmin is not None and args.kmax is not None and args.kmin > args.kmax:
        raise ConfigError(f"invalid k range [{args.kmin}, {args.kmax}]")
    if args.schemas:
        schemas = dstsim.schemas_from_json(_read_json(args.schemas))
        domains = [s.name for s in schemas]
        prompts = trainer.domain_slot_prompts(schemas)
    else:
        if not (args.domains and args.prompts):
            raise ConfigError("cluster needs either --schemas or both --domains and --prompts")
        domains = [d for d in args.domains.split(",") if d]
        prompts = [tuple(x) for x in _read_json(args.prompts)]
    table = _load_table(args, args.dim)
    k_ranges = None
    if args.kmin is not None or args.kmax is not None:
        lo = args.kmin if args.kmin is not None else 2
        hi = args.kmax if args.kmax is not None else 8
        k_ranges = ((lo, hi), (lo, hi))
    model = cluster_mod.joint_cluster(domains, prompts, table, k_ranges, RngStream(args.seed))
    manifest = cluster_mod.to_manifest(model)
    ckpt.atomic_write_json(args.out, manifest)
    print(f"chose M={model.m} domain clusters, N={model.n} slot clusters")
    for family, curve in sorted(model.silhouette_by_k.items()):
        line = ", ".join(f"k={k}: {v:.4f}" for k, v in sorted(curve.items()))
        print(f"silhouette[{family}]: {line}")
    return 0


def _prepare_experiment_inputs(args):
    enc, cfg, extras = load_run_config(args.config)
    cfg = apply_seed_override(cfg)
    schemas, dialogs = dstsim.load_corpus(args.corpus)
    manifest = _read_json(args.clusters)
    clusters = cluster_mod.from_manifest(manifest)
    return enc, cfg, extras, schemas, dialogs, manifest, clusters


def cmd_train(args) -> int:
    enc, cfg, extras, schemas, dialogs, manifest, clusters = _prepare_experiment_inputs(args)
    result = trainer.run_experiment(
        schemas,
        dialogs,
        args.heldout,
        enc,
        cfg,
        clusters=clusters,
        dev_fraction=extras["dev_fraction"],
        check_merge=extras["check_merge"],
        embed_seed=extras["embed_seed"],
    )
    os.makedirs(args.out, exist_ok=True)
    echo = config_echo(enc, cfg, extras)
    echo["heldout"] = args.heldout
    ckpt.atomic_write_json(os.path.join(args.out, "config.json"), echo)
    ckpt.atomic_write_json(
        os.path.join(args.out, "run_history.json"), result.history.to_json()
    )
    ckpt.atomic_write_json(os.path.join(args.out, "metrics.json"), result.metrics)
    _write_timings(os.path.join(args.out, "timings.log"), result.history.wall_clock)
    ckpt.save_checkpoint(
        args.out,
        result.model,
        result.bundle,
        cluster_mod.manifest_hash(manifest),
        echo,
    )
    dev_jga = result.history.dev_jga[-1] if result.history.dev_jga else float("nan")
    print(f"final dev jga={dev_jga:.4f}; heldout {args.heldout} "
          f"jga={result.metrics['jga']:.4f} aga={result.metrics['aga']:.4f}")
    return 0


def _rebuild_eval_context(args, manifest):
    schemas, dialogs = dstsim.load_corpus(args.corpus)
    model, bundle, merged, ck_manifest = ckpt.load_checkpoint(
        args.checkpoint, expected_cluster_hash=cluster_mod.manifest_hash(manifest)
    )
    prompt_attend(bundle, model.config.heads)
    task = trainer.build_task(schemas, dialogs)
    if len(task.vocab) != model.config.vocab_size:
        raise ConfigError(
            f"corpus vocabulary size {len(task.vocab)} does not match checkpoint "
            f"vocab_size {model.config.vocab_size}"
        )
    return schemas, dialogs, model, bundle, merged, task


def cmd_eval(args) -> int:
    manifest = _read_json(args.clusters)
    schemas, dialogs, model, bundle, merged, task = _rebuild_eval_context(args, manifest)
    test = [d for d in dialogs if d.domain == args.heldout]
    if not test:
        raise ConfigError(f"no dialogs for held-out domain {args.heldout!r}")
    if merged is not None:
        metrics = trainer.evaluate_merged(model, task, test, bundle, merged)
    else:
        metrics = trainer.evaluate(
            model, task, test, bundle, check_merge=not args.skip_merge_check
        )
    print(f"jga={metrics['jga']:.6f} aga={metrics['aga']:.6f}")
    return 0


def cmd_merge(args) -> int:
    manifest = _read_json(args.clusters)
    schemas, dialogs, model, bundle, merged_in, task = _rebuild_eval_context(args, manifest)
    if merged_in is not None:
        raise ConfigError("checkpoint is already merged")
    merged = build_merged_layers(model, bundle)
    _assert_merge_equivalence(model, bundle, merged, task)
    with open(os.path.join(args.checkpoint, ckpt.MANIFEST_NAME), "r", encoding="utf-8") as fh:
        echo = json.load(fh)["config_echo"]
    ckpt.save_checkpoint(
        args.out, model, bundle, cluster_mod.manifest_hash(manifest), echo, merged=merged
    )
    print(f"merged checkpoint written to {args.out}")
    return 0


def _assert_merge_equivalence(model, bundle, merged, task, samples=100, tol=1e-5):
    """Refuse to write a merged checkpoint whose logits drift from the full path."""
    rng = RngStream(0)
    vocab_size = model.config.vocab_size
    allowed = list(range(len(model.class_labels)))
    worst = 0.0
    for _ in range(samples):
        length = int(rng.integers(3, min(10, model.config.max_seq_len)))
        ids = rng.integers(0, vocab_size, size=length).tolist()
        cut = max(1, length // 2)
        tape = Tape()
        nodes = make_nodes(tape, model, train=False)
        ref = slot_logits_on_tape(
            tape, nodes, model, bundle, ids[:cut], ids[cut:], task.vocab.sep_id, allowed,
            PHASE_INFER,
        ).value
        got = merged_slot_logits(model, merged, ids[:cut], ids[cut:], task.vocab.sep_id, allowed)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    if worst > tol:
        raise NumericalError(
            f"merge equivalence violated: max |logit diff| = {worst:.3e} > {tol:g}"
        )
    logger.info("merge equivalence verified: max |logit diff| = %.3e", worst)


def cmd_inspect_init(args) -> int:
    enc, cfg, extras = load_run_config(args.config)
    manifest = _read_json(args.clusters)
    clusters = cluster_mod.from_manifest(manifest)
    enc = dataclasses.replace(enc, vocab_size=max(enc.vocab_size, 2), rank=cfg.rank,
                              alpha=cfg.alpha)
    model = build_model(
        enc,
        clusters,
        num_classes=2,
        class_labels=["value", "none"],
        rng=RngStream(cfg.seed).fork("model"),
        init_strategy=cfg.init_strategy,
        lam=cfg.lam,
        temperature=cfg.gumbel_temperature,
        static_beta=(cfg.fusion_mode == "static_half"),
        swap_modes=cfg.swap_modes,
    )
    audit = {"init_strategy": cfg.init_strategy, "lambda": cfg.lam, "layers": {}}
    for prefix, w0 in sorted(model.w0.items()):
        entry = {
            "residual_fro_norm": float(
                np.linalg.norm(model.store[f"{prefix}.base"])
            ),
            "reconstruction_rel_error": float(
                np.linalg.norm(
                    model.store[f"{prefix}.base"]
                    + model.store[f"{prefix}.b_ur"] @ model.store[f"{prefix}.a_ur"]
                    - w0
                )
                / np.linalg.norm(w0)
            ),
        }
        if cfg.init_strategy == "semsvd":
            _, factors = semsvd_init(w0, enc.rank, cfg.lam, clusters.slot_centroids)
            entry.update(factors.summary())
        audit["layers"][prefix] = entry
    ckpt.atomic_write_json(args.out, audit)
    print(f"wrote init audit for {len(audit['layers'])} adapted layers to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    enc, cfg, extras, schemas, dialogs, manifest, clusters = _prepare_experiment_inputs(args)
    variants = tuple(v for v in args.variants.split(",") if v)
    rows = trainer.run_ablation_grid(
        schemas,
        dialogs,
        args.heldout,
        enc,
        cfg,
        variants=variants,
        clusters=clusters,
        dev_fraction=extras["dev_fraction"],
        embed_seed=extras["embed_seed"],
    )
    lines = ["variant,jga,aga,epochs,seed"]
    for row in rows:
        lines.append(
            f"{row['variant']},{row['jga']:.6f},{row['aga']:.6f},{row['epochs']},{row['seed']}"
        )
    ckpt.atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode("utf-8"))
    for line in lines:
        print(line)
    return 0


# ---------------------------------------------------------------------------
# wiring


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_timings(path, wall_clock) -> None:
    # timings are observational; they live outside the deterministic artifacts
    with open(path, "w", encoding="utf-8") as fh:
        for i, t in enumerate(wall_clock):
            fh.write(f"epoch {i}: {t:.3f}s\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hicolora")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dialog corpus")
    g.add_argument("--schemas", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=3407)
    g.add_argument("--dialogs", type=int, default=10)
    g.add_argument("--turns", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("cluster", help="spectral joint clustering of domains and prompts")
    c.add_argument("--embeddings")
    c.add_argument("--schemas")
    c.add_argument("--domains")
    c.add_argument("--prompts")
    c.add_argument("--dim", type=int, default=32)
    c.add_argument("--toy-seed", type=int, default=None)
    c.add_argument("--kmin", type=int, default=None)
    c.add_argument("--kmax", type=int, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", help="train one configuration on a zero-shot split")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--clusters", required=True)
    t.add_argument("--heldout", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out domain")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--clusters", required=True)
    e.add_argument("--heldout", required=True)
    e.add_argument("--skip-merge-check", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="fold adapters into dense weights plus biases")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--corpus", required=True)
    m.add_argument("--clusters", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    i = sub.add_parser("inspect-init", help="dump per-layer initialization factors")
    i.add_argument("--config", required=True)
    i.add_argument("--clusters", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect_init)

    a = sub.add_parser("ablate", help="run the ablation grid and write a CSV")
    a.add_argument("--config", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--clusters", required=True)
    a.add_argument("--heldout", required=True)
    a.add_argument("--variants", default=",".join(trainer.VARIANTS))
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except (HicoError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
