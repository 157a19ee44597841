"""Seeded training loop, evaluation and the ablation-grid driver.

Training touches only the registered trainable tensors (adapter banks,
fusion gates, head); every frozen backbone tensor is bit-identical
before and after a run. Gradients accumulate per sample and are divided
by the effective batch size, so accumulation over micro-batches equals
one large batch exactly. The dev set is scored once per epoch in
inference mode; early stopping fires after a fixed number of
consecutive non-improving dev losses.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import dstsim
from .adapter import PHASE_INFER, PHASE_TRAIN
from .autograd import Tape
from .cluster import JointClusterModel, joint_cluster
from .embed import EmbeddingTable, unit
from .errors import ArgumentError, ConfigError, HicoError, NumericalError
from .model import (
    NONE_LABEL,
    EncoderConfig,
    ModelParams,
    PromptBundle,
    Vocab,
    build_merged_layers,
    build_model,
    draw_noise_map,
    make_nodes,
    merged_slot_logits,
    prompt_attend,
    slot_logits_on_tape,
    trainable_params,
)
from .numkit import RngStream

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_MIN_IMPROVEMENT = 1e-5

DEFAULT_STOPLIST = frozenset(
    "i a an the to of can you me is that all for want need it".split()
)

VARIANTS = ("full", "swap_hier", "static_fusion", "no_cluster", "kaiming", "pissa", "milora")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    grad_accum_steps: int = 8
    seed: int = 3407
    epochs: int = 5
    early_stop_patience: int = 5
    gumbel_temperature: float = 1.0
    alpha: float = 0.5
    rank: int = 8
    lam: float = 0.5  # serialized as "lambda"
    init_strategy: str = "semsvd"
    fusion_mode: str = "adaptive"  # adaptive | static_half
    clustering_enabled: bool = True
    swap_modes: bool = False

    def __post_init__(self):
        if self.fusion_mode not in ("adaptive", "static_half"):
            raise ConfigError(f"fusion_mode must be adaptive or static_half, got {self.fusion_mode}")


@dataclass
class RunHistory:
    train_loss: list = field(default_factory=list)
    dev_loss: list = field(default_factory=list)
    dev_jga: list = field(default_factory=list)
    dev_aga: list = field(default_factory=list)
    early_stop_epoch: int | None = None
    wall_clock: list = field(default_factory=list)  # kept out of the deterministic artifact
    optimizer: dict = field(
        default_factory=lambda: {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS}
    )

    def to_json(self) -> dict:
        # wall-clock timings are excluded so reruns produce identical bytes
        return {
            "train_loss": self.train_loss,
            "dev_loss": self.dev_loss,
            "dev_jga": self.dev_jga,
            "dev_aga": self.dev_aga,
            "early_stop_epoch": self.early_stop_epoch,
            "optimizer": self.optimizer,
        }


# ---------------------------------------------------------------------------
# optimizer


def adamw_init(params: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params: dict, grads: dict, state: dict, cfg: TrainConfig) -> None:
    """Decoupled-weight-decay update, in place, bias-corrected moments."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        if name not in grads:
            raise ArgumentError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if cfg.weight_decay:
            p *= 1.0 - cfg.learning_rate * cfg.weight_decay
        m = state["m"][name]
        v = state["v"][name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# task assembly: vocabulary, prompts, classes, bundle


@dataclass
class TaskData:
    schemas: list
    vocab: Vocab
    class_labels: list  # global values, none last
    prompt_ids: dict  # (domain, slot) -> token ids
    slot_values: dict  # (domain, slot) -> value labels
    slots_by_domain: dict  # domain -> [slot names]

    @property
    def none_index(self) -> int:
        return len(self.class_labels) - 1

    def class_index(self, label: str) -> int:
        return self.class_labels.index(label)


def build_task(schemas, dialogs) -> TaskData:
    tokens = set()
    for dialog in dialogs:
        for turn in dialog.turns:
            tokens.update(turn.utterance.split())
    values = set()
    prompt_tokens = {}
    slot_values = {}
    slots_by_domain = {}
    for schema in schemas:
        tokens.add(schema.name)
        slots_by_domain[schema.name] = [s.name for s in schema.slots]
        for slot in schema.slots:
            # the encoder prompt carries the slot name and question only;
            # an unseen domain token is pure noise under frozen random
            # embeddings, whereas shared slot/question tokens transfer
            words = [slot.name] + slot.question.split()
            tokens.update(words)
            prompt_tokens[(schema.name, slot.name)] = words
            slot_values[(schema.name, slot.name)] = list(slot.values)
            values.update(slot.values)
    vocab = Vocab(tokens)
    class_labels = sorted(values) + [NONE_LABEL]
    prompt_ids = {key: vocab.encode(words) for key, words in prompt_tokens.items()}
    return TaskData(
        schemas=list(schemas),
        vocab=vocab,
        class_labels=class_labels,
        prompt_ids=prompt_ids,
        slot_values=slot_values,
        slots_by_domain=slots_by_domain,
    )


def build_bundle(
    model: ModelParams, task: TaskData, train_dialogs, top_k: int = 8, stoplist=DEFAULT_STOPLIST
) -> PromptBundle:
    """Static prompt feature: frequent train words attend over all slot prompts."""
    terms = dstsim.high_freq_terms(train_dialogs, top_k, stoplist)
    embed = model.store["embed.tok"]
    term_vectors = np.stack([embed[i] for i in task.vocab.encode(terms)])
    descriptions = []
    for key in sorted(task.prompt_ids):
        ids = task.prompt_ids[key]
        descriptions.append(unit(embed[ids].mean(axis=0)))
    bundle = PromptBundle(
        term_vectors=term_vectors, description_vectors=np.stack(descriptions)
    )
    prompt_attend(bundle, model.config.heads)
    return bundle


def domain_slot_prompts(schemas) -> list:
    return [(s.name, sl.name, sl.question) for s in schemas for sl in s.slots]


def prepare_clusters(
    schemas,
    dim: int,
    table: EmbeddingTable | None = None,
    k_ranges=None,
    rng: RngStream | None = None,
    embed_seed: int = 11,
) -> JointClusterModel:
    if table is None:
        table = EmbeddingTable(dim=dim, entries={}, fallback_seed=embed_seed)
    names = [s.name for s in schemas]
    return joint_cluster(names, domain_slot_prompts(schemas), table, k_ranges, rng or RngStream(0))


def randomize_clusters(
    clusters: JointClusterModel, rng: RngStream, table: EmbeddingTable | None = None,
    embed_seed: int = 11,
) -> JointClusterModel:
    """Seeded random partition with the same cluster counts (the no-cluster ablation)."""
    if table is None:
        table = EmbeddingTable(dim=clusters.dim, entries={}, fallback_seed=embed_seed)

    def random_partition(count, k, stream):
        labels = np.array([i % k for i in range(count)], dtype=np.int64)
        stream.shuffle(labels)
        return labels

    dom_vecs = np.stack([table.lookup(n) for n in clusters.domain_names])
    slot_vecs = np.stack([table.lookup(k) for k in clusters.slot_keys])
    dom_labels = random_partition(len(clusters.domain_names), clusters.m, rng.fork("domains"))
    slot_labels = random_partition(len(clusters.slot_keys), clusters.n, rng.fork("slots"))

    def centroids(vecs, labels, k):
        return np.stack([unit(vecs[labels == j].mean(axis=0)) for j in range(k)])

    return dataclasses.replace(
        clusters,
        domain_labels=dom_labels,
        slot_labels=slot_labels,
        domain_centroids=centroids(dom_vecs, dom_labels, clusters.m),
        slot_centroids=centroids(slot_vecs, slot_labels, clusters.n),
        silhouette_by_k={},
    )


def single_cluster(clusters: JointClusterModel, table: EmbeddingTable | None = None,
                   embed_seed: int = 11) -> JointClusterModel:
    """Collapse to one domain cluster and one slot cluster (single-adapter baseline)."""
    if table is None:
        table = EmbeddingTable(dim=clusters.dim, entries={}, fallback_seed=embed_seed)
    dom_vecs = np.stack([table.lookup(n) for n in clusters.domain_names])
    slot_vecs = np.stack([table.lookup(k) for k in clusters.slot_keys])
    return dataclasses.replace(
        clusters,
        m=1,
        n=1,
        domain_labels=np.zeros(len(clusters.domain_names), dtype=np.int64),
        slot_labels=np.zeros(len(clusters.slot_keys), dtype=np.int64),
        domain_centroids=unit(dom_vecs.mean(axis=0))[None, :],
        slot_centroids=unit(slot_vecs.mean(axis=0))[None, :],
        silhouette_by_k={},
    )


# ---------------------------------------------------------------------------
# samples and losses


def _context_ids(task: TaskData, dialog, upto_turn: int) -> list:
    words = []
    for t in range(upto_turn + 1):
        words.extend(dialog.turns[t].utterance.split())
    return task.vocab.encode(words)


def enumerate_samples(task: TaskData, dialogs) -> list:
    """Every (dialog, turn, slot-of-its-domain) triple, in deterministic order."""
    samples = []
    for dialog in sorted(dialogs, key=lambda d: d.id):
        for t in range(len(dialog.turns)):
            for slot in task.slots_by_domain[dialog.domain]:
                samples.append((dialog, t, slot))
    return samples


def _sample_target(task: TaskData, dialog, t: int, slot: str) -> int:
    """Local index into [slot values..., none] for the gold value at this turn."""
    values = task.slot_values[(dialog.domain, slot)]
    state = dialog.turns[t].state
    for d, s, v in state:
        if d == dialog.domain and s == slot:
            return values.index(v)
    return len(values)


def _sample_loss(model, task, bundle, dialog, t, slot, phase, noise_map):
    values = task.slot_values[(dialog.domain, slot)]
    allowed = [task.class_index(v) for v in values] + [task.none_index]
    tape = Tape()
    nodes = make_nodes(tape, model, train=(phase == PHASE_TRAIN))
    logits = slot_logits_on_tape(
        tape,
        nodes,
        model,
        bundle,
        _context_ids(task, dialog, t),
        task.prompt_ids[(dialog.domain, slot)],
        task.vocab.sep_id,
        allowed,
        phase,
        noise_map,
    )
    loss = tape.cross_entropy(logits, _sample_target(task, dialog, t, slot))
    return tape, loss


def train(
    model: ModelParams,
    task: TaskData,
    splits,
    bundle: PromptBundle,
    cfg: TrainConfig,
) -> RunHistory:
    """Run the full seeded loop over (train, dev, test) splits; mutates the model."""
    train_dialogs, dev_dialogs, _ = splits
    params = trainable_params(model)
    opt_state = adamw_init(params)
    master = RngStream(cfg.seed)
    shuffle_rng = master.fork("shuffle")
    noise_rng = master.fork("gumbel")
    history = RunHistory()
    best_dev = np.inf
    plateau = 0

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        samples = enumerate_samples(task, train_dialogs)
        shuffle_rng.shuffle(samples)
        epoch_losses = []
        accum: dict = {k: np.zeros_like(v) for k, v in params.items()}
        accum_count = 0
        micro_batches = 0

        def flush():
            nonlocal accum, accum_count, micro_batches
            if accum_count == 0:
                return
            grads = {k: g / accum_count for k, g in accum.items()}
            adamw_step(params, grads, opt_state, cfg)
            accum = {k: np.zeros_like(v) for k, v in params.items()}
            accum_count = 0
            micro_batches = 0

        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start : start + cfg.batch_size]
            for dialog, t, slot in batch:
                noise_map = draw_noise_map(model, noise_rng)
                try:
                    tape, loss = _sample_loss(
                        model, task, bundle, dialog, t, slot, PHASE_TRAIN, noise_map
                    )
                except NumericalError as exc:
                    raise NumericalError(
                        f"epoch {epoch}, dialog {dialog.id}, turn {t}: {exc}"
                    ) from exc
                if not np.isfinite(float(loss.value)):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, dialog {dialog.id}, turn {t}"
                    )
                epoch_losses.append(float(loss.value))
                grads = tape.backward(loss)
                for k in accum:
                    accum[k] += grads[k]
                accum_count += 1
            micro_batches += 1
            if micro_batches >= cfg.grad_accum_steps:
                flush()
        flush()

        history.train_loss.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
        if dev_dialogs:
            dev_loss = _dev_loss(model, task, bundle, dev_dialogs)
            metrics = evaluate(model, task, dev_dialogs, bundle, check_merge=False)
            history.dev_loss.append(dev_loss)
            history.dev_jga.append(metrics["jga"])
            history.dev_aga.append(metrics["aga"])
            if best_dev - dev_loss >= PLATEAU_MIN_IMPROVEMENT:
                best_dev = dev_loss
                plateau = 0
            else:
                plateau += 1
        else:
            history.dev_loss.append(float("nan"))
            history.dev_jga.append(float("nan"))
            history.dev_aga.append(float("nan"))
        history.wall_clock.append(time.perf_counter() - started)
        if dev_dialogs and plateau >= cfg.early_stop_patience:
            history.early_stop_epoch = epoch
            logger.info("early stop at epoch %d after %d plateaus", epoch, plateau)
            break
    return history


def _dev_loss(model, task, bundle, dialogs) -> float:
    losses = []
    for dialog, t, slot in enumerate_samples(task, dialogs):
        _, loss = _sample_loss(model, task, bundle, dialog, t, slot, PHASE_INFER, None)
        losses.append(float(loss.value))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# evaluation


def _turn_logits(model, task, bundle, dialog, t, merged=None) -> dict:
    """Per-slot allowed-class logits for one turn, via either inference path."""
    context = _context_ids(task, dialog, t)
    out = {}
    for slot in task.slots_by_domain[dialog.domain]:
        values = task.slot_values[(dialog.domain, slot)]
        allowed = [task.class_index(v) for v in values] + [task.none_index]
        prompt = task.prompt_ids[(dialog.domain, slot)]
        if merged is not None:
            out[slot] = merged_slot_logits(
                model, merged, context, prompt, task.vocab.sep_id, allowed
            )
        else:
            tape = Tape()
            nodes = make_nodes(tape, model, train=False)
            out[slot] = slot_logits_on_tape(
                tape, nodes, model, bundle, context, prompt, task.vocab.sep_id, allowed,
                PHASE_INFER,
            ).value
    return out


def _state_from_logits(task: TaskData, domain: str, logits_by_slot: dict) -> frozenset:
    state = set()
    for slot, logits in logits_by_slot.items():
        values = task.slot_values[(domain, slot)]
        choice = int(np.argmax(logits))
        if choice < len(values):
            state.add((domain, slot, values[choice]))
    return frozenset(state)


def predict_turn_state(model, task, bundle, dialog, t, merged=None) -> frozenset:
    """Predict every slot of the dialog's domain; none omits the triple."""
    return _state_from_logits(
        task, dialog.domain, _turn_logits(model, task, bundle, dialog, t, merged=merged)
    )


def evaluate(
    model: ModelParams,
    task: TaskData,
    dialogs,
    bundle: PromptBundle,
    check_merge: bool = True,
    merge_tolerance: float = 1e-5,
) -> dict:
    """Joint and average goal accuracy over every turn, inference routing.

    With ``check_merge`` the merged fast path must reproduce the
    unmerged logits within tolerance on every prediction, otherwise the
    evaluation aborts.
    """
    if not dialogs:
        raise ArgumentError("evaluate needs a nonempty split")
    merged = build_merged_layers(model, bundle) if check_merge else None
    preds, golds = [], []
    for dialog in sorted(dialogs, key=lambda d: d.id):
        for t in range(len(dialog.turns)):
            logits = _turn_logits(model, task, bundle, dialog, t)
            pred = _state_from_logits(task, dialog.domain, logits)
            if check_merge:
                merged_logits = _turn_logits(model, task, bundle, dialog, t, merged=merged)
                for slot, ref in logits.items():
                    gap = float(np.max(np.abs(merged_logits[slot] - ref)))
                    if gap > merge_tolerance:
                        raise NumericalError(
                            f"merge equivalence violated on {dialog.id} turn {t} "
                            f"slot {slot}: |diff|={gap:.3e}"
                        )
                merged_pred = _state_from_logits(task, dialog.domain, merged_logits)
                if merged_pred != pred:
                    raise NumericalError(
                        f"merged and unmerged predictions differ on {dialog.id} turn {t}"
                    )
            preds.append(pred)
            golds.append(dialog.turns[t].state)
    return {"jga": dstsim.jga(preds, golds), "aga": dstsim.aga(preds, golds)}


def evaluate_merged(model, task, dialogs, bundle, merged) -> dict:
    """Metrics through the merged fast path only (merged checkpoints)."""
    if not dialogs:
        raise ArgumentError("evaluate needs a nonempty split")
    preds, golds = [], []
    for dialog in sorted(dialogs, key=lambda d: d.id):
        for t in range(len(dialog.turns)):
            logits = _turn_logits(model, task, bundle, dialog, t, merged=merged)
            preds.append(_state_from_logits(task, dialog.domain, logits))
            golds.append(dialog.turns[t].state)
    return {"jga": dstsim.jga(preds, golds), "aga": dstsim.aga(preds, golds)}


# ---------------------------------------------------------------------------
# experiment driver


@dataclass
class ExperimentResult:
    model: ModelParams
    task: TaskData
    bundle: PromptBundle
    clusters: JointClusterModel
    history: RunHistory
    metrics: dict
    splits: tuple


def run_experiment(
    schemas,
    dialogs,
    heldout_domain: str,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    table: EmbeddingTable | None = None,
    clusters: JointClusterModel | None = None,
    dev_fraction: float = 0.2,
    check_merge: bool = False,
    embed_seed: int = 11,
) -> ExperimentResult:
    """Assemble the pipeline end to end for one configuration and seed."""
    domains = [s.name for s in schemas]
    if heldout_domain not in domains:
        raise ConfigError(f"held-out domain {heldout_domain!r} not among schemas {domains}")
    master = RngStream(cfg.seed)
    split_spec = dstsim.SplitSpec(
        train_domains=[d for d in domains if d != heldout_domain],
        heldout_domain=heldout_domain,
        dev_fraction=dev_fraction,
    )
    splits = dstsim.zero_shot_split(dialogs, split_spec, master.fork("split"))
    task = build_task(schemas, dialogs)

    if clusters is None:
        clusters = prepare_clusters(
            schemas, enc_cfg.hidden_dim, table=table, rng=RngStream(0), embed_seed=embed_seed
        )
    if not cfg.clustering_enabled:
        clusters = randomize_clusters(
            clusters, master.fork("nocluster"), table=table, embed_seed=embed_seed
        )

    enc = dataclasses.replace(
        enc_cfg, vocab_size=len(task.vocab), rank=cfg.rank, alpha=cfg.alpha
    )
    model = build_model(
        enc,
        clusters,
        num_classes=len(task.class_labels),
        class_labels=task.class_labels,
        rng=master.fork("model"),
        init_strategy=cfg.init_strategy,
        lam=cfg.lam,
        temperature=cfg.gumbel_temperature,
        static_beta=(cfg.fusion_mode == "static_half"),
        swap_modes=cfg.swap_modes,
    )
    bundle = build_bundle(model, task, splits[0])
    history = train(model, task, splits, bundle, cfg)
    metrics = evaluate(model, task, splits[2], bundle, check_merge=check_merge)
    return ExperimentResult(model, task, bundle, clusters, history, metrics, splits)


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant == "full":
        return dataclasses.replace(cfg)
    if variant == "swap_hier":
        return dataclasses.replace(cfg, swap_modes=True)
    if variant == "static_fusion":
        return dataclasses.replace(cfg, fusion_mode="static_half")
    if variant == "no_cluster":
        return dataclasses.replace(cfg, clustering_enabled=False)
    if variant in ("kaiming", "pissa", "milora"):
        return dataclasses.replace(cfg, init_strategy=variant)
    raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def run_ablation_grid(
    schemas,
    dialogs,
    heldout_domain: str,
    enc_cfg: EncoderConfig,
    base_cfg: TrainConfig,
    variants=VARIANTS,
    **kwargs,
) -> list:
    """One seeded run per variant, only the named knob changed per row."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {VARIANTS}")
    rows = []
    for variant in variants:
        cfg = variant_config(base_cfg, variant)
        try:
            result = run_experiment(schemas, dialogs, heldout_domain, enc_cfg, cfg, **kwargs)
            rows.append(
                {
                    "variant": variant,
                    "jga": result.metrics["jga"],
                    "aga": result.metrics["aga"],
                    "epochs": len(result.history.train_loss),
                    "seed": cfg.seed,
                    "error": "",
                }
            )
        except HicoError as exc:
            logger.warning("variant %s failed: %s", variant, exc)
            rows.append(
                {"variant": variant, "jga": float("nan"), "aga": float("nan"),
                 "epochs": 0, "seed": cfg.seed, "error": str(exc)}
            )
    return rows
