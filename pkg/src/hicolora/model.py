"""Desk-scale transformer encoder hosting the dual-path adapted projections.

The query and value projections of every self-attention block are
adapted layers (optionally all four projections); everything else in
the backbone (token embeddings, key/output projections, feed-forward
weights) is drawn once from the seed and frozen, standing in for
pre-trained weights. Trainable state is the adapter banks, the fusion
gates and the classification head.

The prompt encoder attends high-frequency corpus words (queries) over
slot descriptions (keys and values) with parameter-free multi-head
attention; the mean-pooled, normalized output is the static prompt
feature consumed by every adapted layer and by routing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adapter
from .adapter import (
    MODE_HEURISTIC,
    PHASE_INFER,
    PHASE_TRAIN,
    HiCoLayerParams,
    assign_layer_modes,
)
from .autograd import Node, Tape
from .cluster import JointClusterModel
from .embed import unit
from .errors import ArgumentError, MissingKeyError
from .init import init_adapter, semsvd_init
from .numkit import RngStream, cosine_similarity, gumbel_noise, softmax

SEP_TOKEN = "<sep>"
NONE_LABEL = "none"


class Vocab:
    """Whitespace-token vocabulary with a reserved separator."""

    def __init__(self, tokens):
        uniq = sorted(set(tokens) | {SEP_TOKEN})
        self.token_to_id = {t: i for i, t in enumerate(uniq)}
        self.id_to_token = uniq

    def __len__(self):
        return len(self.id_to_token)

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP_TOKEN]

    def encode(self, tokens) -> list:
        try:
            return [self.token_to_id[t] for t in tokens]
        except KeyError as exc:
            raise MissingKeyError(f"token {exc.args[0]!r} not in vocabulary") from exc


@dataclass
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 0
    rank: int = 4
    alpha: float = 0.5
    max_seq_len: int = 64
    adapt_all_projections: bool = False
    use_positions: bool = True
    infer_hard_routing: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ArgumentError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.rank > self.hidden_dim:
            raise ArgumentError(f"rank {self.rank} exceeds hidden_dim {self.hidden_dim}")


@dataclass
class PromptBundle:
    term_vectors: np.ndarray  # (num_terms, d): queries
    description_vectors: np.ndarray  # (num_descriptions, d): keys and values
    pooled_x_sa: np.ndarray | None = None  # set by prompt_attend


@dataclass
class ModelParams:
    config: EncoderConfig
    store: dict  # name -> float64 array, frozen and trainable alike
    trainable: list
    modes: list  # per block
    domain_centroids: np.ndarray
    slot_centroids: np.ndarray
    class_labels: list  # global value labels; last entry is the none class
    temperature: float = 1.0
    init_strategy: str = "semsvd"
    w0: dict | None = None  # original pre-adaptation weights, kept for audits only

    @property
    def adapted_projections(self) -> list:
        return ["q", "k", "v", "o"] if self.config.adapt_all_projections else ["q", "v"]

    def layer_view(self, block: int, proj: str) -> HiCoLayerParams:
        s, p = self.store, f"block{block}.{proj}"
        m = self.domain_centroids.shape[0]
        n = self.slot_centroids.shape[0]
        return HiCoLayerParams(
            base=s[f"{p}.base"],
            a_ur=s[f"{p}.a_ur"],
            b_ur=s[f"{p}.b_ur"],
            a_sa=[s[f"{p}.a_sa{i}"] for i in range(m)],
            b_sa=[s[f"{p}.b_sa{i}"] for i in range(n)],
            beta_logit=float(s[f"{p}.beta_logit"]),
            mode=self.modes[block],
            temperature=self.temperature,
        )


# ---------------------------------------------------------------------------
# construction


def build_model(
    config: EncoderConfig,
    clusters: JointClusterModel,
    num_classes: int,
    class_labels,
    rng: RngStream,
    init_strategy: str = "semsvd",
    lam: float = 0.5,
    temperature: float = 1.0,
    static_beta: bool = False,
    swap_modes: bool = False,
) -> ModelParams:
    """Draw the frozen backbone and initialize every adapted projection."""
    d = config.hidden_dim
    if clusters.dim != d:
        raise ArgumentError(
            f"cluster embedding dim {clusters.dim} != hidden_dim {d}; "
            "prepare embeddings at the model width (see embed.truncate_or_pad)"
        )
    if config.vocab_size < 1:
        raise ArgumentError("vocab_size must be set before building the model")
    store: dict = {}
    trainable: list = []

    back = rng.fork("backbone")
    store["embed.tok"] = back.normal(size=(config.vocab_size, d))
    proj_names = ["q", "k", "v", "o"] if config.adapt_all_projections else ["q", "v"]
    for i in range(config.num_layers):
        for p in ("q", "k", "v", "o"):
            name = f"block{i}.w{p}"
            if p in proj_names:
                continue
            store[name] = back.normal(size=(d, d), scale=1.0 / math.sqrt(d))
        store[f"block{i}.w1"] = back.normal(size=(config.ffn_dim, d), scale=1.0 / math.sqrt(d))
        store[f"block{i}.w2"] = back.normal(
            size=(d, config.ffn_dim), scale=1.0 / math.sqrt(config.ffn_dim)
        )

    m = clusters.domain_centroids.shape[0]
    n = clusters.slot_centroids.shape[0]
    init_rng = rng.fork("init")
    originals: dict = {}
    for i in range(config.num_layers):
        for p in proj_names:
            prefix = f"block{i}.{p}"
            w0 = back.normal(size=(d, d), scale=1.0 / math.sqrt(d))
            originals[prefix] = w0.copy()
            pair = init_adapter(
                init_strategy, w0, config.rank, lam, clusters.slot_centroids,
                init_rng.fork((i, p, "ur")),
            )
            store[f"{prefix}.base"] = pair.base
            store[f"{prefix}.a_ur"] = pair.a
            store[f"{prefix}.b_ur"] = pair.b
            for j in range(m):
                store[f"{prefix}.a_sa{j}"] = _bank_matrix(
                    init_strategy, w0, config.rank, lam,
                    clusters.domain_centroids[j : j + 1], init_rng.fork((i, p, "a", j)), "a",
                )
            for j in range(n):
                store[f"{prefix}.b_sa{j}"] = _bank_matrix(
                    init_strategy, w0, config.rank, lam,
                    clusters.slot_centroids[j : j + 1], init_rng.fork((i, p, "b", j)), "b",
                )
            store[f"{prefix}.beta_logit"] = np.asarray(0.0)
            trainable.extend([f"{prefix}.a_ur", f"{prefix}.b_ur"])
            trainable.extend(f"{prefix}.a_sa{j}" for j in range(m))
            trainable.extend(f"{prefix}.b_sa{j}" for j in range(n))
            if not static_beta:
                trainable.append(f"{prefix}.beta_logit")

    store["head.w"] = np.zeros((num_classes, d))
    trainable.append("head.w")

    return ModelParams(
        config=config,
        store=store,
        trainable=trainable,
        modes=assign_layer_modes(config.num_layers, config.alpha, swap=swap_modes),
        domain_centroids=clusters.domain_centroids.copy(),
        slot_centroids=clusters.slot_centroids.copy(),
        class_labels=list(class_labels),
        temperature=temperature,
        init_strategy=init_strategy,
        w0=originals,
    )


def _bank_matrix(strategy, w0, r, lam, centroid, rng, which):
    """One semantic-bank matrix, initialized per strategy against its own centroid."""
    if strategy == "semsvd":
        pair, _ = semsvd_init(w0, r, lam, centroid)
        return pair.a if which == "a" else pair.b
    pair = init_adapter(strategy, w0, r, lam, centroid, rng)
    return pair.a.copy() if which == "a" else pair.b.copy()


def trainable_params(model: ModelParams) -> dict:
    return {name: model.store[name] for name in model.trainable}


# ---------------------------------------------------------------------------
# prompt encoder


def prompt_attend(bundle: PromptBundle, heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention of term queries over description keys/values.

    Parameter-free (identity projections): per head, softmax(Q K^T /
    sqrt(d_head)) V on the head's slice. Returns the attended sequence
    (one row per term) and the normalized mean-pooled vector, which is
    also written back into ``bundle.pooled_x_sa``.
    """
    q = np.asarray(bundle.term_vectors, dtype=np.float64)
    kv = np.asarray(bundle.description_vectors, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise ArgumentError("prompt_attend needs at least one high-frequency term vector")
    if kv.ndim != 2 or kv.shape[0] == 0:
        raise ArgumentError("prompt_attend needs at least one slot description vector")
    if q.shape[1] != kv.shape[1]:
        raise ArgumentError(f"term dim {q.shape[1]} != description dim {kv.shape[1]}")
    d = q.shape[1]
    if d % heads != 0:
        raise ArgumentError(f"dim {d} not divisible by heads {heads}")
    dh = d // heads
    out = np.empty_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ kv[:, sl].T / math.sqrt(dh)
        weights = np.apply_along_axis(softmax, 1, scores)
        out[:, sl] = weights @ kv[:, sl]
    pooled = unit(out.mean(axis=0))
    bundle.pooled_x_sa = pooled
    return out, pooled


# ---------------------------------------------------------------------------
# routing helpers


def routing_logits(model: ModelParams, pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dom = np.array([cosine_similarity(pooled, c) for c in model.domain_centroids])
    slo = np.array([cosine_similarity(pooled, c) for c in model.slot_centroids])
    return dom, slo


def draw_noise_map(model: ModelParams, rng: RngStream) -> dict:
    """Fresh Gumbel noise for every heuristic-mode adapted layer, fixed order."""
    noise = {}
    m = model.domain_centroids.shape[0]
    n = model.slot_centroids.shape[0]
    for i in range(model.config.num_layers):
        if model.modes[i] != MODE_HEURISTIC:
            continue
        for p in model.adapted_projections:
            noise[(i, p)] = {
                "domain": gumbel_noise(rng, m),
                "slot": gumbel_noise(rng, n),
            }
    return noise


def infer_routing(model: ModelParams, pooled: np.ndarray) -> adapter.RoutingDecision:
    return adapter.route(
        pooled,
        model.domain_centroids,
        model.slot_centroids,
        PHASE_INFER,
        model.temperature,
        infer_hard=model.config.infer_hard_routing,
    )


# ---------------------------------------------------------------------------
# tape-side forward


def make_nodes(tape: Tape, model: ModelParams, train: bool) -> dict:
    """Register every stored tensor on the tape once; trainables become params."""
    trainset = set(model.trainable) if train else set()
    nodes = {}
    for name, value in model.store.items():
        nodes[name] = tape.param(name, value) if name in trainset else tape.leaf(value)
    return nodes


def _sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _weights_node(tape, logits, phase, noise, hard_infer):
    # logits arrive pre-scaled by 1/temperature (see adapter.route)
    if phase == PHASE_TRAIN:
        return tape.gumbel_softmax(tape.leaf(logits), 1.0, noise, hard=True)
    w = softmax(logits)
    if hard_infer:
        hard = np.zeros_like(w)
        hard[int(np.argmax(w))] = 1.0
        return tape.leaf(hard)
    return tape.leaf(w)


def _mix_bank(tape, weights_node, bank_nodes):
    mixed = None
    for j, mat in enumerate(bank_nodes):
        term = tape.smul(tape.pick(weights_node, j), mat)
        mixed = term if mixed is None else tape.add(mixed, term)
    return mixed


def _semadapt_node(tape, nodes, prefix, mode, x_sa_node, m, n, routing_weights):
    base = nodes[f"{prefix}.base"]
    h = tape.matvec(base, x_sa_node)
    if mode == MODE_HEURISTIC:
        w_dom, w_slot = routing_weights
        a_hat = _mix_bank(tape, w_dom, [nodes[f"{prefix}.a_sa{j}"] for j in range(m)])
        b_hat = _mix_bank(tape, w_slot, [nodes[f"{prefix}.b_sa{j}"] for j in range(n)])
        inner = tape.scale(tape.matvec(a_hat, x_sa_node), float(m))
        outer = tape.scale(tape.matvec(b_hat, inner), float(n))
        return tape.add(h, outer)
    inner = None
    for j in range(m):
        term = tape.matvec(nodes[f"{prefix}.a_sa{j}"], x_sa_node)
        inner = term if inner is None else tape.add(inner, term)
    outer = None
    for j in range(n):
        term = tape.matvec(nodes[f"{prefix}.b_sa{j}"], inner)
        outer = term if outer is None else tape.add(outer, term)
    return tape.add(h, outer)


def _adapted_projection(tape, nodes, prefix, h_node, h_sa_node):
    """fuse(base x + b(a x), h_sa) on row-major token activations."""
    base_t = tape.transpose(nodes[f"{prefix}.base"])
    h_ur = tape.add(
        tape.matmul(h_node, base_t),
        tape.matmul(
            tape.matmul(h_node, tape.transpose(nodes[f"{prefix}.a_ur"])),
            tape.transpose(nodes[f"{prefix}.b_ur"]),
        ),
    )
    beta = tape.sigmoid(nodes[f"{prefix}.beta_logit"])
    one_minus = tape.add_const(tape.scale(beta, -1.0), 1.0)
    return tape.add(tape.smul(beta, h_ur), tape.smul(one_minus, h_sa_node))


def encode_on_tape(
    tape: Tape,
    nodes: dict,
    model: ModelParams,
    bundle: PromptBundle,
    token_ids,
    phase: str,
    noise_map: dict | None = None,
) -> Node:
    """Full encoder forward on the tape; returns the (seq x d) hidden node."""
    cfg = model.config
    ids = list(token_ids)
    if len(ids) == 0:
        raise ArgumentError("encode needs at least one token")
    if len(ids) > cfg.max_seq_len:
        raise ArgumentError(f"sequence length {len(ids)} exceeds max_seq_len {cfg.max_seq_len}")
    if max(ids) >= cfg.vocab_size or min(ids) < 0:
        raise ArgumentError("token id out of vocabulary range")
    if phase == PHASE_TRAIN and noise_map is None:
        raise ArgumentError("train-phase encode needs a routing noise map")
    if bundle.pooled_x_sa is None:
        prompt_attend(bundle, cfg.heads)
    pooled = bundle.pooled_x_sa

    h0 = model.store["embed.tok"][ids]
    if cfg.use_positions:
        h0 = h0 + _sinusoidal_positions(len(ids), cfg.hidden_dim)
    h = tape.leaf(h0)

    dom_logits, slo_logits = routing_logits(model, pooled)
    dom_logits = dom_logits / model.temperature
    slo_logits = slo_logits / model.temperature
    x_sa_node = tape.leaf(pooled)
    dh = cfg.hidden_dim // cfg.heads
    m = model.domain_centroids.shape[0]
    n = model.slot_centroids.shape[0]

    for i in range(cfg.num_layers):
        mode = model.modes[i]

        def routed_weights(p):
            if mode != MODE_HEURISTIC:
                return None
            noise = noise_map[(i, p)] if phase == PHASE_TRAIN else None
            w_dom = _weights_node(
                tape, dom_logits, phase, noise["domain"] if noise else None,
                cfg.infer_hard_routing,
            )
            w_slot = _weights_node(
                tape, slo_logits, phase, noise["slot"] if noise else None,
                cfg.infer_hard_routing,
            )
            return (w_dom, w_slot)

        def proj(p, inp):
            if p not in model.adapted_projections:
                return tape.matmul(inp, tape.transpose(nodes[f"block{i}.w{p}"]))
            prefix = f"block{i}.{p}"
            h_sa = _semadapt_node(
                tape, nodes, prefix, mode, x_sa_node, m, n, routed_weights(p)
            )
            return _adapted_projection(tape, nodes, prefix, inp, h_sa)

        q, k, v = proj("q", h), proj("k", h), proj("v", h)
        head_outs = []
        for hd in range(cfg.heads):
            j0, j1 = hd * dh, (hd + 1) * dh
            qh = tape.slice_cols(q, j0, j1)
            kh = tape.slice_cols(k, j0, j1)
            vh = tape.slice_cols(v, j0, j1)
            scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(dh))
            head_outs.append(tape.matmul(tape.row_softmax(scores), vh))
        attn = proj("o", tape.concat_cols(head_outs))
        h = tape.layer_norm(tape.add(h, attn))

        ffn = tape.matmul(
            tape.relu(tape.matmul(h, tape.transpose(nodes[f"block{i}.w1"]))),
            tape.transpose(nodes[f"block{i}.w2"]),
        )
        h = tape.layer_norm(tape.add(h, ffn))
    return h


def encode(model, bundle, token_ids, phase=PHASE_INFER, rng=None, noise_map=None) -> np.ndarray:
    """Convenience value-only forward; training uses encode_on_tape directly."""
    if phase == PHASE_TRAIN and noise_map is None:
        if rng is None:
            raise ArgumentError("train-phase encode needs an RngStream or noise map")
        noise_map = draw_noise_map(model, rng)
    tape = Tape()
    nodes = make_nodes(tape, model, train=False)
    return encode_on_tape(tape, nodes, model, bundle, token_ids, phase, noise_map).value


def slot_logits_on_tape(
    tape, nodes, model, bundle, context_ids, prompt_ids, sep_id, allowed_idx, phase,
    noise_map=None,
) -> Node:
    """Encode [context; sep; prompt], pool, head-project, gather allowed classes."""
    ids = list(context_ids) + [sep_id] + list(prompt_ids)
    hidden = encode_on_tape(tape, nodes, model, bundle, ids, phase, noise_map)
    pooled = tape.mean_pool_rows(hidden)
    logits = tape.matvec(nodes["head.w"], pooled)
    return tape.gather(logits, allowed_idx)


def predict_slot_value(
    model: ModelParams,
    bundle: PromptBundle,
    context_ids,
    prompt_ids,
    sep_id: int,
    value_vocab,
) -> dict:
    """Distribution over a slot's value vocabulary plus the none class."""
    if not value_vocab:
        raise ArgumentError("value_vocab must be nonempty")
    index = {label: i for i, label in enumerate(model.class_labels)}
    try:
        allowed = [index[v] for v in value_vocab]
    except KeyError as exc:
        raise MissingKeyError(f"value {exc.args[0]!r} not in the model's class labels") from exc
    allowed.append(len(model.class_labels) - 1)  # none class
    tape = Tape()
    nodes = make_nodes(tape, model, train=False)
    logits = slot_logits_on_tape(
        tape, nodes, model, bundle, context_ids, prompt_ids, sep_id, allowed, PHASE_INFER
    )
    probs = softmax(logits.value)
    labels = list(value_vocab) + [NONE_LABEL]
    return dict(zip(labels, probs.tolist()))


# ---------------------------------------------------------------------------
# merged inference (numpy only; the independent fast path)


def build_merged_layers(model: ModelParams, bundle: PromptBundle) -> dict:
    """Merge every adapted projection for deterministic inference."""
    if bundle.pooled_x_sa is None:
        prompt_attend(bundle, model.config.heads)
    pooled = bundle.pooled_x_sa
    routing = infer_routing(model, pooled)
    merged = {}
    for i in range(model.config.num_layers):
        for p in model.adapted_projections:
            layer = model.layer_view(i, p)
            merged[(i, p)] = adapter.merge_for_inference(layer, pooled, routing)
    return merged


def encode_merged(model: ModelParams, merged: dict, token_ids) -> np.ndarray:
    """Plain-numpy encoder where each adapted projection is one dense W plus bias."""
    cfg = model.config
    ids = list(token_ids)
    if len(ids) > cfg.max_seq_len:
        raise ArgumentError(f"sequence length {len(ids)} exceeds max_seq_len {cfg.max_seq_len}")
    h = model.store["embed.tok"][ids]
    if cfg.use_positions:
        h = h + _sinusoidal_positions(len(ids), cfg.hidden_dim)
    dh = cfg.hidden_dim // cfg.heads

    def norm(x):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5)

    for i in range(cfg.num_layers):
        def proj(p):
            if (i, p) in merged:
                ml = merged[(i, p)]
                return h @ ml.w_merged.T + ml.bias
            return h @ model.store[f"block{i}.w{p}"].T

        q, k, v = proj("q"), proj("k"), proj("v")
        outs = []
        for hd in range(cfg.heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            weights = np.apply_along_axis(softmax, 1, scores)
            outs.append(weights @ v[:, sl])
        concat = np.concatenate(outs, axis=1)
        if (i, "o") in merged:
            ml = merged[(i, "o")]
            attn = concat @ ml.w_merged.T + ml.bias
        else:
            attn = concat @ model.store[f"block{i}.wo"].T
        h = norm(h + attn)
        ffn = np.maximum(h @ model.store[f"block{i}.w1"].T, 0.0) @ model.store[f"block{i}.w2"].T
        h = norm(h + ffn)
    return h


def merged_slot_logits(model, merged, context_ids, prompt_ids, sep_id, allowed_idx) -> np.ndarray:
    ids = list(context_ids) + [sep_id] + list(prompt_ids)
    hidden = encode_merged(model, merged, ids)
    pooled = hidden.mean(axis=0)
    return (model.store["head.w"] @ pooled)[np.asarray(allowed_idx, dtype=np.int64)]
