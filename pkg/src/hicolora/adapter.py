"""The hierarchical dual-path low-rank layer.

One adapted linear layer carries a frozen base plus two additive paths:
a single universal low-rank pair applied to the token stream, and a
bank of M down-projections and N up-projections applied to the static
pooled prompt feature, combined per layer mode (lower layers select one
matrix per bank by routed similarity, higher layers sum the full banks).
A learnable gate beta = sigmoid(beta_logit) fuses the two paths; at
inference the whole stack collapses into one dense weight plus a bias.

Everything here is plain numpy on column conventions (h = W @ x); the
encoder composes the same math on the autograd tape for training, and
the merge-equivalence tests hold the two routes together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ContractError
from .numkit import RngStream, cosine_similarity, gumbel_noise, gumbel_softmax, softmax

MODE_HEURISTIC = "heuristic_grouping"
MODE_FULL = "full_collaboration"
PHASE_TRAIN = "train"
PHASE_INFER = "infer"


@dataclass
class HiCoLayerParams:
    base: np.ndarray  # frozen (d_out x d_in): residual or original weight per init
    a_ur: np.ndarray  # r x d_in
    b_ur: np.ndarray  # d_out x r
    a_sa: list  # M arrays, r x d_in
    b_sa: list  # N arrays, d_out x r
    beta_logit: float
    mode: str
    temperature: float = 1.0

    def __post_init__(self):
        if len(self.a_sa) < 1 or len(self.b_sa) < 1:
            raise ArgumentError("need at least one matrix in each semantic bank")
        if self.mode not in (MODE_HEURISTIC, MODE_FULL):
            raise ArgumentError(f"unknown layer mode {self.mode!r}")
        if self.temperature <= 0:
            raise ArgumentError(f"temperature must be positive, got {self.temperature}")

    @property
    def m(self) -> int:
        return len(self.a_sa)

    @property
    def n(self) -> int:
        return len(self.b_sa)

    @property
    def beta(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.beta_logit))


@dataclass
class RoutingDecision:
    domain_weights: np.ndarray  # (M,) selects the down-projection bank entry
    slot_weights: np.ndarray  # (N,) selects the up-projection bank entry
    hard: bool
    phase: str
    noise: dict | None = field(default=None, repr=False)  # recorded draws for replay


@dataclass
class MergedLayer:
    w_merged: np.ndarray  # beta * (base + b_ur @ a_ur)
    bias: np.ndarray  # (1 - beta) * h_sa on the static prompt feature

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.w_merged @ x + self.bias
        return self.w_merged @ x + self.bias[:, None]


def unirep_forward(layer: HiCoLayerParams, x) -> np.ndarray:
    """Frozen base plus the universal low-rank update, low-rank first."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != layer.base.shape[1]:
        raise ArgumentError(f"input dim {x.shape[0]} != layer d_in {layer.base.shape[1]}")
    return layer.base @ x + layer.b_ur @ (layer.a_ur @ x)


def route(
    x_sa_summary,
    domain_centroids,
    slot_centroids,
    phase: str,
    temperature: float,
    rng: RngStream | None = None,
    noise: dict | None = None,
    infer_hard: bool = False,
) -> RoutingDecision:
    """Similarity-routed selection weights over the two banks.

    Logits are the cosines between the pooled prompt feature and each
    centroid, divided by the temperature before any sampling, so a low
    temperature makes even the hard Gumbel draws follow similarity.
    Training draws hard straight-through Gumbel samples (recorded for
    replay); inference uses the plain soft weights unless ``infer_hard``
    asks for the argmax.
    """
    if phase not in (PHASE_TRAIN, PHASE_INFER):
        raise ArgumentError(f"phase must be train or infer, got {phase!r}")
    if temperature <= 0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    x = np.asarray(x_sa_summary, dtype=np.float64).ravel()
    dom = np.asarray(domain_centroids, dtype=np.float64)
    slo = np.asarray(slot_centroids, dtype=np.float64)
    if dom.shape[1] != x.shape[0] or slo.shape[1] != x.shape[0]:
        raise ArgumentError(
            f"summary dim {x.shape[0]} != centroid dims {dom.shape[1]}/{slo.shape[1]}"
        )
    dom_logits = np.array([cosine_similarity(x, c) for c in dom]) / temperature
    slo_logits = np.array([cosine_similarity(x, c) for c in slo]) / temperature

    if phase == PHASE_TRAIN:
        if noise is None:
            if rng is None:
                raise ArgumentError("train-phase routing needs an RngStream or noise")
            noise = {
                "domain": gumbel_noise(rng, dom_logits.size),
                "slot": gumbel_noise(rng, slo_logits.size),
            }
        dw = gumbel_softmax(dom_logits, 1.0, hard=True, noise=noise["domain"])
        sw = gumbel_softmax(slo_logits, 1.0, hard=True, noise=noise["slot"])
        return RoutingDecision(dw, sw, hard=True, phase=phase, noise=noise)

    dw = softmax(dom_logits)
    sw = softmax(slo_logits)
    if infer_hard:
        dw = np.eye(dw.size)[int(np.argmax(dw))]
        sw = np.eye(sw.size)[int(np.argmax(sw))]
    return RoutingDecision(dw, sw, hard=infer_hard, phase=phase, noise=None)


def semadapt_forward_low(layer: HiCoLayerParams, x_sa, routing: RoutingDecision) -> np.ndarray:
    """Lower-layer path: routed single selection, scaled by the bank sizes.

    With hard routing this is exactly the selected pair scaled by the
    scalar counts N and M; soft weights mix the banks before the same
    scaling, which makes the output coincide with the full-collaboration
    path whenever all bank members are equal.
    """
    if layer.mode != MODE_HEURISTIC:
        raise ContractError(f"semadapt_forward_low requires mode {MODE_HEURISTIC}, got {layer.mode}")
    x = np.asarray(x_sa, dtype=np.float64)
    a_hat = sum(w * a for w, a in zip(routing.domain_weights, layer.a_sa))
    b_hat = sum(w * b for w, b in zip(routing.slot_weights, layer.b_sa))
    return layer.base @ x + layer.n * (b_hat @ (layer.m * (a_hat @ x)))


def semadapt_forward_high(layer: HiCoLayerParams, x_sa) -> np.ndarray:
    """Higher-layer path: every down-projection feeds every up-projection."""
    if layer.mode != MODE_FULL:
        raise ContractError(f"semadapt_forward_high requires mode {MODE_FULL}, got {layer.mode}")
    x = np.asarray(x_sa, dtype=np.float64)
    inner = sum(a @ x for a in layer.a_sa)
    return layer.base @ x + sum(b @ inner for b in layer.b_sa)


def semadapt_forward(layer: HiCoLayerParams, x_sa, routing: RoutingDecision | None) -> np.ndarray:
    if layer.mode == MODE_HEURISTIC:
        if routing is None:
            raise ArgumentError("heuristic-mode forward needs a routing decision")
        return semadapt_forward_low(layer, x_sa, routing)
    return semadapt_forward_high(layer, x_sa)


def fuse(h_ur, h_sa, beta_logit: float) -> np.ndarray:
    """Strict convex combination of the two paths, gate in (0, 1)."""
    hu = np.asarray(h_ur, dtype=np.float64)
    hs = np.asarray(h_sa, dtype=np.float64)
    if hu.shape != hs.shape:
        raise ArgumentError(f"fuse shape mismatch: {hu.shape} vs {hs.shape}")
    beta = 1.0 / (1.0 + math.exp(-beta_logit))
    return beta * hu + (1.0 - beta) * hs


def assign_layer_modes(num_layers: int, alpha: float, swap: bool = False) -> list:
    """Mode per encoder block: the top ceil(alpha * num_layers) run full collaboration.

    ``swap`` reverses the assignment (the hierarchy-swap ablation).
    """
    if num_layers < 1:
        raise ArgumentError(f"num_layers must be >= 1, got {num_layers}")
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    num_full = math.ceil(alpha * num_layers)
    modes = [MODE_HEURISTIC] * (num_layers - num_full) + [MODE_FULL] * num_full
    if swap:
        modes = modes[::-1]
    return modes


def merge_for_inference(
    layer: HiCoLayerParams, x_sa_static, routing_static: RoutingDecision | None
) -> MergedLayer:
    """Collapse the two paths into one dense weight plus a bias.

    Valid only for deterministic routing (infer phase); the prompt
    feature is static, so the whole semantic path reduces to a constant
    vector folded into the bias.
    """
    if layer.mode == MODE_HEURISTIC:
        if routing_static is None:
            raise ArgumentError("merging a heuristic-mode layer needs a routing decision")
        if routing_static.phase != PHASE_INFER:
            raise ContractError("stochastic train-phase routing cannot be merged")
    beta = layer.beta
    w_merged = beta * (layer.base + layer.b_ur @ layer.a_ur)
    h_sa = semadapt_forward(layer, np.asarray(x_sa_static, dtype=np.float64), routing_static)
    return MergedLayer(w_merged=w_merged, bias=(1.0 - beta) * h_sa)
