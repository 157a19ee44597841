"""Synthetic multi-domain dialogs, zero-shot splits and the goal metrics.

The generator produces template utterances whose tokens are the domain
name, slot names and slot values, so every gold value appears verbatim
in the history and slots shared across domains (via shared_group ids)
reuse identical value vocabularies - the cross-domain transfer hook.

The turn-level average-goal metric follows its published definition
verbatim: (correct pairs - unique wrongly predicted slot names) / gold
count. It is intentionally unclamped and can go negative on heavily
over-predicting turns; an all-correct prediction scores exactly 1.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

from .errors import ArgumentError, ConfigError, MetricError
from .numkit import RngStream

logger = logging.getLogger(__name__)

UTTERANCE_TEMPLATES = [
    "need a {domain}",
    "book a {domain}",
    "find a {domain}",
]
FOLLOWUP_TEMPLATES = [
    "also",
    "and make it",
]
FILLER_UTTERANCE = "thanks goodbye"


@dataclass
class SlotSpec:
    name: str
    question: str
    values: list
    shared_group: str | None = None


@dataclass
class DomainSchema:
    name: str
    slots: list


@dataclass
class Turn:
    utterance: str
    state: frozenset  # cumulative gold (domain, slot, value) triples


@dataclass
class Dialog:
    id: str
    domain: str
    turns: list


@dataclass
class SplitSpec:
    train_domains: list
    heldout_domain: str
    dev_fraction: float = 0.2

    def __post_init__(self):
        if self.heldout_domain in self.train_domains:
            raise ConfigError(f"held-out domain {self.heldout_domain!r} is in train_domains")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigError(f"dev_fraction must lie in [0, 1), got {self.dev_fraction}")


def validate_schemas(schemas) -> None:
    if len(schemas) < 2:
        raise ConfigError("need at least 2 domain schemas")
    groups: dict = {}
    for schema in schemas:
        if not schema.slots:
            raise ConfigError(f"domain {schema.name!r} has no slots")
        for slot in schema.slots:
            if not slot.values:
                raise ConfigError(f"slot {schema.name}-{slot.name} has an empty value vocabulary")
            if slot.shared_group is not None:
                ref = groups.setdefault(slot.shared_group, list(slot.values))
                if ref != list(slot.values):
                    raise ConfigError(
                        f"slot {schema.name}-{slot.name} breaks shared_group "
                        f"{slot.shared_group!r}: vocabularies differ"
                    )


def generate_corpus(schemas, dialogs_per_domain: int, turns_per_dialog: int, rng: RngStream):
    """Template dialogs with cumulative gold states, deterministic per seed."""
    validate_schemas(schemas)
    if turns_per_dialog < 1:
        raise ArgumentError(f"turns_per_dialog must be >= 1, got {turns_per_dialog}")
    if dialogs_per_domain < 1:
        raise ArgumentError(f"dialogs_per_domain must be >= 1, got {dialogs_per_domain}")
    dialogs = []
    for schema in schemas:
        for d in range(dialogs_per_domain):
            stream = rng.fork((schema.name, d))
            unfilled = list(schema.slots)
            state: set = set()
            turns = []
            for t in range(turns_per_dialog):
                if unfilled:
                    k = min(int(stream.integers(1, 4)), len(unfilled))
                    picked = []
                    for _ in range(k):
                        picked.append(unfilled.pop(int(stream.integers(0, len(unfilled)))))
                    if t == 0:
                        # the domain is named once, on the opening turn
                        template = UTTERANCE_TEMPLATES[
                            int(stream.integers(0, len(UTTERANCE_TEMPLATES)))
                        ]
                        words = template.format(domain=schema.name).split()
                    else:
                        words = FOLLOWUP_TEMPLATES[
                            int(stream.integers(0, len(FOLLOWUP_TEMPLATES)))
                        ].split()
                    for slot in picked:
                        value = slot.values[int(stream.integers(0, len(slot.values)))]
                        state.add((schema.name, slot.name, value))
                        words.extend([slot.name, value])
                    utterance = " ".join(words)
                else:
                    utterance = FILLER_UTTERANCE
                turns.append(Turn(utterance=utterance, state=frozenset(state)))
            dialogs.append(Dialog(id=f"{schema.name}-{d:03d}", domain=schema.name, turns=turns))
    _check_dialog_invariants(dialogs)
    return dialogs


def _check_dialog_invariants(dialogs) -> None:
    for dialog in dialogs:
        history = []
        prev: frozenset = frozenset()
        for turn in dialog.turns:
            history.append(turn.utterance)
            if not prev <= turn.state:
                raise ConfigError(f"dialog {dialog.id}: state is not cumulative")
            joined = " ".join(history)
            for _, _, value in turn.state:
                if value not in joined:
                    raise ConfigError(
                        f"dialog {dialog.id}: value {value!r} missing from history"
                    )
            prev = turn.state


def high_freq_terms(corpus, top_k: int, stoplist=frozenset()):
    """Most frequent whitespace tokens, ties broken lexicographically."""
    if top_k < 1:
        raise ArgumentError(f"top_k must be >= 1, got {top_k}")
    if not corpus:
        raise ArgumentError("high_freq_terms needs a nonempty corpus")
    counts: Counter = Counter()
    for dialog in corpus:
        for turn in dialog.turns:
            counts.update(tok for tok in turn.utterance.split() if tok not in stoplist)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in ranked[:top_k]]


def jga(preds, golds) -> float:
    """Fraction of turns whose predicted set exactly matches the gold set."""
    if len(preds) != len(golds):
        raise ArgumentError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not golds:
        raise ArgumentError("jga needs at least one turn")
    hits = sum(1 for p, g in zip(preds, golds) if frozenset(p) == frozenset(g))
    return hits / len(golds)


def aga(preds, golds, skip_empty_gold: bool = False) -> float:
    """Per-turn (correct - unique wrong slot names) / gold count, averaged.

    A turn with empty gold leaves the formula undefined; it errors unless
    ``skip_empty_gold`` explicitly drops (and logs) such turns.
    """
    if len(preds) != len(golds):
        raise ArgumentError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    scores = []
    for i, (p, g) in enumerate(zip(preds, golds)):
        p, g = frozenset(p), frozenset(g)
        if not g:
            if skip_empty_gold:
                logger.warning("aga: skipping turn %d with empty gold state", i)
                continue
            raise MetricError(f"turn {i} has an empty gold state; aga divides by |gold|")
        correct = len(g & p)
        wrong_slots = {(d, s) for d, s, _ in (p - g)}
        scores.append((correct - len(wrong_slots)) / len(g))
    if not scores:
        raise MetricError("aga: no turns left to score")
    return sum(scores) / len(scores)


def zero_shot_split(corpus, spec: SplitSpec, rng: RngStream):
    """Hold out one domain entirely; split the rest into train/dev by seeded shuffle."""
    domains = {d.domain for d in corpus}
    if spec.heldout_domain not in domains:
        raise ConfigError(f"held-out domain {spec.heldout_domain!r} absent from corpus")
    test = [d for d in corpus if d.domain == spec.heldout_domain]
    rest = [d for d in corpus if d.domain != spec.heldout_domain]
    order = sorted(rest, key=lambda d: d.id)
    rng.shuffle(order)
    dev_count = int(round(spec.dev_fraction * len(order)))
    dev = order[:dev_count]
    train = order[dev_count:]
    if not dev:
        logger.warning("zero_shot_split: dev fraction %.3f yields an empty dev set", spec.dev_fraction)
    for d in train + dev:
        assert d.domain != spec.heldout_domain
    return train, dev, test


# ---------------------------------------------------------------------------
# serialization (also the ingestion schema for externally converted corpora)


def schemas_to_json(schemas) -> list:
    return [
        {
            "name": s.name,
            "slots": [
                {
                    "slot_name": sl.name,
                    "question": sl.question,
                    "values": list(sl.values),
                    "shared_group": sl.shared_group,
                }
                for sl in s.slots
            ],
        }
        for s in schemas
    ]


def schemas_from_json(payload) -> list:
    schemas = []
    for entry in payload:
        slots = [
            SlotSpec(
                name=sl["slot_name"],
                question=sl["question"],
                values=list(sl["values"]),
                shared_group=sl.get("shared_group"),
            )
            for sl in entry["slots"]
        ]
        schemas.append(DomainSchema(name=entry["name"], slots=slots))
    return schemas


def corpus_to_json(schemas, dialogs) -> dict:
    return {
        "schemas": schemas_to_json(schemas),
        "dialogs": [
            {
                "id": d.id,
                "domain": d.domain,
                "turns": [
                    {"utterance": t.utterance, "state": sorted([list(x) for x in t.state])}
                    for t in d.turns
                ],
            }
            for d in dialogs
        ],
    }


def corpus_from_json(payload) -> tuple:
    schemas = schemas_from_json(payload["schemas"])
    dialogs = []
    for entry in payload["dialogs"]:
        turns = [
            Turn(
                utterance=t["utterance"],
                state=frozenset(tuple(x) for x in t["state"]),
            )
            for t in entry["turns"]
        ]
        dialogs.append(Dialog(id=entry["id"], domain=entry["domain"], turns=turns))
    return schemas, dialogs


def save_corpus(schemas, dialogs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(corpus_to_json(schemas, dialogs), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_corpus(path) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        return corpus_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# builtin toy schemas: two transport domains with shared time vocabularies
# plus one venue domain, sized for zero-shot transfer experiments


# Arrival and departure vocabularies are disjoint so a slot's value is
# recoverable from token presence; both are shared across the two
# transport domains, which is the cross-domain transfer hook under test.
ARRIVE_TIMES = ["5pm", "6pm", "8pm", "9pm"]
LEAVE_TIMES = ["7am", "9am", "11am", "noon"]
DAYS = ["monday", "tuesday", "friday", "saturday"]
FOODS = ["indian", "chinese", "italian", "thai"]
PRICES = ["cheap", "moderate", "expensive"]
AREAS = ["centre", "north", "south", "east"]


def toy_transport_schemas():
    return [
        DomainSchema(
            name="train",
            slots=[
                SlotSpec("arriveby", "arrive by what time?", list(ARRIVE_TIMES), "arrive_time"),
                SlotSpec("leaveat", "leave at what time?", list(LEAVE_TIMES), "leave_time"),
                SlotSpec("day", "travel on which day?", list(DAYS)),
            ],
        ),
        DomainSchema(
            name="taxi",
            slots=[
                SlotSpec("arriveby", "arrive by what time?", list(ARRIVE_TIMES), "arrive_time"),
                SlotSpec("leaveat", "leave at what time?", list(LEAVE_TIMES), "leave_time"),
            ],
        ),
        DomainSchema(
            name="restaurant",
            slots=[
                SlotSpec("food", "serving what kind of food?", list(FOODS)),
                SlotSpec("pricerange", "how expensive should it be?", list(PRICES)),
                SlotSpec("area", "in which part of town?", list(AREAS)),
            ],
        ),
    ]
