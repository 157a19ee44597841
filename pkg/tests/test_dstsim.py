import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hicolora.dstsim import (
    Dialog,
    DomainSchema,
    SlotSpec,
    SplitSpec,
    Turn,
    aga,
    corpus_from_json,
    corpus_to_json,
    generate_corpus,
    high_freq_terms,
    jga,
    load_corpus,
    save_corpus,
    toy_transport_schemas,
    zero_shot_split,
)
from hicolora.errors import ArgumentError, ConfigError, MetricError
from hicolora.numkit import RngStream


def single_turn_dialog(domain, utterance, state):
    return Dialog(id=f"{domain}-x", domain=domain, turns=[Turn(utterance, frozenset(state))])


class TestGenerate:
    def test_minimal(self):
        schemas = [
            DomainSchema("a", [SlotSpec("s", "q?", ["v1"])]),
            DomainSchema("b", [SlotSpec("t", "r?", ["w1"])]),
        ]
        corpus = generate_corpus(schemas, 1, 1, RngStream(1))
        assert len(corpus) == 2
        assert len(corpus[0].turns) == 1
        assert corpus[0].turns[0].state == frozenset({("a", "s", "v1")})

    def test_deterministic(self):
        schemas = toy_transport_schemas()
        c1 = generate_corpus(schemas, 3, 3, RngStream(42))
        c2 = generate_corpus(schemas, 3, 3, RngStream(42))
        assert corpus_to_json(schemas, c1) == corpus_to_json(schemas, c2)

    def test_cumulative_state_and_values_in_history(self):
        corpus = generate_corpus(toy_transport_schemas(), 4, 3, RngStream(7))
        for dialog in corpus:
            prev = frozenset()
            history = []
            for turn in dialog.turns:
                history.append(turn.utterance)
                assert prev <= turn.state
                for _, _, value in turn.state:
                    assert value in " ".join(history)
                prev = turn.state

    def test_shared_group_vocabularies_identical(self):
        schemas = toy_transport_schemas()
        corpus = generate_corpus(schemas, 20, 3, RngStream(9))
        seen = {}
        for dialog in corpus:
            for turn in dialog.turns:
                for d, s, v in turn.state:
                    if s in ("arriveby", "leaveat"):
                        seen.setdefault((s, d), set()).add(v)
        vocab = {sl.name: set(sl.values) for sl in schemas[0].slots}
        for (s, d), values in seen.items():
            assert values <= vocab[s]

    def test_shared_group_mismatch_rejected(self):
        schemas = [
            DomainSchema("a", [SlotSpec("s", "q?", ["x"], "g")]),
            DomainSchema("b", [SlotSpec("s", "q?", ["y"], "g")]),
        ]
        with pytest.raises(ConfigError):
            generate_corpus(schemas, 1, 1, RngStream(0))

    def test_empty_vocab_rejected(self):
        schemas = [
            DomainSchema("a", [SlotSpec("s", "q?", [])]),
            DomainSchema("b", [SlotSpec("t", "r?", ["w"])]),
        ]
        with pytest.raises(ConfigError):
            generate_corpus(schemas, 1, 1, RngStream(0))


class TestHighFreqTerms:
    def test_counting(self):
        corpus = [single_turn_dialog("d", "a a b", set())]
        assert high_freq_terms(corpus, 1) == ["a"]

    def test_stoplist(self):
        corpus = [single_turn_dialog("d", "a a b", set())]
        assert high_freq_terms(corpus, 1, stoplist={"a"}) == ["b"]

    def test_tie_break_lexicographic(self):
        corpus = [single_turn_dialog("d", "y x", set())]
        assert high_freq_terms(corpus, 2) == ["x", "y"]

    def test_empty_corpus(self):
        with pytest.raises(ArgumentError):
            high_freq_terms([], 3)


class TestJga:
    def test_perfect(self):
        golds = [{("d", "a", "1")}, {("d", "a", "1"), ("d", "b", "2")}]
        assert jga(golds, golds) == 1.0

    def test_half(self):
        golds = [{("d", "a", "1")}, {("d", "b", "2")}]
        preds = [{("d", "a", "1")}, {("d", "b", "3")}]
        assert jga(preds, golds) == 0.5

    def test_empty_sets_match(self):
        assert jga([set()], [set()]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            jga([set()], [set(), set()])


class TestAga:
    def test_wrong_value_cancels_correct(self):
        gold = [{("d", "a", "1"), ("d", "b", "2")}]
        pred = [{("d", "a", "1"), ("d", "b", "3")}]
        assert aga(pred, gold) == 0.0

    def test_perfect(self):
        gold = [{("d", "a", "1"), ("d", "b", "2")}]
        assert aga(gold, gold) == 1.0

    def test_negative_score(self):
        gold = [{("d", "a", "1")}]
        pred = [{("d", "b", "2"), ("d", "c", "3")}]
        assert aga(pred, gold) == -2.0

    def test_unique_slot_names_counted_once(self):
        gold = [{("d", "a", "1")}]
        pred = [{("d", "a", "1"), ("d", "b", "2"), ("d", "b", "3")}]
        # two wrong triples but a single wrong slot name
        assert aga(pred, gold) == 0.0

    def test_empty_gold_errors(self):
        with pytest.raises(MetricError):
            aga([set()], [set()])

    def test_empty_gold_skipped_with_flag(self, caplog):
        gold = [set(), {("d", "a", "1")}]
        pred = [set(), {("d", "a", "1")}]
        with caplog.at_level("WARNING"):
            assert aga(pred, gold, skip_empty_gold=True) == 1.0
        assert "skipping" in caplog.text

    def test_order_invariance(self):
        gold = [{("d", "a", "1"), ("d", "b", "2"), ("d", "c", "3")}]
        pred = [{("d", "c", "3"), ("d", "a", "1")}]
        assert aga(pred, gold) == aga([set(reversed(list(pred[0])))], gold)

    @settings(max_examples=200)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_jga_one_implies_aga_one(self, seed):
        rng = RngStream(seed)
        golds = []
        for _ in range(int(rng.integers(1, 5))):
            turn = {
                ("d", f"s{int(rng.integers(0, 5))}", f"v{int(rng.integers(0, 5))}")
                for _ in range(int(rng.integers(1, 4)))
            }
            golds.append(turn)
        preds = [set(g) for g in golds]
        assert jga(preds, golds) == 1.0
        assert aga(preds, golds) == 1.0


class TestZeroShotSplit:
    def make_corpus(self):
        return generate_corpus(toy_transport_schemas(), 5, 2, RngStream(3))

    def test_heldout_only_in_test(self):
        corpus = self.make_corpus()
        spec = SplitSpec(train_domains=["train", "restaurant"], heldout_domain="taxi")
        train, dev, test = zero_shot_split(corpus, spec, RngStream(4))
        assert all(d.domain == "taxi" for d in test)
        assert all(d.domain != "taxi" for d in train + dev)
        assert len(test) == 5

    def test_partition(self):
        corpus = self.make_corpus()
        spec = SplitSpec(train_domains=["train", "restaurant"], heldout_domain="taxi")
        train, dev, test = zero_shot_split(corpus, spec, RngStream(5))
        ids = sorted(d.id for d in train + dev + test)
        assert ids == sorted(d.id for d in corpus)
        assert len(set(ids)) == len(ids)

    def test_zero_dev_fraction_warns(self, caplog):
        corpus = self.make_corpus()
        spec = SplitSpec(train_domains=["train", "restaurant"], heldout_domain="taxi",
                         dev_fraction=0.0)
        with caplog.at_level("WARNING"):
            _, dev, _ = zero_shot_split(corpus, spec, RngStream(6))
        assert dev == []
        assert "empty dev set" in caplog.text

    def test_missing_heldout_domain(self):
        corpus = self.make_corpus()
        spec = SplitSpec(train_domains=["train"], heldout_domain="hotel")
        with pytest.raises(ConfigError):
            zero_shot_split(corpus, spec, RngStream(7))

    def test_heldout_in_train_domains_rejected(self):
        with pytest.raises(ConfigError):
            SplitSpec(train_domains=["taxi"], heldout_domain="taxi")


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        schemas = toy_transport_schemas()
        corpus = generate_corpus(schemas, 2, 2, RngStream(8))
        path = tmp_path / "corpus.json"
        save_corpus(schemas, corpus, path)
        schemas2, corpus2 = load_corpus(path)
        assert corpus_to_json(schemas2, corpus2) == corpus_to_json(schemas, corpus)

    def test_byte_identical_rewrites(self, tmp_path):
        schemas = toy_transport_schemas()
        corpus = generate_corpus(schemas, 2, 2, RngStream(8))
        p1, p2 = tmp_path / "c1.json", tmp_path / "c2.json"
        save_corpus(schemas, corpus, p1)
        save_corpus(schemas, corpus, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_json_shape(self):
        schemas = toy_transport_schemas()
        corpus = generate_corpus(schemas, 1, 1, RngStream(9))
        payload = corpus_to_json(schemas, corpus)
        assert set(payload) == {"schemas", "dialogs"}
        dialog = payload["dialogs"][0]
        assert set(dialog) == {"id", "domain", "turns"}
        assert set(dialog["turns"][0]) == {"utterance", "state"}
        schemas2, dialogs2 = corpus_from_json(payload)
        assert dialogs2[0].turns[0].state == corpus[0].turns[0].state
