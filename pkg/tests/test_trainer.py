import dataclasses
import json

import numpy as np
import pytest

from hicolora.dstsim import (
    DomainSchema,
    SlotSpec,
    generate_corpus,
    toy_transport_schemas,
)
from hicolora.errors import ArgumentError, ConfigError, NumericalError
from hicolora.model import EncoderConfig
from hicolora.numkit import RngStream
from hicolora.trainer import (
    TrainConfig,
    _state_from_logits,
    adamw_init,
    adamw_step,
    build_task,
    enumerate_samples,
    evaluate,
    prepare_clusters,
    randomize_clusters,
    run_ablation_grid,
    run_experiment,
    single_cluster,
    variant_config,
)

ENC = EncoderConfig(
    num_layers=1, hidden_dim=8, heads=2, ffn_dim=16, vocab_size=0, rank=2, max_seq_len=48
)


def fast_cfg(**kw):
    base = dict(
        learning_rate=0.05,
        weight_decay=0.01,
        batch_size=4,
        grad_accum_steps=1,
        seed=3407,
        epochs=2,
        early_stop_patience=5,
        rank=2,
    )
    base.update(kw)
    return TrainConfig(**base)


def toy_corpus(seed=5, dialogs=3, turns=2):
    schemas = toy_transport_schemas()
    return schemas, generate_corpus(schemas, dialogs, turns, RngStream(seed))


class TestAdamW:
    def test_zero_grad_zero_decay_fixed_point(self):
        params = {"w": np.array([1.0, -2.0])}
        state = adamw_init(params)
        adamw_step(params, {"w": np.zeros(2)}, state, fast_cfg(weight_decay=0.0))
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_size_is_lr_sign(self):
        cfg = fast_cfg(learning_rate=1e-3, weight_decay=0.0)
        params = {"w": np.asarray(0.0)}
        state = adamw_init(params)
        adamw_step(params, {"w": np.asarray(7.3)}, state, cfg)
        assert float(params["w"]) == pytest.approx(-1e-3, rel=1e-6)
        params2 = {"w": np.asarray(0.0)}
        adamw_step(params2, {"w": np.asarray(-0.2)}, adamw_init(params2), cfg)
        assert float(params2["w"]) == pytest.approx(1e-3, rel=1e-6)

    def test_decay_only_multiplicative_shrink(self):
        cfg = fast_cfg(learning_rate=0.1, weight_decay=0.5)
        params = {"w": np.array([2.0, -4.0])}
        adamw_step(params, {"w": np.zeros(2)}, adamw_init(params), cfg)
        np.testing.assert_allclose(params["w"], np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))

    def test_non_finite_gradient_names_parameter(self):
        params = {"bad": np.asarray(1.0)}
        with pytest.raises(NumericalError, match="bad"):
            adamw_step(params, {"bad": np.asarray(np.nan)}, adamw_init(params), fast_cfg())


class TestTrainConfig:
    def test_defaults_match_reference_protocol(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4
        assert cfg.weight_decay == 0.01
        assert cfg.batch_size == 8
        assert cfg.grad_accum_steps == 8
        assert cfg.seed == 3407
        assert cfg.epochs == 5
        assert cfg.early_stop_patience == 5
        assert cfg.rank == 8
        assert cfg.lam == 0.5
        assert cfg.alpha == 0.5

    def test_bad_fusion_mode(self):
        with pytest.raises(ConfigError):
            TrainConfig(fusion_mode="frozen")


class TestTrainLoop:
    def test_lr_zero_leaves_params_bit_identical(self):
        schemas, corpus = toy_corpus()
        cfg = fast_cfg(learning_rate=0.0, epochs=1)
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        fresh = run_experiment(schemas, corpus, "taxi", ENC, dataclasses.replace(cfg, epochs=1))
        for name in result.model.trainable:
            np.testing.assert_array_equal(result.model.store[name], fresh.model.store[name])
        # and equal to a freshly built, untrained model's values
        assert float(np.abs(result.model.store["head.w"]).max()) == 0.0

    def test_overfit_single_example(self):
        schemas = [
            DomainSchema("alpha", [SlotSpec("color", "which color does the user want?",
                                            ["red", "blue", "green"])]),
            DomainSchema("beta", [SlotSpec("shape", "which shape does the user want?",
                                           ["round", "square"])]),
        ]
        corpus = generate_corpus(schemas, 1, 1, RngStream(2))
        cfg = fast_cfg(learning_rate=0.05, epochs=50, batch_size=1, weight_decay=0.0)
        result = run_experiment(schemas, corpus, "beta", ENC, cfg, dev_fraction=0.0)
        losses = result.history.train_loss
        assert losses[-1] < 0.1
        assert losses[-1] < losses[0]

    def test_same_seed_identical_history(self):
        schemas, corpus = toy_corpus()
        cfg = fast_cfg()
        r1 = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        r2 = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        assert r1.history.train_loss == r2.history.train_loss
        assert r1.history.dev_loss == r2.history.dev_loss
        assert r1.metrics == r2.metrics
        assert json.dumps(r1.history.to_json()) == json.dumps(r2.history.to_json())

    def test_frozen_tensors_bit_identical_after_training(self):
        schemas, corpus = toy_corpus()
        cfg = fast_cfg()
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        untrained = run_experiment(
            schemas, corpus, "taxi", ENC, dataclasses.replace(cfg, learning_rate=0.0, epochs=1)
        )
        trainable = set(result.model.trainable)
        for name, value in result.model.store.items():
            if name in trainable:
                continue
            np.testing.assert_array_equal(value, untrained.model.store[name])

    def test_gradient_accumulation_equivalence(self):
        schemas, corpus = toy_corpus(dialogs=2, turns=2)
        micro = fast_cfg(batch_size=1, grad_accum_steps=8, epochs=1)
        full = fast_cfg(batch_size=8, grad_accum_steps=1, epochs=1)
        r_micro = run_experiment(schemas, corpus, "taxi", ENC, micro)
        r_full = run_experiment(schemas, corpus, "taxi", ENC, full)
        for name in r_micro.model.trainable:
            a = r_micro.model.store[name]
            b = r_full.model.store[name]
            assert float(np.max(np.abs(a - b))) <= 1e-10, name

    def test_early_stop_counts_plateaus(self):
        schemas, corpus = toy_corpus(dialogs=2)
        cfg = fast_cfg(learning_rate=0.0, epochs=8, early_stop_patience=2)
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        # zero learning rate: dev loss is constant, first epoch sets the best,
        # each later epoch is a plateau, so the stop fires at epoch index 2
        assert result.history.early_stop_epoch == 2
        assert len(result.history.train_loss) == 3


class TestEvaluate:
    def test_oracle_logits_give_perfect_metrics(self):
        schemas, corpus = toy_corpus(dialogs=1, turns=2)
        task = build_task(schemas, corpus)
        preds, golds = [], []
        for dialog in corpus:
            for t, turn in enumerate(dialog.turns):
                logits = {}
                gold_by_slot = {s: v for d, s, v in turn.state}
                for slot in task.slots_by_domain[dialog.domain]:
                    values = task.slot_values[(dialog.domain, slot)]
                    scores = np.zeros(len(values) + 1)
                    if slot in gold_by_slot:
                        scores[values.index(gold_by_slot[slot])] = 10.0
                    else:
                        scores[-1] = 10.0
                    logits[slot] = scores
                preds.append(_state_from_logits(task, dialog.domain, logits))
                golds.append(turn.state)
        assert preds == golds

    def test_all_none_logits_predict_empty(self):
        schemas, corpus = toy_corpus(dialogs=1, turns=1)
        task = build_task(schemas, corpus)
        dialog = corpus[0]
        logits = {
            slot: np.array([0.0] * len(task.slot_values[(dialog.domain, slot)]) + [5.0])
            for slot in task.slots_by_domain[dialog.domain]
        }
        assert _state_from_logits(task, dialog.domain, logits) == frozenset()

    def test_merged_check_passes_on_trained_model(self):
        schemas, corpus = toy_corpus(dialogs=2)
        cfg = fast_cfg(epochs=1)
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg, check_merge=True)
        metrics = evaluate(result.model, result.task, result.splits[2], result.bundle,
                           check_merge=True)
        assert metrics == result.metrics

    def test_empty_split_rejected(self):
        schemas, corpus = toy_corpus(dialogs=1)
        cfg = fast_cfg(epochs=1)
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        with pytest.raises(ArgumentError):
            evaluate(result.model, result.task, [], result.bundle)


class TestClusterManipulation:
    def test_randomize_keeps_counts(self):
        schemas, _ = toy_corpus()
        clusters = prepare_clusters(schemas, ENC.hidden_dim)
        shuffled = randomize_clusters(clusters, RngStream(3))
        assert shuffled.m == clusters.m and shuffled.n == clusters.n
        assert sorted(set(shuffled.domain_labels.tolist())) == list(range(clusters.m))
        assert sorted(set(shuffled.slot_labels.tolist())) == list(range(clusters.n))
        for row in shuffled.slot_centroids:
            assert abs(np.linalg.norm(row) - 1.0) <= 1e-12

    def test_single_cluster_counts(self):
        schemas, _ = toy_corpus()
        clusters = prepare_clusters(schemas, ENC.hidden_dim)
        solo = single_cluster(clusters)
        assert solo.m == 1 and solo.n == 1
        assert solo.domain_centroids.shape == (1, ENC.hidden_dim)


class TestAblationGrid:
    def test_full_only_equals_plain_run(self):
        schemas, corpus = toy_corpus(dialogs=2)
        cfg = fast_cfg(epochs=1)
        rows = run_ablation_grid(schemas, corpus, "taxi", ENC, cfg, variants=("full",))
        plain = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        assert len(rows) == 1
        assert rows[0]["variant"] == "full"
        assert rows[0]["jga"] == plain.metrics["jga"]
        assert rows[0]["aga"] == plain.metrics["aga"]

    def test_static_fusion_freezes_beta(self):
        schemas, corpus = toy_corpus(dialogs=2)
        cfg = variant_config(fast_cfg(epochs=1), "static_fusion")
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        assert not any(n.endswith("beta_logit") for n in result.model.trainable)
        for name, value in result.model.store.items():
            if name.endswith("beta_logit"):
                assert float(value) == 0.0

    def test_no_cluster_keeps_counts(self):
        schemas, corpus = toy_corpus(dialogs=2)
        cfg = variant_config(fast_cfg(epochs=1), "no_cluster")
        result = run_experiment(schemas, corpus, "taxi", ENC, cfg)
        reference = prepare_clusters(schemas, ENC.hidden_dim)
        assert result.clusters.m == reference.m
        assert result.clusters.n == reference.n

    def test_unknown_variant_rejected(self):
        schemas, corpus = toy_corpus(dialogs=1)
        with pytest.raises(ConfigError):
            run_ablation_grid(schemas, corpus, "taxi", ENC, fast_cfg(), variants=("mystery",))

    def test_variant_config_changes_one_knob(self):
        cfg = fast_cfg()
        assert variant_config(cfg, "swap_hier").swap_modes is True
        assert variant_config(cfg, "kaiming").init_strategy == "kaiming"
        assert variant_config(cfg, "pissa").init_strategy == "pissa"
        assert variant_config(cfg, "milora").init_strategy == "milora"
        assert variant_config(cfg, "no_cluster").clustering_enabled is False
        assert variant_config(cfg, "full") == cfg


class TestSampleEnumeration:
    def test_every_turn_slot_pair(self):
        schemas, corpus = toy_corpus(dialogs=1, turns=2)
        task = build_task(schemas, corpus)
        samples = enumerate_samples(task, corpus)
        expected = sum(len(task.slots_by_domain[d.domain]) * len(d.turns) for d in corpus)
        assert len(samples) == expected
