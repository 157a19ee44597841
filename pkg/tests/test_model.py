import math

import numpy as np
import pytest
from conftest import fresh_bundle, make_clusters, tiny_model

from hicolora.adapter import PHASE_INFER, PHASE_TRAIN, unirep_forward
from hicolora.autograd import Tape, grad_check
from hicolora.errors import ArgumentError, MissingKeyError
from hicolora.init import STRATEGIES
from hicolora.model import (
    EncoderConfig,
    PromptBundle,
    Vocab,
    build_merged_layers,
    build_model,
    draw_noise_map,
    encode,
    encode_on_tape,
    make_nodes,
    merged_slot_logits,
    predict_slot_value,
    prompt_attend,
    slot_logits_on_tape,
    trainable_params,
)
from hicolora.numkit import RngStream, softmax


def attention_oracle(q, kv, heads):
    """Hand-rolled multi-head attention evaluation, independent of the module."""
    d = q.shape[1]
    dh = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            scores = np.array([q[i, sl] @ kv[j, sl] / math.sqrt(dh) for j in range(kv.shape[0])])
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            out[i, sl] = sum(w[j] * kv[j, sl] for j in range(kv.shape[0]))
    return out


class TestVocab:
    def test_roundtrip_and_sep(self):
        v = Vocab(["b", "a", "b"])
        assert len(v) == 3
        assert v.encode(["a", "b"]) == [v.token_to_id["a"], v.token_to_id["b"]]
        assert v.sep_id == v.token_to_id["<sep>"]

    def test_unknown_token(self):
        with pytest.raises(MissingKeyError):
            Vocab(["a"]).encode(["zzz"])


class TestPromptAttend:
    def test_single_pair_returns_value(self):
        b = PromptBundle(
            term_vectors=np.array([[1.0, 0.0]]), description_vectors=np.array([[0.3, 0.4]])
        )
        seq, pooled = prompt_attend(b, heads=1)
        np.testing.assert_allclose(seq, [[0.3, 0.4]])
        np.testing.assert_allclose(pooled, np.array([0.3, 0.4]) / 0.5)

    def test_identical_descriptions(self):
        desc = np.tile(np.array([[0.5, -0.2, 0.1, 0.9]]), (3, 1))
        b = PromptBundle(term_vectors=RngStream(1).normal(size=(2, 4)), description_vectors=desc)
        seq, _ = prompt_attend(b, heads=2)
        np.testing.assert_allclose(seq, np.tile(desc[0], (2, 1)), atol=1e-12)

    def test_matches_hand_oracle(self):
        rng = RngStream(2)
        q = rng.normal(size=(3, 8))
        kv = rng.normal(size=(4, 8))
        b = PromptBundle(term_vectors=q, description_vectors=kv)
        seq, pooled = prompt_attend(b, heads=2)
        np.testing.assert_allclose(seq, attention_oracle(q, kv, 2), atol=1e-12)
        assert abs(np.linalg.norm(pooled) - 1.0) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            prompt_attend(PromptBundle(np.zeros((0, 4)), np.ones((2, 4))), 2)


class TestBuildModel:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_initial_forward_preserves_base_path(self, strategy):
        model = tiny_model(strategy=strategy, seed=3)
        rng = RngStream(4)
        for i in range(model.config.num_layers):
            for p in model.adapted_projections:
                layer = model.layer_view(i, p)
                w0 = model.w0[f"block{i}.{p}"]
                x = rng.normal(size=model.config.hidden_dim)
                got = unirep_forward(layer, x)
                ref = w0 @ x
                tol = 0.0 if strategy == "kaiming" else 1e-9
                if strategy == "kaiming":
                    np.testing.assert_array_equal(got, ref)
                else:
                    assert np.max(np.abs(got - ref)) <= tol * max(1.0, np.abs(ref).max()) + 1e-12

    def test_head_starts_at_zero(self):
        model = tiny_model(seed=5)
        np.testing.assert_array_equal(model.store["head.w"], 0.0)

    def test_static_beta_not_trainable(self):
        model = tiny_model(seed=6, static_beta=True)
        assert not any(name.endswith("beta_logit") for name in model.trainable)

    def test_dim_mismatch_rejected(self):
        cfg = EncoderConfig(num_layers=1, hidden_dim=8, heads=2, ffn_dim=16, vocab_size=10, rank=2)
        clusters = make_clusters(12, 2, 2)
        with pytest.raises(ArgumentError):
            build_model(cfg, clusters, 3, ["a", "b", "none"], RngStream(0))


class TestEncode:
    def test_deterministic(self):
        model = tiny_model(seed=7)
        bundle = fresh_bundle(model, seed=8)
        ids = [1, 4, 2, 9]
        h1 = encode(model, bundle, ids, PHASE_INFER)
        h2 = encode(model, bundle, ids, PHASE_INFER)
        np.testing.assert_array_equal(h1, h2)
        noise = draw_noise_map(model, RngStream(9))
        t1 = encode(model, bundle, ids, PHASE_TRAIN, noise_map=noise)
        t2 = encode(model, bundle, ids, PHASE_TRAIN, noise_map=noise)
        np.testing.assert_array_equal(t1, t2)

    def test_permutation_equivariance_without_positions(self):
        model = tiny_model(seed=10, use_positions=False)
        bundle = fresh_bundle(model, seed=11)
        ids = [3, 7, 1, 12, 5]
        perm = [2, 0, 4, 1, 3]
        h = encode(model, bundle, ids, PHASE_INFER)
        hp = encode(model, bundle, [ids[i] for i in perm], PHASE_INFER)
        np.testing.assert_allclose(hp, h[perm], atol=1e-12)

    def test_positions_break_equivariance(self):
        model = tiny_model(seed=10, use_positions=True)
        bundle = fresh_bundle(model, seed=11)
        h = encode(model, bundle, [3, 7, 1], PHASE_INFER)
        hp = encode(model, bundle, [7, 3, 1], PHASE_INFER)
        assert not np.allclose(hp[[1, 0, 2]], h)

    def test_overlong_sequence_rejected(self):
        model = tiny_model(seed=12)
        bundle = fresh_bundle(model, seed=13)
        with pytest.raises(ArgumentError):
            encode(model, bundle, [0] * 40, PHASE_INFER)

    def test_collapse_to_plain_encoder(self):
        """Zero adapters + beta 0.5 + x_sa == x collapses both paths to the base."""
        model = tiny_model(d=8, layers=1, heads=2, ffn=16, r=2, vocab=10, seed=14,
                           strategy="kaiming", use_positions=False)
        # zero the kaiming A matrices so every adapter contribution vanishes
        for name in list(model.store):
            if ".a_ur" in name or ".a_sa" in name:
                model.store[name] = np.zeros_like(model.store[name])
        ids = [4]
        x = model.store["embed.tok"][4]
        bundle = PromptBundle(
            term_vectors=np.zeros((1, 8)), description_vectors=np.zeros((1, 8)),
            pooled_x_sa=x.copy(),
        )
        got = encode(model, bundle, ids, PHASE_INFER)

        # independent plain-encoder oracle using the recorded original weights
        h = x[None, :]
        w0q = model.w0["block0.q"]
        w0v = model.w0["block0.v"]
        wk = model.store["block0.wk"]
        wo = model.store["block0.wo"]
        q, k, v = h @ w0q.T, h @ wk.T, h @ w0v.T
        dh = 4
        outs = []
        for hd in range(2):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            w = np.exp(scores - scores.max())
            w = w / w.sum()
            outs.append(w @ v[:, sl])
        attn = np.concatenate(outs, axis=1) @ wo.T
        h1 = h + attn
        h1 = (h1 - h1.mean(axis=1, keepdims=True)) / np.sqrt(h1.var(axis=1, keepdims=True) + 1e-5)
        ffn = np.maximum(h1 @ model.store["block0.w1"].T, 0) @ model.store["block0.w2"].T
        h2 = h1 + ffn
        h2 = (h2 - h2.mean(axis=1, keepdims=True)) / np.sqrt(h2.var(axis=1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(got, h2, atol=1e-9)


class TestPredict:
    def test_distribution_sums_to_one_and_uniform_at_zero_head(self):
        model = tiny_model(seed=15, num_classes=5)
        bundle = fresh_bundle(model, seed=16)
        dist = predict_slot_value(model, bundle, [1, 2, 3], [4, 5], sep_id=0,
                                  value_vocab=["v0", "v1", "v2"])
        assert set(dist) == {"v0", "v1", "v2", "none"}
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
        for p in dist.values():
            assert p == pytest.approx(0.25, abs=1e-12)

    def test_unknown_value_label(self):
        model = tiny_model(seed=17)
        bundle = fresh_bundle(model, seed=18)
        with pytest.raises(MissingKeyError):
            predict_slot_value(model, bundle, [1], [2], 0, ["mystery"])

    def test_empty_value_vocab(self):
        model = tiny_model(seed=17)
        bundle = fresh_bundle(model, seed=18)
        with pytest.raises(ArgumentError):
            predict_slot_value(model, bundle, [1], [2], 0, [])

    def test_overfit_single_example(self):
        model = tiny_model(seed=19, num_classes=4, layers=1, d=8)
        bundle = fresh_bundle(model, seed=20)
        context, prompt = [1, 5, 7, 2], [3, 9]
        allowed = [0, 1, 2, 3]
        target = 1
        params = trainable_params(model)
        noise = draw_noise_map(model, RngStream(21))
        for _ in range(50):
            tape = Tape()
            nodes = make_nodes(tape, model, train=True)
            logits = slot_logits_on_tape(
                tape, nodes, model, bundle, context, prompt, 0, allowed, PHASE_TRAIN, noise
            )
            loss = tape.cross_entropy(logits, target)
            grads = tape.backward(loss)
            for name in params:
                model.store[name] = model.store[name] - 0.5 * grads[name]
        dist = predict_slot_value(model, bundle, context, prompt, 0, ["v0", "v1", "v2"])
        assert dist["v1"] > 0.9


class TestMergedInference:
    @pytest.mark.parametrize("strategy", ["semsvd", "kaiming"])
    def test_merged_matches_unmerged_logits(self, strategy):
        model = tiny_model(seed=22, strategy=strategy, layers=3, alpha=0.4)
        bundle = fresh_bundle(model, seed=23)
        # train-free but non-trivial head so logits are informative
        model.store["head.w"] = RngStream(24).normal(size=model.store["head.w"].shape)
        merged = build_merged_layers(model, bundle)
        rng = RngStream(25)
        allowed = [0, 1, 2, 4]
        worst = 0.0
        for _ in range(20):
            ids = rng.integers(0, model.config.vocab_size, size=6).tolist()
            tape = Tape()
            nodes = make_nodes(tape, model, train=False)
            ref = slot_logits_on_tape(
                tape, nodes, model, bundle, ids[:4], ids[4:], 0, allowed, PHASE_INFER
            ).value
            got = merged_slot_logits(model, merged, ids[:4], ids[4:], 0, allowed)
            worst = max(worst, float(np.max(np.abs(got - ref))))
        assert worst <= 1e-5


class TestEndToEndGradients:
    def test_two_layer_grad_check_all_groups(self):
        model = tiny_model(d=8, layers=2, heads=2, ffn=16, r=2, vocab=15,
                           num_classes=4, seed=26, strategy="semsvd")
        # non-zero head so its gradient path is generic
        model.store["head.w"] = RngStream(27).normal(size=model.store["head.w"].shape) * 0.3
        bundle = fresh_bundle(model, seed=28)
        noise = draw_noise_map(model, RngStream(29))
        context, prompt, allowed, target = [1, 5, 7], [3, 9], [0, 1, 3], 0

        def build(p):
            import dataclasses

            probe = dataclasses.replace(model, store={**model.store, **p})
            tape = Tape()
            nodes = make_nodes(tape, probe, train=True)
            logits = slot_logits_on_tape(
                tape, nodes, probe, bundle, context, prompt, 0, allowed, PHASE_TRAIN, noise
            )
            return tape, tape.cross_entropy(logits, target)

        report = grad_check(build, trainable_params(model), epsilon=1e-5)
        groups = {"a_ur", "b_ur", "a_sa", "b_sa", "beta_logit", "head"}
        seen = {g for g in groups for name in report.per_param if g in name}
        assert seen == groups
        assert report.max_error <= 1e-4, str(report)
