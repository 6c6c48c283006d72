from collections import Counter

import numpy as np
import pytest

from motiondd.gradcheck import max_relative_error, numeric_grad
from motiondd.hsa import (
    HierarchicalAggregator,
    NgramProvider,
    PrecomputedProvider,
    read_emb1,
    text_key,
    write_emb1,
)


def random_feats(widths, rng, batch=None):
    shape = (lambda w: (batch, w)) if batch else (lambda w: (w,))
    return {i: rng.standard_normal(shape(w)) for i, w in widths.items()}


class TestAggregate:
    def test_zero_weights(self):
        agg = HierarchicalAggregator({7: 5, 9: 3}, cond_dim=4)
        agg.params["a"][:] = 0
        np.testing.assert_array_equal(agg(random_feats(agg.layer_widths, np.random.default_rng(0))), 0.0)

    def test_identity_block_passes_input(self):
        agg = HierarchicalAggregator.identity([11], 6)
        agg.params["a"][:] = 1.0
        x = np.random.default_rng(1).standard_normal(6)
        np.testing.assert_allclose(agg({11: x}), x, atol=1e-15)

    def test_two_layer_hand_computed(self):
        agg = HierarchicalAggregator({1: 2, 2: 1}, cond_dim=2, hidden=2, activation="identity")
        p = agg.params
        p["a"][:] = [0.5, 2.0]
        p["W1.1"] = np.array([[1.0, 0.0], [0.0, 2.0]])
        p["b1.1"] = np.array([0.0, 1.0])
        p["W2.1"] = np.array([[1.0, 1.0], [0.0, 1.0]])
        p["b2.1"] = np.array([0.0, -1.0])
        p["W1.2"] = np.array([[3.0, 0.0]])
        p["b1.2"] = np.zeros(2)
        p["W2.2"] = np.eye(2)
        p["b2.2"] = np.array([1.0, 0.0])
        x1, x2 = np.array([1.0, 1.0]), np.array([2.0])
        # layer 1: hidden = (1, 3); out = (1, 1 + 3 - 1) = (1, 3)
        # layer 2: hidden = (6, 0); out = (7, 0)
        expected = 0.5 * np.array([1.0, 3.0]) + 2.0 * np.array([7.0, 0.0])
        np.testing.assert_allclose(agg({1: x1, 2: x2}), expected)

    def test_missing_layer(self):
        agg = HierarchicalAggregator({7: 2, 9: 2}, cond_dim=2)
        with pytest.raises(KeyError, match=r"\[9\]"):
            agg({7: np.zeros(2)})

    def test_linear_in_weights(self):
        rng = np.random.default_rng(2)
        agg = HierarchicalAggregator({7: 4, 9: 5, 12: 3}, cond_dim=6, seed=3)
        feats = random_feats(agg.layer_widths, rng)
        c1 = agg(feats)
        agg.params["a"] *= 2
        np.testing.assert_allclose(agg(feats), 2 * c1, atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        agg = HierarchicalAggregator({7: 4, 9: 5}, cond_dim=3)
        feats = random_feats(agg.layer_widths, rng, batch=5)
        batch = agg(feats)
        for b in range(5):
            np.testing.assert_allclose(agg({i: v[b] for i, v in feats.items()}), batch[b], atol=1e-14)


class TestGradients:
    def test_da_equals_projection(self):
        rng = np.random.default_rng(5)
        agg = HierarchicalAggregator({7: 4, 9: 5}, cond_dim=3, seed=1)
        feats = random_feats(agg.layer_widths, rng)
        eps = 1e-6
        for r, i in enumerate(agg.layers):
            proj = agg.project(i, feats[i])
            base = agg.params["a"][r]
            agg.params["a"][r] = base + eps
            up = agg(feats)
            agg.params["a"][r] = base - eps
            down = agg(feats)
            agg.params["a"][r] = base
            np.testing.assert_allclose((up - down) / (2 * eps), proj, atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        agg = HierarchicalAggregator({7: 6, 9: 4, 11: 5, 12: 3}, cond_dim=8, hidden=12, seed=seed)
        feats = random_feats(agg.layer_widths, rng, batch=3)
        target = rng.standard_normal((3, 8))

        def loss():
            return 0.5 * np.sum((agg(feats) - target) ** 2)

        c, cache = agg.forward(feats)
        analytic = agg.backward(cache, c - target)
        numeric = numeric_grad(loss, agg.params, eps=1e-4, max_entries=40, rng=seed)
        assert max_relative_error(analytic, numeric) < 1e-3


class TestNgramProvider:
    def test_deterministic(self):
        a = NgramProvider(seed=3).embed("a person walks forward")
        b = NgramProvider(seed=3).embed("a person walks forward")
        for i in a:
            np.testing.assert_array_equal(a[i], b[i])

    def test_word_order(self):
        p = NgramProvider()
        a, b = p.embed("walks forward slowly"), p.embed("slowly forward walks")
        np.testing.assert_allclose(a[7], b[7], atol=1e-15)
        for layer in (9, 11, 12):
            assert not np.allclose(a[layer], b[layer])

    def test_hand_computed_projection(self):
        p = NgramProvider(layers=(1, 2), width=8, seed=11)
        tokens = ["the", "man", "the", "man", "runs"]
        got = p.embed(" ".join(tokens))
        for layer, n in ((1, 1), (2, 2)):
            grams = Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
            expected = sum(c * p.gram_vector(layer, g) for g, c in grams.items()) / sum(grams.values())
            np.testing.assert_allclose(got[layer], expected, atol=1e-15)
        # unigram mean: (2 * the + 2 * man + runs) / 5
        manual = (2 * p.gram_vector(1, ("the",)) + 2 * p.gram_vector(1, ("man",)) + p.gram_vector(1, ("runs",))) / 5
        np.testing.assert_allclose(got[1], manual, atol=1e-15)

    def test_empty_text(self):
        with pytest.raises(ValueError):
            NgramProvider().embed("   ")

    def test_short_text_single_gram(self):
        out = NgramProvider().embed("jump")
        assert all(np.all(np.isfinite(v)) for v in out.values())


class TestEmb1:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = {7: rng.standard_normal(5), 12: rng.standard_normal((3, 4))}
        write_emb1(tmp_path / "x.emb1", feats)
        back = read_emb1(tmp_path / "x.emb1")
        np.testing.assert_allclose(back[7], feats[7].astype(np.float32))
        np.testing.assert_allclose(back[12], feats[12].astype(np.float32))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError, match="not an EMB1"):
            read_emb1(tmp_path / "bad")

    def test_precomputed_provider(self, tmp_path):
        text = "A person waves."
        feats = NgramProvider(width=4).embed(text)
        write_emb1(tmp_path / f"{text_key(text)}.emb1", feats)
        got = PrecomputedProvider(tmp_path).embed(text)
        for i in feats:
            np.testing.assert_allclose(got[i], feats[i], atol=1e-6)
        with pytest.raises(FileNotFoundError):
            PrecomputedProvider(tmp_path).embed("something else")
