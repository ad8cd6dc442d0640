import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hordecl.prototypes import (
    STD_FLOOR,
    EstimationHeuristic,
    PrototypeStore,
    estimate_missing_mean,
    fetril_translate,
    project_batch,
    project_pseudo_feature,
    update_prototypes,
)

ORIGINAL = EstimationHeuristic("original_features")


def _store(stats):
    store = PrototypeStore()
    for (c, e), (m, s) in stats.items():
        store.set(c, e, np.asarray(m, float), np.asarray(s, float))
    return store


class TestUpdate:
    def test_mean_and_population_std(self):
        store = update_prototypes(PrototypeStore(), 0, {3: np.array([[0.0, 0.0], [2.0, 2.0]])})
        mean, std = store.get(3, 0)
        np.testing.assert_array_equal(mean, [1.0, 1.0])
        np.testing.assert_array_equal(std, [1.0, 1.0])

    def test_identical_embeddings_hit_floor(self):
        store = update_prototypes(PrototypeStore(), 0, {1: np.ones((5, 3))})
        np.testing.assert_array_equal(store.get(1, 0)[1], np.full(3, STD_FLOOR))

    def test_idempotent(self, rng):
        data = {0: rng.normal(size=(6, 2)), 1: rng.normal(size=(4, 2))}
        once = update_prototypes(PrototypeStore(), 2, data)
        twice = update_prototypes(update_prototypes(PrototypeStore(), 2, data), 2, data)
        assert once == twice

    def test_single_sample_skipped(self, caplog):
        with caplog.at_level(logging.WARNING):
            store = update_prototypes(PrototypeStore(), 0, {4: np.ones((1, 2))})
        assert not store.known(4, 0)
        assert "1 sample" in caplog.text

    def test_reset_extractor(self):
        store = _store({(0, 0): ([0], [1]), (0, 1): ([0], [1]), (1, 1): ([0], [1])})
        store.reset_extractor(1)
        assert store.known(0, 0) and not store.known(0, 1) and not store.known(1, 1)

    def test_concatenated_follows_ensemble_order(self):
        store = _store({(0, 5): ([1, 2], [1, 1]), (0, 9): ([3], [2])})
        mean, std = store.concatenated(0, [9, 5])
        np.testing.assert_array_equal(mean, [3, 1, 2])
        np.testing.assert_array_equal(std, [2, 1, 1])
        assert store.concatenated(0, [9, 5, 7]) is None

    def test_array_round_trip(self):
        store = _store({(0, 1): ([1.5, 2], [1, 3]), (4, 2): ([0], [0.5])})
        assert PrototypeStore.from_arrays(store.to_arrays()) == store


class TestProjection:
    def test_same_class_returns_input(self, rng):
        store = _store({(0, 0): (rng.normal(size=3), rng.uniform(0.5, 2, 3)),
                        (0, 1): (rng.normal(size=2), rng.uniform(0.5, 2, 2))})
        f = rng.normal(size=5)
        out = project_pseudo_feature(f, 0, 0, store, [0, 1], [3, 2], ORIGINAL)
        assert np.max(np.abs(out - f)) < 1e-12

    def test_equal_spread_reduces_to_translation(self, rng):
        sd = rng.uniform(0.5, 2, 4)
        mu_y, mu_c = rng.normal(size=4), rng.normal(size=4)
        store = _store({(0, 0): (mu_y, sd), (1, 0): (mu_c, sd)})
        f = rng.normal(size=4)
        out = project_pseudo_feature(f, 0, 1, store, [0], [4], ORIGINAL)
        np.testing.assert_allclose(out, fetril_translate(f, mu_y, mu_c), atol=1e-12)

    def test_elementwise_example(self):
        store = _store({(0, 0): ([1, 2], [1, 2]), (1, 0): ([0, 0], [2, 1])})
        out = project_pseudo_feature(np.array([2.0, 4.0]), 0, 1, store, [0], [2], ORIGINAL)
        np.testing.assert_allclose(out, [2.0, 1.0], atol=1e-15)

    def test_unknown_source_raises(self):
        store = _store({(1, 0): ([0], [1])})
        with pytest.raises(KeyError):
            project_pseudo_feature(np.zeros(1), 0, 1, store, [0], [1], ORIGINAL)

    def test_unknown_target_segment_uses_heuristic(self):
        store = _store({(0, 0): ([1, 1], [2, 2]), (0, 1): ([0], [1]), (1, 1): ([5], [1])})
        f = np.array([3.0, -1.0, 2.0])
        out = project_pseudo_feature(f, 0, 1, store, [0, 1], [2, 1], ORIGINAL)
        np.testing.assert_array_equal(out[:2], [3.0, -1.0])
        assert out[2] == pytest.approx(7.0)
        zeros = project_pseudo_feature(f, 0, 1, store, [0, 1], [2, 1], EstimationHeuristic("zeros"))
        # zero mean, unit spread: (F - mu_y) / sigma_y
        np.testing.assert_allclose(zeros[:2], [1.0, -1.0])

    def test_literal_original_projection(self):
        store = _store({(0, 0): ([1, 1], [2, 2])})
        h = EstimationHeuristic("original", literal_projection=True)
        out = project_pseudo_feature(np.array([3.0, -1.0]), 0, 1, store, [0], [2], h)
        np.testing.assert_allclose(out, [3.0 + 1.0, -1.0 - 1.0])

    def test_batch_matches_rowwise(self, rng):
        store = _store({(c, e): (rng.normal(size=d), rng.uniform(0.5, 2, d))
                        for c in range(3) for e, d in ((0, 2), (1, 3))})
        feats = rng.normal(size=(6, 5))
        src = np.array([0, 1, 2, 0, 1, 2])
        tgt = np.array([1, 2, 0, 2, 0, 1])
        batch = project_batch(feats, src, tgt, store, [0, 1], [2, 3], ORIGINAL)
        for i in range(6):
            row = project_pseudo_feature(feats[i], src[i], tgt[i], store, [0, 1], [2, 3], ORIGINAL)
            np.testing.assert_allclose(batch[i], row, atol=1e-14)


class TestHeuristics:
    def test_zeros(self):
        np.testing.assert_array_equal(estimate_missing_mean(EstimationHeuristic("zeros"),
                                                            np.ones(4), 4), np.zeros(4))

    def test_original_passthrough(self):
        np.testing.assert_array_equal(estimate_missing_mean(ORIGINAL, np.array([3.0, -1.0]), 2),
                                      [3.0, -1.0])

    def test_random_scale(self):
        rng = np.random.default_rng(0)
        h = EstimationHeuristic("random", random_scale=40.0)
        draws = np.stack([estimate_missing_mean(h, np.zeros(3), 3, rng) for _ in range(100_000)])
        assert np.all((draws.std(0) >= 39) & (draws.std(0) <= 41))

    def test_random_needs_rng(self):
        with pytest.raises(ValueError):
            estimate_missing_mean(EstimationHeuristic("random"), np.zeros(2), 2)

    def test_invalid(self):
        with pytest.raises(ValueError):
            EstimationHeuristic("median")
        with pytest.raises(ValueError):
            EstimationHeuristic("random", random_scale=0.0)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_projection_matches_target_statistics(self, d, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(50, d)) * rng.uniform(0.5, 3, d) + rng.normal(size=d)
        store = update_prototypes(PrototypeStore(), 0, {0: src})
        store.set(1, 0, rng.normal(size=d) * 5, rng.uniform(0.1, 4, d))
        out = project_batch(src, np.zeros(50, int), np.ones(50, int), store, [0], [d], ORIGINAL)
        mu, sd = store.get(1, 0)
        np.testing.assert_allclose(out.mean(0), mu, atol=1e-9)
        np.testing.assert_allclose(out.std(0), sd, rtol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
    def test_std_floor_holds(self, values):
        store = update_prototypes(PrototypeStore(), 0, {0: np.array(values)[:, None]})
        assert store.get(0, 0)[1][0] >= STD_FLOOR
