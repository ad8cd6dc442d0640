import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hordecl.datastream import gen_cil, gen_efcir
from hordecl.extractor import FeatureExtractor, SelfSupConfig
from hordecl.harness import TrainProtocol, confusion_matrix, error_rate, task_error_rate
from hordecl.horde import (
    Ensemble,
    GrowthDecision,
    HordeConfig,
    HordeMethod,
    decide_growth_c,
    decide_growth_m,
    make_projector,
)
from hordecl.nncore import MlpNet, MlpSpec
from hordecl.prototypes import EstimationHeuristic, PrototypeStore

import oracles


def fake_fe(classes, birth, uid, dim=2, score=float("inf")):
    spec = MlpSpec(3, (2,), dim)
    net = MlpNet.from_spec(spec, np.random.default_rng(uid))
    net.freeze()
    return FeatureExtractor(net, spec, frozenset(classes), birth, uid, score)


def ensemble_of(budget, members):
    ens = Ensemble(budget)
    for m in members:
        ens.add(m)
        ens.next_uid = max(ens.next_uid, m.uid + 1)
    return ens


def tiny_cfg(growth="m", budget=3, heuristic="original_features"):
    fast = TrainProtocol(base_lr=0.05, batch_size=32, max_epochs=2, patience=1)
    return HordeConfig(growth=growth, budget=budget, full_hidden=(12,), full_embedding=6,
                       slim_hidden=(8,), slim_embedding=4,
                       selfsup=SelfSupConfig(ml_dim=4), heuristic=EstimationHeuristic(heuristic),
                       fe_protocol=fast, head_protocol=TrainProtocol(base_lr=0.01, batch_size=32,
                                                                     max_epochs=2, patience=1))


class TestGrowthM:
    def test_add_when_union_grows(self):
        ens = ensemble_of(3, [fake_fe({0, 1, 2}, 0, 0)])
        assert decide_growth_m(ens, [2, 3]).action == "add"

    def test_keep_when_covered(self):
        ens = ensemble_of(3, [fake_fe({0, 1, 2}, 0, 0)])
        assert decide_growth_m(ens, [1, 2]).action == "keep"

    def test_replace_tie_breaks_on_birth(self):
        a, b = fake_fe({0, 1}, 0, 10), fake_fe({1, 2}, 1, 11)
        ens = ensemble_of(2, [a, b])
        unions = oracles.union_after_replacement([a.trained_classes, b.trained_classes], {3, 4})
        assert unions == {0: 4, 1: 4}
        d = decide_growth_m(ens, [3, 4])
        assert (d.action, d.replaced_id) == ("replace", 10)

    def test_replace_prefers_larger_union(self):
        a, b = fake_fe({0, 1, 2}, 0, 0), fake_fe({2, 3}, 1, 1)
        ens = ensemble_of(2, [a, b])
        # dropping b keeps {0,1,2} and adds {3,4}; dropping a loses {0,1}
        d = decide_growth_m(ens, [3, 4])
        assert (d.action, d.replaced_id) == ("replace", 1)

    def test_full_and_no_gain_keeps(self):
        ens = ensemble_of(2, [fake_fe({0, 1}, 0, 0), fake_fe({2, 3}, 1, 1)])
        assert decide_growth_m(ens, [0, 3]).action == "keep"

    def test_empty_ensemble_adds(self):
        assert decide_growth_m(Ensemble(2), [0]).action == "add"


class TestGrowthC:
    def test_bootstrap(self):
        assert decide_growth_c(Ensemble(2), None).action == "add"

    def test_perfect_predictions_keep(self):
        ens = ensemble_of(2, [fake_fe({0, 1}, 0, 0)])
        e = error_rate(confusion_matrix(np.array([0, 1, 1]), np.array([0, 1, 1]), [0, 1]))
        assert e == 0.0
        assert decide_growth_c(ens, e).action == "keep"

    def test_confusion_error_rate(self):
        cm = np.array([[8, 2], [4, 6]])
        assert error_rate(cm) == 0.3
        assert error_rate(cm) == oracles.error_rate_from_cm(cm.tolist())

    def test_threshold(self):
        ens = ensemble_of(3, [fake_fe({0}, 0, 0)])
        assert decide_growth_c(ens, 0.4, tau_e=0.4).action == "keep"
        assert decide_growth_c(ens, 0.41, tau_e=0.4).action == "add"

    def test_replace_lowest_score_then_oldest(self):
        members = [fake_fe({0}, 0, 0, score=0.2), fake_fe({1}, 1, 1, score=0.1),
                   fake_fe({2}, 2, 2, score=0.1)]
        d = decide_growth_c(ensemble_of(3, members), 0.9)
        assert (d.action, d.replaced_id, d.error_before) == ("replace", 1, 0.9)

    def test_missing_head_row_counts_as_error(self):
        logits = np.array([[1.0], [1.0]])
        assert task_error_rate(logits, [0], np.array([0, 5]), [0, 5]) == 0.5


class TestEnsemble:
    def test_budget_enforced(self):
        ens = ensemble_of(1, [fake_fe({0}, 0, 0)])
        with pytest.raises(ValueError):
            ens.add(fake_fe({1}, 1, 1))

    def test_head_shape_tracks_members(self):
        ens = ensemble_of(3, [fake_fe({0}, 0, 0, dim=2)])
        ens.ensure_rows([0, 1])
        ens.add(fake_fe({1}, 1, 1, dim=3))
        assert ens.head.shape == (2, 2 + 3 + 1)
        assert ens.head_classes == [0, 1]

    def test_replace_zeroes_only_its_columns(self):
        ens = ensemble_of(2, [fake_fe({0}, 0, 0, dim=2), fake_fe({1}, 1, 1, dim=3)])
        ens.ensure_rows([0, 1])
        ens.head.assign(np.arange(12.0).reshape(2, 6))
        ens.replace(0, fake_fe({2}, 2, 5, dim=1))
        np.testing.assert_array_equal(ens.head.values, [[0, 2, 3, 4, 5], [0, 8, 9, 10, 11]])
        assert ens.ids == [5, 1]

    def test_features_concatenate_in_order(self, rng):
        a, b = fake_fe({0}, 0, 0, dim=2), fake_fe({1}, 1, 1, dim=3)
        ens = ensemble_of(2, [a, b])
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(ens.features(x), np.hstack([a.embed(x), b.embed(x)]))

    def test_growth_decision_validation(self):
        with pytest.raises(ValueError):
            GrowthDecision("replace")
        with pytest.raises(ValueError):
            GrowthDecision("grow")


class TestProjector:
    def test_no_absent_classes(self):
        assert make_projector(PrototypeStore(), [0], [2], [], EstimationHeuristic()) is None

    def test_targets_are_absent_classes(self, rng):
        store = PrototypeStore()
        for c in range(4):
            store.set(c, 0, np.full(2, c), np.ones(2))
        pseudo = make_projector(store, [0], [2], [2, 3], EstimationHeuristic())
        feats, labels = pseudo(rng.normal(size=(20, 2)), np.array([0, 1] * 10), rng)
        assert set(labels.tolist()) <= {2, 3}
        assert feats.shape == (20, 2)


class TestHordeRun:
    def test_budget_never_exceeded(self, small_dataset):
        sc = gen_efcir(small_dataset, 3, 9, 60, 0.3, seed=1)
        method = HordeMethod(tiny_cfg(budget=3), (4, 4, 1), 16, seed=0)
        sizes = []
        for task in sc.tasks:
            method.learn_task(task, small_dataset)
            sizes.append(len(method.ensemble))
            ens = method.ensemble
            assert ens.head.shape == (len(method.seen), ens.total_dim + 1)
        assert max(sizes) <= 3
        assert all(a <= b for a, b in zip(method.union_history, method.union_history[1:]))

    def test_first_member_is_full_size(self, small_dataset):
        sc = gen_cil(small_dataset, 4, 2, 2, seed=0)
        method = HordeMethod(tiny_cfg(), (4, 4, 1), 16, seed=0)
        for task in sc.tasks:
            method.learn_task(task, small_dataset)
        assert method.ensemble.dims == [6, 4, 4]

    def test_improvement_score_assigned(self, small_dataset):
        sc = gen_cil(small_dataset, 4, 2, 2, seed=0)
        method = HordeMethod(tiny_cfg("c"), (4, 4, 1), 16, seed=0)
        for task in sc.tasks:
            method.learn_task(task, small_dataset)
        later = [fe for fe in method.ensemble.extractors if fe.birth_task > 0]
        assert later and all(np.isfinite(fe.improvement_score) for fe in later)

    def test_checkpoint_round_trip(self, small_dataset):
        sc = gen_cil(small_dataset, 4, 2, 2, seed=0)
        method = HordeMethod(tiny_cfg(), (4, 4, 1), 16, seed=0)
        for task in sc.tasks[:2]:
            method.learn_task(task, small_dataset)
        other = HordeMethod(tiny_cfg(), (4, 4, 1), 16, seed=0)
        other.restore(method.checkpoint())
        x = small_dataset.inputs[:10]
        np.testing.assert_array_equal(other.logits(x)[0], method.logits(x)[0])
        assert other.store == method.store
        assert other.ensemble.ids == method.ensemble.ids


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sets(st.integers(0, 9), min_size=1, max_size=4), min_size=1, max_size=4),
           st.sets(st.integers(0, 9), min_size=1, max_size=4), st.integers(1, 4))
    def test_growth_m_never_shrinks_union(self, members, task, budget):
        members = members[:budget]
        ens = ensemble_of(budget, [fake_fe(m, i, i) for i, m in enumerate(members)])
        before = ens.class_union()
        d = decide_growth_m(ens, sorted(task))
        if d.action == "add":
            after = before | task
        elif d.action == "replace":
            rest = [fe.trained_classes for fe in ens.extractors if fe.uid != d.replaced_id]
            after = set().union(*rest) | task
            assert len(ens) == budget
        else:
            after = before
        assert len(after) >= len(before)
        if d.action != "keep":
            assert len(after) > len(before)
        if d.action == "replace":
            best = max(oracles.union_after_replacement([m for m in members], task).values())
            assert len(after) == best
