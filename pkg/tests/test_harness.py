import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hordecl.baselines import BaselineConfig, make_method
from hordecl.datastream import gen_efcir
from hordecl.harness import (
    RunRecord,
    TaskResult,
    TrainProtocol,
    compute_metrics,
    confusion_matrix,
    early_stop_loop,
    error_rate,
    evaluate,
    read_results,
    results_csv,
    run_scenario,
    write_results,
)

import oracles


class NoValStub:
    def __init__(self):
        self.weights = 0

    def train_epoch(self, lr, momentum, rng):
        self.weights += 1

    def val_loss(self):
        return None

    def get_state(self):
        return self.weights

    def set_state(self, state):
        self.weights = state


class CountingStub:
    """Scripted loss per epoch; the 'weights' are the epoch they were saved at."""

    def __init__(self, losses):
        self.losses = list(losses)
        self.lrs = []
        self.restores = []
        self.epochs = 0
        self.state = 0

    def train_epoch(self, lr, momentum, rng):
        self.lrs.append(lr)
        self.epochs += 1
        self.state = self.epochs

    def val_loss(self):
        return self.losses[self.epochs - 1] if self.epochs else np.inf

    def get_state(self):
        return self.state

    def set_state(self, state):
        self.restores.append(state)
        self.state = state


class TestProtocol:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainProtocol(patience=0)
        with pytest.raises(ValueError):
            TrainProtocol(lr_decay_factor=1.0)

    def test_flat_loss_stops_after_sixteen_epochs(self, rng):
        model = CountingStub([1.0] * 100)
        info = early_stop_loop(model, TrainProtocol(base_lr=1.0, max_epochs=100), rng)
        expected = oracles.simulate_early_stop([1.0] * 100, 5, 2, 100)
        assert (info.epochs, info.decay_steps, info.best_epoch) == expected == (16, 2, 1)
        assert model.state == 1
        np.testing.assert_allclose(sorted(set(model.lrs), reverse=True), [1.0, 0.1, 0.01])

    def test_decreasing_loss_runs_to_cap(self, rng):
        model = CountingStub(list(np.linspace(10, 1, 30)))
        info = early_stop_loop(model, TrainProtocol(max_epochs=30), rng)
        assert info.epochs == 30 and info.decay_steps == 0 and model.state == 30

    def test_reverts_to_best_on_decay(self, rng):
        losses = [5, 4, 3, 9, 9, 9, 9, 9] + [2] + [9] * 40
        model = CountingStub(losses)
        info = early_stop_loop(model, TrainProtocol(base_lr=1.0, max_epochs=60), rng)
        # first decay after epoch 8 reverts to epoch 3; epoch 9 sets a new best
        assert model.restores[0] == 3
        assert info.best_epoch == 9 and model.state == 9
        assert info.decay_steps == 2
        ref = oracles.simulate_early_stop(losses, 5, 2, 60)
        assert (info.epochs, info.decay_steps, info.best_epoch) == ref

    def test_no_validation_uses_fixed_epochs(self, rng, caplog):
        model = NoValStub()
        with caplog.at_level(logging.WARNING):
            info = early_stop_loop(model, TrainProtocol(max_epochs=7), rng)
        assert info.epochs == 7 and model.weights == 7
        assert "no validation" in caplog.text


class TestEvaluation:
    def test_perfect_predictor(self):
        labels = np.array([0, 1, 2, 2])
        acc, cm = evaluate(np.eye(3)[labels], [0, 1, 2], labels, [0, 1, 2])
        assert acc == 1.0
        np.testing.assert_array_equal(cm, np.diag([1, 1, 2]))

    def test_constant_predictor(self):
        labels = np.repeat(np.arange(4), 5)
        logits = np.tile([1.0, 0, 0, 0], (20, 1))
        acc, _ = evaluate(logits, [0, 1, 2, 3], labels, [0, 1, 2, 3])
        assert acc == pytest.approx(0.25)

    def test_unseen_columns_ignored(self):
        logits = np.array([[0.0, 5.0], [1.0, 5.0]])
        acc, _ = evaluate(logits, [0, 9], np.array([0, 0]), [0])
        assert acc == 1.0

    def test_error_rate_examples(self):
        assert error_rate(np.eye(3, dtype=int) * 4) == 0.0
        assert error_rate(np.fliplr(np.eye(3, dtype=int))) == pytest.approx(2 / 3)
        assert error_rate(np.array([[0, 5], [5, 0]])) == 1.0
        assert error_rate(np.array([[8, 2], [4, 6]])) == 0.3

    def test_error_rate_skips_empty_rows(self):
        assert error_rate(np.array([[3, 1, 0], [0, 0, 0], [0, 0, 2]])) == pytest.approx(0.125)

    def test_error_rate_rejects_empty(self):
        with pytest.raises(ValueError):
            error_rate(np.zeros((2, 2), dtype=int))

    def test_confusion_matrix(self):
        cm = confusion_matrix(np.array([3, 3, 5]), np.array([3, 5, 5]), [3, 5])
        np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])


def _record(class_accs, accs=None):
    rec = RunRecord("m", "cil", 0)
    for t, ca in enumerate(class_accs):
        acc = accs[t] if accs else float(np.mean(list(ca.values())))
        rec.add(TaskResult(t, sorted(ca), acc, np.eye(len(ca), dtype=int), 0.0, "", ca))
    return rec


class TestMetrics:
    def test_constant_accuracy(self):
        rec = _record([{0: 0.7}, {0: 0.7}, {0: 0.7}])
        assert compute_metrics(rec) == (pytest.approx(0.7), 0.0)

    def test_forgetting_example(self):
        rec = _record([{0: 1.0, 1: 0.8}, {0: 0.6, 1: 0.8}])
        assert compute_metrics(rec)[1] == pytest.approx(0.2)

    def test_single_task(self):
        assert compute_metrics(_record([{0: 0.5, 1: 0.1}]))[1] == 0.0

    def test_seen_classes_cannot_shrink(self):
        rec = _record([{0: 1.0, 1: 1.0}])
        with pytest.raises(ValueError):
            rec.add(TaskResult(1, [0], 1.0, np.eye(1), 0.0))

    def test_results_round_trip(self, tmp_path):
        rec = _record([{0: 1.0, 1: 0.8}, {0: 0.6, 1: 0.8, 2: 0.5}])
        path = write_results(rec, {"k": 1}, tmp_path)
        parsed = read_results(path)
        assert parsed["header"]["method"] == "m"
        assert [int(r["num_seen"]) for r in parsed["rows"]] == [2, 3]
        avg, forg = compute_metrics(rec)
        assert parsed["aggregate"]["avg_accuracy"] == pytest.approx(avg, rel=1e-9)
        assert parsed["aggregate"]["avg_forgetting"] == pytest.approx(forg, rel=1e-9)
        assert (tmp_path / "m_seed0.json").exists()


class TestRunScenario:
    def test_deterministic_record(self, small_dataset):
        sc = gen_efcir(small_dataset, 3, 3, 40, 0.4, seed=1)
        cfg = BaselineConfig(hidden=(8,), embedding=4,
                             protocol=TrainProtocol(max_epochs=2, patience=1, batch_size=32))
        texts = []
        for _ in range(2):
            method = make_method("ft", (4, 4, 1), 3, cfg)
            texts.append(results_csv(run_scenario(method, sc, small_dataset, 3, {"a": 1})))
        assert texts[0] == texts[1]

    def test_partial_record_survives_failure(self, small_dataset):
        sc = gen_efcir(small_dataset, 3, 3, 40, 0.4, seed=1)

        class Boom:
            name = "boom"

            def __init__(self):
                self.n = 0

            def learn_task(self, task, dataset):
                self.n += 1
                if self.n == 3:
                    raise RuntimeError("boom")
                return {}

            def logits(self, x):
                return np.zeros((len(x), 8)), list(range(8))

        rec = RunRecord("boom", sc.kind, 0)
        with pytest.raises(RuntimeError):
            run_scenario(Boom(), sc, small_dataset, 0, record=rec)
        assert len(rec.tasks) == 2


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 20), min_size=3, max_size=3), min_size=3, max_size=3))
    def test_error_rate_in_unit_interval(self, rows):
        cm = np.array(rows)
        if cm.sum(1).max() == 0:
            return
        e = error_rate(cm)
        assert 0.0 <= e <= 1.0
        assert e == oracles.error_rate_from_cm(rows)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40))
    def test_early_stop_matches_simulation(self, losses):
        losses = losses + [max(losses) + 1] * 60
        model = CountingStub(losses)
        info = early_stop_loop(model, TrainProtocol(max_epochs=len(losses)), np.random.default_rng(0))
        ref = oracles.simulate_early_stop(losses, 5, 2, len(losses))
        assert (info.epochs, info.decay_steps, info.best_epoch) == ref
        assert model.state == ref[2]
