import csv

import numpy as np
import pytest

from kstgp import training
from kstgp.data import prepare, split
from kstgp.errors import EmptySet, InvalidConfig, TrainingDiverged
from kstgp.network import new_network
from kstgp.training import TrainConfig, classify, evaluate, loss, loss_grad, train, write_history


@pytest.fixture
def toy_split(toy_csv):
    return split(prepare(toy_csv, noise_seed=0), 0.7, seed=0)


def zero_net(D, R=0, n=4):
    net = new_network(D, R, n)
    for _, af in net.activations():
        af.set_points(af.xs, np.zeros(n))
    return net


class TestLossAndClassify:
    def test_loss_values(self):
        assert loss(0.8, 1) == pytest.approx(0.04, abs=1e-15)
        assert loss(0.8, 0) == pytest.approx(0.64, abs=1e-15)
        assert loss(1.0, 1) == 0.0
        assert loss_grad(0.8, 1) == pytest.approx(-0.4)

    @pytest.mark.parametrize("y, c", [(0.49, 0), (0.5, 1), (0.51, 1), (1.7, 1), (-0.3, 0)])
    def test_classify(self, y, c):
        assert classify(y) == c

    def test_classify_vector(self):
        np.testing.assert_array_equal(classify(np.array([0.1, 0.5, 0.9])), [0, 1, 1])


class TestEvaluate:
    def test_zero_network_predicts_class_zero(self):
        x = np.random.default_rng(0).uniform(-1, 1, (20, 2))
        y = np.array([0] * 15 + [1] * 5)
        acc, mean_loss = evaluate(zero_net(2), x, y)
        assert acc == pytest.approx(0.75)
        assert mean_loss == pytest.approx(0.25)

    def test_empty(self):
        with pytest.raises(EmptySet):
            evaluate(zero_net(2), np.zeros((0, 2)), np.zeros(0))


class TestConfig:
    @pytest.mark.parametrize(
        "bad",
        [dict(epochs=0), dict(eta_inner=-1.0), dict(batch_size=0), dict(hyperfit_budget=-1), dict(reduction="max")],
    )
    def test_rejects(self, bad):
        with pytest.raises(InvalidConfig):
            TrainConfig(**bad)


class TestTrain:
    def test_single_epoch(self, toy_split):
        net = new_network(5, 1, 4)
        _, history = train(net, toy_split, TrainConfig(epochs=1, hyperfit_budget=5))
        assert len(history) == 1
        assert history[0].epoch == 0
        assert history[0].wall_ms > 0

    def test_zero_rates_freeze_loss(self, toy_split):
        net = new_network(5, 1, 4)
        _, history = train(net, toy_split, TrainConfig(epochs=5, eta_inner=0, eta_outer=0, hyperfit_budget=0))
        losses = [m.train_loss for m in history]
        assert max(losses) - min(losses) <= 1e-12

    def test_reproducible(self, toy_split):
        cfg = TrainConfig(epochs=3, hyperfit_budget=5)
        _, h1 = train(new_network(5, 1, 4, seed=2), toy_split, cfg)
        _, h2 = train(new_network(5, 1, 4, seed=2), toy_split, cfg)
        assert [(m.train_loss, m.val_acc) for m in h1] == [(m.train_loss, m.val_acc) for m in h2]

    def test_dimension_check(self, toy_split):
        with pytest.raises(InvalidConfig):
            train(new_network(3, 0, 4), toy_split, TrainConfig(epochs=1))

    def test_divergence(self, toy_split, monkeypatch):
        monkeypatch.setattr(training, "evaluate", lambda *a: (0.5, float("inf")))
        seen = []
        with pytest.raises(TrainingDiverged):
            train(new_network(5, 0, 3), toy_split, TrainConfig(epochs=10, hyperfit_budget=0), seen.append)
        assert len(seen) == 3

    def test_learns_toy_problem(self, toy_split):
        net = new_network(5, 1, 6, seed=0)
        _, history = train(net, toy_split, TrainConfig(epochs=40))
        majority = max(np.mean(toy_split.train.labels), 1 - np.mean(toy_split.train.labels))
        assert history[-1].train_loss < history[0].train_loss
        assert history[-1].train_acc > majority + 0.1
        assert history[-1].val_acc > 0.8

    def test_history_csv(self, toy_split, tmp_path):
        _, history = train(new_network(5, 0, 3), toy_split, TrainConfig(epochs=2, hyperfit_budget=0))
        write_history(tmp_path / "m.csv", history)
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1"]
        assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "train_acc", "val_acc", "wall_ms"}
