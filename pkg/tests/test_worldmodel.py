from __future__ import annotations

import json

import numpy as np
import pytest

from gprl.envs import CartPole, MountainCar, mc_step
from gprl.regressor import (
    Regressor, TrainConfig, TrainingDiverged, _act, _grads_with_moments, r2_score,
    train_regressor,
)
from gprl.worldmodel import (
    ModelConfig, TransitionDataset, WorldModel, build_world_model, collect_transitions,
    model_step, split_dataset,
)


def _toy(n, rng):
    s = rng.normal(size=(n, 2))
    return TransitionDataset(s, rng.normal(size=(n, 1)), s + 0.1, np.zeros(n))


class TestSplit:
    @pytest.mark.parametrize("n, sizes", [(10_000, (8000, 1000, 1000)), (10, (8, 1, 1)),
                                          (19, (17, 1, 1))])
    def test_sizes(self, n, sizes):
        parts = split_dataset(_toy(n, np.random.default_rng(0)), np.random.default_rng(1))
        assert tuple(len(p) for p in parts) == sizes

    def test_disjoint_cover(self):
        d = _toy(100, np.random.default_rng(0))
        d.r = np.arange(100.0)
        parts = split_dataset(d, np.random.default_rng(3))
        rows = np.concatenate([p.r for p in parts])
        assert sorted(rows.tolist()) == list(range(100))

    def test_seeded(self):
        d = _toy(50, np.random.default_rng(0))
        a = split_dataset(d, np.random.default_rng(9))
        b = split_dataset(d, np.random.default_rng(9))
        assert all(np.array_equal(x.s, y.s) for x, y in zip(a, b))

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_dataset(_toy(9, np.random.default_rng(0)), np.random.default_rng(0))


def _loss(net, xn, yn):
    return float(np.mean((net.forward(xn) - yn) ** 2))


class TestGradients:
    @pytest.mark.parametrize("act", ["relu", "tanh", "linear"])
    def test_central_differences(self, act):
        rng = np.random.default_rng(["relu", "tanh", "linear"].index(act))
        for trial in range(3):
            net = Regressor.init([3, 5, 4, 2], act, rng)
            for b in net.biases:
                b[:] = rng.normal(0, 0.3, size=b.shape)
            x, y = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
            out, memo = net.forward(x, cache=True)
            gw, gb, _ = net.backward(memo, 2.0 * (out - y) / y.size)
            h = 1e-6
            for p, g in zip(net.params(), gw + gb):
                for idx in np.ndindex(p.shape):
                    old = p[idx]
                    p[idx] = old + h
                    up = _loss(net, x, y)
                    p[idx] = old - h
                    down = _loss(net, x, y)
                    p[idx] = old
                    num = (up - down) / (2 * h)
                    assert abs(num - g[idx]) <= 1e-5 * max(1.0, abs(num)), (act, idx, num, g[idx])

    def test_input_gradient(self):
        rng = np.random.default_rng(2)
        net = Regressor.init([2, 6, 1], "tanh", rng)
        x = rng.normal(size=(1, 2))
        _, memo = net.forward(x, cache=True)
        _, _, dx = net.backward(memo, np.ones((1, 1)))
        for j in range(2):
            e = np.zeros((1, 2))
            e[0, j] = 1e-6
            num = (net.forward(x + e) - net.forward(x - e))[0, 0] / 2e-6
            assert num == pytest.approx(dx[0, j], rel=1e-6)

    def test_per_example_moments(self):
        """Second moments equal the mean squared per-example gradient (over batch size)."""
        rng = np.random.default_rng(4)
        net = Regressor.init([3, 4, 1], "relu", rng)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))
        out, memo = net.forward(x, cache=True)
        m = len(x)
        gw, gb, sw, sb = _grads_with_moments(net, memo, 2.0 * (out - y) / m, _act("relu")[1])
        per = []
        for i in range(m):
            o, mm = net.forward(x[i:i + 1], cache=True)
            w, b, _ = net.backward(mm, 2.0 * (o - y[i:i + 1]))
            per.append(w + b)
        for k, s in enumerate(sw + sb):
            sq = np.mean([p[k] ** 2 for p in per], axis=0)
            np.testing.assert_allclose(m * s, sq, rtol=1e-10, atol=1e-14)
            np.testing.assert_allclose((gw + gb)[k], np.mean([p[k] for p in per], axis=0),
                                       rtol=1e-10, atol=1e-14)


class TestTraining:
    def test_zero_targets_zero_output(self):
        x = np.random.default_rng(0).normal(size=(50, 3))
        net, rep = train_regressor(x, np.zeros(50), TrainConfig(epochs=1, zero_output=True))
        assert rep.train_mse == 0.0 and np.all(net.predict(x) == 0)

    def test_linear_fit(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(1000, 1))
        vx = rng.uniform(-1, 1, size=(100, 1))
        cfg = TrainConfig(hidden=(), activation="linear", epochs=300, patience=300)
        net, rep = train_regressor(x, 2 * x, cfg, validation=(vx, 2 * vx))
        assert rep.val_mse < 1e-6
        assert net.predict([[0.5]])[0, 0] == pytest.approx(1.0, abs=1e-3)

    def test_linear_fit_sgd(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(500, 1))
        cfg = TrainConfig(hidden=(), activation="linear", optimizer="sgd", epochs=100,
                          learning_rate=0.1)
        _, rep = train_regressor(x, 2 * x, cfg)
        assert rep.val_mse < 1e-6

    def test_memorizes_repeated_rows(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(5, 2))
        x = np.repeat(base, 40, axis=0)
        y = np.sin(x[:, 0]) + x[:, 1]
        cfg = TrainConfig(hidden=(20, 20), epochs=400, patience=400)
        _, rep = train_regressor(x, y, cfg)
        assert rep.train_mse < 1e-3 * y.var()

    def test_best_validation_snapshot(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 2))
        y = x[:, :1] * x[:, 1:] + rng.normal(0, 0.5, size=(200, 1))
        vx = rng.normal(size=(40, 2))
        vy = vx[:, :1] * vx[:, 1:] + rng.normal(0, 0.5, size=(40, 1))
        gx = rng.normal(size=(40, 2))
        gy = gx[:, :1] * gx[:, 1:]
        net, rep = train_regressor(x, y, TrainConfig(hidden=(30, 30), epochs=120, patience=120),
                                   validation=(vx, vy), generalization=(gx, gy))
        assert rep.val_mse == min(rep.history) == rep.history[rep.best_epoch]
        assert rep.gen_mse == pytest.approx(float(np.mean((net.predict(gx) - gy) ** 2)))
        assert rep.val_mse == pytest.approx(float(np.mean((net.predict(vx) - vy) ** 2)))

    def test_determinism(self):
        x = np.random.default_rng(0).normal(size=(100, 2))
        y = x.sum(axis=1)
        a, _ = train_regressor(x, y, TrainConfig(epochs=5, seed=3))
        b, _ = train_regressor(x, y, TrainConfig(epochs=5, seed=3))
        assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))

    def test_normalization_round_trip(self):
        rng = np.random.default_rng(0)
        x = rng.normal(5, 30, size=(100, 3))
        net = Regressor.init([3, 1])
        net.set_normalization(x)
        np.testing.assert_allclose(net.denormalize(net.normalize(x)), x, rtol=0, atol=1e-12)

    def test_constant_column_is_safe(self):
        x = np.c_[np.ones(20), np.arange(20.0)]
        net, rep = train_regressor(x, x[:, 1], TrainConfig(epochs=2))
        assert np.isfinite(rep.train_mse) and net.x_std[0] == 1.0

    def test_rejects_bad_data(self):
        with pytest.raises(ValueError):
            train_regressor(np.array([[np.nan]]), np.array([1.0]))
        with pytest.raises(ValueError):
            train_regressor(np.zeros((0, 1)), np.zeros(0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        x = np.random.default_rng(0).normal(size=(100, 1))
        cfg = TrainConfig(hidden=(), activation="linear", optimizer="sgd", learning_rate=1e6)
        with pytest.raises(TrainingDiverged):
            train_regressor(x, 3 * x, cfg)

    def test_r2(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r2_score(y, y) == 1.0 and r2_score(y, np.full(3, 2.0)) == 0.0


class TestWorldModel:
    def test_identity(self):
        m = WorldModel.identity(2, 1)
        s, r = model_step(m, [-0.5, 0.02], [1.0])
        assert np.array_equal(s, [-0.5, 0.02]) and r == 0.0

    def test_batch_identity(self):
        m = WorldModel.identity(4, 1)
        s = np.random.default_rng(0).normal(size=(9, 4))
        nxt, r = m.step(s, np.ones((9, 1)))
        assert np.array_equal(nxt, s) and np.all(r == 0)

    def test_file_round_trip(self, tmp_path):
        d = collect_transitions(CartPole(), 200, np.random.default_rng(0), stop_on_absorption=True)
        cfg = ModelConfig(TrainConfig(epochs=2), seed=1)
        m, reports = build_world_model(d, cfg)
        assert set(reports) == {"delta_0", "delta_1", "delta_2", "delta_3", "reward"}
        m.save(tmp_path / "m.json")
        back = WorldModel.load(tmp_path / "m.json")
        s = np.random.default_rng(1).normal(0, 0.3, size=(20, 4))
        a = np.random.default_rng(2).uniform(-10, 10, size=(20, 1))
        for x, y in zip(m.step(s, a), back.step(s, a)):
            assert np.array_equal(x, y)
        assert json.loads((tmp_path / "m.json").read_text())["schema_version"] == 1

    def test_build_is_deterministic(self):
        d = collect_transitions(MountainCar(), 300, np.random.default_rng(0))
        cfg = ModelConfig(TrainConfig(epochs=3), seed=5)
        a, _ = build_world_model(d, cfg)
        b, _ = build_world_model(d, cfg)
        assert a.to_dict() == b.to_dict()

    def test_clip_to_data_box(self):
        d = collect_transitions(MountainCar(), 300, np.random.default_rng(0))
        m, _ = build_world_model(d, ModelConfig(TrainConfig(epochs=1)))
        nxt, r = m.step(np.array([[5.0, 50.0]]), np.array([[1.0]]))
        assert np.all(nxt >= m.state_low) and np.all(nxt <= m.state_high)
        assert m.reward_low <= r[0] <= m.reward_high

    def test_dataset_jsonl_round_trip(self, tmp_path):
        d = _toy(30, np.random.default_rng(0))
        d.write_jsonl(tmp_path / "d.jsonl")
        back = TransitionDataset.read_jsonl(tmp_path / "d.jsonl")
        assert np.array_equal(back.s, d.s) and np.array_equal(back.sn, d.sn)

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            TransitionDataset(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((2, 2)), np.zeros(3))


class TestCollect:
    def test_size_and_meta(self):
        d = collect_transitions(MountainCar(), 250, np.random.default_rng(0))
        assert len(d) == 250 and d.meta["sampler"] == "random"
        assert d.state_dim == 2 and d.action_dim == 1

    def test_random_walk_bounds(self):
        d = collect_transitions(CartPole(), 500, np.random.default_rng(0))
        assert d.meta["sampler"] == "random_walk"
        assert np.all(np.abs(d.a) <= 10.0)

    def test_targets_are_true_dynamics(self):
        d = collect_transitions(MountainCar(), 100, np.random.default_rng(0))
        for s, a, sn in zip(d.s, d.a, d.sn):
            assert np.allclose(mc_step(tuple(s), a[0])[0].values, sn)

    def test_stop_on_absorption(self):
        d = collect_transitions(CartPole(), 2000, np.random.default_rng(0), stop_on_absorption=True)
        frozen = np.all(d.s == d.sn, axis=1) & (np.abs(d.s[:, 0]) > 0.7)
        assert not frozen.any()


@pytest.mark.slow
class TestTrainedMountainCar:
    def test_three_networks(self, mc_model):
        model, reports, _ = mc_model
        assert len(model.delta_models) == 2 and set(reports) == {"delta_0", "delta_1", "reward"}

    def test_single_step_accuracy(self, mc_model):
        model = mc_model[0]
        pred, _ = model_step(model, [-0.5, 0.0], [1.0])
        true = np.array(mc_step((-0.5, 0.0), 1.0)[0].values)
        # tolerance is stated for the textbook per-step velocity; ours is per unit time
        per_step = np.array([1.0, MountainCar().dt])
        assert np.max(np.abs(pred - true) * per_step) < 0.01

    def test_rollout_stays_in_bounds(self, mc_model):
        model = mc_model[0]
        env = MountainCar()
        rng = np.random.default_rng(5)
        s = env.sample_starts(50, rng)
        lo = np.array([-1.2, -env.velocity_bound])
        hi = np.array([0.6, env.velocity_bound])
        slack = 0.1 * (hi - lo)
        for _ in range(20):
            s, _ = model.step(s, rng.uniform(-1, 1, size=(50, 1)))
            assert np.all(s >= lo - slack) and np.all(s <= hi + slack)
