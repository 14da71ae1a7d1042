import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shakedrop.autograd import Parameter
from shakedrop.data import LabeledImageSet, synth_dataset
from shakedrop.metrics import MetricsRecord
from shakedrop.models import ArchitectureSpec, build_network
from shakedrop.regularizers import PRESETS, RegularizerConfig
from shakedrop.rng import RandomStreams
from shakedrop.training import (
    SGD,
    LRSchedule,
    OptimizerConfig,
    TrainOptions,
    evaluate,
    lr_at,
    sgd_step,
    train,
)

TINY = dict(depth=8, input_shape=(3, 4, 4), num_classes=2, base_width=4)


def tiny_data(n=32, k=2, seed=0, noise=0.05):
    return synth_dataset("blobs", n, k, noise, np.random.default_rng(seed), image_size=4)


def tiny_net(seed=0, **kw):
    return build_network(ArchitectureSpec(**{**TINY, **kw}), seed=seed)


def run(epochs=2, workers=1, seed=0, net_kw=None, data=None, **opt):
    net = tiny_net(**(net_kw or {}))
    data = data or tiny_data()
    recs = train(net, data, data, OptimizerConfig(batch_size=8, **opt), LRSchedule(epochs, (), 0.1),
                 TrainOptions(seed=seed, workers=workers))
    return net, recs


class TestSGDStep:
    def test_decay_only_step(self):
        w = Parameter([1.0])
        sgd_step([w], [np.zeros(1)], [np.zeros(1)], OptimizerConfig(momentum=0, weight_decay=0.1), lr=1.0)
        assert w.data[0] == 0.9

    def test_plain_sgd(self):
        w = Parameter([1.0, -2.0])
        sgd_step([w], [np.array([0.5, 1.0])], [np.zeros(2)], OptimizerConfig(momentum=0, weight_decay=0), lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0])

    @pytest.mark.parametrize("nesterov", [True, False])
    def test_two_steps_match_scalar_oracle(self, nesterov):
        mu, wd, lr = 0.9, 1e-4, 0.1
        cfg = OptimizerConfig(base_lr=lr, momentum=mu, weight_decay=wd, nesterov=nesterov)
        grads = [0.3, -0.7]
        w = Parameter([1.5])
        vel = [np.zeros(1)]
        ow, ov = 1.5, 0.0
        for g in grads:
            sgd_step([w], [np.array([g])], vel, cfg, lr)
            gg = g + wd * ow
            ov = mu * ov - lr * gg
            ow = ow + mu * ov - lr * gg if nesterov else ow + ov
            assert w.data[0] == ow
            assert vel[0][0] == ov

    def test_zeroes_gradients(self):
        w = Parameter([1.0])
        w.grad = np.array([2.0])
        sgd_step([w], [w.grad], [np.zeros(1)], OptimizerConfig(), 0.1)
        assert w.grad[0] == 0

    def test_non_finite_gradient_aborts(self):
        w = Parameter([1.0, 2.0])
        ok = sgd_step([w], [np.array([np.nan, 1.0])], [np.zeros(2)], OptimizerConfig(), 0.1)
        assert not ok
        np.testing.assert_array_equal(w.data, [1.0, 2.0])

    @given(st.floats(0.01, 10), st.floats(1e-4, 0.5), st.sampled_from([0.0, 0.9]), st.integers(1, 40))
    def test_weight_decay_shrinks_norm(self, w0, wd, mu, steps):
        # heavy-ball momentum overshoots once lr*wd exceeds (1 - sqrt(mu))**2
        if mu:
            wd = min(wd, 1e-2)
        w = Parameter([w0, -w0])
        vel = [np.zeros(2)]
        cfg = OptimizerConfig(momentum=mu, weight_decay=wd)
        norm = np.linalg.norm(w.data)
        for _ in range(steps):
            sgd_step([w], [np.zeros(2)], vel, cfg, lr=0.1)
            new = np.linalg.norm(w.data)
            assert new < norm
            norm = new

    def test_decay_all_off_exempts_vectors(self):
        mat, vec = Parameter(np.ones((2, 2))), Parameter(np.ones(2))
        sgd = SGD([mat, vec], OptimizerConfig(momentum=0, weight_decay=0.5, decay_all=False))
        sgd.step(1.0)
        np.testing.assert_array_equal(mat.data, 0.5)
        np.testing.assert_array_equal(vec.data, 1.0)

    def test_config_validation(self):
        for kw in (dict(base_lr=0), dict(momentum=1.0), dict(weight_decay=-1), dict(batch_size=0),
                   dict(base_lr=math.inf)):
            with pytest.raises(ValueError):
                OptimizerConfig(**kw)


class TestSchedule:
    def test_long_schedule(self):
        sched = LRSchedule(300, (150, 225), 0.1)
        assert lr_at(0, sched, 0.1) == 0.1
        assert lr_at(200, sched, 0.1) == pytest.approx(0.01, rel=1e-15)
        assert lr_at(299, sched, 0.1) == pytest.approx(0.001, rel=1e-15)
        assert lr_at(150, sched, 0.1) == pytest.approx(0.01, rel=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(300, LRSchedule(300, (150, 225)), 0.1)

    def test_invalid_milestones(self):
        with pytest.raises(ValueError):
            LRSchedule(10, (5, 5))
        with pytest.raises(ValueError):
            LRSchedule(10, (10,))

    @given(st.integers(1, 400), st.lists(st.integers(0, 399), unique=True, max_size=4))
    def test_non_increasing(self, total, ms):
        ms = tuple(sorted(m for m in ms if m < total))
        sched = LRSchedule(total, ms, 0.1)
        lrs = [lr_at(e, sched, 0.1) for e in range(total)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestTrain:
    def test_zero_epochs(self):
        assert run(epochs=0)[1] == []

    def test_deterministic(self):
        a, ra = run(net_kw=dict(regularizer=RegularizerConfig("shakedrop", PRESETS["shakedrop-bn-end"])))
        b, rb = run(net_kw=dict(regularizer=RegularizerConfig("shakedrop", PRESETS["shakedrop-bn-end"])))
        assert ra == rb
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_multi_replica_deterministic_and_distinct(self):
        kw = dict(net_kw=dict(regularizer=RegularizerConfig("shakedrop", PRESETS["shakedrop-bn-end"])))
        r2a, r2b, r1 = run(workers=2, **kw)[1], run(workers=2, **kw)[1], run(workers=1, **kw)[1]
        assert r2a == r2b
        assert r2a != r1

    def test_step_count_per_epoch(self):
        data = tiny_data(n=30)
        net, _ = run(epochs=1, data=data)
        assert net.step == math.ceil(30 / 8)

    def test_separable_two_class(self):
        data = synth_dataset("blobs", 64, 2, 0.1, np.random.default_rng(4), image_size=4)
        net = tiny_net(seed=1)
        recs = train(net, data, data, OptimizerConfig(batch_size=16), LRSchedule(30, (20,), 0.1))
        assert len(recs) == 30
        assert recs[-1].train_top1_error < 5.0

    def test_metrics_fields(self):
        _, recs = run(epochs=2)
        assert [r.epoch for r in recs] == [0, 1]
        for r in recs:
            assert 0 <= r.train_top1_error <= 100 and 0 <= r.eval_top1_error <= 100
            assert math.isfinite(r.train_loss) and r.lr == 0.1 and not r.diverged
            assert r.wall_time_seconds == 0.0

    def test_nan_input_never_corrupts_parameters(self):
        data = tiny_data()
        images = data.images.copy()
        images[:] = np.nan
        bad = LabeledImageSet(images, data.labels, 2, data.mean, data.std)
        net = tiny_net()
        before = [p.data.copy() for p in net.parameters()]
        stats = [bn.state.running_mean.copy() for bn in net.batchnorms()]
        recs = train(net, bad, None, OptimizerConfig(batch_size=8), LRSchedule(3, (), 0.1))
        assert len(recs) == 1 and recs[0].diverged
        for p, b in zip(net.parameters(), before):
            np.testing.assert_array_equal(p.data, b)
        for bn, s in zip(net.batchnorms(), stats):
            np.testing.assert_array_equal(bn.state.running_mean, s)

    def test_batch_larger_than_data(self):
        with pytest.raises(ValueError):
            train(tiny_net(), tiny_data(n=4), None, OptimizerConfig(batch_size=8), LRSchedule(1, (), 0.1))

    def test_sinks_receive_records(self):
        got = []

        class Sink:
            def append(self, rec):
                got.append(rec)

        net, data = tiny_net(), tiny_data()
        recs = train(net, data, None, OptimizerConfig(batch_size=8), LRSchedule(2, (), 0.1), sinks=[Sink()])
        assert got == recs
        assert all(math.isnan(r.eval_top1_error) for r in recs)


class TestEvaluate:
    def test_constant_logits_first_index(self):
        net = build_network(ArchitectureSpec(**{**TINY, "num_classes": 4}), seed=0)
        net.classifier.weight.data[:] = 0
        data = synth_dataset("blobs", 40, 4, 0.1, np.random.default_rng(0), image_size=4)
        assert evaluate(net, data)[1] == 75.0
        assert evaluate(net, data)[0] == pytest.approx(math.log(4), rel=1e-12)

    def test_memorized_set(self):
        data = synth_dataset("blobs", 16, 2, 0.0, np.random.default_rng(2), image_size=4)
        net = tiny_net(seed=0)
        train(net, data, None, OptimizerConfig(batch_size=8), LRSchedule(15, (), 0.1))
        assert evaluate(net, data, mean=data.mean, std=data.std)[1] == 0.0

    def test_repeatable_and_draw_free(self, monkeypatch):
        net = tiny_net(regularizer=RegularizerConfig("shakedrop", PRESETS["shakedrop-bn-end"]))
        net.streams = RandomStreams(0)
        data = tiny_data()
        first = evaluate(net, data, batch_size=5)

        def forbidden(*key):
            raise AssertionError("evaluation drew random numbers")

        monkeypatch.setattr(net.streams, "generator", forbidden)
        state = np.random.get_state()[1].copy()
        assert evaluate(net, data, batch_size=5) == first
        np.testing.assert_array_equal(np.random.get_state()[1], state)
        assert net.training

    def test_empty(self):
        empty = LabeledImageSet(np.zeros((0, 3, 4, 4)), np.zeros(0), 2)
        with pytest.raises(ValueError):
            evaluate(tiny_net(), empty)


class TestMetricsRecord:
    def test_error_range(self):
        with pytest.raises(ValueError):
            MetricsRecord(0, 1.0, 101.0, 1.0, 0.0, 0.1, 0.0)
