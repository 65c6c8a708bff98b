import math

import numpy as np
import pytest

from bayeslora.linalg import Sampler
from bayeslora.parammaps import ParamMap
from bayeslora.tasks import TaskSpec, generate_task
from bayeslora.training import (
    KlSchedule,
    TrainConfig,
    TrainingDivergedError,
    build_small_net,
    elbo_minibatch,
    init_adapter,
    kl_weight_at,
    lr_factor,
    predict,
    rescaled_length,
    train,
    write_trajectory_csv,
)


def _small_task(seed=100, n_train=200, noise=0.5):
    spec = TaskSpec("gauss_blobs", n_train, 300, 2, 2, noise, "none")
    train_ds, test_ds = generate_task(spec, seed=seed)
    return (train_ds.x, train_ds.y), (test_ds.x, test_ds.y)


class TestRescaledLength:
    def test_reference_value(self):
        # 100 * 640**(pi/8), evaluated independently with the math module.
        expected = 100.0 * math.exp((math.pi / 8.0) * math.log(640.0))
        got = rescaled_length(640, gamma=8.0)
        assert got == pytest.approx(expected, rel=1e-12)
        assert int(got) == 1264

    def test_schedule_stores_floor(self):
        sched = KlSchedule.for_dataset(640, 16, "blob_ascending")
        assert sched.rescaled_len == 1264
        assert sched.n_minibatches == math.ceil(rescaled_length(640) / 16)


class TestKlWeights:
    def test_uniform_constant(self):
        sched = KlSchedule(n_minibatches=100, rescaled_len=1600, mode="uniform")
        for step in (1, 50, 100, 5000):
            assert kl_weight_at(sched, step) == pytest.approx(0.01, rel=1e-12)

    def test_all_modes_sum_to_one_over_epoch(self):
        for mode in ("uniform", "blundell", "blob_ascending"):
            for m in (3, 17, 64, 200):
                sched = KlSchedule(n_minibatches=m, rescaled_len=m, mode=mode)
                total = sum(kl_weight_at(sched, i) for i in range(1, m + 1))
                assert total == pytest.approx(1.0, abs=1e-12), (mode, m)

    def test_ascending_normalization_reference(self):
        # Literal 2^i / (2^M - 1) sums to ~2; the normalized form divides by
        # 2^(M+1) - 2 instead so the epoch total is exactly one.
        m = 3
        sched = KlSchedule(n_minibatches=m, rescaled_len=m, mode="blob_ascending")
        weights = [kl_weight_at(sched, i) for i in (1, 2, 3)]
        np.testing.assert_allclose(weights, [2.0 / 14.0, 4.0 / 14.0, 8.0 / 14.0], rtol=1e-12)
        literal = KlSchedule(n_minibatches=m, rescaled_len=m, mode="blob_ascending",
                             literal_ascending=True)
        lit = [kl_weight_at(literal, i) for i in (1, 2, 3)]
        np.testing.assert_allclose(lit, [2.0 / 7.0, 4.0 / 7.0, 8.0 / 7.0], rtol=1e-12)

    def test_ascending_strictly_increasing_then_saturates(self):
        sched = KlSchedule(n_minibatches=40, rescaled_len=40, mode="blob_ascending")
        weights = [kl_weight_at(sched, i) for i in range(1, 41)]
        assert all(b > a for a, b in zip(weights, weights[1:]))
        assert kl_weight_at(sched, 41) == weights[-1]
        assert kl_weight_at(sched, 10_000) == weights[-1]

    def test_blundell_descending(self):
        sched = KlSchedule(n_minibatches=10, rescaled_len=10, mode="blundell")
        weights = [kl_weight_at(sched, i) for i in range(1, 11)]
        assert all(b < a for a, b in zip(weights, weights[1:]))

    def test_off_mode(self):
        sched = KlSchedule(n_minibatches=10, rescaled_len=10, mode="off")
        assert kl_weight_at(sched, 5) == 0.0

    def test_large_m_no_overflow(self):
        sched = KlSchedule(n_minibatches=5000, rescaled_len=5000, mode="blob_ascending")
        assert 0.0 <= kl_weight_at(sched, 1) <= 1.0
        assert kl_weight_at(sched, 5000) == pytest.approx(0.5, rel=1e-6)

    def test_step_must_be_positive(self):
        sched = KlSchedule(n_minibatches=10, rescaled_len=10, mode="uniform")
        with pytest.raises(ValueError):
            kl_weight_at(sched, 0)


class TestInitAdapter:
    def test_g_range_matches_epsilon(self):
        config = TrainConfig(epsilon=0.05)
        ad = init_adapter(8, 6, 2, config, Sampler(0))
        assert ad.g.min() >= 0.05 / math.sqrt(2.0) - 1e-12
        assert ad.g.max() <= 0.05
        # Concrete bound from epsilon = 0.05: every entry in [0.035355, 0.05].
        assert ad.g.min() >= 0.035355

    def test_mean_range_for_n_six(self):
        config = TrainConfig()
        ad = init_adapter(8, 6, 2, config, Sampler(1))
        assert np.all(np.abs(ad.mean_a) <= 1.0)

    def test_b_starts_at_zero(self):
        ad = init_adapter(8, 6, 2, TrainConfig(), Sampler(2))
        np.testing.assert_array_equal(ad.b, np.zeros((8, 2)))

    def test_same_seed_identical(self):
        config = TrainConfig()
        a = init_adapter(7, 5, 2, config, Sampler(3))
        b = init_adapter(7, 5, 2, config, Sampler(3))
        np.testing.assert_array_equal(a.g, b.g)
        np.testing.assert_array_equal(a.mean_a, b.mean_a)

    def test_softplus_init_matches_square_omega(self):
        square = init_adapter(8, 6, 2, TrainConfig(seed=4), Sampler(4))
        soft = init_adapter(8, 6, 2, TrainConfig(seed=4, param_map=ParamMap.SOFTPLUS), Sampler(4))
        from bayeslora.parammaps import apply_map

        np.testing.assert_allclose(
            apply_map(ParamMap.SOFTPLUS, soft.g), square.g**2, rtol=1e-10
        )

    def test_invalid_rank(self):
        with pytest.raises(ValueError):
            init_adapter(4, 4, 4, TrainConfig(), Sampler(5))


class TestLrFactor:
    def test_warmup_then_decay(self):
        total, ratio = 100, 0.06
        warm = 6
        assert lr_factor(1, total, ratio) == pytest.approx(1.0 / warm)
        assert lr_factor(warm, total, ratio) == pytest.approx(1.0)
        assert lr_factor(total, total, ratio) == pytest.approx(1.0 / (total - warm))
        factors = [lr_factor(t, total, ratio) for t in range(1, total + 1)]
        assert max(factors) == pytest.approx(1.0)
        assert all(f > 0 for f in factors)


class TestElbo:
    def test_decomposition_exact(self):
        config = TrainConfig(seed=0)
        net = build_small_net(2, (6,), 2, 1, config)
        (x, y), _ = _small_task()
        res = elbo_minibatch(net, x[:16], y[:16], config, kl_weight=0.25, seed=5)
        assert res.loss == res.likelihood + res.kl_weight * res.kl_value

    def test_kl_weight_zero_skips_kl(self):
        config = TrainConfig(seed=0, sampling="none")
        net = build_small_net(2, (6,), 2, 1, config, zero_g=True)
        (x, y), _ = _small_task()
        res = elbo_minibatch(net, x[:16], y[:16], config, kl_weight=0.0, seed=5)
        assert res.kl_value == 0.0 and res.kl_grads == {}

    def test_deterministic_loss_is_plain_cross_entropy(self):
        from bayeslora.network import cross_entropy, net_forward, softmax_columns

        config = TrainConfig(seed=0, sampling="none", k_train_samples=1)
        net = build_small_net(2, (6,), 2, 1, config, zero_g=True)
        (x, y), _ = _small_task()
        res = elbo_minibatch(net, x[:16], y[:16], config, kl_weight=0.0, seed=5)
        fwd = net_forward(net, x[:16].T, mode="mean")
        assert res.loss == cross_entropy(softmax_columns(fwd.logits), y[:16])

    def test_zero_omega_flipout_equals_deterministic(self):
        # g = 0 annihilates the perturbation, so flipout reduces to the mean pass.
        config_f = TrainConfig(seed=0, sampling="flipout")
        config_d = TrainConfig(seed=0, sampling="none")
        net = build_small_net(2, (6,), 2, 1, config_f, zero_g=True)
        (x, y), _ = _small_task()
        a = elbo_minibatch(net, x[:16], y[:16], config_f, kl_weight=0.0, seed=5)
        b = elbo_minibatch(net, x[:16], y[:16], config_d, kl_weight=0.0, seed=5)
        assert a.likelihood == b.likelihood

    def test_empty_batch_rejected(self):
        config = TrainConfig(seed=0)
        net = build_small_net(2, (6,), 2, 1, config)
        with pytest.raises(ValueError):
            elbo_minibatch(net, np.zeros((0, 2)), np.zeros(0, dtype=int), config, 0.5, seed=1)


class TestTrain:
    def test_zero_steps_leaves_net_unchanged(self):
        config = TrainConfig(seed=0, steps=0)
        net = build_small_net(2, (6,), 2, 1, config)
        before = {k: v.copy() for k, v in net.trainable_params().items()}
        (ds, _) = _small_task()
        sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
        net, log = train(net, ds, config, sched)
        assert log == []
        for key, value in net.trainable_params().items():
            np.testing.assert_array_equal(value, before[key])

    def test_backbone_frozen(self):
        config = TrainConfig(seed=1, steps=60)
        net = build_small_net(2, (8, 8), 2, 2, config)
        frozen = {k: v.copy() for k, v in net.backbone_arrays().items()}
        (ds, _) = _small_task()
        sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
        train(net, ds, config, sched)
        for key, value in net.backbone_arrays().items():
            np.testing.assert_array_equal(value, frozen[key])

    def test_frozen_head_stays_put(self):
        config = TrainConfig(seed=1, steps=40)
        net = build_small_net(2, (8,), 2, 1, config, head_trainable=False)
        head_before = net.head_w.copy()
        assert "head.w" not in net.trainable_params()
        (ds, _) = _small_task()
        sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
        train(net, ds, config, sched)
        np.testing.assert_array_equal(net.head_w, head_before)

    def test_same_seed_bit_identical_trajectory(self):
        (ds, _) = _small_task()
        logs = []
        nets = []
        for _ in range(2):
            config = TrainConfig(seed=7, steps=50)
            net = build_small_net(2, (8,), 2, 1, config)
            sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
            net, log = train(net, ds, config, sched)
            logs.append(log)
            nets.append(net)
        assert logs[0] == logs[1]
        for k, v in nets[0].trainable_params().items():
            np.testing.assert_array_equal(v, nets[1].trainable_params()[k])

    def test_separable_blobs_reach_high_accuracy(self):
        """Sanity run: 200 separable points, 2000 default steps, train
        accuracy >= 0.95."""
        spec = TaskSpec("gauss_blobs", 200, 400, 2, 2, 0.25, "none")
        tr, te = generate_task(spec, seed=42)
        config = TrainConfig(seed=0, steps=2000, batch_size=32)
        net = build_small_net(2, (16, 16), 2, 2, config)
        sched = KlSchedule.for_dataset(200, config.batch_size, config.kl_mode)
        net, log = train(net, (tr.x, tr.y), config, sched)
        train_probs = predict(net, tr.x, n_samples=0)
        assert float(np.mean(np.argmax(train_probs, axis=1) == tr.y)) >= 0.95
        test_probs = predict(net, te.x, n_samples=0)
        assert float(np.mean(np.argmax(test_probs, axis=1) == te.y)) >= 0.95

    def test_trains_under_every_schedule_mode(self):
        (ds, _) = _small_task()
        for mode in ("uniform", "blundell", "blob_ascending"):
            config = TrainConfig(seed=5, steps=150, kl_mode=mode)
            net = build_small_net(2, (8,), 2, 1, config)
            sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, mode)
            net, log = train(net, ds, config, sched)
            assert all(np.isfinite(r.likelihood_loss) for r in log), mode
            assert log[-1].kl_weight == kl_weight_at(sched, 150)

    def test_literal_ascending_flag_trains_past_saturation(self):
        # The unnormalized weights exceed 1 at saturation; training must
        # still run (the [0, 1] bound belongs to the normalized schedules).
        (ds, _) = _small_task()
        config = TrainConfig(seed=6, steps=60, literal_ascending_weights=True)
        net = build_small_net(2, (8,), 2, 1, config)
        sched = KlSchedule(n_minibatches=3, rescaled_len=3, mode="blob_ascending",
                           literal_ascending=True)
        assert kl_weight_at(sched, 60) > 1.0
        net, log = train(net, ds, config, sched)
        assert all(np.isfinite(r.likelihood_loss) for r in log)
        assert log[-1].kl_weight == pytest.approx(8.0 / 7.0)

    def test_bayesianized_b_variant_trains(self):
        """The non-asymmetric variant (std g_b^2/100 on b) stays finite and
        keeps learning."""
        (ds, _) = _small_task()
        config = TrainConfig(seed=4, steps=400, bayesianize_b=True)
        net = build_small_net(2, (8,), 2, 1, config)
        assert net.layers[0].g_b is not None
        sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
        net, log = train(net, ds, config, sched)
        assert all(np.isfinite(r.likelihood_loss) for r in log)
        assert log[-1].train_acc >= 0.7

    def test_divergence_reports_step(self):
        (ds, _) = _small_task()
        config = TrainConfig(seed=2, steps=50, lr_likelihood=1e9, lr_kl=1e9)
        net = build_small_net(2, (8,), 2, 1, config)
        sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
        with pytest.raises(TrainingDivergedError) as err:
            train(net, ds, config, sched)
        assert err.value.step >= 1

    def test_trajectory_csv_round_trip(self, tmp_path):
        (ds, _) = _small_task()
        config = TrainConfig(seed=3, steps=10)
        net = build_small_net(2, (8,), 2, 1, config)
        sched = KlSchedule.for_dataset(len(ds[1]), config.batch_size, config.kl_mode)
        net, log = train(net, ds, config, sched)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(log, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "step,likelihood_loss,kl_value,kl_weight,train_acc"
        assert len(lines) == 11
        # loss decomposition survives the serialization round trip
        rec = log[4]
        cols = lines[5].split(",")
        assert float(cols[1]) == rec.likelihood_loss
        assert float(cols[2]) == rec.kl_value


class TestPredict:
    def test_rows_sum_to_one(self):
        config = TrainConfig(seed=0)
        net = build_small_net(2, (8,), 3, 1, config)
        x = np.random.default_rng(0).normal(size=(20, 2))
        for n in (0, 7):
            probs = predict(net, x, n_samples=n, seed=3)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_seed_reproducible(self):
        config = TrainConfig(seed=0)
        net = build_small_net(2, (8,), 2, 1, config)
        x = np.random.default_rng(1).normal(size=(10, 2))
        np.testing.assert_array_equal(
            predict(net, x, n_samples=10, seed=5), predict(net, x, n_samples=10, seed=5)
        )

    def test_degenerate_posterior_matches_mean(self):
        # g == 0: every sampled pass equals the mean pass, any N agrees with N=0.
        config = TrainConfig(seed=0)
        net = build_small_net(2, (8,), 2, 1, config, zero_g=True)
        x = np.random.default_rng(2).normal(size=(10, 2))
        np.testing.assert_allclose(
            predict(net, x, n_samples=25, seed=6), predict(net, x, n_samples=0), rtol=1e-12
        )


class TestMleReduction:
    def test_blob_with_pinned_g_matches_deterministic_trainer(self):
        """KL off + g pinned at zero + K=1: the flipout trainer produces the
        same updates to mean_a and b as the deterministic path within 1e-10.

        g = 0 pins itself: omega = g^2 annihilates the perturbation and the
        chain factor 2g zeroes the gradient, so the adaptive optimizer never
        moves it.
        """
        (ds, _) = _small_task()
        steps = 120

        config_det = TrainConfig(seed=11, steps=steps, sampling="none", kl_mode="off")
        net_det = build_small_net(2, (8,), 2, 1, config_det, zero_g=True)
        sched_det = KlSchedule.for_dataset(len(ds[1]), config_det.batch_size, "off")
        net_det, _ = train(net_det, ds, config_det, sched_det)

        config_blob = TrainConfig(seed=11, steps=steps, sampling="flipout", kl_mode="off")
        net_blob = build_small_net(2, (8,), 2, 1, config_blob, zero_g=True)
        sched_blob = KlSchedule.for_dataset(len(ds[1]), config_blob.batch_size, "off")
        net_blob, _ = train(net_blob, ds, config_blob, sched_blob)

        np.testing.assert_array_equal(net_blob.layers[0].adapter.g, 0.0)
        for key in ("layers.0.mean_a", "layers.0.b", "head.w"):
            np.testing.assert_allclose(
                net_det.trainable_params()[key],
                net_blob.trainable_params()[key],
                atol=1e-10,
            )
