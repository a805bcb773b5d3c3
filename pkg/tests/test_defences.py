import numpy as np
import pytest

from miscal import (
    PgdTrainSettings,
    SeededRng,
    TrainConfig,
    WhiteBoxSettings,
    adversarial_train,
    caat_train,
    compression_scale,
    fit_temperature,
    generate_blobs,
    train_mlp,
)
from miscal.defences import (
    CompressionOracle,
    CSConfig,
    TemperatureModel,
    TemperatureOracle,
    compression_target_bin,
    load_defence,
    pgd_max_xent,
    save_defence,
)
from miscal.victims import softmax, train_accuracy


def calibrated_logits(seed, n=5000, k=5, scale=1.5):
    gen = np.random.default_rng(seed)
    z = gen.normal(0.0, scale, (n, k))
    p = softmax(z)
    labels = np.array([gen.choice(k, p=pi) for pi in p])
    return z, labels


class TestFitTemperature:
    def test_self_consistent_logits_recover_one(self):
        z, labels = calibrated_logits(42)
        ts = fit_temperature(z, labels)
        assert abs(ts.temperature - 1.0) <= 0.1

    @pytest.mark.parametrize("scale", [0.5, 2.0, 4.0])
    def test_scale_recovery(self, scale):
        z, labels = calibrated_logits(42)
        ts = fit_temperature(scale * z, labels)
        assert abs(ts.temperature - scale) / scale <= 0.05

    def test_temperature_positive(self):
        z, labels = calibrated_logits(7, n=50)
        assert fit_temperature(z, labels).temperature > 0.0

    def test_never_worse_than_identity(self):
        for seed in range(5):
            z, labels = calibrated_logits(seed, n=200)
            ts = fit_temperature(z, labels)
            n = z.shape[0]

            def nll(t):
                p = softmax(z / t)
                return -np.mean(np.log(p[np.arange(n), labels]))

            assert nll(ts.temperature) <= nll(1.0) + 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_temperature(np.empty((0, 3)), np.empty(0, dtype=int))

    def test_argmax_invariant(self):
        z, labels = calibrated_logits(3, n=300)
        ts = fit_temperature(z, labels)
        for zi in z[:100]:
            assert ts.apply(zi).predicted_label == int(np.argmax(zi))


class TestCompressionScale:
    def test_worked_example_bin8_to_bin13(self):
        # confidence 0.50 sits in bin 8 of 15; its target bin spans (0.8, 0.8667]
        z = np.log(np.array([0.50, 0.30, 0.20]))
        res = compression_scale(z, CSConfig(num_bins=15, target_bins=3))
        assert res.target_confidence == pytest.approx(0.50 + 5.0 / 15.0, abs=1e-12)
        assert max(res.probs.probs) == pytest.approx(0.8333333333, abs=2e-4)
        assert res.converged

    def test_affine_map_is_bin_width_shift(self):
        import math
        cfg = CSConfig(num_bins=15, target_bins=3)
        for conf in (0.40, 0.47, 0.62, 0.88):
            rest = (1.0 - conf) / 2.0
            z = np.log(np.array([conf, rest, rest]))
            res = compression_scale(z, cfg)
            src = math.ceil(conf * 15 - 1e-9)
            tgt = compression_target_bin(src, 15, 3)
            assert res.target_confidence == pytest.approx(conf + (tgt - src) / 15.0, abs=1e-12)

    def test_argmax_preserved_on_1000_random_vectors(self):
        gen = np.random.default_rng(11)
        cfg = CSConfig()
        for _ in range(1000):
            k = int(gen.integers(2, 8))
            z = gen.normal(0.0, 2.0, k)
            res = compression_scale(z, cfg)
            assert res.probs.predicted_label == int(np.argmax(z))

    def test_bin_map_monotone_and_ends_at_top(self):
        for num_bins, target_bins in [(15, 3), (15, 4), (10, 3), (8, 8), (5, 1)]:
            targets = [compression_target_bin(m, num_bins, target_bins)
                       for m in range(1, num_bins + 1)]
            assert all(b <= a for a, b in zip(targets[1:], targets[1:]))
            assert all(t2 >= t1 for t1, t2 in zip(targets, targets[1:]))
            assert targets[-1] == num_bins
            assert min(targets) >= num_bins - target_bins + 1

    def test_converged_confidence_in_target_bin(self):
        gen = np.random.default_rng(5)
        cfg = CSConfig()
        width = 1.0 / cfg.num_bins
        for _ in range(200):
            z = gen.normal(0.0, 2.0, 4)
            res = compression_scale(z, cfg)
            if res.converged:
                conf = max(res.probs.probs)
                assert abs(conf - res.target_confidence) <= cfg.tolerance
                import math
                tgt_bin = math.ceil(res.target_confidence * cfg.num_bins - 1e-9)
                lo, hi = (tgt_bin - 1) * width, tgt_bin * width
                assert lo - 1e-4 <= conf <= hi + 1e-4

    def test_unreachable_target_flagged(self):
        z = np.zeros(4)  # confidence pinned to 1/K at every temperature
        res = compression_scale(z, CSConfig())
        assert not res.converged
        assert np.allclose(res.probs.probs, 0.25)

    def test_degenerate_input_rejected(self):
        with pytest.raises(ValueError):
            compression_scale(np.array([1.0]))
        with pytest.raises(ValueError):
            compression_scale(np.array([np.inf, 0.0]))


class TestDefendedOracles:
    def test_ts_and_cs_never_change_accuracy(self, soft_victim, soft_data):
        ts_oracle = TemperatureOracle(soft_victim, TemperatureModel(2.5))
        cs_oracle = CompressionOracle(soft_victim)
        for s in soft_data[:100]:
            base = soft_victim.predict_proba(s.features).predicted_label
            assert ts_oracle.predict(s.features).predicted_label == base
            assert cs_oracle.predict(s.features).predicted_label == base

    def test_sidecar_round_trip(self, tmp_path):
        ts = TemperatureModel(1.73)
        path = tmp_path / "defence.json"
        save_defence(path, ts)
        assert load_defence(path) == ts

        cs = CSConfig(num_bins=10, target_bins=4)
        save_defence(path, cs)
        loaded = load_defence(path)
        assert loaded.num_bins == 10 and loaded.target_bins == 4


class TestCaatTrain:
    def test_zero_iterations_close_to_plain(self):
        data = generate_blobs(2, 80, 4, 3.0, seed=9)
        cfg = TrainConfig(epochs=10, seed=2)
        plain = train_mlp(data, cfg)
        caat = caat_train(data, cfg, WhiteBoxSettings(iterations=0))
        assert abs(train_accuracy(plain, data) - train_accuracy(caat, data)) <= 0.02

    def test_deterministic(self):
        data = generate_blobs(2, 30, 4, 2.0, seed=1)
        cfg = TrainConfig(epochs=2, seed=5, batch_size=16)
        wb = WhiteBoxSettings(iterations=2)
        a = caat_train(data, cfg, wb)
        b = caat_train(data, cfg, wb)
        for wa, wb_ in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb_)

    def test_trains_a_usable_victim(self):
        data = generate_blobs(2, 60, 4, 3.0, seed=4)
        model = caat_train(data, TrainConfig(epochs=8, seed=0),
                           WhiteBoxSettings(iterations=3))
        assert train_accuracy(model, data) >= 0.8


class TestAdversarialTrain:
    def test_zero_steps_identical_to_plain(self):
        data = generate_blobs(2, 50, 4, 2.5, seed=3)
        cfg = TrainConfig(epochs=6, seed=7)
        plain = train_mlp(data, cfg)
        at = adversarial_train(data, cfg, PgdTrainSettings(iterations=0))
        for wa, wb in zip(plain.weights, at.weights):
            assert np.array_equal(wa, wb)

    def test_training_perturbations_respect_epsilon(self, soft_victim):
        gen = np.random.default_rng(2)
        x = gen.random((40, 10))
        y = gen.integers(0, 3, 40)
        settings = PgdTrainSettings(epsilon=0.1, iterations=7)
        adv = pgd_max_xent(soft_victim, x, y, settings, SeededRng(0))
        assert np.max(np.abs(adv - x)) <= 0.1 + 1e-12
        assert np.all(adv >= 0.0) and np.all(adv <= 1.0)

    def test_clean_accuracy_trend(self):
        data = generate_blobs(3, 150, 8, 1.2, seed=6)
        cfg = TrainConfig(epochs=20, seed=1)
        plain = train_mlp(data, cfg)
        at = adversarial_train(data, cfg, PgdTrainSettings(epsilon=0.1, iterations=5))
        assert train_accuracy(at, data) <= train_accuracy(plain, data) + 1e-9
