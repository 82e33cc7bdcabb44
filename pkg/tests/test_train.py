import csv
import math

import numpy as np
import pytest

from radmamba.data import Dataset, Spectrogram, WindowSpec, synth_sequence, DEFAULT_CLASSES
from radmamba.model import ModelConfig, RadMamba
from radmamba.preprocess import ChanDsConfig
from radmamba.tensor import Precision, Tensor
from radmamba.train import (
    AdamState,
    RunReport,
    TrainConfig,
    TrainingError,
    adamw_step,
    config_hash,
    confusion_matrix,
    cross_entropy,
    eval_continuous,
    evaluate,
    plateau_scheduler,
    train,
)

TOY = ModelConfig(input_shape=(1, 16, 16), chan_ds=ChanDsConfig(factors=(2, 2)), dim=8, d_state=4, dt_rank=2, n_classes=2)


def toy_data(n=24, seed=0):
    # class 0 lights the upper Doppler half, class 1 the lower half
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 0.2, (2 * n, 1, 16, 16)).astype(np.float32)
    y = np.repeat([0, 1], n)
    X[:n, :, :8] += 0.7
    X[n:, :, 8:] += 0.7
    perm = rng.permutation(2 * n)
    X, y = X[perm], y[perm]
    cut = int(1.5 * n)
    ids = [f"s{seed}/{i}" for i in range(2 * n)]
    tr = Dataset(X[:cut], y[:cut], ["up", "down"], ids=ids[:cut])
    te = Dataset(X[cut:], y[cut:], ["up", "down"], ids=ids[cut:])
    return tr, te


class TestCrossEntropy:
    def test_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((3, 6))), [0, 2, 5])
        assert float(loss.data) == pytest.approx(math.log(6), abs=1e-15)

    def test_confident_limit(self):
        z = np.zeros((1, 4))
        z[0, 2] = 1e4
        assert float(cross_entropy(Tensor(z), [2]).data) == pytest.approx(0.0, abs=1e-300)

    def test_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(size=(5, 7)) * 5
            y = rng.integers(0, 7, 5)
            ref = np.mean([-math.log(math.exp(z[i, y[i]]) / sum(math.exp(v) for v in z[i])) for i in range(5)])
            assert float(cross_entropy(Tensor(z), y).data) == pytest.approx(ref, rel=1e-12)

    def test_large_logits_stable(self):
        assert np.isfinite(float(cross_entropy(Tensor(np.array([[1000.0, -1000.0]])), [1]).data))

    def test_gradient(self):
        from radmamba.tensor.gradcheck import check_gradients

        z = Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
        assert max(check_gradients(lambda: cross_entropy(z, [0, 1, 2, 1]), [z])) <= 1e-7

    @pytest.mark.parametrize("bad", [[3], [-1]])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), bad)


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        out, _ = adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_zero_grad_decay_only(self):
        p = {"w": np.array([1.0, -2.0])}
        out, _ = adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(out["w"], p["w"] * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_two_steps_by_hand(self):
        lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
        p, st = {"w": np.array([0.5])}, AdamState()
        for _ in range(2):
            p, st = adamw_step(p, {"w": np.array([1.0])}, st, lr, b1, b2, eps, wd)
        # step 1: m=0.1, v=0.001, m_hat=v_hat^0.5=1
        w1 = 0.5 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
        # step 2: m=0.19, v=0.001999 -> m_hat = 0.19/0.19 = 1, v_hat = 0.001999/0.001999 = 1
        w2 = w1 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
        assert p["w"][0] == pytest.approx(w2, rel=1e-13)
        assert st.step == 2
        assert st.m["w"][0] == pytest.approx(0.19)
        assert st.v["w"][0] == pytest.approx(0.001999)

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(TrainingError, match="blocks.0.p1.weight"):
            adamw_step({"blocks.0.p1.weight": np.ones(2)}, {"blocks.0.p1.weight": np.array([1.0, np.nan])}, AdamState(), 0.1)


class TestScheduler:
    def test_improving(self):
        assert plateau_scheduler([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], 1e-3, patience=3) == 1e-3

    def test_flat_halves_at_epoch_four(self):
        assert plateau_scheduler([0.5] * 4, 1.0, patience=3) == 1.0
        assert plateau_scheduler([0.5] * 5, 1.0, patience=3) == 0.5

    def test_floor(self):
        assert plateau_scheduler([0.5] * 50, 1e-3, patience=1, min_lr=1e-4) == 1e-4

    def test_threshold_is_absolute(self):
        assert plateau_scheduler([0.5, 0.50005, 0.50009, 0.5001], 1.0, patience=2) == 0.5

    def test_min_mode(self):
        assert plateau_scheduler([3.0, 2.0, 1.0, 0.5], 1.0, patience=0, mode="min") == 1.0

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            plateau_scheduler([], 1.0, factor=1.5)


class TestConfig:
    def test_problems_collected(self):
        probs = TrainConfig(lr0=0, batch_size=0, factor=2.0).problems()
        assert len(probs) == 3

    def test_round_trip(self):
        cfg = TrainConfig(lr0=1e-4, epochs=3, seeds=(1, 2))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_hash_sensitivity(self):
        h = config_hash(TOY, TrainConfig(), 0)
        assert h == config_hash(TOY, TrainConfig(), 0)
        assert h != config_hash(TOY, TrainConfig(), 1)
        assert h != config_hash(TOY.replace(dim=10), TrainConfig(), 0)


class TestTraining:
    @pytest.mark.parametrize("seed", range(5))
    def test_separable_toy(self, seed):
        tr, te = toy_data(seed=seed)
        report, model = train(TOY, tr, te, TrainConfig(lr0=5e-3, epochs=10, batch_size=8), seed)
        losses = [h["train_loss"] for h in report.history[1:]]
        assert report.best_accuracy == 1.0
        assert losses[-1] < losses[0]
        acc, cm, _ = evaluate(model, te)
        assert acc == report.best_accuracy

    def test_zero_epochs(self):
        tr, te = toy_data()
        report, _ = train(TOY, tr, te, TrainConfig(epochs=0), 0)
        assert len(report.history) == 1 and report.history[0]["epoch"] == 0
        assert report.best_epoch == 0
        assert report.final_accuracy == report.history[0]["test_accuracy"]

    def test_deterministic(self):
        tr, te = toy_data()
        cfg = TrainConfig(epochs=2, batch_size=8)
        a, _ = train(TOY, tr, te, cfg, 3)
        b, _ = train(TOY, tr, te, cfg, 3)
        assert a.to_json() == b.to_json()

    def test_confusion_consistency(self):
        tr, te = toy_data()
        report, _ = train(TOY, tr, te, TrainConfig(epochs=1, batch_size=8), 0)
        cm = np.array(report.confusion)
        assert cm.trace() / cm.sum() == report.best_accuracy
        np.testing.assert_array_equal(cm.sum(axis=1), te.class_counts())

    def test_overlap_rejected(self):
        tr, _ = toy_data()
        with pytest.raises(ValueError, match="share"):
            train(TOY, tr, tr, TrainConfig(epochs=1), 0)

    def test_divergence_reports_epoch(self):
        tr, te = toy_data()
        tr.X[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="epoch 1"):
            train(TOY, tr, te, TrainConfig(epochs=2, batch_size=64), 0)

    def test_report_round_trip(self, tmp_path):
        tr, te = toy_data()
        report, _ = train(TOY, tr, te, TrainConfig(epochs=1), 0)
        report.save(tmp_path / "r.json")
        assert RunReport.load(tmp_path / "r.json").to_json() == report.to_json()
        assert "wall_time_s" not in report.to_json()


class TestEvaluation:
    def test_confusion_matrix(self):
        cm = confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], 3)
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])

    def test_continuous_counts_and_track(self, tmp_path):
        cfg = ModelConfig(input_shape=(1, 224, 16), chan_ds=ChanDsConfig(factors=(2, 2)), dim=4, d_state=2, dt_rank=1, n_classes=4)
        seq = synth_sequence(DEFAULT_CLASSES, [1], 18, seed=0)
        res = eval_continuous(RadMamba(cfg), seq, WindowSpec(16, 1))
        assert len(res.predictions) == 3 and res.starts.tolist() == [0, 1, 2]
        res.write_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["window_start_bin", "predicted_class", "true_class"]
        assert len(rows) == 4 and all(r[2] == "1" for r in rows[1:])

    def test_continuous_perfect_model(self):
        cfg = ModelConfig(input_shape=(1, 224, 16), chan_ds=ChanDsConfig(factors=(2, 2)), dim=4, d_state=2, dt_rank=1, n_classes=4)
        m = RadMamba(cfg, precision=Precision.F64)
        m.params["head.weight"].data[...] = 0.0
        m.params["head.bias"].data[...] = [0.0, 0.0, 5.0, 0.0]
        seq = synth_sequence(DEFAULT_CLASSES, [2, 2], 20, seed=1)
        res = eval_continuous(m, seq, WindowSpec(16, 3))
        assert res.accuracy == 1.0
