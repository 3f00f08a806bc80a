import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedhome.errors import ConfigError, NumericError, ShapeError
from fedhome.model import (
    DenseLayer,
    LabeledBatch,
    ModelParams,
    Phase,
    PretrainConfig,
    RoundSchedule,
    add_delta,
    evaluate,
    forward,
    init_model,
    initial_source_model,
    load_checkpoint,
    loss_and_grad,
    pretrain_transfer_model,
    run_round_schedule,
    save_checkpoint,
    sgd_step,
    standard_schedule,
)
from oracles import (
    fd_gradient,
    oracle_forward,
    relative_error,
    small_model_and_batch,
    zero_model,
)


def params_bits_equal(a: ModelParams, b: ModelParams) -> bool:
    return all(
        la.weights.tobytes() == lb.weights.tobytes()
        and la.bias.tobytes() == lb.bias.tobytes()
        for la, lb in zip(a.layers, b.layers)
    )


def blobs(seed, n=64, classes=5, spread=4.0):
    """Linearly separable 32-dim toy set."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, 32)) * spread
    feats = []
    labels = []
    for c in range(classes):
        feats.append(centers[c] + rng.normal(size=(n, 32)) * 0.4)
        labels.append(np.full(n, c))
    return LabeledBatch(np.concatenate(feats), np.concatenate(labels))


class TestForward:
    def test_zero_model_uniform(self):
        m = zero_model()
        x = np.random.default_rng(0).normal(size=(7, 32))
        probs = forward(m, x)
        assert np.allclose(probs, 0.2, atol=0)
        assert probs.shape == (7, 5)

    def test_saturated_single_layer(self):
        w = np.eye(5) * 30.0
        m = ModelParams([DenseLayer(w, np.zeros(5), "softmax")])
        x = np.zeros((1, 5))
        x[0, 3] = 1.0
        probs = forward(m, x)
        assert probs[0, 3] > 0.99

    def test_matches_hand_rolled_oracle(self):
        m = init_model(7, feature_dim=32, hidden=(16,), classes=5)
        x = np.random.default_rng(3).normal(size=(4, 32))
        got = forward(m, x)
        want = oracle_forward(m, x)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_dimension_mismatch(self):
        m = init_model(0)
        with pytest.raises(ShapeError):
            forward(m, np.zeros((2, 31)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_are_distributions(self, seed):
        rng = np.random.default_rng(seed)
        m = init_model(rng, feature_dim=8, hidden=(6,), classes=4)
        x = rng.normal(size=(5, 8)) * 3
        probs = forward(m, x)
        assert np.all(probs >= 0) and np.all(probs <= 1)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-6


class TestLossAndGrad:
    def test_uniform_model_loss_is_log5(self):
        m = zero_model()
        batch = LabeledBatch(np.random.default_rng(0).normal(size=(6, 32)),
                             np.array([0, 1, 2, 3, 4, 0]))
        loss, _ = loss_and_grad(m, batch)
        assert abs(loss - np.log(5)) < 1e-6

    def test_confident_correct_model_near_zero_loss(self):
        m = ModelParams([DenseLayer(np.zeros((5, 5)), np.array([0, 0, 50.0, 0, 0]), "softmax")])
        batch = LabeledBatch(np.zeros((4, 5)), np.full(4, 2))
        loss, _ = loss_and_grad(m, batch)
        assert loss < 1e-3

    def test_matches_finite_differences(self):
        m, batch = small_model_and_batch(11)
        _, grad = loss_and_grad(m, batch)
        fd = fd_gradient(m, batch)
        for (gw, gb), (fw, fb) in zip(grad, fd):
            assert relative_error(gw, fw) < 1e-4
            assert relative_error(gb, fb) < 1e-4

    def test_nonfinite_input_rejected(self):
        m = init_model(0)
        x = np.zeros((1, 32))
        x[0, 0] = np.nan
        with pytest.raises(NumericError):
            forward(m, x)


class TestSgdStep:
    def test_zero_learning_rate_identity(self):
        m = init_model(1)
        _, grad = loss_and_grad(m, blobs(0, n=8))
        out = sgd_step(m, grad, 0.0)
        assert params_bits_equal(out, m)

    def test_all_frozen_identity(self):
        m = init_model(2)
        _, grad = loss_and_grad(m, blobs(1, n=8))
        out = sgd_step(m, grad, 0.1, freeze_mask=(True, True, True))
        assert params_bits_equal(out, m)
        assert all(o.weights is i.weights for o, i in zip(out.layers, m.layers))

    def test_scalar_arithmetic(self):
        m = ModelParams([DenseLayer(np.array([[1.0]]), np.zeros(1), "softmax")])
        out = sgd_step(m, [(np.array([[0.5]]), np.zeros(1))], 0.1)
        assert out.layers[0].weights[0, 0] == pytest.approx(0.95, abs=0)


class TestSchedules:
    def test_standard_schedule_round1(self):
        s = standard_schedule(1, 3)
        assert len(s.phases) == 2
        p0, p1 = s.phases
        assert (p0.epochs, p0.learning_rate, p0.batch_size) == (10, 1e-3, 32)
        assert p0.freeze_mask == (True, True, False)
        assert (p1.epochs, p1.learning_rate, p1.batch_size) == (30, 1e-4, 32)
        assert p1.freeze_mask is None

    @pytest.mark.parametrize("r", [2, 3, 10])
    def test_standard_schedule_later_rounds(self, r):
        s = standard_schedule(r, 3)
        assert len(s.phases) == 1
        p = s.phases[0]
        assert (p.epochs, p.learning_rate, p.batch_size) == (10, 1e-4, 32)
        assert p.freeze_mask is None

    def test_round_zero_rejected(self):
        with pytest.raises(ConfigError):
            standard_schedule(0, 3)


class TestRunRoundSchedule:
    def test_zero_epochs_zero_delta(self):
        m = init_model(3)
        sched = RoundSchedule([Phase(0, 1e-3, 32, None), Phase(0, 1e-4, 32, None)])
        out, delta = run_round_schedule(m, blobs(2), sched, 1, seed=0)
        assert params_bits_equal(out, m)
        assert all(not dw.any() and not db.any() for dw, db in delta.layers)

    def test_separable_data_reaches_90pct(self):
        m = init_model(4)
        data = blobs(5, n=64)
        out, _ = run_round_schedule(m, data, standard_schedule(1, 3), 1, seed=7)
        _, acc = evaluate(out, data)
        assert acc > 0.9

    def test_frozen_phase_keeps_layers(self):
        m = init_model(5)
        sched = RoundSchedule([Phase(2, 1e-3, 32, (True, True, False))])
        out, _ = run_round_schedule(m, blobs(6), sched, 1, seed=1)
        for i in range(2):
            assert out.layers[i].weights.tobytes() == m.layers[i].weights.tobytes()
            assert out.layers[i].bias.tobytes() == m.layers[i].bias.tobytes()
        assert out.layers[2].weights.tobytes() != m.layers[2].weights.tobytes()

    def test_deterministic_given_seed(self):
        m = init_model(6)
        data = blobs(7)
        sched = standard_schedule(2, 3)
        out1, d1 = run_round_schedule(m, data, sched, 2, seed=9)
        out2, d2 = run_round_schedule(m, data, sched, 2, seed=9)
        assert params_bits_equal(out1, out2)
        assert d1 == d2
        out3, _ = run_round_schedule(m, data, sched, 2, seed=10)
        assert not params_bits_equal(out1, out3)

    def test_delta_plus_initial_exactly_returned(self):
        m = init_model(8)
        data = blobs(9)
        out, delta = run_round_schedule(m, data, standard_schedule(3, 3), 3, seed=3)
        rebuilt = add_delta(m, delta, version=out.version)
        assert params_bits_equal(rebuilt, out)

    def test_empty_data_rejected(self):
        m = init_model(0)
        with pytest.raises(ConfigError):
            run_round_schedule(m, [], standard_schedule(1, 3), 1, seed=0)

    def test_accepts_sequence_of_batches(self):
        m = init_model(10)
        data = blobs(11)
        half = data.n // 2
        parts = [
            LabeledBatch(data.features[:half], data.labels[:half]),
            LabeledBatch(data.features[half:], data.labels[half:]),
        ]
        sched = RoundSchedule([Phase(1, 1e-3, 32, None)])
        out1, _ = run_round_schedule(m, data, sched, 1, seed=4)
        out2, _ = run_round_schedule(m, parts, sched, 1, seed=4)
        assert params_bits_equal(out1, out2)


class TestPretrain:
    def test_zero_epochs_body_equals_init(self):
        data = blobs(12, classes=8)
        cfg = PretrainConfig(epochs=0, seed=5)
        model = pretrain_transfer_model(data, cfg)
        init = initial_source_model(data, cfg)
        for got, want in zip(model.layers[:-1], init.layers[:-1]):
            assert got.weights.tobytes() == want.weights.tobytes()

    def test_head_swapped_body_kept(self):
        data = blobs(13, classes=8)
        cfg = PretrainConfig(epochs=2, seed=6)
        model = pretrain_transfer_model(data, cfg)
        assert model.num_classes == 5
        # source head had 8 classes; new head is 5 and freshly initialized
        assert model.layers[-1].weights.shape == (5, 32)
        assert not np.allclose(model.layers[-1].weights, 0)

    def test_transfer_beats_random_init_on_frozen_phase(self):
        # source drawn from the target distribution itself
        data = blobs(14, n=96)
        cfg = PretrainConfig(epochs=20, seed=7)
        pre = pretrain_transfer_model(data, cfg)
        rnd = init_model(np.random.default_rng(1234))
        frozen_only = RoundSchedule([Phase(10, 1e-3, 32, (True, True, False))])
        out_pre, _ = run_round_schedule(pre, data, frozen_only, 1, seed=8)
        out_rnd, _ = run_round_schedule(rnd, data, frozen_only, 1, seed=8)
        _, acc_pre = evaluate(out_pre, data)
        _, acc_rnd = evaluate(out_rnd, data)
        assert acc_pre > acc_rnd


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_model(15)
        m.version = 4
        path = tmp_path / "model.json"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.version == 4
        assert back.shapes() == m.shapes()
        # 32-bit wire precision: round-trip is exact at float32
        for a, b in zip(back.layers, m.layers):
            assert np.array_equal(a.weights, b.weights.astype(np.float32).astype(np.float64))

    def test_same_seed_same_checkpoint_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(init_model(16), p1)
        save_checkpoint(init_model(16), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"shapes\": []}")
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestValidation:
    def test_dimension_chain(self):
        layers = [
            DenseLayer(np.zeros((4, 3)), np.zeros(4), "relu"),
            DenseLayer(np.zeros((2, 5)), np.zeros(2), "softmax"),
        ]
        with pytest.raises(ShapeError):
            ModelParams(layers).validate()

    def test_activation_order(self):
        layers = [
            DenseLayer(np.zeros((4, 3)), np.zeros(4), "softmax"),
            DenseLayer(np.zeros((2, 4)), np.zeros(2), "softmax"),
        ]
        with pytest.raises(ConfigError):
            ModelParams(layers).validate()

    def test_nonfinite_rejected(self):
        m = init_model(0)
        m.layers[0].weights[0, 0] = np.inf
        with pytest.raises(NumericError):
            m.validate()
