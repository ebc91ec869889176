"""Network forward/backward correctness, training behavior, checkpoints."""

import json
import math
import struct

import numpy as np
import pytest

from ctxlab.numerics import NumericalError
from ctxlab.nn import (
    AdamW,
    Mlp,
    MlpSpec,
    SplitModel,
    SplitModelSpec,
    TrainConfig,
    backward,
    extract_context_features,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from ctxlab.parity import ParityConfig, TaskSpec, bayes_risk, gen_dataset


def hand_rolled_forward(model, x):
    """Straight-line recomputation of the logit with explicit loops."""
    h = np.asarray(x, dtype=float)
    for w, b, act in zip(model.stack.weights, model.stack.biases,
                         model.stack.act_flags):
        out = np.empty(w.shape[1])
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            out[j] = acc
        if act:
            out = np.where(out > 0, out, model.spec.negative_slope * out)
        h = out
    return h[0]


def relative_grad_errors(model, x, y, h=1e-5):
    _, grads = model.loss_and_grads(x, y)
    errs = []
    for p, g in zip(model.parameters(), grads):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = p[ix]
            p[ix] = orig + h
            lp = model.loss_and_grads(x, y)[0]
            p[ix] = orig - h
            lm = model.loss_and_grads(x, y)[0]
            p[ix] = orig
            num = (lp - lm) / (2 * h)
            if abs(num) < 1e-10 and abs(g[ix]) < 1e-10:
                errs.append(0.0)
            else:
                errs.append(abs(num - g[ix]) / max(1e-8, abs(num), abs(g[ix])))
    return np.array(errs)


def xor_config():
    return ParityConfig(tasks=(TaskSpec(2, 1),), n_context_bits=2, seed=0)


class TestForward:
    def test_zero_weights_give_logit_zero(self):
        model = Mlp(MlpSpec(layer_dims=(4, 3, 1), seed=0))
        for p in model.parameters():
            p[...] = 0.0
        assert forward(model, np.zeros(4)) == 0.0
        assert model.predict_proba(np.zeros((1, 4)))[0] == 0.5

    def test_identity_layers_pass_value_through(self):
        model = Mlp(MlpSpec(layer_dims=(1, 1, 1), seed=0))
        model.load_parameters([np.array([[1.0]]), np.array([0.0]),
                               np.array([[1.0]]), np.array([0.0])])
        assert forward(model, np.array([0.3])) == pytest.approx(0.3, abs=1e-15)

    def test_matches_hand_rolled_oracle(self):
        rng = np.random.default_rng(17)
        model = Mlp(MlpSpec(layer_dims=(6, 8, 5, 1), seed=2))
        for _ in range(10):
            x = rng.standard_normal(6)
            assert forward(model, x) == pytest.approx(
                hand_rolled_forward(model, x), abs=1e-10)

    def test_rejects_wrong_width(self):
        model = Mlp(MlpSpec(layer_dims=(4, 3, 1), seed=0))
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 5)))

    def test_activation_placement_default(self):
        spec = MlpSpec(layer_dims=(5, 4, 3, 2, 1), seed=0)
        assert spec.activation_flags() == [True, True, False, False]
        two = MlpSpec(layer_dims=(5, 4, 1), seed=0)
        assert two.activation_flags() == [True, False]


class TestBackward:
    @pytest.mark.parametrize("dims", [(3, 5, 1), (4, 6, 5, 1), (5, 7, 6, 4, 1)])
    def test_finite_difference_agreement(self, dims):
        rng = np.random.default_rng(sum(dims))
        model = Mlp(MlpSpec(layer_dims=dims, seed=1))
        x = rng.standard_normal((8, dims[0]))
        y = rng.integers(0, 2, 8).astype(float)
        assert relative_grad_errors(model, x, y).max() <= 1e-4

    def test_split_model_finite_difference(self):
        rng = np.random.default_rng(3)
        spec = SplitModelSpec(visible_context=4, n_control=3,
                              encoder_hidden=(6,), feature_dim=4,
                              decoder_hidden=(5,), seed=2)
        model = SplitModel(spec)
        ctx = rng.integers(0, 2, (8, 4)).astype(float)
        ctl = np.eye(3)[rng.integers(0, 3, 8)]
        x = np.column_stack([ctx, ctl])
        y = rng.integers(0, 2, 8).astype(float)
        assert relative_grad_errors(model, x, y).max() <= 1e-4

    def test_constructed_stationary_point(self):
        # Paired labels on identical inputs with a zeroed output layer: the
        # two per-pair gradient contributions cancel exactly.
        model = Mlp(MlpSpec(layer_dims=(3, 4, 1), seed=5))
        model.stack.weights[-1][...] = 0.0
        model.stack.biases[-1][...] = 0.0
        x = np.tile(np.array([[0.7, -0.2, 1.0]]), (2, 1))
        y = np.array([1.0, 0.0])
        grads = backward(model, x, y)
        for g in grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_weight_decay_force_is_linear_in_parameter(self):
        # Decoupled decay applies exactly -lr * wd * p alongside the Adam step.
        cfg = TrainConfig(learning_rate=0.01, weight_decay=0.1, batch_size=1,
                          max_epochs=1, patience=1, seed=0)
        p = np.array([2.0, -4.0, 0.5])
        opt = AdamW([p], cfg)
        opt.step([p], [np.zeros(3)])  # zero gradient isolates the decay term
        np.testing.assert_allclose(p, np.array([2.0, -4.0, 0.5]) * (1 - 0.01 * 0.1),
                                   rtol=0, atol=1e-15)


class TestTraining:
    def test_two_bit_xor_reaches_near_zero_loss(self):
        cfg = xor_config()
        train_set = gen_dataset(cfg, 10000, seed=1)
        val_set = gen_dataset(cfg, 4000, seed=2)
        spec = MlpSpec(layer_dims=(3, 16, 8, 1), seed=0)
        tcfg = TrainConfig(batch_size=500, max_epochs=60, patience=25, seed=0)
        _, hist = train(spec, tcfg, train_set, val_set)
        assert hist.best_val_loss < 0.01

    def test_unsolvable_config_stays_at_coin_flip(self):
        cfg = ParityConfig(tasks=(TaskSpec(9, 8), TaskSpec(10, 7)),
                           n_context_bits=10, seed=0)
        train_set = gen_dataset(cfg, 4000, seed=3)
        val_set = gen_dataset(cfg, 4000, seed=4)
        # Context length 4 exposes neither task's bits.
        spec = MlpSpec(layer_dims=(4 + 2, 16, 8, 1), seed=1)
        tcfg = TrainConfig(batch_size=200, max_epochs=30, patience=25, seed=1)
        _, hist = train(spec, tcfg, train_set, val_set)
        assert abs(hist.best_val_loss - math.log(2)) < 0.02
        assert hist.best_val_loss >= bayes_risk(cfg, 4) - 0.005

    def test_bitwise_deterministic(self):
        cfg = xor_config()
        train_set = gen_dataset(cfg, 2000, seed=1)
        val_set = gen_dataset(cfg, 1000, seed=2)
        spec = MlpSpec(layer_dims=(3, 8, 1), seed=4)
        tcfg = TrainConfig(batch_size=200, max_epochs=10, patience=10, seed=7)
        m1, h1 = train(spec, tcfg, train_set, val_set)
        m2, h2 = train(spec, tcfg, train_set, val_set)
        assert h1.train_loss == h2.train_loss
        assert h1.val_loss == h2.val_loss
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert np.array_equal(a, b)

    def test_descent_on_fixed_batch_with_tiny_rate(self):
        cfg = xor_config()
        data = gen_dataset(cfg, 256, seed=5)
        spec = MlpSpec(layer_dims=(3, 8, 1), seed=2)
        tcfg = TrainConfig(learning_rate=1e-5, batch_size=256, max_epochs=5,
                           patience=5, seed=0)
        _, hist = train(spec, tcfg, data, data)
        diffs = np.diff(hist.train_loss)
        assert np.all(diffs <= 1e-12)

    def test_early_stopping_restores_best_epoch(self):
        cfg = xor_config()
        train_set = gen_dataset(cfg, 1000, seed=1)
        val_set = gen_dataset(cfg, 500, seed=2)
        spec = MlpSpec(layer_dims=(3, 32, 1), seed=0)
        tcfg = TrainConfig(batch_size=50, max_epochs=200, patience=5, seed=0)
        model, hist = train(spec, tcfg, train_set, val_set)
        assert hist.best_epoch == int(np.argmin(hist.val_loss))
        assert hist.best_val_loss == min(hist.val_loss)
        if hist.stopped_early:
            assert len(hist.val_loss) <= tcfg.max_epochs
        # The returned parameters reproduce the best validation loss.
        from ctxlab.nn import _bce_with_labels
        assert _bce_with_labels(model, val_set, 2) == pytest.approx(
            hist.best_val_loss, abs=1e-12)

    def test_nan_loss_aborts_with_diagnostic(self):
        cfg = xor_config()
        data = gen_dataset(cfg, 200, seed=1)
        spec = MlpSpec(layer_dims=(3, 8, 1), seed=0)
        tcfg = TrainConfig(learning_rate=1e160, batch_size=200, max_epochs=5,
                           patience=5, seed=0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalError):
                train(spec, tcfg, data, data)

    def test_cannot_beat_exact_risk(self):
        cfg = ParityConfig(tasks=(TaskSpec(3, 1), TaskSpec(6, 2)),
                           n_context_bits=6, seed=0)
        train_set = gen_dataset(cfg, 6000, seed=9)
        val_set = gen_dataset(cfg, 6000, seed=10)
        spec = MlpSpec(layer_dims=(4 + 2, 24, 12, 1), seed=3)
        tcfg = TrainConfig(batch_size=200, max_epochs=40, patience=25, seed=3)
        _, hist = train(spec, tcfg, train_set, val_set)
        assert hist.best_val_loss >= bayes_risk(cfg, 4) - 0.005


class TestSplitModelFeatures:
    def make_trained_split(self):
        cfg = ParityConfig(tasks=(TaskSpec(2, 1), TaskSpec(4, 3)),
                           n_context_bits=4, seed=0)
        train_set = gen_dataset(cfg, 5000, seed=1)
        val_set = gen_dataset(cfg, 2000, seed=2)
        spec = SplitModelSpec(visible_context=4, n_control=2,
                              encoder_hidden=(16,), feature_dim=8,
                              decoder_hidden=(12,), seed=0)
        tcfg = TrainConfig(batch_size=250, max_epochs=30, patience=25, seed=0)
        model, _ = train(spec, tcfg, train_set, val_set)
        return model, val_set

    def test_feature_shape_and_determinism(self):
        model, val_set = self.make_trained_split()
        x = val_set.inputs(4, np.arange(100))
        feats = extract_context_features(model, x)
        assert feats.shape == (100, 8)
        assert np.all(np.isfinite(feats))
        assert np.array_equal(feats, extract_context_features(model, x))

    def test_identical_inputs_identical_rows(self):
        model, _ = self.make_trained_split()
        row = np.array([1.0, 0.0, 1.0, 1.0, 1.0, 0.0])
        x = np.tile(row, (5, 1))
        feats = extract_context_features(model, x)
        assert np.all(feats == feats[0])

    def test_rejects_plain_mlp(self):
        model = Mlp(MlpSpec(layer_dims=(4, 3, 1), seed=0))
        with pytest.raises(TypeError):
            extract_context_features(model, np.zeros((2, 4)))


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        model = Mlp(MlpSpec(layer_dims=(5, 7, 3, 1), seed=9))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, metadata={"note": "roundtrip"})
        back = load_checkpoint(path)
        assert back.spec == model.spec
        for a, b in zip(model.parameters(), back.parameters()):
            assert np.array_equal(a, b)
        sidecar = json.loads(path.with_suffix(".ckpt.meta.json").read_text())
        assert sidecar["metadata"]["note"] == "roundtrip"
        assert sidecar["n_parameters"] == sum(p.size for p in model.parameters())

    def test_split_model_round_trip(self, tmp_path):
        spec = SplitModelSpec(visible_context=6, n_control=4,
                              encoder_hidden=(10,), feature_dim=5,
                              decoder_hidden=(8,), seed=3)
        model = SplitModel(spec)
        path = tmp_path / "split.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert isinstance(back, SplitModel)
        x = np.column_stack([np.eye(6)[:4], np.eye(4)])
        np.testing.assert_array_equal(model.forward(x), back.forward(x))

    def test_parameters_stored_little_endian(self, tmp_path):
        model = Mlp(MlpSpec(layer_dims=(2, 2, 1), seed=0))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        assert blob[:4] == b"CTXM"
        version, spec_len = struct.unpack_from("<II", blob, 4)
        assert version == 1
        first = struct.unpack_from("<d", blob, 12 + spec_len)[0]
        assert first == model.parameters()[0].reshape(-1)[0]

    def test_rejects_corrupt_blob(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(path)
