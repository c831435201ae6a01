"""Autoencoder backbone tests: shapes, init, and finite-difference gradients."""

import numpy as np
import pytest

from mvad import backbone
from mvad.errors import BatchTooSmall, DimensionError, StaleTrace
from mvad.linalg import make_rng


def _small_model(seed=0, d=10):
    return backbone.init_autoencoder(
        d, make_rng(seed), hidden=(8, 6), latent_dim=4
    )


def _grad_close(a, n):
    # biases feeding batch norm have exactly flat loss, so both gradients are
    # pure fp noise there; the absolute escape hatch covers that case
    return abs(a - n) < 1e-8 or abs(a - n) / max(abs(a), abs(n)) < 1e-4


class TestArchitecture:
    def test_layer_shapes(self):
        model = _small_model()
        assert [l.W.shape for l in model.encoder] == [(10, 8), (8, 6), (6, 4)]
        assert [l.W.shape for l in model.decoder] == [(4, 6), (6, 8), (8, 10)]
        assert all(l.batch_norm for l in model.encoder)
        assert [l.batch_norm for l in model.decoder] == [True, True, False]
        assert [l.activation for l in model.encoder] == ["relu", "relu", "identity"]
        assert [l.activation for l in model.decoder] == ["relu", "relu", "sigmoid"]
        assert model.input_dim == 10
        assert model.latent_dim == 4

    def test_forward_shapes_and_output_range(self):
        model = _small_model()
        X = make_rng(1).uniform(0, 1, (5, 10))
        trace = model.forward_train(X)
        assert trace.latent.shape == (5, 4)
        assert trace.recon.shape == (5, 10)
        # sigmoid output layer
        assert trace.recon.min() > 0.0 and trace.recon.max() < 1.0
        # linear latent should carry both signs
        assert trace.latent.min() < 0.0 < trace.latent.max()

    def test_init_is_glorot_and_deterministic(self):
        a = _small_model(seed=3)
        b = _small_model(seed=3)
        c = _small_model(seed=4)
        for la, lb in zip(a.encoder + a.decoder, b.encoder + b.decoder):
            assert np.array_equal(la.W, lb.W)
            assert np.all(la.b == 0.0)
            fan_in, fan_out = la.W.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(la.W).max() <= limit
            if la.batch_norm:
                assert np.all(la.bn_gamma == 1.0)
                assert np.all(la.bn_beta == 0.0)
                assert np.all(la.running_mean == 0.0)
                assert np.all(la.running_var == 1.0)
        assert not np.array_equal(a.encoder[0].W, c.encoder[0].W)

    def test_named_params_cover_all_layers(self):
        model = _small_model()
        names = set(model.named_params())
        assert "enc0/W" in names and "dec2/b" in names
        assert "enc2/bn_gamma" in names
        assert "dec2/bn_gamma" not in names  # output layer has no batch norm
        state = set(model.state_arrays())
        assert "enc0/running_mean" in state and "enc0/running_var" in state


class TestReconErrors:
    def test_hand_oracle(self):
        X = np.array([[0.2, 0.4]])
        R = np.array([[0.5, 0.0]])
        # (0.2-0.5)^2 + (0.4-0.0)^2 = 0.09 + 0.16
        assert backbone.recon_errors(X, R)[0] == pytest.approx(0.25, abs=1e-15)

    def test_matches_norm_definition(self):
        rng = make_rng(2)
        X, R = rng.uniform(0, 1, (7, 5)), rng.uniform(0, 1, (7, 5))
        ref = np.linalg.norm(X - R, axis=1) ** 2
        assert np.allclose(backbone.recon_errors(X, R), ref, rtol=1e-12)


class TestGradients:
    """Analytic backward vs central differences on every parameter kind.

    Loss is sum_i c_i*||x_i - recon_i||^2 + sum_ij A_ij*latent_ij, which
    exercises both the reconstruction path and an injected latent gradient.
    """

    def _setup(self, seed=11):
        model = _small_model(seed=seed)
        rng = make_rng(seed, 50)
        X = rng.uniform(0.05, 0.95, (6, 10))
        c = rng.uniform(0.5, 1.5, 6)
        A = rng.standard_normal((6, 4))

        def loss():
            tr = model.forward_train(X)
            return float(
                (c * backbone.recon_errors(X, tr.recon)).sum() + (A * tr.latent).sum()
            )

        trace = model.forward_train(X)
        d_recon = 2.0 * c[:, None] * (trace.recon - X)
        grads = model.backward(trace, d_recon, d_latent=A)
        return model, loss, grads

    def test_all_parameter_gradients_match(self):
        model, loss, grads = self._setup()
        h = 1e-5
        rng = make_rng(99)
        for name, param in model.named_params().items():
            flat = param.reshape(-1)
            gflat = grads[name].reshape(-1)
            assert flat.shape == gflat.shape
            picks = rng.choice(flat.size, size=min(8, flat.size), replace=False)
            for j in picks:
                old = flat[j]
                flat[j] = old + h
                fp = loss()
                flat[j] = old - h
                fm = loss()
                flat[j] = old
                num = (fp - fm) / (2 * h)
                assert _grad_close(gflat[j], num), f"{name}[{j}]: {gflat[j]} vs {num}"

    def test_zero_upstream_gives_zero_grads(self):
        model = _small_model()
        X = make_rng(5).uniform(0, 1, (4, 10))
        trace = model.forward_train(X)
        grads = model.backward(trace, np.zeros_like(trace.recon))
        for g in grads.values():
            assert np.all(g == 0.0)


class TestEvalMode:
    def test_row_scores_do_not_depend_on_batch_mates(self):
        model = _small_model(seed=6)
        rng = make_rng(7)
        # move running stats off their init so eval truly uses them
        for _ in range(3):
            model.forward_train(rng.uniform(0, 1, (16, 10)))
        X = rng.uniform(0, 1, (9, 10))
        # eval runs through batched BLAS, whose kernel choice varies with
        # batch shape, so agreement is to round-off rather than bitwise
        full = model.recon_scores(X)
        one = model.recon_scores(X[4:5])
        pair = model.recon_scores(X[[2, 4]])
        assert np.isclose(full[4], one[0], rtol=1e-12, atol=0)
        assert np.isclose(full[4], pair[1], rtol=1e-12, atol=0)
        Z_full = model.encode_eval(X)
        Z_one = model.encode_eval(X[4:5])
        assert np.allclose(Z_full[4], Z_one[0], rtol=1e-12, atol=1e-15)

    def test_eval_matches_vectorized_reference(self):
        model = _small_model(seed=8)
        rng = make_rng(9)
        for _ in range(2):
            model.forward_train(rng.uniform(0, 1, (12, 10)))
        X = rng.uniform(0, 1, (5, 10))
        out = X
        for layer in model.encoder + model.decoder:
            pre = out @ layer.W + layer.b
            if layer.batch_norm:
                xhat = (pre - layer.running_mean) / np.sqrt(layer.running_var + 1e-5)
                pre = layer.bn_gamma * xhat + layer.bn_beta
            out = layer._activate(pre)
        _, R = model.reconstruct_eval(X)
        assert np.allclose(R, out, rtol=1e-12, atol=1e-14)

    def test_running_stats_move_toward_batch_stats(self):
        model = _small_model(seed=10)
        rng = make_rng(11)
        X = rng.uniform(0, 1, (64, 10)) + 5.0
        before = model.encoder[0].running_mean.copy()
        model.forward_train(X)
        after = model.encoder[0].running_mean
        pre = X @ model.encoder[0].W + model.encoder[0].b
        expected = 0.9 * before + 0.1 * pre.mean(axis=0)
        assert np.allclose(after, expected, rtol=1e-12)


class TestErrors:
    def test_single_row_training_batch_rejected(self):
        model = _small_model()
        with pytest.raises(BatchTooSmall):
            model.forward_train(np.ones((1, 10)))

    def test_wrong_width_rejected(self):
        model = _small_model()
        with pytest.raises(DimensionError):
            model.forward_train(np.ones((4, 11)))
        with pytest.raises(DimensionError):
            model.encode_eval(np.ones((4, 3)))

    def test_stale_trace_rejected(self):
        model = _small_model()
        X = make_rng(12).uniform(0, 1, (4, 10))
        trace = model.forward_train(X)
        model.version += 1
        with pytest.raises(StaleTrace):
            model.backward(trace, np.zeros_like(trace.recon))
