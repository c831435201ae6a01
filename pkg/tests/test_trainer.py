"""Trainer tests: config, Adam oracle, composite-loss gradients, two-stage
training contracts, and model persistence."""

import hashlib
import json

import numpy as np
import pytest

from mvad import allocation, backbone, contrastive, data, trainer
from mvad.errors import ConfigError, ModelIncomplete, NumericDivergence
from mvad.linalg import make_rng


def _grad_close(a, n):
    return abs(a - n) < 1e-8 or abs(a - n) / max(abs(a), abs(n)) < 1e-4


def _digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def _backbone_digest(models) -> str:
    merged = {}
    for k, m in enumerate(models):
        for name, arr in m.state_arrays().items():
            merged[f"v{k}/{name}"] = arr
    return _digest(merged)


def _tiny_cfg(**over):
    base = dict(
        stage1_epochs=4,
        stage2_epochs=6,
        batch_size=16,
        encoder_hidden=(32, 16),
        latent_dim=32,
        pca_dim=4,
        estimator_hidden=8,
        bank_size=32,
        seed=0,
    )
    base.update(over)
    return trainer.TrainConfig(**base)


def _tiny_data(seed=1, n_normal=60, n_anomaly=6):
    ds = data.generate_synthetic(
        data.SynthConfig(
            n_views=2, dims=(6, 9), n_normal=n_normal, n_anomaly=n_anomaly,
            latent_rank=3, seed=seed,
        )
    )
    return data.one_class_split(ds, data.SplitSpec(seed=0))


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = trainer.TrainConfig()
        assert cfg.stage1_epochs == 100
        assert cfg.batch_size == 256
        assert cfg.temperature == 0.5
        assert cfg.faithful_infonce is True

    def test_invalid_values_rejected(self):
        for bad in (
            dict(stage1_epochs=0),
            dict(stage2_epochs=0),
            dict(backbone_lr=0.0),
            dict(allocation_lr=-1.0),
            dict(batch_size=1),
            dict(contrastive_loss_weight=-0.1),
            dict(temperature=0.0),
            dict(alpha=-1.0),
            dict(weight_decay=1e-4),
            dict(bank_size=1),
        ):
            with pytest.raises(ConfigError):
                trainer.TrainConfig(**bad)

    def test_config_from_dict_strictness(self):
        cfg = trainer.config_from_dict({"seed": 3, "batch_size": "full"})
        assert cfg.seed == 3 and cfg.batch_size is None
        with pytest.raises(ConfigError, match="unknown config keys"):
            trainer.config_from_dict({"learning_rate": 0.1})

    def test_load_config_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"stage1_epochs": 7, "encoder_hidden": [8, 4]}))
        cfg = trainer.load_config(p)
        assert cfg.stage1_epochs == 7
        assert cfg.encoder_hidden == (8, 4)
        p.write_text("{broken")
        with pytest.raises(ConfigError):
            trainer.load_config(p)


class TestAdam:
    def test_matches_reference_recurrence_scalar_constant_gradient(self):
        theta = np.array([1.0])
        opt = trainer.Adam({"w": theta}, lr=0.1)
        g = 0.3
        m = v = 0.0
        ref = 1.0
        for t in range(1, 26):
            opt.step({"w": np.array([g])})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.999**t)
            ref = ref - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
            # atol floor matters once the trajectory crosses zero
            assert np.isclose(theta[0], ref, rtol=1e-10, atol=1e-12)

    def test_matches_reference_on_varying_vector_gradients(self):
        rng = make_rng(1)
        theta = rng.standard_normal(5)
        ref = theta.copy()
        opt = trainer.Adam({"w": theta}, lr=0.01)
        m = np.zeros(5)
        v = np.zeros(5)
        for t in range(1, 40):
            g = rng.standard_normal(5)
            opt.step({"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert np.allclose(theta, ref, rtol=1e-12, atol=1e-15)


class TestTotalLoss:
    def test_lambda_zero_is_pure_weighted_reconstruction(self):
        rec = np.array([[0.2, 0.4], [0.6, 0.8]])
        W = np.array([[0.5, 0.5], [0.25, 0.75]])
        total, per = trainer.total_loss(rec, None, W, lam=0.0)
        assert per[0] == pytest.approx(0.3, abs=1e-15)
        assert per[1] == pytest.approx(0.75, abs=1e-15)
        assert total == pytest.approx(0.525, abs=1e-15)

    def test_hand_composite_example(self):
        # K=2 uniform weights, rec (0.2, 0.4), both contrastive directions at
        # 0.6, lam=1: 0.5*0.2 + 0.5*0.4 + 1*0.5*0.6 = 0.6
        rec = np.array([[0.2, 0.4]])
        con = {(0, 1): np.array([0.6]), (1, 0): np.array([0.6])}
        W = np.array([[0.5, 0.5]])
        total, per = trainer.total_loss(rec, con, W, lam=1.0)
        assert per[0] == pytest.approx(0.6, abs=1e-15)
        assert total == pytest.approx(0.6, abs=1e-15)

    def test_invariant_to_weights_when_views_agree(self):
        rec = np.tile(np.array([[0.7]]), (4, 3))  # equal losses across views
        W1 = np.full((4, 3), 1 / 3)
        rng = make_rng(2)
        W2 = allocation.normalize_weights(rng.standard_normal((4, 3)))
        t1, _ = trainer.total_loss(rec, None, W1, lam=0.0)
        t2, _ = trainer.total_loss(rec, None, W2, lam=0.0)
        assert t1 == pytest.approx(t2, rel=1e-12)


class TestBatchSlices:
    def test_even_and_ragged_splits(self):
        assert trainer._batch_slices(10, 4) == [(0, 4), (4, 8), (8, 10)]
        # trailing singleton folds into the previous batch
        assert trainer._batch_slices(9, 4) == [(0, 4), (4, 9)]
        assert trainer._batch_slices(3, 8) == [(0, 3)]
        assert trainer._batch_slices(5, None) == [(0, 5)]


class TestCompositeGradients:
    """Finite differences through backbone_batch_grads, both loss terms on.

    Seed 6 is pinned to keep every latent row away from zero and every ReLU
    pre-activation away from the fd step size.
    """

    def _setup(self):
        seed = 6
        dims = (5, 7)
        models = [
            backbone.init_autoencoder(d, make_rng(seed, 2, k), hidden=(6, 5), latent_dim=4)
            for k, d in enumerate(dims)
        ]
        X = [make_rng(seed, 100).uniform(0.05, 0.95, (6, d)) for d in dims]
        rng = make_rng(seed, 101)
        W = allocation.normalize_weights(rng.standard_normal((6, 2)))
        return models, X, W

    def test_all_backbone_gradients_match(self):
        models, X, W = self._setup()
        lam, tau = 0.8, 0.6

        def loss():
            val, _, _ = trainer.backbone_batch_grads(models, X, W, lam, tau, False)
            return val

        _, _, grads = trainer.backbone_batch_grads(models, X, W, lam, tau, False)
        h = 1e-5
        rng = make_rng(7)
        params = {}
        for k, m in enumerate(models):
            for name, arr in m.named_params().items():
                params[f"v{k}/{name}"] = arr
        for name, param in params.items():
            flat = param.reshape(-1)
            gflat = grads[name].reshape(-1)
            for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + h
                fp = loss()
                flat[idx] = old - h
                fm = loss()
                flat[idx] = old
                assert _grad_close(gflat[idx], (fp - fm) / (2 * h)), name

    def test_allocation_stage_gradients_match(self):
        rng = make_rng(8)
        est = allocation.init_estimator(4, rng, hidden=5)
        aligned = [rng.standard_normal((6, 4)) for _ in range(3)]
        a = rng.uniform(0.1, 2.0, (6, 3))

        def loss():
            val, _ = trainer.allocation_batch_grads(est, aligned, a)
            return val

        _, grads = trainer.allocation_batch_grads(est, aligned, a)
        h = 1e-5
        for name, param in est.named_params().items():
            flat = param.reshape(-1)
            gflat = grads[name].reshape(-1)
            for idx in range(flat.size):
                old = flat[idx]
                flat[idx] = old + h
                fp = loss()
                flat[idx] = old - h
                fm = loss()
                flat[idx] = old
                assert _grad_close(gflat[idx], (fp - fm) / (2 * h)), name


class TestStage1:
    def test_loss_decreases_and_is_deterministic(self):
        train, _ = _tiny_data()
        cfg = _tiny_cfg(stage1_epochs=8)
        scaled = data.apply_scaler(data.fit_scaler(train), train)
        models_a, hist_a = trainer.train_stage1(scaled.views, cfg)
        models_b, hist_b = trainer.train_stage1(scaled.views, cfg)
        assert hist_a[-1] < hist_a[0]
        assert hist_a == hist_b
        assert _backbone_digest(models_a) == _backbone_digest(models_b)

    def test_different_seed_changes_parameters(self):
        train, _ = _tiny_data()
        scaled = data.apply_scaler(data.fit_scaler(train), train)
        m1, _ = trainer.train_stage1(scaled.views, _tiny_cfg(stage1_epochs=2))
        m2, _ = trainer.train_stage1(scaled.views, _tiny_cfg(stage1_epochs=2, seed=9))
        assert _backbone_digest(m1) != _backbone_digest(m2)

    def test_lambda_zero_never_touches_contrastive_paths(self):
        train, _ = _tiny_data()
        scaled = data.apply_scaler(data.fit_scaler(train), train)
        contrastive.counters.reset()
        trainer.train_stage1(scaled.views, _tiny_cfg(contrastive_loss_weight=0.0))
        assert contrastive.counters.batch_loss_calls == 0
        assert contrastive.counters.match_prob_calls == 0

    def test_non_finite_loss_aborts_with_location(self):
        X = [np.full((8, 3), np.nan), make_rng(13).uniform(0, 1, (8, 4))]
        with pytest.raises(NumericDivergence, match="stage 1 epoch 0"):
            trainer.train_stage1(X, _tiny_cfg(encoder_hidden=(4,), latent_dim=32))


class TestStage2:
    def test_backbone_frozen_bit_exactly(self):
        train, _ = _tiny_data()
        cfg = _tiny_cfg()
        scaled = data.apply_scaler(data.fit_scaler(train), train)
        models, _ = trainer.train_stage1(scaled.views, cfg)
        before = _backbone_digest(models)
        trainer.train_stage2(models, scaled.views, cfg)
        assert _backbone_digest(models) == before

    def test_objective_non_increasing_within_jitter(self):
        train, _ = _tiny_data()
        cfg = _tiny_cfg(stage2_epochs=10)
        scaled = data.apply_scaler(data.fit_scaler(train), train)
        models, _ = trainer.train_stage1(scaled.views, cfg)
        _, hist = trainer.train_stage2(models, scaled.views, cfg)
        for prev, cur in zip(hist, hist[1:]):
            assert cur <= prev * 1.05 + 1e-9

    def test_weights_shift_away_from_the_lossier_view(self):
        # view 0 is pure noise (unlearnable), view 1 is a thin manifold:
        # with contrastive off, a_k is the reconstruction loss, so stage 2
        # should put more weight on view 1
        rng = make_rng(10)
        n = 300
        u = rng.standard_normal((n, 2))
        view1 = u @ rng.standard_normal((2, 24)) + 0.005 * rng.standard_normal((n, 24))
        view0 = rng.standard_normal((n, 24))
        train = data.MultiViewDataset(views=[view0, view1])
        cfg = _tiny_cfg(
            contrastive_loss_weight=0.0, stage1_epochs=40, stage2_epochs=40,
            batch_size=64, backbone_lr=1e-2, encoder_hidden=(16,), pca_dim=6,
        )
        scaled = data.apply_scaler(data.fit_scaler(train), train)
        models, _ = trainer.train_stage1(scaled.views, cfg)
        R = np.stack([m.recon_scores(x) for m, x in zip(models, scaled.views)], axis=1)
        assert R[:, 0].mean() > 10.0 * R[:, 1].mean()
        state, _ = trainer.train_stage2(models, scaled.views, cfg)
        W = allocation.estimate_weights(state, scaled.views)
        assert W[:, 1].mean() > W[:, 0].mean()


class TestFitAndVariants:
    def test_fit_assembles_consistent_model(self):
        train, _ = _tiny_data()
        cfg = _tiny_cfg()
        model = trainer.fit(train, cfg, view_names=["a", "b"])
        assert model.n_views == 2
        assert len(model.history["stage1"]) == cfg.stage1_epochs
        assert len(model.history["stage2"]) == cfg.stage2_epochs
        assert model.bank.size == min(cfg.bank_size, train.n_samples)
        assert not model.allocation.frozen
        assert model.view_names == ["a", "b"]

    def test_fit_is_deterministic(self):
        train, _ = _tiny_data()
        cfg = _tiny_cfg(stage1_epochs=3, stage2_epochs=3)
        m1 = trainer.fit(train, cfg)
        m2 = trainer.fit(train, cfg)
        assert _backbone_digest(m1.autoencoders) == _backbone_digest(m2.autoencoders)
        assert np.array_equal(m1.allocation.estimator.W1, m2.allocation.estimator.W1)
        for u1, u2 in zip(m1.bank.units, m2.bank.units):
            assert np.array_equal(u1, u2)

    def test_no_aa_keeps_allocation_frozen(self):
        train, _ = _tiny_data()
        model = trainer.fit(train, _tiny_cfg(), variant="no_aa")
        assert model.allocation.frozen
        assert model.history["stage2"] == []
        W = allocation.estimate_weights(model.allocation, train.views)
        assert np.all(W == 0.5)

    def test_no_cc_disables_contrastive_and_bank(self):
        train, _ = _tiny_data()
        contrastive.counters.reset()
        model = trainer.fit(train, _tiny_cfg(), variant="no_cc")
        assert model.bank is None
        assert model.config.contrastive_loss_weight == 0.0
        assert model.config.beta == 0.0
        assert contrastive.counters.batch_loss_calls == 0
        assert contrastive.counters.scored_rows == 0

    def test_no_ae_zeroes_alpha_and_requires_contrastive(self):
        train, _ = _tiny_data()
        model = trainer.fit(train, _tiny_cfg(), variant="no_ae")
        assert model.config.alpha == 0.0
        with pytest.raises(ConfigError):
            trainer.fit(train, _tiny_cfg(contrastive_loss_weight=0.0), variant="no_ae")

    def test_unknown_variant_rejected(self):
        train, _ = _tiny_data()
        with pytest.raises(ConfigError):
            trainer.fit(train, _tiny_cfg(), variant="no_xx")


class TestPersistence:
    def _fit_small(self):
        train, _ = _tiny_data()
        return trainer.fit(train, _tiny_cfg(stage1_epochs=3, stage2_epochs=3))

    def test_round_trip_restores_every_tensor_bit_exactly(self, tmp_path):
        model = self._fit_small()
        trainer.save_model(model, tmp_path / "m")
        loaded = trainer.load_model(tmp_path / "m")
        for m1, m2 in zip(model.autoencoders, loaded.autoencoders):
            for name, arr in m1.state_arrays().items():
                assert np.array_equal(arr, m2.state_arrays()[name]), name
        for a, b in zip(model.scaler.mins, loaded.scaler.mins):
            assert np.array_equal(a, b)
        for a, b in zip(model.bank.units, loaded.bank.units):
            assert np.array_equal(a, b)
        for p, q in zip(model.allocation.pca, loaded.allocation.pca):
            assert np.array_equal(p.mean, q.mean)
            assert np.array_equal(p.components, q.components)
        assert np.array_equal(
            model.allocation.estimator.W1, loaded.allocation.estimator.W1
        )
        assert loaded.config == model.config
        assert loaded.variant == model.variant
        assert loaded.view_names == model.view_names
        assert loaded.history == model.history

    def test_full_batch_config_survives_json(self, tmp_path):
        train, _ = _tiny_data()
        cfg = _tiny_cfg(stage1_epochs=2, stage2_epochs=2, batch_size=None)
        model = trainer.fit(train, cfg, out_dir=tmp_path / "m")
        loaded = trainer.load_model(tmp_path / "m")
        assert loaded.config.batch_size is None

    def test_missing_blob_rejected(self, tmp_path):
        model = self._fit_small()
        trainer.save_model(model, tmp_path / "m")
        (tmp_path / "m" / "backbone" / "v0" / "enc0" / "W.mveb").unlink()
        with pytest.raises(ModelIncomplete):
            trainer.load_model(tmp_path / "m")

    def test_missing_meta_rejected(self, tmp_path):
        with pytest.raises(ModelIncomplete):
            trainer.load_model(tmp_path / "empty")

    def test_wrong_format_version_rejected(self, tmp_path):
        model = self._fit_small()
        trainer.save_model(model, tmp_path / "m")
        meta = json.loads((tmp_path / "m" / "meta.json").read_text())
        meta["format_version"] = 99
        (tmp_path / "m" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(ModelIncomplete):
            trainer.load_model(tmp_path / "m")
