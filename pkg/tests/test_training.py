"""Training engine: loss, optimizer, sampling, gradients, and the loop."""

import numpy as np
import pytest

from eqocc import autodiff as ad
from eqocc import data_io, model, training


def small_model_config(**kw):
    base = dict(
        enc_layers=2, dec_layers=1, heads=2, mult=4, k=3,
        dec_out_scalars=4, radial_hidden=3, seed=5,
    )
    base.update(kw)
    return model.ModelConfig(**base)


def random_items(mcfg, n_items, n_points, n_queries, seed):
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n_items):
        pts = rng.uniform(-1.0, 1.0, (n_points, 3))
        qs = rng.uniform(-1.2, 1.2, (n_queries, 3))
        labels = rng.integers(0, 2, n_queries).astype(np.float64)
        items.append(training.TrainingItem(pts, qs, labels))
    return items


def mirrored_item(n_queries=3):
    """Cloud symmetric under x-negation with queries on the mirror plane.

    Every on-plane query is exactly equidistant from each mirrored pair, so
    the decoder sees two tied candidates and the tie-max path is exercised.
    """
    rng = np.random.default_rng(6)
    half = rng.uniform(0.5, 1.5, (8, 3))
    pts = np.vstack([half, half * np.array([-1.0, 1.0, 1.0])])
    qs = np.zeros((n_queries, 3))
    qs[:, 1] = np.linspace(0.2, 1.2, n_queries)
    qs[:, 2] = np.linspace(-0.4, 0.6, n_queries)
    labels = (np.arange(n_queries) % 2).astype(np.float64)
    return training.TrainingItem(pts, qs, labels)


class TestTrainConfig:
    def test_defaults_match_protocol(self):
        cfg = training.TrainConfig()
        assert cfg.lr_start == 2e-4
        assert cfg.lr_end == 1e-5
        assert cfg.batch == 64
        assert cfg.iterations == 5000
        assert cfg.queries_per_item == 2048
        assert cfg.input_points == 300
        assert cfg.noise_sigma == 0.005
        assert cfg.beta1 == 0.9
        assert cfg.beta2 == 0.999
        assert cfg.eps == 1e-8
        assert cfg.seed == 0

    def test_json_roundtrip(self, tmp_path):
        cfg = training.TrainConfig(iterations=123, batch=4, seed=9)
        path = tmp_path / "train.json"
        training.save_train_config(path, cfg)
        assert training.load_train_config(path) == cfg

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            training.TrainConfig(lr_start=1e-5, lr_end=2e-4)  # lr_start < lr_end
        with pytest.raises(ValueError):
            training.TrainConfig(lr_end=0.0)
        with pytest.raises(ValueError):
            training.TrainConfig(batch=0)
        with pytest.raises(ValueError):
            training.TrainConfig(noise_sigma=-0.1)
        with pytest.raises(ValueError):
            training.TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            training.TrainConfig.from_dict({"lr_start": 1e-3, "bogus": 1})


class TestLearningRate:
    def test_linear_interpolation(self):
        cfg = training.TrainConfig(iterations=1000)
        lr = training.learning_rate(cfg, 500)
        assert np.isclose(lr, 2e-4 + (1e-5 - 2e-4) * 0.5, rtol=1e-12)

    def test_endpoint_exact(self):
        cfg = training.TrainConfig(iterations=777)
        assert training.learning_rate(cfg, 777) == cfg.lr_end

    def test_monotone_decreasing(self):
        cfg = training.TrainConfig(iterations=50)
        lrs = [training.learning_rate(cfg, t) for t in range(1, 51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestBceLoss:
    def test_half_prediction(self):
        loss = training.bce_loss(np.array([0.5]), np.array([1.0]))
        assert np.isclose(float(loss), 0.6931471805599453, atol=1e-12)

    def test_hand_pair(self):
        loss = training.bce_loss(np.array([0.9, 0.1]), np.array([1.0, 0.0]))
        assert np.isclose(float(loss), 0.10536051565782628, atol=1e-12)

    def test_perfect_prediction_clamped(self):
        loss = training.bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert 0.0 < float(loss) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            training.bce_loss(np.array([0.5, 0.5]), np.array([1.0]))

    def test_gradient_matches_closed_form(self):
        p = ad.leaf(np.array([0.3, 0.8]))
        loss = training.bce_loss(p, np.array([1.0, 0.0]))
        ad.backward(loss)
        # d/dp of mean BCE: ((1-y)/(1-p) - y/p) / n
        want = np.array([-1.0 / 0.3, 1.0 / 0.2]) / 2.0
        np.testing.assert_allclose(p.grad, want, rtol=1e-12)


class TestAdam:
    def toy_store(self, value=0.0):
        tensors = {"w": np.array([value], dtype=np.float64)}
        return training.ParamStore(
            tensors=tensors,
            grads={"w": np.zeros(1)},
            first_moment={"w": np.zeros(1)},
            second_moment={"w": np.zeros(1)},
        )

    def test_single_step_hand_value(self):
        store = self.toy_store()
        cfg = training.TrainConfig(lr_start=0.1, lr_end=0.1, iterations=10)
        training.adam_step(store, {"w": np.array([1.0])}, 1, cfg)
        # -lr * mhat / (sqrt(vhat) + eps) with mhat = vhat = 1 at t=1
        assert np.isclose(store.tensors["w"][0], -0.1 / (1.0 + 1e-8), rtol=1e-14)
        assert np.isclose(store.tensors["w"][0], -0.1, atol=1e-8)

    def test_zero_gradients_leave_parameters_unchanged(self):
        store = self.toy_store(value=0.7)
        cfg = training.TrainConfig(lr_start=0.1, lr_end=0.1, iterations=10)
        training.adam_step(store, {"w": np.zeros(1)}, 1, cfg)
        np.testing.assert_array_equal(store.tensors["w"], np.array([0.7]))

    def test_rejects_nonpositive_iteration(self):
        store = self.toy_store()
        cfg = training.TrainConfig(lr_start=0.1, lr_end=0.1, iterations=10)
        with pytest.raises(ValueError):
            training.adam_step(store, {"w": np.zeros(1)}, 0, cfg)

    def test_updates_in_place(self):
        store = self.toy_store()
        arr = store.tensors["w"]
        cfg = training.TrainConfig(lr_start=0.1, lr_end=0.1, iterations=10)
        training.adam_step(store, {"w": np.array([1.0])}, 1, cfg)
        assert store.tensors["w"] is arr  # the live model array was updated


class TestBackwardBasics:
    def test_quadratic_toy(self):
        w = ad.leaf(np.array(3.0))
        loss = ad.mul(w, w)
        ad.backward(loss)
        assert float(w.grad) == 6.0

    def test_excluded_slice_gets_exact_zero(self):
        w = ad.leaf(np.arange(1.0, 17.0).reshape(4, 4))
        used = ad.narrow(w, 0, 0, 2)
        loss = ad.sum_(ad.mul(used, used))
        ad.backward(loss)
        np.testing.assert_array_equal(w.grad[2:], np.zeros((2, 4)))
        assert np.all(w.grad[:2] != 0)


class TestParamStore:
    def test_covers_every_parameter_once(self):
        mcfg = small_model_config()
        params = model.init_params(mcfg, dtype=np.float32)
        store = training.param_store(params)
        assert set(store.tensors) == set(model.named_tensors(params))
        for name, arr in store.tensors.items():
            assert store.grads[name].shape == arr.shape
            assert arr.dtype == np.float32

    def test_detached_parameters_reported_and_zeroed(self):
        mcfg = small_model_config()
        params = model.init_params(mcfg, dtype=np.float64)
        items = random_items(mcfg, 1, 8, 3, seed=0)
        loss, grads, detached = training.loss_and_gradients(items, mcfg, params)
        store = training.param_store(params)
        training.record_gradients(store, grads)
        assert tuple(sorted(store.detached)) == tuple(sorted(detached))
        assert len(detached) > 0  # boundary blocks always have dead slots
        for name in detached:
            np.testing.assert_array_equal(
                store.grads[name], np.zeros_like(store.grads[name])
            )
        live = set(store.tensors) - set(detached)
        assert any(np.any(store.grads[name] != 0) for name in live)


class TestSampling:
    def test_consumption_order_pinned(self):
        oracle = data_io.sphere(1.0)
        cfg = training.TrainConfig(input_points=50, queries_per_item=64)
        item = training.sample_training_item(oracle, cfg, np.random.default_rng(11))
        rng = np.random.default_rng(11)
        clean = oracle.sample_surface(rng, 50)
        np.testing.assert_allclose(np.linalg.norm(clean, axis=1), 1.0, atol=1e-12)
        noise = rng.normal(0.0, cfg.noise_sigma, clean.shape)
        lo, hi = data_io.padded_bbox(*oracle.bbox(), pad=0.1)
        queries = rng.uniform(lo, hi, (64, 3))
        np.testing.assert_array_equal(item.points, clean + noise)
        np.testing.assert_array_equal(item.queries, queries)
        np.testing.assert_array_equal(item.labels, oracle.contains(queries).astype(np.float64))

    def test_sphere_label_fraction(self):
        oracle = data_io.sphere(1.0)
        cfg = training.TrainConfig(input_points=10, queries_per_item=2048)
        item = training.sample_training_item(oracle, cfg, np.random.default_rng(12))
        frac = item.labels.mean()
        expect = (4.0 * np.pi / 3.0) / 2.4**3
        sigma = np.sqrt(expect * (1.0 - expect) / 2048)
        assert abs(frac - expect) < 3 * sigma

    def test_deterministic_per_seed(self):
        oracle = data_io.torus(0.3, 0.1)
        cfg = training.TrainConfig(input_points=40, queries_per_item=32)
        a = training.sample_training_item(oracle, cfg, np.random.default_rng(13))
        b = training.sample_training_item(oracle, cfg, np.random.default_rng(13))
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.queries, b.queries)
        np.testing.assert_array_equal(a.labels, b.labels)


class TestMeanNeighborDistance:
    def test_line_cloud_hand_value(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [7.0, 0, 0]])
        # k=2 neighborhoods include the anchor; self-distances are excluded:
        # nearest others are 1, 1, 2, 4 -> mean 2
        assert training.mean_neighbor_distance([pts], k=2) == pytest.approx(2.0)

    def test_pools_over_clouds(self):
        a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[0.0, 0, 0], [3.0, 0, 0]])
        assert training.mean_neighbor_distance([a, b], k=2) == pytest.approx(2.0)


class TestBatchedForward:
    def per_item_scores(self, item, mcfg, params):
        rs = model._radius_scale(params)
        dt = model.params_dtype(params)
        cg = model.cloud_geometry(item.points, mcfg, rs, dt)
        f_p = model.run_encoder(mcfg, params, cg)
        qb = model.query_batch(item.points, item.queries, mcfg, rs, dt)
        return ad.value(model.run_decoder(mcfg, params, qb, f_p))

    def test_union_matches_per_item_bitwise(self):
        mcfg = small_model_config()
        params = model.init_params(mcfg, dtype=np.float64)
        items = random_items(mcfg, 3, 9, 4, seed=1)
        graph = training.batch_graph(items, mcfg, model._radius_scale(params), np.float64)
        got = ad.value(training.batch_scores(graph, mcfg, params))
        want = np.concatenate([self.per_item_scores(it, mcfg, params) for it in items])
        np.testing.assert_array_equal(got, want)

    def test_tied_queries_fall_back_and_match(self):
        mcfg = small_model_config()
        params = model.init_params(mcfg, dtype=np.float64)
        items = [mirrored_item(), random_items(mcfg, 1, 9, 4, seed=2)[0]]
        graph = training.batch_graph(items, mcfg, model._radius_scale(params), np.float64)
        got = ad.value(training.batch_scores(graph, mcfg, params))
        want = np.concatenate([self.per_item_scores(it, mcfg, params) for it in items])
        np.testing.assert_array_equal(got, want)

    def test_loss_is_query_mean(self):
        mcfg = small_model_config()
        params = model.init_params(mcfg, dtype=np.float64)
        items = random_items(mcfg, 2, 8, 5, seed=3)
        loss, _, _ = training.loss_and_gradients(items, mcfg, params)
        per = []
        for it in items:
            s = self.per_item_scores(it, mcfg, params)
            per.append(float(training.bce_loss(s, it.labels)))
        assert np.isclose(loss, np.mean(per), rtol=1e-12)

    def test_chunked_accumulation_matches_single_graph(self):
        mcfg = small_model_config()
        params = model.init_params(mcfg, dtype=np.float64)
        items = random_items(mcfg, 4, 8, 5, seed=4)
        l1, g1, d1 = training.loss_and_gradients(items, mcfg, params)
        l2, g2, d2 = training.loss_and_gradients(items, mcfg, params, grad_chunks=2)
        assert np.isclose(l1, l2, rtol=1e-12)
        assert d1 == d2
        for name in g1:
            if g1[name] is None:
                assert g2[name] is None
            else:
                np.testing.assert_allclose(g2[name], g1[name], rtol=1e-9, atol=1e-12)


class TestFiniteDifferences:
    def test_random_configs_pass(self):
        # both layer kinds, layer norm, and skips are on every full-model path
        for mcfg, seed in [
            (small_model_config(), 21),
            (small_model_config(enc_layers=1, dec_layers=2, heads=4, mult=8, k=2), 22),
        ]:
            items = random_items(mcfg, 1, 8, 3, seed=seed)
            report = training.finite_difference_report(
                mcfg, items, elements_per_tensor=3, seed=seed
            )
            assert report["ok"], report["failures"]
            assert report["checked"] > 0

    def test_tie_max_path_passes(self):
        mcfg = small_model_config(seed=23)
        report = training.finite_difference_report(
            mcfg, [mirrored_item()], elements_per_tensor=3, seed=23
        )
        assert report["ok"], report["failures"]

    def test_detached_parameters_have_zero_derivative(self):
        mcfg = small_model_config()
        items = random_items(mcfg, 1, 8, 3, seed=24)
        report = training.finite_difference_report(
            mcfg, items, elements_per_tensor=2, seed=24
        )
        assert len(report["detached"]) > 0
        for name in report["detached"]:
            assert report["per_tensor"][name]["max_abs_err"] <= 1e-9


class TestTrainLoop:
    def dataset(self):
        return [data_io.sphere(0.4)]

    def tiny_cfgs(self, iterations=5):
        tcfg = training.TrainConfig(
            batch=2, iterations=iterations, queries_per_item=16, input_points=20,
            seed=3,
        )
        mcfg = small_model_config(k=4)
        return tcfg, mcfg

    def test_smoke_run_writes_artifacts(self, tmp_path):
        tcfg, mcfg = self.tiny_cfgs()
        result = training.train(
            self.dataset(), tcfg, mcfg, out_dir=tmp_path, checkpoint_every=2
        )
        assert not result.aborted
        assert result.trace.shape == (5, 3)
        np.testing.assert_array_equal(result.trace[:, 0], np.arange(1, 6))
        assert np.all(np.isfinite(result.trace[:, 1]))
        assert result.trace[-1, 2] == tcfg.lr_end
        lines = (tmp_path / "loss.csv").read_text().strip().split("\n")
        assert lines[0] == "iteration,loss,lr"
        assert len(lines) == 6
        assert result.radius_norm > 0
        # final checkpoint loads back into the architecture
        loaded = model.params_from_checkpoint(mcfg, tmp_path / "checkpoint.bin")
        got = model.named_tensors(loaded)
        want = model.named_tensors(result.params)
        for name in want:
            np.testing.assert_array_equal(got[name], want[name].astype(np.float32))

    def test_bit_identical_traces(self, tmp_path):
        tcfg, mcfg = self.tiny_cfgs()
        a = training.train(self.dataset(), tcfg, mcfg)
        b = training.train(self.dataset(), tcfg, mcfg)
        np.testing.assert_array_equal(a.trace, b.trace)
        ga = model.named_tensors(a.params)
        gb = model.named_tensors(b.params)
        for name in ga:
            np.testing.assert_array_equal(ga[name], gb[name])

    def test_nan_loss_aborts_and_keeps_last_good(self, tmp_path):
        tcfg, mcfg = self.tiny_cfgs(iterations=10)
        params = model.init_params(mcfg, dtype=np.float32)
        params.mlp_b2[:] = np.nan
        result = training.train(
            self.dataset(), tcfg, mcfg, out_dir=tmp_path, checkpoint_every=3,
            params=params,
        )
        assert result.aborted
        assert result.trace.shape[0] == 0
        # the pre-loop checkpoint is retained, untouched by the bad step
        assert (tmp_path / "checkpoint.bin").exists()
        lines = (tmp_path / "loss.csv").read_text().strip().split("\n")
        assert lines == ["iteration,loss,lr"]

    def test_lr_schedule_in_trace(self):
        tcfg, mcfg = self.tiny_cfgs(iterations=4)
        result = training.train(self.dataset(), tcfg, mcfg)
        want = [training.learning_rate(tcfg, t) for t in (1, 2, 3, 4)]
        np.testing.assert_allclose(result.trace[:, 2], want, rtol=1e-12)


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    mcfg = model.ModelConfig(
        enc_layers=2, dec_layers=2, heads=2, mult=8, k=8,
        dec_out_scalars=8, radial_hidden=8, seed=1,
    )
    tcfg = training.TrainConfig(
        lr_start=3e-3, lr_end=3e-4,
        batch=8, iterations=900, queries_per_item=96, input_points=72,
        noise_sigma=0.005, seed=4,
    )
    dataset = [data_io.sphere(0.4)]
    result = training.train(dataset, tcfg, mcfg, out_dir=out, checkpoint_every=300)
    return mcfg, tcfg, result, out


class TestOverfitSphere:
    def test_final_bce_low(self, overfit_run):
        _, _, result, _ = overfit_run
        assert not result.aborted
        final = result.trace[-200:, 1].mean()
        assert final < 0.05, f"final smoothed BCE {final:.4f}"

    def test_smoothed_trace_monotone(self, overfit_run):
        _, _, result, _ = overfit_run
        loss = result.trace[:, 1]
        windows = loss[: len(loss) // 200 * 200].reshape(-1, 200).mean(axis=1)
        drops = np.diff(windows)
        assert np.all(drops < 0.005), f"window means {windows}"

    def test_trained_checkpoint_stays_equivariant(self, overfit_run):
        mcfg, _, result, out = overfit_run
        params = model.params_from_checkpoint(
            mcfg, out / "checkpoint.bin", dtype=np.float64
        )
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.5, 0.5, (40, 3))
        qs = rng.uniform(-0.6, 0.6, (8, 3))
        base = model.occupancy_many(pts, qs, mcfg, params)
        from eqocc.geometry import random_se3

        for _ in range(3):
            g = random_se3(rng, translation_scale=2.0)
            moved = model.occupancy_many(g.apply(pts), g.apply(qs), mcfg, params)
            np.testing.assert_allclose(moved, base, atol=1e-6)

    def test_predicts_inside_and_outside(self, overfit_run):
        mcfg, tcfg, result, _ = overfit_run
        oracle = data_io.sphere(0.4)
        rng = np.random.default_rng(8)
        cloud = oracle.sample_surface(rng, tcfg.input_points)
        cloud = cloud + rng.normal(0.0, tcfg.noise_sigma, cloud.shape)
        inside = model.occupancy(cloud, np.zeros(3), mcfg, result.params)
        outside = model.occupancy(cloud, np.array([0.9, 0.0, 0.0]), mcfg, result.params)
        assert inside > 0.5
        assert outside < 0.2
