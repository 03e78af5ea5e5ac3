import numpy as np
import pytest
from scipy.stats import chisquare
from sklearn.exceptions import NotFittedError

import gct
from gct.core import NGram, ResponseMatrix, TRGrid
from gct.encoding import ModelBundle, RidgeEncoder, predict_catalog
from gct.errors import DegenerateHull, EmptyCatalog, InsufficientVoxels, ShapeMismatch
from gct.hull import sample_in_hull
from gct.signal import FeatureMatrix


def mk_xy(n, d, v, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, v))
    return x, y


def mk_fm(x, extractor_id="test"):
    grid = TRGrid(tr_s=2.0, n_volumes=len(x), trim_head=0, trim_tail=0)
    return FeatureMatrix(grid=grid, values=x, meta={"extractor_id": extractor_id})


def mk_rm(y):
    grid = TRGrid(tr_s=2.0, n_volumes=len(y), trim_head=0, trim_tail=0)
    return ResponseMatrix(grid=grid, voxel_ids=tuple(range(y.shape[1])), values=y)


class TestRidgeEncoder:
    def test_noiseless_recovery_with_tiny_penalty(self):
        rng = np.random.default_rng(0)
        x = np.linalg.qr(rng.standard_normal((80, 10)))[0]
        w = rng.standard_normal((10, 3))
        enc = RidgeEncoder(lambdas=[1e-10], n_folds=4, chunk_len=10).fit(x, x @ w)
        assert np.allclose(enc.weights_, w, atol=1e-6)

    def test_refit_matches_normal_equations(self):
        # oracle: dense normal-equations solve at the selected penalty
        for seed in range(5):
            rng = np.random.default_rng(seed)
            n, d, v = rng.integers(30, 200), rng.integers(3, 50), 4
            x, y = mk_xy(int(n), int(d), v, seed)
            lambdas = np.logspace(0, 3, 5)
            enc = RidgeEncoder(lambdas=lambdas, n_folds=5, chunk_len=20, seed=seed).fit(x, y)
            for j in range(v):
                lam = enc.lambda_per_voxel_[j]
                expected = np.linalg.solve(x.T @ x + lam * np.eye(int(d)), x.T @ y[:, j])
                assert np.max(np.abs(enc.weights_[:, j] - expected)) < 1e-8

    def test_weight_norm_nonincreasing_in_lambda(self):
        x, y = mk_xy(60, 8, 2, seed=3)
        norms = []
        for lam in [0.1, 1.0, 10.0, 100.0, 1000.0]:
            enc = RidgeEncoder(lambdas=[lam], n_folds=3, chunk_len=10).fit(x, y)
            norms.append(np.linalg.norm(enc.weights_, axis=0))
        norms = np.array(norms)
        assert np.all(np.diff(norms, axis=0) <= 1e-12)

    def test_voxel_order_invariance(self):
        x, y = mk_xy(100, 12, 5, seed=4)
        perm = np.array([3, 0, 4, 1, 2])
        a = RidgeEncoder(n_folds=4, seed=1).fit(x, y)
        b = RidgeEncoder(n_folds=4, seed=1).fit(x, y[:, perm])
        assert np.allclose(a.weights_[:, perm], b.weights_)
        assert np.array_equal(a.lambda_per_voxel_[perm], b.lambda_per_voxel_)

    def test_determinism_given_seed(self):
        x, y = mk_xy(120, 10, 3, seed=5)
        a = RidgeEncoder(seed=7).fit(x, y)
        b = RidgeEncoder(seed=7).fit(x, y)
        assert np.array_equal(a.weights_, b.weights_)

    def test_sklearn_surface(self):
        enc = RidgeEncoder(n_folds=3)
        params = enc.get_params()
        assert params["n_folds"] == 3
        enc.set_params(n_folds=5)
        with pytest.raises(NotFittedError):
            enc.predict(np.zeros((4, 2)))
        x, y = mk_xy(50, 6, 2, seed=6)
        enc.fit(x, y)
        with pytest.raises(ShapeMismatch):
            enc.predict(np.zeros((4, 7)))
        assert -1.0 <= enc.score(x, y) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            RidgeEncoder().fit(np.zeros((10, 3)), np.zeros((9, 2)))

    def test_lambda_validation(self):
        x, y = mk_xy(20, 3, 1)
        with pytest.raises(ValueError):
            RidgeEncoder(lambdas=[]).fit(x, y)
        with pytest.raises(ValueError):
            RidgeEncoder(lambdas=[-1.0]).fit(x, y)


class TestFitRidgeCV:
    def test_model_provenance(self):
        x, y = mk_xy(90, 8, 3, seed=8)
        model = gct.fit_ridge_cv(mk_fm(x, "hashed-ngram/s0/d8/c3"), mk_rm(y), seed=2)
        assert model.extractor_id == "hashed-ngram/s0/d8/c3"
        assert model.cv_spec["seed"] == 2
        assert model.weights.shape == (8, 3)
        assert np.all(model.lambda_per_voxel > 0)


class TestModelIO:
    def test_model_file_roundtrip(self, tmp_path):
        x, y = mk_xy(80, 7, 3, seed=12)
        model = gct.fit_ridge_cv(mk_fm(x, "hashed-ngram/s1/d7/c3"), mk_rm(y), seed=4)
        model = gct.with_test_r(model, np.array([0.3, -0.1, 0.7]))
        gct.save_model(model, tmp_path / "m.gctf")
        back = gct.load_model(tmp_path / "m.gctf")
        assert back.voxel_ids == model.voxel_ids
        assert np.allclose(back.weights, model.weights, atol=1e-6)
        assert np.allclose(back.lambda_per_voxel, model.lambda_per_voxel)
        assert np.allclose(back.test_r, model.test_r)
        assert back.extractor_id == model.extractor_id
        assert back.cv_spec == model.cv_spec


class TestEvaluate:
    def test_perfect_and_flipped(self):
        x, y = mk_xy(50, 5, 2, seed=9)
        model = gct.fit_ridge_cv(mk_fm(x), mk_rm(y), lambdas=[1e-8])
        pred = x @ model.weights
        r = gct.evaluate_test(model, mk_fm(x), mk_rm(pred))
        assert np.allclose(r, 1.0, atol=1e-9)
        r = gct.evaluate_test(model, mk_fm(x), mk_rm(-pred))
        assert np.allclose(r, -1.0, atol=1e-9)

    def test_zero_variance_flagged(self):
        x, y = mk_xy(50, 5, 2, seed=10)
        model = gct.fit_ridge_cv(mk_fm(x), mk_rm(y))
        flat = np.zeros((50, 2))
        r = gct.evaluate_test(model, mk_fm(x), mk_rm(flat))
        assert np.allclose(r, 0.0)
        assert model.meta["zero_variance"] == [0, 1]


class TestHullSampling:
    def test_degenerate_cloud(self):
        with pytest.raises(DegenerateHull):
            sample_in_hull(np.ones((10, 4)), 5)

    def test_uniform_in_padded_square(self):
        # 2-D square padded to 4-D; quadrant counts should be uniform
        corners = np.array(
            [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]
        )
        points = np.hstack([corners, np.zeros((4, 2))])
        samples = sample_in_hull(points, 10_000, seed=0)
        assert samples.shape == (10_000, 4)
        assert np.allclose(samples[:, 2:], 0.0, atol=1e-9)
        qx = samples[:, 0] > 0.5
        qy = samples[:, 1] > 0.5
        counts = [
            np.sum(qx & qy), np.sum(qx & ~qy), np.sum(~qx & qy), np.sum(~qx & ~qy),
        ]
        assert chisquare(counts).pvalue > 0.01

    def test_1d_segment(self):
        points = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
        samples = sample_in_hull(points, 500, seed=1)
        assert samples[:, 0].min() >= 0.0 and samples[:, 0].max() <= 2.0
        assert np.allclose(samples[:, 1], 0.0, atol=1e-12)


class TestSelectVoxels:
    def mk_model(self, weights, test_r):
        return gct.EncodingModel(
            voxel_ids=tuple(range(weights.shape[1])),
            weights=weights,
            lambda_per_voxel=np.ones(weights.shape[1]),
            extractor_id="t",
            test_r=np.asarray(test_r),
        )

    def test_requires_test_r(self):
        model = gct.EncodingModel(
            voxel_ids=(0,), weights=np.ones((3, 1)), lambda_per_voxel=np.ones(1),
            extractor_id="t",
        )
        with pytest.raises(ValueError):
            gct.select_voxels(model, n=1)

    def test_identical_weights_degenerate(self):
        model = self.mk_model(np.ones((6, 30)), np.full(30, 0.9))
        with pytest.raises(DegenerateHull):
            gct.select_voxels(model, n=5)

    def test_insufficient(self):
        rng = np.random.default_rng(0)
        model = self.mk_model(rng.standard_normal((6, 30)), np.full(30, 0.01))
        with pytest.raises(InsufficientVoxels):
            gct.select_voxels(model, n=5)

    def test_selection_respects_threshold_and_count(self):
        rng = np.random.default_rng(1)
        test_r = rng.uniform(-0.2, 0.9, size=200)
        model = self.mk_model(rng.standard_normal((10, 200)), test_r)
        sel = gct.select_voxels(model, n=40, r_threshold=0.15, seed=0)
        assert len(sel.selected) == 40
        assert len(set(sel.selected)) == 40
        assert all(test_r[v] > 0.15 for v in sel.selected)
        assert sel.pc_projection.shape == (40, 4)


class TestStability:
    def planted_bundle(self, scale=1.0, seed=0, dim=24):
        ex = gct.hashed_ngram_extractor(seed, dim)
        rng = np.random.default_rng(42)
        weights = rng.standard_normal((dim * 4, 3)) * scale
        model = gct.EncodingModel(
            voxel_ids=(0, 1, 2),
            weights=weights,
            lambda_per_voxel=np.ones(3),
            extractor_id=ex.id,
            lag_set=(-8.0, -6.0, -4.0, -2.0),
            tr_s=2.0,
        )
        return ModelBundle(model, ex)

    def catalog(self):
        return tuple(
            NGram.from_text(t) for t in ["dog", "cat", "oven", "rain", "the dog", "hot oven"]
        )

    def test_self_comparison_is_one(self):
        b = self.planted_bundle()
        table = gct.stability_score(b, b, self.catalog())
        assert np.allclose(table.stability, 1.0, atol=1e-12)

    def test_sign_flip_is_minus_one(self):
        b = self.planted_bundle()
        flipped = ModelBundle(
            gct.EncodingModel(
                voxel_ids=b.model.voxel_ids,
                weights=-b.model.weights,
                lambda_per_voxel=b.model.lambda_per_voxel,
                extractor_id=b.model.extractor_id,
                lag_set=b.model.lag_set,
                tr_s=b.model.tr_s,
            ),
            b.extractor,
        )
        table = gct.stability_score(b, flipped, self.catalog())
        assert np.allclose(table.stability, -1.0, atol=1e-12)

    def test_symmetry(self):
        a = self.planted_bundle(seed=0)
        b = self.planted_bundle(seed=1)
        t_ab = gct.stability_score(a, b, self.catalog())
        t_ba = gct.stability_score(b, a, self.catalog())
        assert np.allclose(t_ab.stability, t_ba.stability, atol=1e-12)

    def test_empty_catalog(self):
        b = self.planted_bundle()
        with pytest.raises(EmptyCatalog):
            gct.stability_score(b, b, ())

    def test_screening_threshold(self):
        # the 0.6 screen keeps exactly the units at or above it
        stabilities = [0.55, 0.61, 0.72, 0.59, 0.9]
        kept = [i for i, s in enumerate(stabilities) if s >= 0.6]
        assert kept == [1, 2, 4]

    def test_pearson_flag(self):
        a = self.planted_bundle(seed=0)
        table = gct.stability_score(a, a, self.catalog(), method="pearson")
        assert table.method == "pearson"
        assert np.allclose(table.stability, 1.0, atol=1e-12)

    def test_predict_catalog_shape(self):
        b = self.planted_bundle()
        pred = predict_catalog(b, self.catalog())
        assert pred.shape == (6, 3)
