"""Voxelwise encoding models: chunked-CV ridge fitting, evaluation, voxel
selection, and cross-backend stability scores."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import NGram, ResponseMatrix, ROIMask
from .errors import (
    EmptyCatalog,
    InsufficientVoxels,
    ShapeMismatch,
    SingularDesign,
)
from .hull import sample_in_hull
from .signal import FeatureExtractor, FeatureMatrix, PhraseDesignCache
from .validation import as_float_matrix, check_positive, check_same_rows

DEFAULT_LAMBDAS = tuple(np.logspace(0, 4, 10))


def _column_correlations(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r per column pair; zero-variance columns get r=0 and a flag."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    sa = np.sqrt((a * a).sum(axis=0))
    sb = np.sqrt((b * b).sum(axis=0))
    bad = (sa <= 0) | (sb <= 0)
    denom = np.where(bad, 1.0, sa * sb)
    r = (a * b).sum(axis=0) / denom
    r[bad] = 0.0
    return np.clip(r, -1.0, 1.0), bad


def _ridge_weights(x: np.ndarray, y: np.ndarray, lambdas: np.ndarray) -> list[np.ndarray]:
    """Ridge solutions for every penalty from one SVD of the design."""
    try:
        u, s, vt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(f"SVD of the design matrix failed: {exc}") from exc
    uty = u.T @ y
    out = []
    for lam in lambdas:
        shrink = s / (s * s + lam)
        out.append(vt.T @ (shrink[:, None] * uty))
    return out


def _chunk_folds(n_rows: int, chunk_len: int, n_folds: int, seed: int) -> list[np.ndarray]:
    """Contiguous chunks dealt round-robin into folds after a seeded shuffle."""
    starts = np.arange(0, n_rows, chunk_len)
    chunks = [np.arange(s, min(s + chunk_len, n_rows)) for s in starts]
    order = np.random.default_rng(seed).permutation(len(chunks))
    k = min(n_folds, len(chunks))
    folds: list[list[np.ndarray]] = [[] for _ in range(k)]
    for i, ci in enumerate(order):
        folds[i % k].append(chunks[ci])
    return [np.sort(np.concatenate(f)) for f in folds]


class RidgeEncoder(BaseEstimator):
    """Per-target ridge regression with chunked cross-validated penalties.

    Rows are split into contiguous chunks so held-out sets are not trivially
    autocorrelated with the training rows; the penalty that maximizes the mean
    held-out-chunk correlation is selected per target, and the model is then
    refit on all rows. Deterministic given ``seed``.
    """

    def __init__(self, lambdas=DEFAULT_LAMBDAS, n_folds: int = 15,
                 chunk_len: int = 40, seed: int = 0):
        self.lambdas = lambdas
        self.n_folds = n_folds
        self.chunk_len = chunk_len
        self.seed = seed

    def fit(self, X, Y):
        X = as_float_matrix(X, "X")
        Y = as_float_matrix(Y, "Y")
        check_same_rows(X, Y)
        lambdas = check_positive(self.lambdas, "lambdas")
        if X.shape[0] < 2:
            raise SingularDesign("need at least 2 rows to fit")
        folds = _chunk_folds(X.shape[0], self.chunk_len, self.n_folds, self.seed)
        n_lam, n_vox = len(lambdas), Y.shape[1]
        fold_r = np.zeros((len(folds), n_lam, n_vox))
        all_rows = np.arange(X.shape[0])
        for fi, val in enumerate(folds):
            train = np.setdiff1d(all_rows, val, assume_unique=True)
            if len(train) == 0 or len(val) == 0:
                continue
            for li, w in enumerate(_ridge_weights(X[train], Y[train], lambdas)):
                r, _ = _column_correlations(X[val] @ w, Y[val])
                fold_r[fi, li] = r
        mean_r = fold_r.mean(axis=0)
        best = np.argmax(mean_r, axis=0)  # first max wins: smallest such lambda
        weights = np.empty((X.shape[1], n_vox))
        chosen = np.unique(best)
        for w, li in zip(_ridge_weights(X, Y, lambdas[chosen]), chosen):
            cols = best == li
            weights[:, cols] = w[:, cols]
        self.weights_ = weights
        self.lambda_per_voxel_ = lambdas[best]
        self.cv_corr_ = mean_r[best, np.arange(n_vox)]
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("RidgeEncoder is not fitted; call fit(X, Y) first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = as_float_matrix(X, "X")
        if X.shape[1] != self.weights_.shape[0]:
            raise ShapeMismatch(
                f"X has {X.shape[1]} features, model expects {self.weights_.shape[0]}"
            )
        return X @ self.weights_

    def score_voxelwise(self, X, Y) -> np.ndarray:
        r, _ = _column_correlations(self.predict(X), as_float_matrix(Y, "Y"))
        return r

    def score(self, X, Y) -> float:
        return float(self.score_voxelwise(X, Y).mean())


@dataclass
class EncodingModel:
    """Fitted per-voxel linear weights plus the provenance needed to reuse them."""

    voxel_ids: tuple
    weights: np.ndarray
    lambda_per_voxel: np.ndarray
    extractor_id: str
    test_r: np.ndarray | None = None
    lag_set: tuple[float, ...] = ()
    tr_s: float = 2.0
    cv_spec: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxel_ids = tuple(self.voxel_ids)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.lambda_per_voxel = np.asarray(self.lambda_per_voxel, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != len(self.voxel_ids):
            raise ShapeMismatch(
                f"weights {self.weights.shape} do not match {len(self.voxel_ids)} voxels"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ShapeMismatch("weights contain non-finite values")
        if np.any(self.lambda_per_voxel <= 0):
            raise ValueError("ridge penalties must be positive")
        if self.test_r is not None:
            self.test_r = np.asarray(self.test_r, dtype=np.float64)
            if self.test_r.shape != (len(self.voxel_ids),):
                raise ShapeMismatch("test_r length does not match voxel count")
            if np.any(np.abs(self.test_r) > 1.0 + 1e-12):
                raise ValueError("test_r must lie in [-1, 1]")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def voxel_index(self, voxel_ids: Sequence) -> np.ndarray:
        index = {v: i for i, v in enumerate(self.voxel_ids)}
        try:
            return np.array([index[v] for v in voxel_ids], dtype=int)
        except KeyError as exc:
            raise KeyError(f"voxel {exc.args[0]!r} not covered by this model") from exc


@dataclass(frozen=True)
class ModelBundle:
    """An encoding model paired with the live extractor that produced its
    features; needed whenever new text must be scored through the model."""

    model: EncodingModel
    extractor: FeatureExtractor

    def design_cache(self, window: int = 3) -> PhraseDesignCache:
        return PhraseDesignCache(
            self.extractor, self.model.lag_set or (0.0,), self.model.tr_s, window=window
        )


def fit_ridge_cv(
    X_train: FeatureMatrix,
    Y_train: ResponseMatrix,
    lambdas=DEFAULT_LAMBDAS,
    cv: dict | None = None,
    seed: int = 0,
) -> EncodingModel:
    """Fit one ridge model per voxel with per-voxel penalty selection."""
    cv = dict(cv or {})
    encoder = RidgeEncoder(
        lambdas=lambdas,
        n_folds=cv.get("n_folds", 15),
        chunk_len=cv.get("chunk_len", 40),
        seed=seed,
    )
    encoder.fit(X_train.values, Y_train.values)
    return EncodingModel(
        voxel_ids=Y_train.voxel_ids,
        weights=encoder.weights_,
        lambda_per_voxel=encoder.lambda_per_voxel_,
        extractor_id=str(X_train.meta.get("extractor_id", "unknown")),
        lag_set=X_train.lag_set,
        tr_s=X_train.grid.tr_s,
        cv_spec={
            "n_folds": encoder.n_folds,
            "chunk_len": encoder.chunk_len,
            "seed": seed,
            "lambdas": [float(l) for l in np.atleast_1d(lambdas)],
        },
        meta={"cv_corr": encoder.cv_corr_.tolist()},
    )


def evaluate_test(
    model: EncodingModel, X_test: FeatureMatrix, Y_test_avg: ResponseMatrix
) -> np.ndarray:
    """Per-voxel Pearson r against the repeat-averaged held-out responses.

    Zero-variance columns score 0 and are listed in model.meta["zero_variance"].
    """
    if tuple(Y_test_avg.voxel_ids) != model.voxel_ids:
        raise ShapeMismatch("test response voxels do not match the model")
    pred = X_test.values @ model.weights
    check_same_rows(pred, Y_test_avg.values, names=("prediction", "Y_test"))
    r, bad = _column_correlations(pred, np.asarray(Y_test_avg.values, dtype=np.float64))
    model.meta["zero_variance"] = [model.voxel_ids[i] for i in np.flatnonzero(bad)]
    return r


def with_test_r(model: EncodingModel, test_r: np.ndarray) -> EncodingModel:
    return replace(model, test_r=np.asarray(test_r, dtype=np.float64))


@dataclass(frozen=True)
class VoxelSelection:
    selected: tuple
    pc_projection: np.ndarray
    r_threshold: float
    meta: dict = field(default_factory=dict)


def select_voxels(
    model: EncodingModel, n: int = 500, r_threshold: float = 0.15, seed: int = 0
) -> VoxelSelection:
    """Pick n well-predicted voxels, diverse in weight space.

    PCA is run on the ridge weights of every voxel above the test-correlation
    threshold; voxels are projected to the first four components and matched,
    without replacement, to points sampled uniformly inside the convex hull of
    that projection.
    """
    if model.test_r is None:
        raise ValueError("model has no test_r; run evaluate_test first")
    above = np.flatnonzero(model.test_r > r_threshold)
    if len(above) < n:
        raise InsufficientVoxels(
            f"only {len(above)} voxels exceed r={r_threshold}, need {n}"
        )
    w = model.weights[:, above].T  # voxels as samples
    centered = w - w.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    n_pc = min(4, vt.shape[0])
    proj = centered @ vt[:n_pc].T
    if n_pc < 4:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 4 - n_pc))])
    samples = sample_in_hull(proj, n, seed=seed)
    tree = cKDTree(proj)
    used: set[int] = set()
    chosen: list[int] = []
    for point in samples:
        k = 8
        while True:
            k = min(k, len(above))
            _, idx = tree.query(point, k=k)
            idx = np.atleast_1d(idx)
            free = [i for i in idx if i not in used]
            if free:
                used.add(free[0])
                chosen.append(free[0])
                break
            if k == len(above):
                raise InsufficientVoxels("ran out of unused voxels while matching")
            k *= 2
    selected = tuple(model.voxel_ids[above[i]] for i in chosen)
    return VoxelSelection(
        selected=selected,
        pc_projection=proj[chosen],
        r_threshold=r_threshold,
        meta={"seed": seed, "n_above_threshold": int(len(above)), "n_pcs": n_pc},
    )


@dataclass(frozen=True)
class StabilityTable:
    """Per-voxel rank agreement between two models' catalog predictions."""

    voxel_ids: tuple
    stability: np.ndarray
    catalog_size: int
    extractor_ids: tuple[str, str]
    method: str = "spearman"

    def for_voxel(self, voxel_id) -> float:
        return float(self.stability[self.voxel_ids.index(voxel_id)])


def predict_catalog(
    bundle: ModelBundle, catalog: Sequence[NGram], voxels: Sequence | None = None
) -> np.ndarray:
    """[n_catalog x n_voxels] predicted responses to isolated n-grams."""
    if len(catalog) == 0:
        raise EmptyCatalog("the n-gram catalog is empty")
    rows = bundle.design_cache().rows([g.tokens for g in catalog])
    weights = bundle.model.weights
    if voxels is not None:
        weights = weights[:, bundle.model.voxel_index(voxels)]
    return rows @ weights


def _corr_by_column(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    r, _ = _column_correlations(a, b)
    return r


def stability_score(
    bundle_a: ModelBundle,
    bundle_b: ModelBundle,
    catalog: Sequence[NGram],
    voxels: Sequence | None = None,
    method: str = "spearman",
) -> StabilityTable:
    """Correlate two backends' predicted responses over the unique-n-gram
    catalog, per voxel. Spearman by default; ``method="pearson"`` for raw."""
    if len(catalog) == 0:
        raise EmptyCatalog("the n-gram catalog is empty")
    if voxels is None:
        voxels = tuple(v for v in bundle_a.model.voxel_ids if v in set(bundle_b.model.voxel_ids))
    voxels = tuple(voxels)
    pred_a = predict_catalog(bundle_a, catalog, voxels)
    pred_b = predict_catalog(bundle_b, catalog, voxels)
    if method == "spearman":
        pred_a = rankdata(pred_a, axis=0)
        pred_b = rankdata(pred_b, axis=0)
    elif method != "pearson":
        raise ValueError(f"unknown stability method {method!r}")
    rho = _corr_by_column(pred_a, pred_b)
    return StabilityTable(
        voxel_ids=voxels,
        stability=rho,
        catalog_size=len(catalog),
        extractor_ids=(bundle_a.model.extractor_id, bundle_b.model.extractor_id),
        method=method,
    )


def roi_stability(
    bundle_a: ModelBundle,
    bundle_b: ModelBundle,
    catalog: Sequence[NGram],
    roi: ROIMask,
    method: str = "spearman",
) -> float:
    """Stability of the ROI-mean prediction over the catalog."""
    members = roi.members_in(bundle_a.model.voxel_ids)
    pred_a = predict_catalog(bundle_a, catalog, members).mean(axis=1, keepdims=True)
    pred_b = predict_catalog(bundle_b, catalog, members).mean(axis=1, keepdims=True)
    if method == "spearman":
        pred_a = rankdata(pred_a, axis=0)
        pred_b = rankdata(pred_b, axis=0)
    return float(_corr_by_column(pred_a, pred_b)[0])
