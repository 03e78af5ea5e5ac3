"""Shared fixtures helpers: fit desk-scale encoding models on a simulated
subject so explanation/story/driving tests have something real to chew on."""

from __future__ import annotations

import numpy as np

import gct
from gct.core import ResponseMatrix, TRGrid
from gct.encoding import ModelBundle
from gct.signal import FeatureMatrix
from gct.simulator import grid_for_transcript, simulate_run

FIR = (-8.0, -6.0, -4.0, -2.0)


def design_rows(extractor, transcript, window: int = 3) -> np.ndarray:
    grid = grid_for_transcript(transcript)
    fm = gct.lanczos_resample(gct.embed_words(extractor, transcript), grid, window=window)
    return gct.trim_rows(gct.fir_expand(fm, FIR)).values


def preprocessed(subject, transcript, run_id: str = "") -> ResponseMatrix:
    grid = grid_for_transcript(transcript)
    return gct.trim_and_zscore(simulate_run(subject, transcript, grid, run_id=run_id))


def fit_bundles(
    subject,
    train,
    test,
    dim: int = 64,
    seeds=(101, 202),
    n_folds: int = 8,
    lambdas=None,
) -> tuple[ModelBundle, ModelBundle, tuple]:
    """Fit primary/secondary hashed-feature models and return them with the
    training catalog."""
    if lambdas is None:
        lambdas = np.logspace(0, 4, 6)
    y_train = np.vstack([preprocessed(subject, t).values for t in train])
    bundles = []
    for seed in seeds:
        extractor = gct.hashed_ngram_extractor(seed, dim)
        x_train = np.vstack([design_rows(extractor, t) for t in train])
        grid = TRGrid(tr_s=2.0, n_volumes=len(x_train), trim_head=0, trim_tail=0)
        fm = FeatureMatrix(grid=grid, values=x_train, lag_set=FIR, base_dim=dim,
                           meta={"extractor_id": extractor.id})
        rm = ResponseMatrix(grid=grid, voxel_ids=subject.voxel_ids, values=y_train)
        model = gct.fit_ridge_cv(fm, rm, lambdas=lambdas, cv={"n_folds": n_folds}, seed=0)
        x_test = np.vstack([design_rows(extractor, t) for t in test])
        y_test = np.vstack(
            [np.mean([preprocessed(subject, t, run_id=f"rep{r}").values for r in range(2)], axis=0)
             for t in test]
        )
        tgrid = TRGrid(tr_s=2.0, n_volumes=len(x_test), trim_head=0, trim_tail=0)
        r = gct.evaluate_test(
            model,
            FeatureMatrix(grid=tgrid, values=x_test, lag_set=FIR, base_dim=dim,
                          meta={"extractor_id": extractor.id}),
            ResponseMatrix(grid=tgrid, voxel_ids=subject.voxel_ids, values=y_test),
        )
        bundles.append(ModelBundle(gct.with_test_r(model, r), extractor))
    catalog = gct.merge_catalogs([gct.extract_ngrams(t) for t in train])
    return bundles[0], bundles[1], catalog
