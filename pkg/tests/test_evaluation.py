import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gct
from gct.core import ResponseMatrix, ROIMask, TRGrid
from gct.errors import (
    DimensionMismatch,
    TimingMismatch,
    TooFewEvents,
    ZeroNormTarget,
)
from gct.evaluation import (
    DrivingVector,
    SurfaceMask,
    alternative_voxel_check,
    apply_fdr,
    bh_fdr,
    candidate_roi_grid,
    checkerboard_reconstruct,
    driving_scores,
    format_p,
    ngram_locked_response,
    paragraph_windows,
    permutation_test,
    selectivity_similarity,
)
from gct.explain import Explanation
from gct.storygen import generate_story


def toy_story(stub, bank, n_paragraphs=4, targets=None, seed=1):
    labels = list(bank)[:n_paragraphs]
    expls = [
        Explanation(
            target=(targets[i] if targets else i),
            text=labels[i],
            explanation_score=1.0,
            top_ngrams=(bank[labels[i]][0],),
        )
        for i in range(n_paragraphs)
    ]
    return generate_story(stub, expls, seed=seed)


def story_grid(story, tr=2.0):
    return TRGrid.covering(story.duration_s, tr_s=tr, trim_head=0, trim_tail=0, pad_s=16.0)


def rm_for(story, values, voxel_ids=None, tr=2.0):
    grid = story_grid(story, tr)
    n = grid.n_volumes
    assert values.shape[0] >= n
    ids = voxel_ids or tuple(range(values.shape[1]))
    return ResponseMatrix(grid=grid, voxel_ids=ids, values=values[:n])


class TestDrivingScores:
    def test_zero_response_gives_zero_scores(self, stub, bank):
        story = toy_story(stub, bank)
        rm = rm_for(story, np.zeros((400, 4)))
        report = driving_scores(rm, story)
        assert np.allclose(report.scores, 0.0)
        assert report.cross.shape == (4, 4)

    def test_constant_shift_invariance(self, stub, bank):
        story = toy_story(stub, bank)
        rng = np.random.default_rng(0)
        values = rng.standard_normal((400, 4))
        base = driving_scores(rm_for(story, values), story).scores
        shifted = driving_scores(rm_for(story, values + 11.5), story).scores
        assert np.allclose(base, shifted, atol=1e-10)

    def test_planted_block_scores_positive(self, stub, bank):
        story = toy_story(stub, bank)
        grid = story_grid(story)
        values = np.zeros((grid.n_volumes, 4))
        windows = paragraph_windows(story, grid, 3)
        for t in range(4):
            values[windows[t], t] = 2.0
        report = driving_scores(rm_for(story, values), story)
        assert np.all(report.scores > 0)

    def test_story_longer_than_run_rejected(self, stub, bank):
        story = toy_story(stub, bank)
        short = ResponseMatrix(
            grid=TRGrid(tr_s=2.0, n_volumes=10, trim_head=0, trim_tail=0),
            voxel_ids=(0, 1, 2, 3),
            values=np.zeros((10, 4)),
        )
        with pytest.raises(TimingMismatch):
            driving_scores(short, story)


class TestPermutation:
    def test_exhaustive_matches_enumeration(self, stub, bank):
        # oracle: enumerate every label assignment by hand
        story = toy_story(stub, bank, n_paragraphs=4)
        rng = np.random.default_rng(1)
        values = rng.standard_normal((400, 4))
        rm = rm_for(story, values)
        report = driving_scores(rm, story)
        pvals = permutation_test(report, exhaustive=True)
        grid = rm.grid
        windows = paragraph_windows(story, grid, 3)
        means = np.stack([rm.values[w].mean(axis=0) for w in windows], axis=1)
        for entry, p in zip(report.entries, pvals):
            row = means[report.targets.index(entry.target)]
            stats = [
                row[q] - (row.sum() - row[q]) / (len(row) - 1) for q in range(len(row))
            ]
            observed = stats[entry.paragraph]
            expected = sum(1 for s in stats if s >= observed - 1e-12) / len(stats)
            assert p == pytest.approx(expected, abs=1e-12)

    def test_worst_observed_gets_p_one(self, stub, bank):
        story = toy_story(stub, bank)
        grid = story_grid(story)
        values = np.zeros((grid.n_volumes, 4))
        windows = paragraph_windows(story, grid, 3)
        # target 0 is SUPPRESSED during its own paragraph
        values[windows[0], 0] = -3.0
        report = driving_scores(rm_for(story, values), story)
        permutation_test(report, exhaustive=True)
        assert report.entries[0].p_value == 1.0

    def test_sampled_mode_formula(self, stub, bank):
        story = toy_story(stub, bank)
        rng = np.random.default_rng(2)
        rm = rm_for(story, rng.standard_normal((400, 4)))
        report = driving_scores(rm, story)
        pvals = permutation_test(report, n_perm=500, seed=3, exhaustive=False)
        assert np.all(pvals >= 1 / 501) and np.all(pvals <= 1.0)
        again = permutation_test(report, n_perm=500, seed=3, exhaustive=False)
        assert np.array_equal(pvals, again)

    def test_pooled_statistic_present(self, stub, bank):
        story = toy_story(stub, bank)
        rm = rm_for(story, np.random.default_rng(4).standard_normal((400, 4)))
        report = driving_scores(rm, story)
        permutation_test(report, n_perm=200, seed=0)
        assert report.pooled_p is not None
        assert report.pooled_stat == pytest.approx(float(report.scores.mean()))


class TestBH:
    def test_all_zero_all_flagged(self):
        assert bh_fdr([0.0, 0.0, 0.0]).all()

    def test_all_one_none_flagged(self):
        assert not bh_fdr([1.0, 1.0, 1.0]).any()

    def test_matches_bruteforce_definition(self):
        # oracle: threshold = largest p_(k) with p_(k) <= k q / m, O(m^2) scan
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = rng.uniform(0, 1, size=20)
            q = 0.05
            ranked = np.sort(p)
            threshold = -1.0
            for k in range(1, 21):
                if ranked[k - 1] <= q * k / 20:
                    threshold = ranked[k - 1]
            expected = p <= threshold if threshold >= 0 else np.zeros(20, dtype=bool)
            assert np.array_equal(bh_fdr(p, q), expected)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 29))
    @settings(max_examples=60, deadline=None)
    def test_lowering_a_pvalue_never_unflags(self, pvals, idx):
        idx = idx % len(pvals)
        before = bh_fdr(pvals)
        lowered = list(pvals)
        lowered[idx] = lowered[idx] / 2.0
        after = bh_fdr(lowered)
        keep = [i for i in range(len(pvals)) if i != idx]
        assert not np.any(before[keep] & ~after[keep])

    def test_bad_pvalues_rejected(self):
        with pytest.raises(ValueError):
            bh_fdr([0.5, 1.5])


class TestROIDriving:
    def test_single_voxel_roi_reduces_to_voxel_scores(self, stub, bank):
        rois = [ROIMask(f"roi{i}", frozenset({i})) for i in range(4)]
        story = toy_story(stub, bank, targets=[r.name for r in rois])
        rng = np.random.default_rng(5)
        values = rng.standard_normal((400, 4))
        roi_report = gct.roi_driving(rm_for(story, values), story, rois)
        voxel_story = toy_story(stub, bank, targets=[0, 1, 2, 3])
        voxel_report = driving_scores(rm_for(voxel_story, values), voxel_story)
        assert np.allclose(roi_report.scores, voxel_report.scores, atol=1e-12)

    def test_per_voxel_breakdown_emitted(self, stub, bank):
        rois = [ROIMask("a", frozenset({0, 1})), ROIMask("b", frozenset({2, 3}))]
        story = toy_story(stub, bank, n_paragraphs=2, targets=["a", "b"])
        values = np.random.default_rng(6).standard_normal((400, 4))
        report = gct.roi_driving(rm_for(story, values), story, rois)
        assert set(report.meta["per_voxel"]) == {"a", "b"}
        assert report.meta["per_voxel"]["a"]["voxel_ids"] == [0, 1]


class TestCandidateROIGrid:
    def flat_mask(self, nx=20, ny=20, pitch=1.0):
        ids = tuple(range(nx * ny))
        coords = np.array([(pitch * (i % nx), pitch * (i // nx)) for i in ids])
        return SurfaceMask(voxel_ids=ids, coords=coords)

    def test_tiny_radius_gives_singletons(self):
        mask = self.flat_mask()
        rois = candidate_roi_grid(mask, radius_mm=0.4, spacing_mm=1.0)
        assert rois.circles
        assert all(len(c.members) == 1 for c in rois.circles)

    def test_spacing_twice_radius_no_overlap_full_cover(self):
        # brute-force geometric check on a flat grid
        mask = self.flat_mask()
        rois = candidate_roi_grid(mask, radius_mm=2.0, spacing_mm=4.0)
        counts = np.zeros(len(mask.voxel_ids))
        for c in rois.circles:
            for v in c.members:
                counts[v] += 1
        assert counts.max() <= 1  # zero overlap
        member_coords = np.vstack(
            [mask.coords[list(c.members)] for c in rois.circles]
        )
        for xy in mask.coords:
            d = np.linalg.norm(member_coords - xy, axis=1).min()
            assert d <= 2.0  # every voxel within one radius of some member

    def test_stability_filter(self):
        mask = self.flat_mask(8, 8)
        rois = candidate_roi_grid(mask, radius_mm=2.0)
        stab = np.linspace(0, 1, len(rois.circles))
        kept = rois.filter_stable(stab, threshold=0.6)
        assert len(kept.circles) == int(np.sum(stab >= 0.6))


class TestSimilarity:
    def test_identical_vectors(self):
        idx = ("a", "b", "c")
        vs = [DrivingVector("r1", np.array([1.0, 2.0, 3.0]), idx),
              DrivingVector("r2", np.array([1.0, 2.0, 3.0]), idx)]
        rng_sampler = lambda rng: (rng.standard_normal(3), rng.standard_normal(3))
        rep = selectivity_similarity(vs, rng_sampler, n_null=200, seed=0)
        assert rep.observed_mean == pytest.approx(1.0)
        assert rep.percentile > 95

    def test_orthogonal_vectors(self):
        idx = ("a", "b")
        vs = [DrivingVector("r1", np.array([1.0, 0.0]), idx),
              DrivingVector("r2", np.array([0.0, 1.0]), idx)]
        rep = selectivity_similarity(
            vs, lambda rng: (rng.standard_normal(2), rng.standard_normal(2)),
            n_null=200, seed=0,
        )
        assert rep.observed_mean == pytest.approx(0.0, abs=1e-12)

    def test_index_mismatch(self):
        vs = [DrivingVector("r1", np.ones(2), ("a", "b")),
              DrivingVector("r2", np.ones(2), ("a", "c"))]
        with pytest.raises(DimensionMismatch):
            selectivity_similarity(vs, lambda rng: (np.ones(2), np.ones(2)), n_null=100)


class TestLockedResponse:
    def mk_rm(self, values, tr=2.0):
        grid = TRGrid(tr_s=tr, n_volumes=len(values), trim_head=0, trim_tail=0)
        return ResponseMatrix(grid=grid, voxel_ids=(0,), values=values[:, None])

    def test_white_noise_rarely_significant(self):
        # 50-seed null calibration: the 6s bin should hit p<0.05 ~5% of runs
        onsets = np.arange(40.0, 600.0, 40.0)
        hits = 0
        for seed in range(50):
            values = np.random.default_rng(seed).standard_normal(400)
            curve = ngram_locked_response(self.mk_rm(values), onsets)
            hits += curve.p_value < 0.05
        assert hits <= 8

    def test_planted_hrf_peak_detected(self):
        from gct.simulator import double_gamma_hrf

        kernel = double_gamma_hrf(2.0)
        values = np.zeros(400)
        onsets = np.arange(40.0, 700.0, 48.0)
        for onset in onsets:
            k = int(onset / 2.0)
            values[k : k + len(kernel)] += kernel
        values += 0.1 * np.random.default_rng(0).standard_normal(400)
        curve = ngram_locked_response(self.mk_rm(values), onsets)
        assert abs(curve.peak_lag_s - 6.0) <= 2.0
        assert curve.p_value < 0.05

    def test_too_few_events(self):
        with pytest.raises(TooFewEvents):
            ngram_locked_response(self.mk_rm(np.zeros(100)), [10.0, 20.0])


class TestCheckerboard:
    def planted(self, amp=4.0, seed=0):
        rng = np.random.default_rng(seed)
        target = np.tile([1.0, -1.0], 8)
        values = rng.standard_normal((120, 16))
        for t in range(10, 110, 10):
            values[t] += amp * target
        return values, target

    def test_planted_pattern_recovered(self):
        values, target = self.planted()
        grid = TRGrid(tr_s=2.0, n_volumes=120, trim_head=0, trim_tail=0)
        rm = ResponseMatrix(grid=grid, voxel_ids=tuple(range(16)), values=values)
        rec = checkerboard_reconstruct(rm, target)
        assert rec.pearson_r > 0.9

    def test_orthogonal_only_responses_near_zero(self):
        rng = np.random.default_rng(3)
        target = np.tile([1.0, -1.0], 8)
        unit = target / np.linalg.norm(target)
        values = rng.standard_normal((200, 16))
        values -= np.outer(values @ unit, unit)  # strictly orthogonal rows
        grid = TRGrid(tr_s=2.0, n_volumes=200, trim_head=0, trim_tail=0)
        rm = ResponseMatrix(grid=grid, voxel_ids=tuple(range(16)), values=values)
        rec = checkerboard_reconstruct(rm, target)
        assert abs(rec.pearson_r) < 0.1

    def test_positive_rescaling_invariance(self):
        values, target = self.planted(seed=5)
        grid = TRGrid(tr_s=2.0, n_volumes=120, trim_head=0, trim_tail=0)
        a = checkerboard_reconstruct(
            ResponseMatrix(grid=grid, voxel_ids=tuple(range(16)), values=values), target
        )
        b = checkerboard_reconstruct(
            ResponseMatrix(grid=grid, voxel_ids=tuple(range(16)), values=3.7 * values), target
        )
        assert a.pearson_r == pytest.approx(b.pearson_r, abs=1e-12)

    def test_zero_norm_target(self):
        grid = TRGrid(tr_s=2.0, n_volumes=60, trim_head=0, trim_tail=0)
        rm = ResponseMatrix(grid=grid, voxel_ids=(0, 1), values=np.ones((60, 2)))
        with pytest.raises(ZeroNormTarget):
            checkerboard_reconstruct(rm, [0.0, 0.0])

    def test_too_few_timepoints(self):
        grid = TRGrid(tr_s=2.0, n_volumes=20, trim_head=0, trim_tail=0)
        rm = ResponseMatrix(grid=grid, voxel_ids=(0, 1), values=np.ones((20, 2)))
        with pytest.raises(ValueError):
            checkerboard_reconstruct(rm, [1.0, -1.0])


class TestAlternativeVoxels:
    def test_identity_assignment_identical(self, stub, bank):
        story = toy_story(stub, bank)
        values = np.random.default_rng(7).standard_normal((400, 4))
        rm = rm_for(story, values)
        paired = alternative_voxel_check(rm, story, {i: i for i in range(4)}, n_perm=200)
        assert np.allclose(paired.primary.scores, paired.alternative.scores, atol=1e-12)
        assert paired.primary_mean == pytest.approx(paired.alternative_mean)

    def test_swapped_alternatives(self, stub, bank):
        story = toy_story(stub, bank)
        values = np.random.default_rng(8).standard_normal((400, 8))
        rm = rm_for(story, values, voxel_ids=tuple(range(8)))
        paired = alternative_voxel_check(rm, story, {i: i + 4 for i in range(4)}, n_perm=200)
        assert tuple(paired.alternative.targets) == (4, 5, 6, 7)


class TestApplyFdr:
    def test_flags_set(self, stub, bank):
        story = toy_story(stub, bank)
        rm = rm_for(story, np.random.default_rng(9).standard_normal((400, 4)))
        report = driving_scores(rm, story)
        permutation_test(report, exhaustive=True)
        apply_fdr(report, q=0.05)
        assert all(e.significant is not None for e in report.entries)


class TestFormatting:
    def test_paper_style_p_values(self):
        assert format_p(0.0199999) == "p=0.020"
        assert format_p(0.009) == "p=0.009"
        assert format_p(3e-6) == "p<10^-5"


def keyword_story(bank, labels, stub, seed=0):
    from gct.explain import Explanation

    expls = [
        Explanation(target=i, text=label, explanation_score=1.0,
                    top_ngrams=(bank[label][0],))
        for i, label in enumerate(labels)
    ]
    return generate_story(stub, expls, seed=seed)


@pytest.mark.slow
class TestSimulatorOracles:
    def test_cross_matrix_diagonal_dominates_over_20_seeds(self, stub, bank):
        # closed-loop simulator oracle: planted voxels must prefer their own
        # driving paragraph in >= 80% of targets, per seed
        from gct.simulator import grid_for_transcript, make_subject, simulate_run
        from gct.signal import trim_and_zscore

        labels = list(bank)[:6]
        good = 0
        for seed in range(20):
            subject, _ = make_subject(6, {c: bank[c] for c in labels},
                                      noise_sd=1.0, seed=seed)
            story = keyword_story(bank, labels, stub, seed=seed)
            transcript = story.to_transcript()
            grid = grid_for_transcript(transcript)
            rm = trim_and_zscore(simulate_run(subject, transcript, grid, run_id="x"))
            report = driving_scores(rm, story)
            hits = sum(
                report.cross[i, i] > np.delete(report.cross[i], i).mean()
                for i in range(6)
            )
            good += hits >= 0.8 * 6
        assert good >= 18

    def test_alternative_voxels_with_same_concept_also_driven(self, stub, bank):
        from gct.simulator import grid_for_transcript, make_subject, simulate_run
        from gct.signal import trim_and_zscore

        labels = list(bank)[:4]
        # voxels 0..3 targets, 4..7 alternates with the same concepts
        subject, _ = make_subject(8, {c: bank[c] for c in labels},
                                  noise_sd=0.5, seed=2)
        story = keyword_story(bank, labels, stub, seed=2)
        transcript = story.to_transcript()
        grid = grid_for_transcript(transcript)
        rm = trim_and_zscore(simulate_run(subject, transcript, grid, run_id="alt"))
        paired = alternative_voxel_check(rm, story, {i: i + 4 for i in range(4)},
                                         n_perm=500)
        assert paired.alternative_mean >= 0.5 * paired.primary_mean
        assert paired.primary_mean > 0
