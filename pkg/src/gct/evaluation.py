"""Post-experiment statistics: driving scores, permutation tests, FDR control,
ROI analyses, similarity vectors, time-locked curves, and pattern
reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.stats

from .core import ResponseMatrix, ROIMask, TRGrid
from .errors import (
    DimensionMismatch,
    EmptyROI,
    TimingMismatch,
    TooFewEvents,
    ZeroNormTarget,
)
from .storygen import Story
from .validation import derive_seed

DEFAULT_HRF_LAG_TRS = 3


def paragraph_windows(story: Story, grid: TRGrid, hrf_lag_trs: int = DEFAULT_HRF_LAG_TRS) -> list[np.ndarray]:
    """TR row indices covered by each paragraph, shifted by the HRF lag."""
    lag = hrf_lag_trs * grid.tr_s
    times = grid.times()
    windows = []
    for start, end in story.paragraph_spans():
        lo = start + lag
        hi = end + lag
        if lo < times[0] - 1e-9 or hi > times[-1] + 1e-9:
            raise TimingMismatch(
                f"paragraph window [{lo:.1f}, {hi:.1f}]s is not inside the grid "
                f"span [{times[0]:.1f}, {times[-1]:.1f}]s"
            )
        rows = np.flatnonzero((times >= lo - 1e-9) & (times <= hi + 1e-9))
        if rows.size == 0:
            raise TimingMismatch(
                f"paragraph window [{lo:.1f}, {hi:.1f}]s contains no TR"
            )
        windows.append(rows)
    return windows


@dataclass
class DrivingEntry:
    target: object
    paragraph: int
    score: float
    p_value: float | None = None
    significant: bool | None = None


@dataclass
class DrivingReport:
    """Driving scores for one experiment plus the full cross matrix."""

    entries: list[DrivingEntry]
    cross: np.ndarray  # [n_targets x n_paragraphs] paragraph-window means
    targets: tuple
    n_paragraphs: int
    pooled_stat: float | None = None
    pooled_p: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries])

    @property
    def p_values(self) -> np.ndarray:
        return np.array([np.nan if e.p_value is None else e.p_value for e in self.entries])


def _assignment_score(cross: np.ndarray, row: int, col: int) -> float:
    others = (cross[row].sum() - cross[row, col]) / (cross.shape[1] - 1)
    return float(cross[row, col] - others)


def _target_timecourses(responses: ResponseMatrix, targets: Sequence) -> np.ndarray:
    cols = []
    for t in targets:
        if isinstance(t, ROIMask):
            members = t.members_in(responses.voxel_ids)
            if not members:
                raise EmptyROI(f"ROI {t.name!r} has no voxels in the response matrix")
            cols.append(responses.columns(members).mean(axis=1))
        else:
            cols.append(responses.column(t))
    return np.stack(cols, axis=1)


def driving_scores(
    responses: ResponseMatrix,
    story: Story,
    targets: Sequence | None = None,
    hrf_lag_trs: int = DEFAULT_HRF_LAG_TRS,
) -> DrivingReport:
    """Driving score per (target, driving paragraph): the mean response during
    that paragraph's window minus the mean of the other paragraphs' window
    means. Responses must already be preprocessed (z-scored), so scores are in
    sigma units.
    """
    if targets is None:
        targets = story.targets
    targets = tuple(targets)
    windows = paragraph_windows(story, responses.grid, hrf_lag_trs)
    if len(windows) < 2:
        raise TimingMismatch("need at least 2 paragraphs to define a baseline")
    series = _target_timecourses(responses, targets)
    cross = np.stack([series[rows].mean(axis=0) for rows in windows], axis=1)
    names = tuple(t.name if isinstance(t, ROIMask) else t for t in targets)
    row_of = {name: i for i, name in enumerate(names)}
    entries = []
    for qi, para in enumerate(story.paragraphs):
        for t in para.targets:
            if t in row_of:
                entries.append(
                    DrivingEntry(target=t, paragraph=qi, score=_assignment_score(cross, row_of[t], qi))
                )
    return DrivingReport(
        entries=entries,
        cross=cross,
        targets=names,
        n_paragraphs=len(windows),
        meta={"hrf_lag_trs": hrf_lag_trs, "story_id": story.story_id},
    )


def permutation_test(
    report: DrivingReport,
    n_perm: int = 10000,
    seed: int = 0,
    exhaustive: bool | None = None,
) -> np.ndarray:
    """Per-target permutation p-values, filled into the report.

    The null reassigns the driving-paragraph label to a random paragraph and
    recomputes the same score. With ``exhaustive`` (default for <= 8
    paragraphs) all P assignments are enumerated and
    p = #{assignments with score >= observed} / P; sampled mode uses
    p = (1 + #{draws >= observed}) / (1 + n_perm). A pooled subject-level test
    of the mean score across entries is also computed.
    """
    cross = report.cross
    n_par = report.n_paragraphs
    if exhaustive is None:
        exhaustive = n_par <= 8
    row_of = {t: i for i, t in enumerate(report.targets)}
    all_scores = np.empty((len(report.entries), n_par))
    observed = np.empty(len(report.entries))
    for i, entry in enumerate(report.entries):
        row = row_of[entry.target]
        all_scores[i] = [_assignment_score(cross, row, q) for q in range(n_par)]
        observed[i] = entry.score
    pvals = np.empty(len(report.entries))
    if exhaustive:
        for i in range(len(report.entries)):
            pvals[i] = np.count_nonzero(all_scores[i] >= observed[i] - 1e-12) / n_par
    else:
        for i, entry in enumerate(report.entries):
            rng = np.random.default_rng(derive_seed(seed, f"perm:{entry.target}:{entry.paragraph}"))
            draws = all_scores[i][rng.integers(0, n_par, size=n_perm)]
            pvals[i] = (1 + np.count_nonzero(draws >= observed[i] - 1e-12)) / (1 + n_perm)
    for entry, p in zip(report.entries, pvals):
        entry.p_value = float(p)
    # pooled test: mean score under independent random labels per entry
    rng = np.random.default_rng(derive_seed(seed, "perm:pooled"))
    labels = rng.integers(0, n_par, size=(n_perm, len(report.entries)))
    null_pooled = all_scores[np.arange(len(report.entries))[None, :], labels].mean(axis=1)
    pooled_obs = float(observed.mean())
    report.pooled_stat = pooled_obs
    report.pooled_p = float(
        (1 + np.count_nonzero(null_pooled >= pooled_obs - 1e-12)) / (1 + n_perm)
    )
    report.meta.update({"n_perm": n_perm, "seed": seed, "exhaustive": bool(exhaustive)})
    return pvals


def bh_fdr(pvals: Sequence[float], q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up: flag the largest k with p_(k) <= k*q/m."""
    p = np.asarray(list(pvals), dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    thresholds = q * np.arange(1, m + 1) / m
    passing = np.flatnonzero(ranked <= thresholds)
    flags = np.zeros(m, dtype=bool)
    if passing.size:
        flags[order[: passing[-1] + 1]] = True
    return flags


def apply_fdr(report: DrivingReport, q: float = 0.05) -> None:
    flags = bh_fdr(report.p_values, q)
    for entry, flag in zip(report.entries, flags):
        entry.significant = bool(flag)
    report.meta["fdr_q"] = q


def roi_driving(
    responses: ResponseMatrix,
    story: Story,
    rois: Sequence[ROIMask],
    hrf_lag_trs: int = DEFAULT_HRF_LAG_TRS,
) -> DrivingReport:
    """Driving scores on ROI-mean timecourses; per-voxel scores for each ROI's
    own paragraph are attached in meta["per_voxel"] for composite maps."""
    report = driving_scores(responses, story, targets=rois, hrf_lag_trs=hrf_lag_trs)
    windows = paragraph_windows(story, responses.grid, hrf_lag_trs)
    per_voxel: dict = {}
    roi_by_name = {r.name: r for r in rois}
    for entry in report.entries:
        roi = roi_by_name[entry.target]
        members = roi.members_in(responses.voxel_ids)
        series = responses.columns(members)
        means = np.stack([series[rows].mean(axis=0) for rows in windows], axis=1)
        qi = entry.paragraph
        baseline = (means.sum(axis=1) - means[:, qi]) / (means.shape[1] - 1)
        per_voxel[entry.target] = {
            "voxel_ids": list(members),
            "scores": (means[:, qi] - baseline).tolist(),
        }
    report.meta["per_voxel"] = per_voxel
    return report


@dataclass(frozen=True)
class SurfaceMask:
    """Voxels with 2-D flat-coordinates (mm), the footprint for ROI grids."""

    voxel_ids: tuple
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape != (len(self.voxel_ids), 2):
            raise ValueError("coords must be [n_voxels x 2]")


@dataclass(frozen=True)
class CandidateROI:
    center_voxel: object
    center_xy: tuple[float, float]
    members: tuple


@dataclass(frozen=True)
class CandidateROISet:
    circles: tuple[CandidateROI, ...]
    radius_mm: float
    spacing_mm: float

    def masks(self) -> list[ROIMask]:
        return [
            ROIMask(name=f"circle-{i:04d}", voxel_ids=frozenset(c.members), kind="candidate_micro")
            for i, c in enumerate(self.circles)
        ]

    def filter_stable(self, stabilities: Sequence[float], threshold: float = 0.6) -> "CandidateROISet":
        if len(stabilities) != len(self.circles):
            raise ValueError("one stability value per circle required")
        kept = tuple(c for c, s in zip(self.circles, stabilities) if s >= threshold)
        return CandidateROISet(circles=kept, radius_mm=self.radius_mm, spacing_mm=self.spacing_mm)


def candidate_roi_grid(
    cortex_mask: SurfaceMask, radius_mm: float = 4.0, spacing_mm: float | None = None
) -> CandidateROISet:
    """Hexagonal grid of circular candidate ROIs over the masked surface.

    Centers with no member voxel are dropped; each kept circle records the
    voxel nearest its geometric center.
    """
    from scipy.spatial import cKDTree

    if len(cortex_mask.voxel_ids) == 0:
        raise ValueError("cortex mask is empty")
    if spacing_mm is None:
        spacing_mm = 2.0 * radius_mm
    coords = cortex_mask.coords
    tree = cKDTree(coords)
    x_lo, y_lo = coords.min(axis=0) - radius_mm
    x_hi, y_hi = coords.max(axis=0) + radius_mm
    dy = spacing_mm * np.sqrt(3.0) / 2.0
    circles = []
    row = 0
    y = y_lo
    while y <= y_hi + 1e-9:
        x = x_lo + (spacing_mm / 2.0 if row % 2 else 0.0)
        while x <= x_hi + 1e-9:
            members = tree.query_ball_point([x, y], r=radius_mm)
            if members:
                dists = np.linalg.norm(coords[members] - [x, y], axis=1)
                center = cortex_mask.voxel_ids[members[int(np.argmin(dists))]]
                circles.append(
                    CandidateROI(
                        center_voxel=center,
                        center_xy=(float(x), float(y)),
                        members=tuple(cortex_mask.voxel_ids[i] for i in sorted(members)),
                    )
                )
            x += spacing_mm
        y += dy
        row += 1
    return CandidateROISet(circles=tuple(circles), radius_mm=radius_mm, spacing_mm=spacing_mm)


@dataclass(frozen=True)
class DrivingVector:
    """One ROI's driving scores across a shared list of explanations."""

    roi: str
    scores: np.ndarray
    explanation_index: tuple[str, ...]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.shape != (len(self.explanation_index),):
            raise DimensionMismatch("scores length must match the explanation index")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass(frozen=True)
class SimilarityReport:
    observed_mean: float
    observed_pairs: np.ndarray
    null_cosines: np.ndarray
    percentile: float
    t_stat: float
    p_value: float


def selectivity_similarity(
    vectors: Sequence[DrivingVector],
    null_sampler: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    n_null: int = 1000,
    seed: int = 0,
) -> SimilarityReport:
    """Mean pairwise cosine among the given ROI driving vectors, located within
    a null of randomly sampled ROI pairs (one-tailed Welch t-test)."""
    if len(vectors) < 2:
        raise ValueError("need at least two driving vectors")
    if n_null < 100:
        raise ValueError("n_null must be >= 100")
    index = vectors[0].explanation_index
    for v in vectors[1:]:
        if v.explanation_index != index:
            raise DimensionMismatch(
                f"vector {v.roi!r} has a different explanation index"
            )
    pairs = []
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            pairs.append(_cosine(vectors[i].scores, vectors[j].scores))
    observed = np.asarray(pairs)
    rng = np.random.default_rng(seed)
    null = np.array([_cosine(*null_sampler(rng)) for _ in range(n_null)])
    obs_mean = float(observed.mean())
    percentile = float(100.0 * np.mean(null < obs_mean))
    t_stat, p_value = scipy.stats.ttest_ind(
        observed, null, equal_var=False, alternative="greater"
    )
    return SimilarityReport(
        observed_mean=obs_mean,
        observed_pairs=observed,
        null_cosines=null,
        percentile=percentile,
        t_stat=float(t_stat),
        p_value=float(p_value),
    )


@dataclass(frozen=True)
class LockedCurve:
    lags_s: np.ndarray
    curve: np.ndarray
    peak_lag_s: float
    t_stat: float
    p_value: float
    n_events: int


def ngram_locked_response(
    responses: ResponseMatrix,
    onsets_s: Sequence[float],
    targets: Sequence | None = None,
    window_trs: int = 8,
    test_lag_s: float = 6.0,
) -> LockedCurve:
    """Average response around key-n-gram onsets, with a one-sided t-test of
    the bin nearest ``test_lag_s`` against zero."""
    if len(onsets_s) < 5:
        raise TooFewEvents(f"need >= 5 events, got {len(onsets_s)}")
    grid = responses.grid
    series = (
        responses.values.mean(axis=1)
        if targets is None
        else _target_timecourses(responses, targets).mean(axis=1)
    )
    snippets = []
    for onset in onsets_s:
        center = int(round((onset - grid.t0_s) / grid.tr_s))
        if center - window_trs < 0 or center + window_trs >= grid.n_volumes:
            continue
        snippets.append(series[center - window_trs : center + window_trs + 1])
    if len(snippets) < 5:
        raise TooFewEvents(f"only {len(snippets)} events fit inside the run")
    snippets = np.asarray(snippets)
    lags = np.arange(-window_trs, window_trs + 1) * grid.tr_s
    curve = snippets.mean(axis=0)
    test_bin = int(np.argmin(np.abs(lags - test_lag_s)))
    t_stat, p_value = scipy.stats.ttest_1samp(
        snippets[:, test_bin], 0.0, alternative="greater"
    )
    # peak restricted to positive lags: the response follows the stimulus
    positive = lags > 0
    peak_lag = float(lags[positive][np.argmax(curve[positive])])
    return LockedCurve(
        lags_s=lags,
        curve=curve,
        peak_lag_s=peak_lag,
        t_stat=float(t_stat),
        p_value=float(p_value),
        n_events=len(snippets),
    )


@dataclass(frozen=True)
class Reconstruction:
    pattern: np.ndarray
    pearson_r: float
    n_timepoints: int


def checkerboard_reconstruct(
    responses: ResponseMatrix, target_pattern: Sequence[float]
) -> Reconstruction:
    """Reconstruct a target pattern over a voxel patch as the cosine-weighted
    sum of response timepoints, and report its Pearson r to the target."""
    target = np.asarray(target_pattern, dtype=np.float64)
    norm = np.linalg.norm(target)
    if norm == 0:
        raise ZeroNormTarget("target pattern has zero norm")
    values = np.asarray(responses.values, dtype=np.float64)
    if values.shape[1] != target.size:
        raise DimensionMismatch(
            f"pattern has {target.size} voxels, responses have {values.shape[1]}"
        )
    if values.shape[0] < 50:
        raise ValueError(f"need >= 50 TRs, got {values.shape[0]}")
    row_norms = np.linalg.norm(values, axis=1)
    safe = np.where(row_norms == 0, 1.0, row_norms)
    cosines = (values @ target) / (safe * norm)
    cosines[row_norms == 0] = 0.0
    recon = cosines @ values
    recon_norm = np.linalg.norm(recon)
    if recon_norm > 0:
        recon = recon / recon_norm
    if np.std(recon) == 0 or np.std(target) == 0:
        r = 0.0
    else:
        r = float(np.corrcoef(recon, target)[0, 1])
    return Reconstruction(pattern=recon, pearson_r=r, n_timepoints=values.shape[0])


@dataclass(frozen=True)
class PairedDrivingReport:
    primary: DrivingReport
    alternative: DrivingReport
    primary_mean: float
    alternative_mean: float


def alternative_voxel_check(
    responses: ResponseMatrix,
    story: Story,
    alt_assignments: dict,
    hrf_lag_trs: int = DEFAULT_HRF_LAG_TRS,
    n_perm: int = 10000,
    seed: int = 0,
) -> PairedDrivingReport:
    """Score the targeted voxels and alternative voxels that share their
    explanations, with permutation tests for both groups."""
    primary = driving_scores(responses, story, hrf_lag_trs=hrf_lag_trs)
    permutation_test(primary, n_perm=n_perm, seed=seed)
    alt_targets = []
    for para in story.paragraphs:
        for t in para.targets:
            alt = alt_assignments.get(t, t)
            if alt not in alt_targets:
                alt_targets.append(alt)
    windows = paragraph_windows(story, responses.grid, hrf_lag_trs)
    series = _target_timecourses(responses, alt_targets)
    cross = np.stack([series[rows].mean(axis=0) for rows in windows], axis=1)
    row_of = {t: i for i, t in enumerate(alt_targets)}
    entries = []
    for qi, para in enumerate(story.paragraphs):
        for t in para.targets:
            alt = alt_assignments.get(t, t)
            entries.append(
                DrivingEntry(target=alt, paragraph=qi, score=_assignment_score(cross, row_of[alt], qi))
            )
    alternative = DrivingReport(
        entries=entries,
        cross=cross,
        targets=tuple(alt_targets),
        n_paragraphs=len(windows),
        meta={"hrf_lag_trs": hrf_lag_trs, "alternative_of": {str(k): v for k, v in alt_assignments.items()}},
    )
    permutation_test(alternative, n_perm=n_perm, seed=seed)
    return PairedDrivingReport(
        primary=primary,
        alternative=alternative,
        primary_mean=float(primary.scores.mean()),
        alternative_mean=float(alternative.scores.mean()),
    )


def format_p(p: float) -> str:
    """Report formatting: p<10^-k below 1e-5, three decimals otherwise."""
    if p < 1e-5:
        return "p<10^-5"
    return f"p={p:.3f}"
