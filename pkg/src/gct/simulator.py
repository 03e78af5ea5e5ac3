"""Synthetic subjects with hidden concept selectivity.

A subject turns a transcript into BOLD-like responses: each voxel's word-level
signal is its selectivity-weighted, rectified cosine match between word
embeddings and concept keyword centroids, resampled to the TR grid, convolved
with a double-gamma HRF, plus seeded Gaussian noise. Everything is a pure
function of (subject, transcript, run id), so runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ResponseMatrix, Transcript, TRGrid, Word
from .errors import TimingMismatch
from .lexicon import FILLER_WORDS, ConceptBank, default_concept_bank
from .signal import HashedNgramExtractor, WordFeatureSeq, lanczos_resample
from .validation import derive_seed

EMBED_SEED = 911  # internal hash-embedding stream, independent of pipeline extractors
MATCH_THRESHOLD = 0.5  # sub-threshold word/keyword cosines count as no match


@dataclass(frozen=True)
class HRFParams:
    peak_s: float = 6.0
    undershoot_s: float = 16.0
    ratio: float = 0.35
    duration_s: float = 32.0

    def __post_init__(self):
        if not 4.0 < self.peak_s < 8.0:
            raise ValueError("HRF peak must lie in (4s, 8s)")


def double_gamma_hrf(tr_s: float, params: HRFParams = HRFParams()) -> np.ndarray:
    """Canonical double-gamma kernel sampled at the TR, peak normalized to 1."""
    t = np.arange(0.0, params.duration_s + 1e-9, tr_s)
    b1 = b2 = 0.9
    a1 = params.peak_s / b1
    a2 = params.undershoot_s / b2
    with np.errstate(divide="ignore", invalid="ignore"):
        rise = (t / params.peak_s) ** a1 * np.exp((params.peak_s - t) / b1)
        dip = (t / params.undershoot_s) ** a2 * np.exp((params.undershoot_s - t) / b2)
    kernel = np.nan_to_num(rise - params.ratio * dip)
    peak = kernel.max()
    return kernel / peak if peak > 0 else kernel


@dataclass
class GroundTruthLedger:
    """Write-once record of what each voxel is really selective for."""

    concepts: tuple[tuple[str, ...], ...]
    snr: dict = field(default_factory=dict)

    def record_snr(self, run_id: str, value: float) -> None:
        if run_id in self.snr:
            raise ValueError(f"SNR for run {run_id!r} was already recorded")
        self.snr[run_id] = float(value)


@dataclass(frozen=True)
class SyntheticSubject:
    voxel_ids: tuple
    selectivity: np.ndarray  # [n_voxels x n_concepts], hidden from the pipeline
    concept_bank: ConceptBank
    hrf: HRFParams
    noise_sd: np.ndarray  # per voxel
    seed: int
    coords: np.ndarray | None = None

    def __post_init__(self):
        sel = np.asarray(self.selectivity, dtype=np.float64)
        object.__setattr__(self, "selectivity", sel)
        object.__setattr__(
            self, "noise_sd", np.broadcast_to(np.asarray(self.noise_sd, dtype=np.float64),
                                              (len(self.voxel_ids),)).copy()
        )
        if not np.all(np.isfinite(sel)):
            raise ValueError("selectivity must be finite")
        if np.any(self.noise_sd < 0):
            raise ValueError("noise_sd must be nonnegative")
        if sel.shape != (len(self.voxel_ids), len(self.concept_bank)):
            raise ValueError("selectivity must be [n_voxels x n_concepts]")

    @property
    def concepts(self) -> tuple[str, ...]:
        return tuple(self.concept_bank)


def make_subject(
    n_voxels: int,
    concept_bank: ConceptBank | None = None,
    polysemantic_fraction: float = 0.0,
    noise_sd: float | Sequence[float] = 1.0,
    seed: int = 0,
) -> tuple[SyntheticSubject, GroundTruthLedger]:
    """Assign each voxel one concept (two for a seeded fraction) with a gain
    drawn near 1. Voxels get synthetic flat-surface coordinates so ROI-grid
    analyses can run against them."""
    bank = dict(concept_bank or default_concept_bank())
    if not bank:
        raise ValueError("concept bank is empty")
    labels = list(bank)
    rng = np.random.default_rng(derive_seed(seed, "subject"))
    selectivity = np.zeros((n_voxels, len(labels)))
    concepts = []
    for v in range(n_voxels):
        first = v % len(labels)
        gain = 0.8 + 0.4 * rng.random()
        selectivity[v, first] = gain
        assigned = [labels[first]]
        if rng.random() < polysemantic_fraction and len(labels) > 1:
            second = int(rng.integers(len(labels) - 1))
            if second >= first:
                second += 1
            selectivity[v, second] = 0.8 + 0.4 * rng.random()
            assigned.append(labels[second])
        concepts.append(tuple(assigned))
    side = int(np.ceil(np.sqrt(n_voxels)))
    coords = np.array([(3.0 * (v % side), 3.0 * (v // side)) for v in range(n_voxels)])
    subject = SyntheticSubject(
        voxel_ids=tuple(range(n_voxels)),
        selectivity=selectivity,
        concept_bank=bank,
        hrf=HRFParams(),
        noise_sd=np.asarray(noise_sd, dtype=np.float64) * np.ones(n_voxels),
        seed=seed,
        coords=coords,
    )
    return subject, GroundTruthLedger(concepts=tuple(concepts))


def _concept_match_rows(subject: SyntheticSubject, transcript: Transcript) -> np.ndarray:
    """[n_words x n_concepts] rectified cosine match of each word against each
    concept's keyword embeddings (best keyword wins), under the internal hash
    embedding. Cosines below MATCH_THRESHOLD rectify to zero so that a voxel
    whose concept never occurs stays exactly flat."""
    extractor = HashedNgramExtractor(seed=EMBED_SEED, dim=64, context=1)
    word_vecs = extractor.embed(transcript)
    match = np.empty((len(word_vecs), len(subject.concepts)))
    for ci, label in enumerate(subject.concepts):
        kws = subject.concept_bank[label]
        kw_transcript = Transcript(
            story_id="bank", words=tuple(Word(k, i * 1.0, i * 1.0 + 0.5) for i, k in enumerate(kws))
        )
        kw_vecs = extractor.embed(kw_transcript)
        best = (word_vecs @ kw_vecs.T).max(axis=1)
        match[:, ci] = np.maximum(0.0, (best - MATCH_THRESHOLD) / (1.0 - MATCH_THRESHOLD))
    return match


def simulate_run(
    subject: SyntheticSubject,
    transcript: Transcript,
    grid: TRGrid,
    run_id: str = "",
    ledger: GroundTruthLedger | None = None,
) -> ResponseMatrix:
    """Generate one run's responses on the full (untrimmed) grid.

    Columns that are constant before z-scoring (absent concept, zero noise)
    are zeroed and flagged in meta["constant_voxels"].
    """
    if transcript.n_words == 0:
        raise TimingMismatch("transcript has no words")
    span_end = grid.t0_s + (grid.n_volumes - 1) * grid.tr_s
    if transcript.words[-1].offset_s > span_end + grid.tr_s:
        raise TimingMismatch(
            f"transcript runs to {transcript.words[-1].offset_s:.1f}s but the grid "
            f"ends at {span_end:.1f}s"
        )
    match = _concept_match_rows(subject, transcript)  # [W x C]
    word_signal = match @ subject.selectivity.T  # [W x V]
    seq = WordFeatureSeq(transcript=transcript, rows=word_signal, extractor_id="simulator")
    tr_signal = lanczos_resample(seq, grid).values
    kernel = double_gamma_hrf(grid.tr_s, subject.hrf)
    clean = np.empty_like(tr_signal)
    for v in range(tr_signal.shape[1]):
        clean[:, v] = np.convolve(tr_signal[:, v], kernel)[: grid.n_volumes]
    digest = hashlib.blake2b(
        f"{subject.seed}:{transcript.story_id}:{run_id}".encode(), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    noise = rng.standard_normal(clean.shape) * subject.noise_sd[None, :]
    raw = clean + noise
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    sd_safe = np.where(constant, 1.0, sd)
    values = (raw - mean) / sd_safe
    values[:, constant] = 0.0
    flagged = [subject.voxel_ids[i] for i in np.flatnonzero(constant)]
    if ledger is not None:
        clean_sd = float(np.mean(clean.std(axis=0)))
        noise_mean = float(np.mean(subject.noise_sd))
        key = f"{transcript.story_id}:{run_id}" if run_id else transcript.story_id
        ledger.record_snr(key, clean_sd / noise_mean if noise_mean > 0 else float("inf"))
    return ResponseMatrix(
        grid=grid,
        voxel_ids=subject.voxel_ids,
        values=values,
        meta={"constant_voxels": flagged, "story_id": transcript.story_id, "run_id": run_id},
    )


def make_corpus(
    concept_bank: ConceptBank | None = None,
    n_stories: int = 16,
    words_per_story: int = 560,
    word_spacing_s: float = 0.4,
    keyword_prob: float = 0.5,
    seed: int = 0,
) -> list[Transcript]:
    """Deterministic synthetic training stories.

    Stories are topical: each 15..35-word segment leans on one concept, mixing
    that concept's keywords with filler words. The block structure puts concept
    signal at timescales that survive hemodynamic smoothing, like narrative
    stimuli do.
    """
    bank = dict(concept_bank or default_concept_bank())
    labels = list(bank)
    stories = []
    for s in range(n_stories):
        rng = np.random.default_rng(derive_seed(seed, f"corpus:{s}"))
        words = []
        t = 0.0
        while len(words) < words_per_story:
            concept = labels[int(rng.integers(len(labels)))]
            kws = bank[concept]
            block = int(rng.integers(15, 36))
            for _ in range(min(block, words_per_story - len(words))):
                if rng.random() < keyword_prob:
                    token = kws[int(rng.integers(len(kws)))]
                else:
                    token = FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))]
                words.append(Word(token, t, t + word_spacing_s * 0.9))
                t += word_spacing_s
        stories.append(Transcript(story_id=f"sim-{s:03d}", words=tuple(words)))
    return stories


def grid_for_transcript(
    transcript: Transcript, tr_s: float = 2.0, trim_head: int = 10, trim_tail: int = 10
) -> TRGrid:
    """Grid that covers the transcript plus room for the HRF tail and trims."""
    pad = trim_tail * tr_s + 14.0
    return TRGrid.covering(transcript.duration_s, tr_s=tr_s,
                           trim_head=trim_head, trim_tail=trim_tail, pad_s=pad)


def add_drift(rm: ResponseMatrix, amplitude: float = 2.0, period_s: float = 300.0,
              seed: int = 0) -> ResponseMatrix:
    """Inject slow sinusoidal drift with seeded per-voxel phase, for exercising
    detrending; the simulator itself stays drift-free."""
    rng = np.random.default_rng(derive_seed(seed, "drift"))
    t = rm.grid.times()
    phases = rng.uniform(0, 2 * np.pi, size=rm.n_voxels)
    drift = amplitude * np.sin(2 * np.pi * t[:, None] / period_s + phases[None, :])
    meta = dict(rm.meta)
    meta["drift"] = {"amplitude": amplitude, "period_s": period_s, "seed": seed}
    return ResponseMatrix(grid=rm.grid, voxel_ids=rm.voxel_ids,
                          values=rm.values + drift, meta=meta)


def save_subject(subject: SyntheticSubject, ledger: GroundTruthLedger, json_path, gctf_path) -> None:
    """Subject metadata + ledger as JSON; the selectivity matrix as GCTF1."""
    from .io import save_gctf

    payload = {
        "voxel_ids": list(subject.voxel_ids),
        # order matters: selectivity columns follow it, and JSON dicts get sorted
        "concept_order": list(subject.concept_bank),
        "concepts": {label: list(kws) for label, kws in subject.concept_bank.items()},
        "hrf": {
            "peak_s": subject.hrf.peak_s,
            "undershoot_s": subject.hrf.undershoot_s,
            "ratio": subject.hrf.ratio,
            "duration_s": subject.hrf.duration_s,
        },
        "noise_sd": subject.noise_sd.tolist(),
        "seed": subject.seed,
        "coords": None if subject.coords is None else subject.coords.tolist(),
        "ledger": {"concepts": [list(c) for c in ledger.concepts], "snr": ledger.snr},
    }
    Path(json_path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    save_gctf(gctf_path, subject.selectivity, {"kind": "selectivity"})


def load_subject(json_path, gctf_path) -> tuple[SyntheticSubject, GroundTruthLedger]:
    from .io import load_gctf

    payload = json.loads(Path(json_path).read_text())
    selectivity, _ = load_gctf(gctf_path)
    order = payload.get("concept_order", list(payload["concepts"]))
    subject = SyntheticSubject(
        voxel_ids=tuple(payload["voxel_ids"]),
        selectivity=np.asarray(selectivity, dtype=np.float64),
        concept_bank={k: tuple(payload["concepts"][k]) for k in order},
        hrf=HRFParams(**payload["hrf"]),
        noise_sd=np.asarray(payload["noise_sd"]),
        seed=payload["seed"],
        coords=None if payload["coords"] is None else np.asarray(payload["coords"]),
    )
    ledger = GroundTruthLedger(
        concepts=tuple(tuple(c) for c in payload["ledger"]["concepts"]),
        snr=dict(payload["ledger"]["snr"]),
    )
    return subject, ledger
