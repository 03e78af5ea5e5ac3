"""Word features to TR-aligned design matrices, plus response preprocessing.

Everything here is a pure function of its inputs and declared parameters, so
callers may parallelize over stories and voxels freely.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import scipy.signal

from .core import ResponseMatrix, Transcript, TRGrid, normalize_token
from .errors import (
    DimMismatch,
    EmptyTranscript,
    ExtractorError,
    NonIntegerDelay,
    ShapeMismatch,
    TimingMismatch,
    TooShort,
    WindowTooLarge,
)

DEFAULT_FIR_DELAYS_S = (-8.0, -6.0, -4.0, -2.0)


@runtime_checkable
class FeatureExtractor(Protocol):
    """Maps a transcript to one feature row per word."""

    id: str
    dim: int
    deterministic: bool

    def embed(self, transcript: Transcript) -> np.ndarray: ...


@dataclass(frozen=True)
class WordFeatureSeq:
    transcript: Transcript
    rows: np.ndarray
    extractor_id: str

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2 or rows.shape[0] != self.transcript.n_words:
            raise DimMismatch(
                f"expected {self.transcript.n_words} feature rows, got shape {rows.shape}"
            )
        if not np.all(np.isfinite(rows)):
            raise ExtractorError("word features contain non-finite values")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class FeatureMatrix:
    """TR-aligned stimulus features; ``lag_set`` is empty until FIR expansion."""

    grid: TRGrid
    values: np.ndarray
    lag_set: tuple[float, ...] = ()
    base_dim: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lag_set", tuple(self.lag_set))
        if vals.ndim != 2:
            raise ShapeMismatch(f"FeatureMatrix values must be 2-D, got {vals.shape}")
        if vals.shape[0] != self.grid.n_volumes:
            raise ShapeMismatch(
                f"FeatureMatrix has {vals.shape[0]} rows, grid expects {self.grid.n_volumes}"
            )
        if not np.all(np.isfinite(vals)):
            raise ShapeMismatch("FeatureMatrix contains non-finite values")
        base = self.base_dim or vals.shape[1]
        object.__setattr__(self, "base_dim", base)
        if self.lag_set and vals.shape[1] != base * len(self.lag_set):
            raise ShapeMismatch(
                f"dim {vals.shape[1]} != base_dim {base} x {len(self.lag_set)} lags"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[1]


class HashedNgramExtractor:
    """Deterministic desk-scale stand-in for LLM activations.

    Each word's vector is the L2-normalized sum of seeded hash embeddings of
    the n-grams (n <= context) ending at that word, so a word with an identical
    short context gets an identical vector in any story.
    """

    def __init__(self, seed: int = 0, dim: int = 64, context: int = 3):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        if context < 1:
            raise ValueError("context must be >= 1")
        self.seed = int(seed)
        self.dim = int(dim)
        self.context = int(context)
        self.deterministic = True
        self.id = f"hashed-ngram/s{self.seed}/d{self.dim}/c{self.context}"
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def _hash_vector(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.seed}:{text}".encode(), digest_size=8
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def _context_vector(self, window: tuple[str, ...]) -> np.ndarray:
        cached = self._cache.get(window)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim)
        for n in range(1, len(window) + 1):
            vec += self._hash_vector(" ".join(window[-n:]))
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
        self._cache[window] = vec
        return vec

    def embed(self, transcript: Transcript) -> np.ndarray:
        tokens = [normalize_token(w.token) or w.token.lower() for w in transcript.words]
        out = np.empty((len(tokens), self.dim))
        for i in range(len(tokens)):
            lo = max(0, i - self.context + 1)
            out[i] = self._context_vector(tuple(tokens[lo : i + 1]))
        return out


class FileFeatureExtractor:
    """Serves precomputed per-word features from GCTF1 files, one per story."""

    def __init__(self, feature_dir, dim: int | None = None):
        self.feature_dir = Path(feature_dir)
        self.deterministic = True
        self._dim = dim
        self.id = f"file/{self.feature_dir.name}"

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise ExtractorError("dim unknown until a story has been loaded")
        return self._dim

    def embed(self, transcript: Transcript) -> np.ndarray:
        from .io import load_gctf

        path = self.feature_dir / f"{transcript.story_id}.gctf"
        if not path.exists():
            raise ExtractorError(f"no feature file for story {transcript.story_id!r} at {path}")
        values, trailer = load_gctf(path)
        if values.shape[0] != transcript.n_words:
            raise DimMismatch(
                f"{path}: {values.shape[0]} rows for {transcript.n_words} words"
            )
        if self._dim is None:
            self._dim = values.shape[1]
            self.id = trailer.get("extractor_id", self.id)
        elif values.shape[1] != self._dim:
            raise DimMismatch(f"{path}: dim {values.shape[1]} != expected {self._dim}")
        return np.asarray(values, dtype=np.float64)


def hashed_ngram_extractor(seed: int, dim: int, context: int = 3) -> HashedNgramExtractor:
    return HashedNgramExtractor(seed=seed, dim=dim, context=context)


def embed_words(extractor: FeatureExtractor, transcript: Transcript) -> WordFeatureSeq:
    """Run the extractor and record its id for provenance."""
    try:
        rows = extractor.embed(transcript)
    except (DimMismatch, ExtractorError):
        raise
    except Exception as exc:
        raise ExtractorError(f"extractor {extractor.id!r} failed: {exc}") from exc
    return WordFeatureSeq(transcript=transcript, rows=rows, extractor_id=extractor.id)


def lanczos_kernel(x: np.ndarray, a: int) -> np.ndarray:
    """sinc(x)*sinc(x/a) inside |x| < a, zero outside; exact 1 at x=0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)
    return out


def lanczos_resample(
    seq: WordFeatureSeq,
    grid: TRGrid,
    window: int = 3,
    renormalize: bool = False,
) -> FeatureMatrix:
    """Project word-level features onto the TR grid with a Lanczos kernel.

    Row k is sum_w rows[w] * L((t_k - onset_w)/tr, a=window). Weights are used
    unnormalized by default; ``renormalize=True`` divides each row by its total
    kernel weight instead.
    """
    if seq.transcript.n_words == 0:
        raise EmptyTranscript(f"story {seq.transcript.story_id!r} has no words")
    onsets = seq.transcript.onsets
    times = grid.times()
    t_lo, t_hi = times[0], times[-1]
    if onsets.min() < t_lo - window * grid.tr_s or onsets.max() > t_hi + window * grid.tr_s:
        raise TimingMismatch(
            f"word onsets [{onsets.min():.2f}, {onsets.max():.2f}] fall outside the "
            f"grid span [{t_lo:.2f}, {t_hi:.2f}] (+/- window)"
        )
    weights = lanczos_kernel((times[:, None] - onsets[None, :]) / grid.tr_s, window)
    if renormalize:
        totals = weights.sum(axis=1, keepdims=True)
        totals[totals == 0] = 1.0
        weights = weights / totals
    values = weights @ seq.rows
    return FeatureMatrix(
        grid=grid,
        values=values,
        meta={
            "extractor_id": seq.extractor_id,
            "lanczos_window": window,
            "renormalized": renormalize,
            "story_id": seq.transcript.story_id,
        },
    )


def fir_expand(fm: FeatureMatrix, delays_s: Sequence[float] = DEFAULT_FIR_DELAYS_S) -> FeatureMatrix:
    """Concatenate copies of the feature matrix shifted by each delay.

    A delay of -d seconds means a feature at stimulus time t predicts the
    response at t + d: the block is the input shifted down by d/tr rows, with
    zeros filling the rows that fall off the start.
    """
    if fm.lag_set:
        raise ShapeMismatch("FeatureMatrix is already FIR-expanded")
    shifts = []
    for d in delays_s:
        k = abs(d) / fm.grid.tr_s
        if abs(k - round(k)) > 1e-9:
            raise NonIntegerDelay(f"delay {d}s is not a multiple of tr={fm.grid.tr_s}s")
        shifts.append(int(round(k)))
    n, d_base = fm.values.shape
    out = np.zeros((n, d_base * len(shifts)))
    for j, k in enumerate(shifts):
        block = out[:, j * d_base : (j + 1) * d_base]
        if k == 0:
            block[:] = fm.values
        elif k < n:
            block[k:] = fm.values[: n - k]
    return FeatureMatrix(
        grid=fm.grid,
        values=out,
        lag_set=tuple(float(d) for d in delays_s),
        base_dim=d_base,
        meta=dict(fm.meta),
    )


def _truncated_window_trend(values: np.ndarray, window: int, order: int) -> np.ndarray:
    """Savitzky-Golay trend with truncated-window least squares at the edges."""
    n = values.shape[0]
    half = window // 2
    trend = scipy.signal.savgol_filter(values, window, order, axis=0, mode="interp")
    positions = np.arange(n, dtype=np.float64)
    for i in range(min(half, n)):
        sl = slice(0, min(i + half + 1, n))
        x = positions[sl] - i
        basis = np.vander(x, order + 1, increasing=True)
        coef, *_ = np.linalg.lstsq(basis, values[sl], rcond=None)
        trend[i] = coef[0]
    for i in range(max(n - half, 0), n):
        sl = slice(max(i - half, 0), n)
        x = positions[sl] - i
        basis = np.vander(x, order + 1, increasing=True)
        coef, *_ = np.linalg.lstsq(basis, values[sl], rcond=None)
        trend[i] = coef[0]
    return trend


def savgol_detrend(rm: ResponseMatrix, order: int = 2, window_s: float = 120.0) -> ResponseMatrix:
    """Subtract the Savitzky-Golay smoothed trend from each voxel column."""
    window = int(np.floor(window_s / rm.grid.tr_s))
    if window % 2 == 0:
        window += 1
    if window > rm.grid.n_volumes:
        raise WindowTooLarge(
            f"window of {window} TRs exceeds series length {rm.grid.n_volumes}"
        )
    if window <= order + 1:
        raise WindowTooLarge(f"window of {window} TRs too small for order {order}")
    values = np.asarray(rm.values, dtype=np.float64)
    trend = _truncated_window_trend(values, window, order)
    meta = dict(rm.meta)
    meta["detrend"] = {"order": order, "window_trs": window}
    return ResponseMatrix(grid=rm.grid, voxel_ids=rm.voxel_ids, values=values - trend, meta=meta)


def trim_and_zscore(rm: ResponseMatrix) -> ResponseMatrix:
    """Drop the grid's head/tail volumes, then z-score each voxel column.

    Constant columns are set to zero and listed in meta["constant_voxels"].
    """
    grid = rm.grid
    if grid.n_volumes - grid.trim_head - grid.trim_tail < 2:
        raise TooShort(
            f"{grid.n_volumes} volumes minus {grid.trim_head}+{grid.trim_tail} trim "
            "leaves fewer than 2 rows to z-score"
        )
    stop = grid.n_volumes - grid.trim_tail
    values = np.asarray(rm.values[grid.trim_head : stop], dtype=np.float64).copy()
    mean = values.mean(axis=0)
    values -= mean
    sd = values.std(axis=0)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    sd_safe = np.where(constant, 1.0, sd)
    values /= sd_safe
    values[:, constant] = 0.0
    meta = dict(rm.meta)
    flagged = [rm.voxel_ids[i] for i in np.flatnonzero(constant)]
    meta["constant_voxels"] = flagged
    if flagged:
        warnings.warn(f"{len(flagged)} constant voxel column(s) zeroed: {flagged[:5]}")
    return ResponseMatrix(grid=grid.trimmed(), voxel_ids=rm.voxel_ids, values=values, meta=meta)


def trim_rows(fm: FeatureMatrix) -> FeatureMatrix:
    """Trim a feature matrix by its grid's head/tail, mirroring trim_and_zscore."""
    grid = fm.grid
    stop = grid.n_volumes - grid.trim_tail
    return FeatureMatrix(
        grid=grid.trimmed(),
        values=fm.values[grid.trim_head : stop],
        lag_set=fm.lag_set,
        base_dim=fm.base_dim,
        meta=dict(fm.meta),
    )


# -- isolated-phrase design rows ------------------------------------------------

PHRASE_PAD_TRS = 4
PHRASE_WORD_SPACING_S = 0.5


def _phrase_grid(n_lags: int, tr_s: float, window: int) -> TRGrid:
    n = PHRASE_PAD_TRS + n_lags + window + 1
    return TRGrid(tr_s=tr_s, n_volumes=n, trim_head=0, trim_tail=0)


def _phrase_transcript(tokens: Sequence[str], tr_s: float, spacing_s: float) -> Transcript:
    from .core import Word

    t_last = PHRASE_PAD_TRS * tr_s
    words = []
    for i, tok in enumerate(tokens):
        onset = t_last - (len(tokens) - 1 - i) * spacing_s
        words.append(Word(tok, onset, onset + spacing_s))
    return Transcript(story_id="phrase", words=tuple(words))


def phrase_design_row(
    extractor: FeatureExtractor,
    tokens: Sequence[str],
    lag_set: Sequence[float],
    tr_s: float,
    window: int = 3,
    spacing_s: float = PHRASE_WORD_SPACING_S,
) -> np.ndarray:
    """Design row for a phrase scored in isolation.

    The words are placed at consecutive synthetic onsets ending on a TR tick,
    run through lanczos + FIR, and the rows of the FIR lag window (the TRs that
    see the stimulus) are averaged into a single row.
    """
    transcript = _phrase_transcript(tokens, tr_s, spacing_s)
    seq = embed_words(extractor, transcript)
    fm = lanczos_resample(seq, _phrase_grid(len(lag_set), tr_s, window), window=window)
    fx = fir_expand(fm, lag_set)
    lo = PHRASE_PAD_TRS + 1
    return fx.values[lo : lo + len(lag_set)].mean(axis=0)


def _phrase_coefficients(
    n_tokens: int, lag_set: tuple[float, ...], tr_s: float, window: int, spacing_s: float
) -> np.ndarray:
    """[n_tokens x n_lags] weights such that a phrase's design row is
    concat_l(sum_i coeff[i, l] * word_vec_i); derived by running the real
    lanczos + FIR ops on identity word features."""
    transcript = _phrase_transcript([f"w{i}" for i in range(n_tokens)], tr_s, spacing_s)
    seq = WordFeatureSeq(transcript=transcript, rows=np.eye(n_tokens), extractor_id="identity")
    fm = lanczos_resample(seq, _phrase_grid(len(lag_set), tr_s, window), window=window)
    fx = fir_expand(fm, lag_set)
    lo = PHRASE_PAD_TRS + 1
    row = fx.values[lo : lo + len(lag_set)].mean(axis=0)
    return row.reshape(len(lag_set), n_tokens).T


class PhraseDesignCache:
    """Vectorized design rows for many phrases under one extractor/lag setup."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        lag_set: Sequence[float],
        tr_s: float,
        window: int = 3,
        spacing_s: float = PHRASE_WORD_SPACING_S,
    ):
        self.extractor = extractor
        self.lag_set = tuple(float(d) for d in lag_set)
        self.tr_s = float(tr_s)
        self.window = int(window)
        self.spacing_s = float(spacing_s)
        self._coeffs: dict[int, np.ndarray] = {}
        self._word_vecs: dict[tuple[str, ...], np.ndarray] = {}

    def _coeff(self, n: int) -> np.ndarray:
        if n not in self._coeffs:
            self._coeffs[n] = _phrase_coefficients(
                n, self.lag_set, self.tr_s, self.window, self.spacing_s
            )
        return self._coeffs[n]

    def _word_vec(self, context: tuple[str, ...]) -> np.ndarray:
        # extractors only look back a bounded window; truncate the cache key
        # to that window when it is known, for a better hit rate
        width = getattr(self.extractor, "context", None)
        if width:
            context = context[-width:]
        vec = self._word_vecs.get(context)
        if vec is None:
            transcript = _phrase_transcript(context, self.tr_s, self.spacing_s)
            vec = self.extractor.embed(transcript)[-1]
            self._word_vecs[context] = vec
        return vec

    def rows(self, phrases: Sequence[Sequence[str]]) -> np.ndarray:
        """[n_phrases x (base_dim * n_lags)] design rows, order preserved."""
        dim = self.extractor.dim
        n_lags = len(self.lag_set)
        out = np.zeros((len(phrases), dim * n_lags))
        by_len: dict[int, list[int]] = {}
        for i, toks in enumerate(phrases):
            by_len.setdefault(len(toks), []).append(i)
        for n, idxs in by_len.items():
            if n == 0:
                continue
            coeff = self._coeff(n)
            vecs = np.empty((len(idxs), n, dim))
            for j, i in enumerate(idxs):
                toks = tuple(phrases[i])
                for w in range(n):
                    vecs[j, w] = self._word_vec(toks[: w + 1])
            blocks = np.einsum("jnd,nl->jld", vecs, coeff)
            out[idxs] = blocks.reshape(len(idxs), n_lags * dim)
        return out
