"""Canonical data types: transcripts, time grids, response matrices, n-grams, ROIs.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import OrderError, ParseError, ShapeMismatch

ROI_KINDS = ("localizer", "candidate_micro", "language_network")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_token(token: str) -> str:
    """Lowercase and strip punctuation; may return an empty string."""
    return token.lower().translate(_PUNCT_TABLE).strip()


@dataclass(frozen=True)
class Word:
    token: str
    onset_s: float
    offset_s: float


@dataclass(frozen=True)
class Transcript:
    """Time-stamped word sequence of one stimulus story."""

    story_id: str
    words: tuple[Word, ...]

    def __post_init__(self):
        prev = -np.inf
        for i, w in enumerate(self.words):
            if not w.token:
                raise ParseError(f"{self.story_id}: empty token at index {i}")
            if w.offset_s < w.onset_s:
                raise OrderError(
                    f"{self.story_id}: word {i} ({w.token!r}) ends before it starts"
                )
            if w.onset_s < prev:
                raise OrderError(
                    f"{self.story_id}: onset {w.onset_s} at index {i} precedes {prev}"
                )
            prev = w.onset_s

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(w.token for w in self.words)

    @property
    def onsets(self) -> np.ndarray:
        return np.array([w.onset_s for w in self.words], dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return self.words[-1].offset_s if self.words else 0.0


@dataclass(frozen=True)
class TRGrid:
    """Scanner time grid. ``t0_s`` is the stimulus-clock time of row 0.

    ``trim_head``/``trim_tail`` describe volumes still to be dropped by
    preprocessing; a trimmed grid has both at 0 and ``t0_s`` advanced.
    """

    tr_s: float = 2.0
    n_volumes: int = 0
    trim_head: int = 10
    trim_tail: int = 10
    t0_s: float = 0.0

    def __post_init__(self):
        if self.tr_s <= 0:
            raise ValueError("tr_s must be positive")
        if self.trim_head < 0 or self.trim_tail < 0:
            raise ValueError("trim counts must be nonnegative")
        if self.n_volumes <= self.trim_head + self.trim_tail:
            raise ValueError(
                f"n_volumes={self.n_volumes} must exceed trim_head+trim_tail="
                f"{self.trim_head + self.trim_tail}"
            )

    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.n_volumes) * self.tr_s

    def trimmed(self) -> "TRGrid":
        return TRGrid(
            tr_s=self.tr_s,
            n_volumes=self.n_volumes - self.trim_head - self.trim_tail,
            trim_head=0,
            trim_tail=0,
            t0_s=self.t0_s + self.trim_head * self.tr_s,
        )

    @staticmethod
    def covering(duration_s: float, tr_s: float = 2.0, trim_head: int = 10,
                 trim_tail: int = 10, pad_s: float = 0.0) -> "TRGrid":
        """Smallest grid whose span contains ``duration_s`` plus padding."""
        n = int(np.ceil((duration_s + pad_s) / tr_s)) + 1
        return TRGrid(tr_s=tr_s, n_volumes=max(n, trim_head + trim_tail + 1),
                      trim_head=trim_head, trim_tail=trim_tail)


def _check_matrix(values: np.ndarray, n_cols: int, what: str) -> np.ndarray:
    if values.ndim != 2:
        raise ShapeMismatch(f"{what} values must be 2-D, got {values.shape}")
    if values.shape[1] != n_cols:
        raise ShapeMismatch(
            f"{what} has {values.shape[1]} columns, expected {n_cols}"
        )
    if not np.all(np.isfinite(values)):
        raise ShapeMismatch(f"{what} contains non-finite values")
    return values


@dataclass(frozen=True)
class ResponseMatrix:
    """Per-TR response timecourses, one column per voxel."""

    grid: TRGrid
    voxel_ids: tuple
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values)
        object.__setattr__(self, "values", vals)
        _check_matrix(vals, len(self.voxel_ids), "ResponseMatrix")
        if vals.shape[0] != self.grid.n_volumes:
            raise ShapeMismatch(
                f"ResponseMatrix has {vals.shape[0]} rows but grid expects "
                f"{self.grid.n_volumes}"
            )
        object.__setattr__(self, "voxel_ids", tuple(self.voxel_ids))

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_ids)

    def column(self, voxel_id) -> np.ndarray:
        return self.values[:, self.voxel_ids.index(voxel_id)]

    def columns(self, voxel_ids: Iterable) -> np.ndarray:
        index = {v: i for i, v in enumerate(self.voxel_ids)}
        return self.values[:, [index[v] for v in voxel_ids]]


@dataclass(frozen=True)
class NGram:
    """A normalized 1..3-word phrase."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not 1 <= len(self.tokens) <= 3:
            raise ValueError(f"n-gram order must be 1..3, got {len(self.tokens)}")
        for t in self.tokens:
            if not t or t != normalize_token(t) or " " in t:
                raise ValueError(f"n-gram token {t!r} is not normalized")

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @staticmethod
    def from_text(text: str) -> "NGram":
        toks = tuple(normalize_token(t) for t in text.split())
        return NGram(tuple(t for t in toks if t))


@dataclass(frozen=True)
class NGramInventory:
    """Every n-gram occurrence of a transcript plus the deduplicated catalog."""

    occurrences: tuple[tuple[NGram, float], ...]
    catalog: tuple[NGram, ...]


def extract_ngrams(transcript: Transcript, n_max: int = 3) -> NGramInventory:
    """Enumerate all contiguous 1..n_max-grams with the onset of their last word.

    Tokens are normalized; windows containing a token that normalizes to the
    empty string are skipped. The catalog is unique and sorted by (order, text).
    """
    if n_max not in (1, 2, 3):
        raise ValueError("n_max must be 1, 2 or 3")
    norm = [normalize_token(w.token) for w in transcript.words]
    occurrences: list[tuple[NGram, float]] = []
    seen: set[tuple[str, ...]] = set()
    for i, w in enumerate(transcript.words):
        for n in range(1, n_max + 1):
            if i - n + 1 < 0:
                continue
            window = tuple(norm[i - n + 1 : i + 1])
            if any(not t for t in window):
                continue
            occurrences.append((NGram(window), w.onset_s))
            seen.add(window)
    catalog = tuple(sorted((NGram(t) for t in seen), key=lambda g: (g.n, g.text)))
    return NGramInventory(tuple(occurrences), catalog)


def merge_catalogs(inventories: Sequence[NGramInventory]) -> tuple[NGram, ...]:
    """Union of several catalogs, stably sorted."""
    seen = {g.tokens for inv in inventories for g in inv.catalog}
    return tuple(sorted((NGram(t) for t in seen), key=lambda g: (g.n, g.text)))


@dataclass(frozen=True)
class ROIMask:
    """A named set of voxels."""

    name: str
    voxel_ids: frozenset
    kind: str = "localizer"

    def __post_init__(self):
        object.__setattr__(self, "voxel_ids", frozenset(self.voxel_ids))
        if not self.voxel_ids:
            raise ValueError(f"ROI {self.name!r} is empty")
        if self.kind not in ROI_KINDS:
            raise ValueError(f"unknown ROI kind {self.kind!r}")

    def members_in(self, universe: Sequence) -> tuple:
        present = [v for v in universe if v in self.voxel_ids]
        missing = self.voxel_ids - set(universe)
        if missing:
            raise ValueError(
                f"ROI {self.name!r} has voxels outside the universe: {sorted(missing)[:5]}"
            )
        return tuple(present)


# -- transcript CSV format: one header line, then token,onset_s,offset_s rows --

_TRANSCRIPT_HEADER = ["token", "onset_s", "offset_s"]


def load_transcript(path) -> Transcript:
    """Read a word-time CSV; the story id is the file stem."""
    path = Path(path)
    words = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _TRANSCRIPT_HEADER:
            raise ParseError(f"{path}: expected header {','.join(_TRANSCRIPT_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            token = row[0]
            try:
                onset, offset = float(row[1]), float(row[2])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad number: {exc}") from exc
            if not token:
                raise ParseError(f"{path}:{lineno}: empty token")
            words.append(Word(token, onset, offset))
    return Transcript(story_id=path.stem, words=tuple(words))


def save_transcript(transcript: Transcript, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRANSCRIPT_HEADER)
        for w in transcript.words:
            writer.writerow([w.token, repr(w.onset_s), repr(w.offset_s)])
