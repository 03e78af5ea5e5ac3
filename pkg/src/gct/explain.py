"""Turn encoding models into short natural-language selectivity explanations.

The loop: mine the n-grams that maximize a target's predicted response,
summarize them into candidate phrases with an LLM, then score each candidate
by how strongly LLM-generated similar vs dissimilar phrases drive the model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import NGram, ROIMask
from .encoding import ModelBundle, predict_catalog, roi_stability, stability_score
from .errors import EmptyCatalog, LLMError, NoViableCandidate, ParseError
from .llm import LLMClient, STUB_SENTINEL

SUMMARIZE_PROMPT = (
    "Here is a list of phrases:\n{phrases}\n"
    "What is a common theme among these phrases?\n"
    "The common theme among these phrases is"
)
SIMILAR_PROMPT = 'Generate 10 phrases that are similar to the concept of "{explanation}":'
DISSIMILAR_PROMPT = 'Generate 10 phrases that are not similar to the concept of "{explanation}":'
JUDGE_PROMPT = (
    'Here is an explanation: "{explanation}".\n'
    "For each of the following phrases, answer yes if the phrase is relevant "
    "to the explanation and no otherwise.\n"
    'Answer with one line per phrase, formatted as "<number>. yes" or "<number>. no".\n'
    "Phrases:\n{phrases}"
)

MAX_EXPLANATION_WORDS = 12
MAX_PHRASE_WORDS = 20

_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*(.+?)\s*$")


@dataclass(frozen=True)
class NGramScoreTable:
    """Catalog n-grams ranked by predicted response, descending."""

    target: object
    scored: tuple[tuple[NGram, float], ...]

    def top(self, k: int) -> list[NGram]:
        return [g for g, _ in self.scored[:k]]

    def top_texts(self, k: int) -> list[str]:
        return [g.text for g, _ in self.scored[:k]]


@dataclass
class Explanation:
    """A short phrase describing a target's selectivity, with its scores."""

    target: object
    text: str
    explanation_score: float
    stability: float | None = None
    top_ngrams: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.text:
            raise ValueError("explanation text must be nonempty")
        if len(self.text.split()) > MAX_EXPLANATION_WORDS:
            raise ValueError(f"explanation longer than {MAX_EXPLANATION_WORDS} words")
        if not np.isfinite(self.explanation_score):
            raise ValueError("explanation score must be finite")


class NGramScorer:
    """Caches catalog predictions for one or more model bundles.

    Voxel targets are scored with the first (primary) bundle; ROI targets use
    the mean over member voxels, averaged across all given bundles.
    """

    def __init__(
        self,
        bundles: Sequence[ModelBundle] | ModelBundle,
        catalog: Sequence[NGram],
        catalog_rows: Sequence[np.ndarray] | None = None,
    ):
        if isinstance(bundles, ModelBundle):
            bundles = [bundles]
        if not bundles:
            raise ValueError("need at least one model bundle")
        if len(catalog) == 0:
            raise EmptyCatalog("the n-gram catalog is empty")
        self.bundles = list(bundles)
        self.catalog = tuple(catalog)
        self._caches = [b.design_cache() for b in self.bundles]
        if catalog_rows is None:
            catalog_rows = [
                cache.rows([g.tokens for g in self.catalog]) for cache in self._caches
            ]
        self._catalog_pred = [
            rows @ b.model.weights for rows, b in zip(catalog_rows, self.bundles)
        ]

    def _target_columns(self, target, pred_list) -> np.ndarray:
        if isinstance(target, ROIMask):
            stacked = []
            for bundle, pred in zip(self.bundles, pred_list):
                idx = bundle.model.voxel_index(roi_members(target, bundle))
                stacked.append(pred[:, idx].mean(axis=1))
            return np.mean(stacked, axis=0)
        bundle, pred = self.bundles[0], pred_list[0]
        return pred[:, bundle.model.voxel_index([target])[0]]

    def catalog_predictions(self, target) -> np.ndarray:
        return self._target_columns(target, self._catalog_pred)

    def response_sd(self, target) -> float:
        return float(self.catalog_predictions(target).std())

    def predict_phrases(self, phrases: Sequence[str], target) -> np.ndarray:
        """Predicted response to each free-text phrase (first 20 words)."""
        token_lists = [phrase_tokens(p) for p in phrases]
        wanted = self.bundles if isinstance(target, ROIMask) else self.bundles[:1]
        pred_list = []
        for bundle, cache in zip(wanted, self._caches):
            rows = cache.rows(token_lists)
            pred_list.append(rows @ bundle.model.weights)
        return self._target_columns(target, pred_list)


def phrase_tokens(phrase: str) -> tuple[str, ...]:
    from .core import normalize_token

    toks = [t for t in (normalize_token(w) for w in phrase.split()) if t]
    return tuple(toks[:MAX_PHRASE_WORDS])


def roi_members(roi: ROIMask, bundle: ModelBundle) -> tuple:
    return roi.members_in(bundle.model.voxel_ids)


def score_ngrams(scorer: NGramScorer, target) -> NGramScoreTable:
    """Rank every catalog n-gram by its predicted response for the target.

    Ties (for example under an all-zero model) sort by n-gram text.
    """
    preds = scorer.catalog_predictions(target)
    order = sorted(
        range(len(scorer.catalog)), key=lambda i: (-preds[i], scorer.catalog[i].text)
    )
    scored = tuple((scorer.catalog[i], float(preds[i])) for i in order)
    return NGramScoreTable(target=target, scored=scored)


def parse_bulleted_list(text: str) -> list[str]:
    """Items from a bulleted or numbered list, lowercased and squeezed."""
    if STUB_SENTINEL in text:
        raise ParseError(f"stub did not recognize the prompt: {text[:60]}")
    items = []
    for line in text.splitlines():
        m = _BULLET.match(line)
        candidate = m.group(1) if m else line.strip()
        candidate = " ".join(candidate.lower().split())
        candidate = candidate.strip(" .;:,")
        if candidate:
            items.append(candidate)
    if not items:
        raise ParseError(f"no list items in LLM output: {text[:80]!r}")
    return items


def summarize_candidates(
    llm: LLMClient,
    top_ngrams: Sequence[NGram | str],
    k: int = 5,
    seed: int = 0,
    n_sample: int = 30,
) -> list[str]:
    """Ask the LLM for k candidate themes over a random sample of n-grams."""
    texts = [g.text if isinstance(g, NGram) else str(g) for g in top_ngrams]
    rng = np.random.default_rng(seed)
    if len(texts) > n_sample:
        texts = [texts[i] for i in sorted(rng.choice(len(texts), n_sample, replace=False))]
    prompt = SUMMARIZE_PROMPT.format(phrases="\n".join(texts))
    messages = [{"role": "user", "content": prompt}]
    for attempt in range(2):
        try:
            items = parse_bulleted_list(llm.complete(messages))
            break
        except (LLMError, ParseError):
            if attempt == 1:
                raise
    out = []
    for item in items:
        words = item.split()[:MAX_EXPLANATION_WORDS]
        if words:
            out.append(" ".join(words))
        if len(out) == k:
            break
    if not out:
        raise ParseError("summarization produced no usable candidates")
    return out


def score_explanation(
    llm: LLMClient, scorer: NGramScorer, target, candidate: str
) -> float:
    """Mean model response to similar minus dissimilar phrases, in SD units of
    the model's response distribution over the training n-gram catalog."""
    if not candidate:
        raise ValueError("candidate explanation is empty")
    similar = parse_bulleted_list(
        llm.complete([{"role": "user", "content": SIMILAR_PROMPT.format(explanation=candidate)}])
    )
    dissimilar = parse_bulleted_list(
        llm.complete([{"role": "user", "content": DISSIMILAR_PROMPT.format(explanation=candidate)}])
    )
    sd = scorer.response_sd(target)
    if sd <= 0:
        return 0.0
    mean_sim = float(scorer.predict_phrases(similar, target).mean())
    mean_dis = float(scorer.predict_phrases(dissimilar, target).mean())
    return (mean_sim - mean_dis) / sd


def explain_target(
    llm: LLMClient,
    bundle_primary: ModelBundle,
    bundle_secondary: ModelBundle | None,
    target,
    catalog: Sequence[NGram],
    k: int = 5,
    seed: int = 0,
    top_k: int = 50,
    scorer: NGramScorer | None = None,
) -> Explanation:
    """Full summarize-and-score pass for one voxel or ROI.

    Returns the argmax-scoring candidate; raises NoViableCandidate when every
    candidate scores <= 0. Stability is attached when a secondary bundle is
    given.
    """
    if scorer is None:
        bundles = [bundle_primary]
        if isinstance(target, ROIMask) and bundle_secondary is not None:
            bundles.append(bundle_secondary)
        scorer = NGramScorer(bundles, catalog)
    table = score_ngrams(scorer, target)
    top = table.top(top_k)
    candidates = summarize_candidates(llm, top, k=k, seed=seed)
    scores = [score_explanation(llm, scorer, target, c) for c in candidates]
    best = int(np.argmax(scores))
    if scores[best] <= 0:
        raise NoViableCandidate(
            f"all {len(candidates)} candidates scored <= 0 for target {target!r}"
        )
    stability = None
    if bundle_secondary is not None:
        if isinstance(target, ROIMask):
            stability = roi_stability(bundle_primary, bundle_secondary, catalog, target)
        else:
            stability = stability_score(
                bundle_primary, bundle_secondary, catalog, voxels=[target]
            ).stability[0]
    name = target.name if isinstance(target, ROIMask) else target
    return Explanation(
        target=name,
        text=candidates[best],
        explanation_score=float(scores[best]),
        stability=None if stability is None else float(stability),
        top_ngrams=tuple(table.top_texts(10)),
        meta={"candidates": candidates, "candidate_scores": [float(s) for s in scores]},
    )


def pick_diverse(explanations: Sequence[Explanation], n: int, dim: int = 64) -> list[Explanation]:
    """Greedy max-min picker over hashed embeddings of the explanation texts.

    A stand-in for picking targets "with diverse explanations" by hand; it is
    a heuristic, not part of the statistical contract.
    """
    from .signal import hashed_ngram_extractor
    from .core import Transcript, Word

    if n >= len(explanations):
        return list(explanations)
    extractor = hashed_ngram_extractor(seed=7, dim=dim)
    vecs = []
    for e in explanations:
        words = tuple(
            Word(t, i * 0.5, i * 0.5 + 0.4) for i, t in enumerate(e.text.split())
        )
        vecs.append(extractor.embed(Transcript("expl", words)).mean(axis=0))
    vecs = np.asarray(vecs)
    order = np.argsort([-e.explanation_score for e in explanations], kind="stable")
    chosen = [int(order[0])]
    while len(chosen) < n:
        dists = np.linalg.norm(vecs[:, None, :] - vecs[None, chosen, :], axis=2).min(axis=1)
        dists[chosen] = -np.inf
        chosen.append(int(np.argmax(dists)))
    return [explanations[i] for i in sorted(chosen)]
