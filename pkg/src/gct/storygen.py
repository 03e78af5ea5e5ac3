"""Paragraph-by-paragraph story synthesis and pre-experiment validation.

Stories are built in one chat per story so each paragraph can stay consistent
with the text so far; every prompt/response pair is kept for replay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ROIMask, Transcript, TRGrid, Word, normalize_token
from .encoding import ModelBundle
from .errors import IncoherentOutput, ShapeMismatch
from .explain import Explanation
from .llm import LLMClient
from .signal import embed_words, fir_expand, lanczos_resample

PROMPT_VERSIONS = ("v1_coherent", "v0_first_person")
STORY_MODES = ("single", "pair", "polysemantic")

OPEN_V1 = (
    'Write the beginning paragraph of a long, coherent story. The story should '
    'be about "{expl}". Make sure it contains several words related to '
    '"{expl}", such as {examples}.'
)
NEXT_V1 = (
    'Write the next paragraph of the story, staying consistent with the story '
    'so far, but now make it about "{expl}". Make sure it contains several '
    'words related to "{expl}", such as {examples}.'
)
OPEN_V0 = (
    'Write the beginning paragraph of an interesting story told in first '
    'person. The story should have a plot and characters. The story should be '
    'about "{expl}". Make sure it contains several words related to "{expl}", '
    'such as {examples}.'
)
NEXT_V0 = (
    'Write the next paragraph of the story, but now make it about "{expl}". '
    'Make sure it contains several words related to "{expl}", such as {examples}.'
)

DEFAULT_CADENCE_WPM = 150.0
DEFAULT_LEAD_IN_S = 24.0
DEFAULT_PARAGRAPH_GAP_S = 2.0

# stock per-ROI prompt suffixes for the localizer-ROI driving setting; keys are
# ROI names, "-only" variants are the selective (suppression) runs
ROI_PROMPT_SUFFIXES = {
    "IPS": "Avoid mentioning any locations.",
    "OFA": "Avoid mentioning any locations.",
    "OPA": 'Avoid mentioning any specific location names (like "New York" or "Europe").',
    "OPA-only": 'Avoid mentioning any specific location names (like "New York" or "Europe").',
    "PPA": 'Avoid mentioning any specific location names (like "New York" or "Europe").',
    "PPA-only": 'Avoid mentioning any specific location names (like "New York" or "Europe").',
    "RSC": "",
    "RSC-only": "",
    "sPMv": "Avoid mentioning any locations.",
}


@dataclass(frozen=True)
class Paragraph:
    index: int
    text: str
    targets: tuple
    explanations: tuple[str, ...]
    key_ngrams: tuple[str, ...] = ()
    banned_terms: tuple[str, ...] = ()
    compliance_ok: bool = True

    def __post_init__(self):
        if not self.text.strip():
            raise IncoherentOutput(f"paragraph {self.index} is empty")
        if not 1 <= len(self.targets) <= 2:
            raise ValueError("a paragraph carries one primary target, or two when flagged")


@dataclass(frozen=True)
class Story:
    story_id: str
    seed: int
    mode: str
    prompt_version: str
    paragraphs: tuple[Paragraph, ...]
    prompt_log: tuple[dict, ...] = ()
    cadence_wpm: float = DEFAULT_CADENCE_WPM
    lead_in_s: float = DEFAULT_LEAD_IN_S
    paragraph_gap_s: float = DEFAULT_PARAGRAPH_GAP_S
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in STORY_MODES:
            raise ValueError(f"unknown story mode {self.mode!r}")
        if self.prompt_version not in PROMPT_VERSIONS:
            raise ValueError(f"unknown prompt version {self.prompt_version!r}")
        if not self.paragraphs:
            raise ValueError("a story needs at least one paragraph")

    @property
    def targets(self) -> tuple:
        out = []
        for p in self.paragraphs:
            for t in p.targets:
                if t not in out:
                    out.append(t)
        return tuple(out)

    def to_transcript(self) -> Transcript:
        """Word timing at presentation cadence, paragraph gaps included."""
        interval = 60.0 / self.cadence_wpm
        words: list[Word] = []
        t = self.lead_in_s
        for p in self.paragraphs:
            for tok in p.text.split():
                words.append(Word(tok, t, t + 0.9 * interval))
                t += interval
            t += self.paragraph_gap_s
        return Transcript(story_id=self.story_id, words=tuple(words))

    def paragraph_spans(self) -> list[tuple[float, float]]:
        """(start, end) stimulus times of each paragraph at the story cadence."""
        interval = 60.0 / self.cadence_wpm
        spans = []
        t = self.lead_in_s
        for p in self.paragraphs:
            n = len(p.text.split())
            start = t
            t += n * interval
            spans.append((start, t - 0.1 * interval))
            t += self.paragraph_gap_s
        return spans

    @property
    def duration_s(self) -> float:
        return self.paragraph_spans()[-1][1] if self.paragraphs else 0.0


def save_story(story: Story, path) -> None:
    payload = {
        "story_id": story.story_id,
        "seed": story.seed,
        "mode": story.mode,
        "prompt_version": story.prompt_version,
        "cadence_wpm": story.cadence_wpm,
        "lead_in_s": story.lead_in_s,
        "paragraph_gap_s": story.paragraph_gap_s,
        "paragraphs": [
            {
                "index": p.index,
                "text": p.text,
                "targets": list(p.targets),
                "explanations": list(p.explanations),
                "key_ngrams": list(p.key_ngrams),
                "banned_terms": list(p.banned_terms),
                "compliance_ok": p.compliance_ok,
            }
            for p in story.paragraphs
        ],
        "prompt_log": list(story.prompt_log),
        "meta": story.meta,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_story(path) -> Story:
    payload = json.loads(Path(path).read_text())
    return Story(
        story_id=payload["story_id"],
        seed=payload["seed"],
        mode=payload["mode"],
        prompt_version=payload["prompt_version"],
        cadence_wpm=payload["cadence_wpm"],
        lead_in_s=payload["lead_in_s"],
        paragraph_gap_s=payload["paragraph_gap_s"],
        paragraphs=tuple(
            Paragraph(
                index=p["index"],
                text=p["text"],
                targets=tuple(p["targets"]),
                explanations=tuple(p["explanations"]),
                key_ngrams=tuple(p["key_ngrams"]),
                banned_terms=tuple(p["banned_terms"]),
                compliance_ok=p["compliance_ok"],
            )
            for p in payload["paragraphs"]
        ),
        prompt_log=tuple(payload["prompt_log"]),
        meta=payload.get("meta", {}),
    )


@dataclass(frozen=True)
class ParagraphPlan:
    targets: tuple
    explanations: tuple[Explanation, ...]


def _plans(explanations: Sequence[Explanation], mode: str) -> list[ParagraphPlan]:
    if not 1 <= len(explanations) <= 17:
        raise ValueError("a story drives between 1 and 17 explanations")
    if mode == "single":
        return [ParagraphPlan((e.target,), (e,)) for e in explanations]
    if len(explanations) % 2:
        raise ValueError(f"{mode} mode needs explanations in consecutive pairs")
    pairs = [(explanations[i], explanations[i + 1]) for i in range(0, len(explanations), 2)]
    if mode == "pair":
        plans = []
        for a, b in pairs:
            plans.append(ParagraphPlan((a.target,), (a,)))
            plans.append(ParagraphPlan((a.target, b.target), (a, b)))
            plans.append(ParagraphPlan((b.target,), (b,)))
        return plans
    if mode == "polysemantic":
        plans = []
        for a, b in pairs:
            if a.target != b.target:
                raise ValueError(
                    f"polysemantic pairs must share a target, got {a.target!r}/{b.target!r}"
                )
            plans.append(ParagraphPlan((a.target,), (a,)))
            plans.append(ParagraphPlan((b.target,), (b,)))
        return plans
    raise ValueError(f"unknown story mode {mode!r}")


def _examples_clause(explanations: Sequence[Explanation], n: int = 3) -> str:
    ngrams = []
    for e in explanations:
        ngrams.extend(e.top_ngrams[:n])
    return ", ".join(f'"{g}"' for g in ngrams) or '"everyday things"'


def _prompt_for(plan: ParagraphPlan, first: bool, version: str, suffix: str) -> str:
    if version == "v1_coherent":
        template = OPEN_V1 if first else NEXT_V1
    else:
        template = OPEN_V0 if first else NEXT_V0
    expl = '" and "'.join(e.text for e in plan.explanations)
    prompt = template.format(expl=expl, examples=_examples_clause(plan.explanations))
    if suffix:
        prompt += " " + suffix
    return prompt


def _violations(text: str, banned: Sequence[str]) -> list[str]:
    toks = {normalize_token(w) for w in text.split()}
    return sorted({b for b in banned if normalize_token(b) in toks})


def generate_story(
    llm: LLMClient,
    explanations: Sequence[Explanation],
    mode: str = "single",
    seed: int = 0,
    suffixes: dict | None = None,
    prompt_version: str = "v1_coherent",
    story_id: str | None = None,
    banned_terms: dict | None = None,
    cadence_wpm: float = DEFAULT_CADENCE_WPM,
    lead_in_s: float = DEFAULT_LEAD_IN_S,
) -> Story:
    """Iteratively prompt the LLM for one paragraph per target.

    ``suffixes`` maps a target to an extra instruction appended to its prompts;
    ``banned_terms`` maps a target to terms its paragraph must not contain
    (checked lexically; one retry, then the paragraph is kept but flagged).
    """
    suffixes = suffixes or {}
    banned_terms = banned_terms or {}
    plans = _plans(explanations, mode)
    # the seed rides along in the system message so every backend (stub or
    # http) produces a distinct story per seed while staying replayable
    messages: list[dict] = [
        {
            "role": "system",
            "content": (
                "You are a creative writer producing one paragraph at a time. "
                f"This is story draft {seed}."
            ),
        }
    ]
    paragraphs: list[Paragraph] = []
    seen_texts: set[str] = set()
    for i, plan in enumerate(plans):
        banned = tuple(banned_terms.get(plan.targets[0], ()))
        suffix = suffixes.get(plan.targets[0], "")
        prompt = _prompt_for(plan, first=(i == 0), version=prompt_version, suffix=suffix)
        text, ok = _request_paragraph(llm, messages, prompt, seen_texts, banned)
        seen_texts.add(text)
        paragraphs.append(
            Paragraph(
                index=i,
                text=text,
                targets=plan.targets,
                explanations=tuple(e.text for e in plan.explanations),
                key_ngrams=tuple(g for e in plan.explanations for g in e.top_ngrams[:3]),
                banned_terms=banned,
                compliance_ok=ok,
            )
        )
    failures = [p.index for p in paragraphs if not p.compliance_ok]
    return Story(
        story_id=story_id or f"story-{mode}-seed{seed}",
        seed=seed,
        mode=mode,
        prompt_version=prompt_version,
        paragraphs=tuple(paragraphs),
        prompt_log=tuple(messages),
        cadence_wpm=cadence_wpm,
        lead_in_s=lead_in_s,
        meta={"compliance_failures": failures},
    )


def _request_paragraph(
    llm: LLMClient,
    messages: list[dict],
    prompt: str,
    seen_texts: set[str],
    banned: Sequence[str],
) -> tuple[str, bool]:
    attempt_prompt = prompt
    text = ""
    for attempt in range(2):
        messages.append({"role": "user", "content": attempt_prompt})
        text = llm.complete(messages).strip()
        messages.append({"role": "assistant", "content": text})
        if not text or text in seen_texts:
            if attempt == 1:
                raise IncoherentOutput("empty or duplicate paragraph after one retry")
            attempt_prompt = prompt + " Do not repeat an earlier paragraph."
            continue
        bad = _violations(text, banned)
        if bad and attempt == 0:
            banned_clause = ", ".join(f'"{b}"' for b in bad)
            attempt_prompt = prompt + f" Avoid mentioning these terms: {banned_clause}."
            continue
        return text, not bad
    return text, False


def generate_selective_story(
    llm: LLMClient,
    target_roi: str,
    suppress_rois: Sequence[str],
    explanations: Sequence[Explanation],
    seed: int = 0,
    banned_terms: dict | None = None,
    suffixes: dict | None = None,
    **kwargs,
) -> Story:
    """Drive one ROI while suppressing others via exclusion instructions.

    The exclusion clause is built from the suppressed ROIs' banned-term lists
    (lexical and configurable); compliance is checked against those lists and
    never assumed from the LLM.
    """
    if target_roi in set(suppress_rois):
        raise ValueError(f"target ROI {target_roi!r} is also in the suppress set")
    banned_terms = banned_terms or {}
    banned = tuple(
        dict.fromkeys(t for roi in suppress_rois for t in banned_terms.get(roi, ()))
    )
    suffixes = dict(suffixes or {})
    per_target = {}
    for e in explanations:
        suffix = suffixes.get(e.target, "")
        if banned and not suffix:
            terms = ", ".join(f'"{t}"' for t in banned)
            suffix = f"Avoid mentioning any of these terms: {terms}."
        per_target[e.target] = suffix
    story = generate_story(
        llm,
        explanations,
        mode="single",
        seed=seed,
        suffixes=per_target,
        banned_terms={e.target: banned for e in explanations},
        story_id=kwargs.pop("story_id", f"selective-{target_roi}-seed{seed}"),
        **kwargs,
    )
    meta = dict(story.meta)
    meta.update({"selective_target": target_roi, "suppressed": list(suppress_rois)})
    return replace(story, meta=meta)


@dataclass(frozen=True)
class MatchMatrix:
    """Relevant-trigram fractions per (paragraph, explanation), then z-scored."""

    fractions: np.ndarray
    values: np.ndarray
    explanations: tuple[str, ...]
    z_axis: str = "explanation"


def _paragraph_trigrams(text: str) -> list[str]:
    toks = [t for t in (normalize_token(w) for w in text.split()) if t]
    if len(toks) < 3:
        return [" ".join(toks)] if toks else []
    return [" ".join(toks[i : i + 3]) for i in range(len(toks) - 2)]


def matching_score(
    llm: LLMClient,
    story: Story,
    explanations: Sequence[Explanation | str],
    z_axis: str = "explanation",
) -> MatchMatrix:
    """LLM-judged fraction of each paragraph's trigrams relevant to each
    explanation, z-scored along the requested axis."""
    from .explain import JUDGE_PROMPT
    from .llm import STUB_SENTINEL
    from .errors import ParseError

    texts = [e.text if isinstance(e, Explanation) else str(e) for e in explanations]
    if not story.paragraphs or not texts:
        raise ValueError("need a story and at least one explanation")
    fractions = np.zeros((len(story.paragraphs), len(texts)))
    for pi, para in enumerate(story.paragraphs):
        trigrams = _paragraph_trigrams(para.text)
        numbered = "\n".join(f"{i + 1}. {t}" for i, t in enumerate(trigrams))
        for ei, expl in enumerate(texts):
            prompt = JUDGE_PROMPT.format(explanation=expl, phrases=numbered)
            reply = llm.complete([{"role": "user", "content": prompt}])
            if STUB_SENTINEL in reply:
                raise ParseError("judge stub did not recognize the prompt")
            votes = []
            for line in reply.splitlines():
                line = line.strip().lower()
                if line.endswith("yes"):
                    votes.append(1.0)
                elif line.endswith("no"):
                    votes.append(0.0)
            fractions[pi, ei] = float(np.mean(votes)) if votes else 0.0
    axis = 0 if z_axis == "explanation" else 1
    mean = fractions.mean(axis=axis, keepdims=True)
    sd = fractions.std(axis=axis, keepdims=True)
    sd = np.where(sd <= 0, 1.0, sd)
    return MatchMatrix(
        fractions=fractions,
        values=(fractions - mean) / sd,
        explanations=tuple(texts),
        z_axis=z_axis,
    )


def _story_grid(story: Story, tr_s: float, extra_tail_s: float = 16.0) -> TRGrid:
    return TRGrid.covering(
        story.duration_s, tr_s=tr_s, trim_head=0, trim_tail=0, pad_s=extra_tail_s
    )


def predicted_timecourses(
    bundles: Sequence[ModelBundle] | ModelBundle, story: Story, targets: Sequence
) -> tuple[np.ndarray, TRGrid]:
    """[n_volumes x n_targets] model-predicted responses to the story."""
    if isinstance(bundles, ModelBundle):
        bundles = [bundles]
    transcript = story.to_transcript()
    grid = _story_grid(story, bundles[0].model.tr_s)
    preds = []
    for bundle in bundles:
        seq = embed_words(bundle.extractor, transcript)
        fm = lanczos_resample(seq, grid)
        fx = fir_expand(fm, bundle.model.lag_set or (0.0,))
        full = fx.values @ bundle.model.weights
        cols = []
        for t in targets:
            if isinstance(t, ROIMask):
                idx = bundle.model.voxel_index(t.members_in(bundle.model.voxel_ids))
                cols.append(full[:, idx].mean(axis=1))
            else:
                cols.append(full[:, bundle.model.voxel_index([t])[0]])
        preds.append(np.stack(cols, axis=1))
    return np.mean(preds, axis=0), grid


def encoding_prevalidation(
    bundles: Sequence[ModelBundle] | ModelBundle,
    story: Story,
    targets: Sequence | None = None,
    hrf_lag_trs: int = 3,
    normalize: str = "zscore",
) -> np.ndarray:
    """[targets x paragraphs] predicted paragraph responses.

    With ``normalize="zscore"`` (default) each target's prediction is z-scored
    over the whole story first, so cells read as predicted sigma relative to
    the story mean; ``normalize="none"`` returns raw window means.
    """
    from .evaluation import paragraph_windows

    if targets is None:
        targets = story.targets
    pred, grid = predicted_timecourses(bundles, story, targets)
    windows = paragraph_windows(story, grid, hrf_lag_trs=hrf_lag_trs)
    if normalize == "zscore":
        # normalize over the presented paragraphs, not lead-in/tail padding:
        # a flat story must not be rescued by its own tiny variance
        support = np.unique(np.concatenate(windows))
        mean = pred[support].mean(axis=0)
        sd = pred[support].std(axis=0)
        sd = np.where(sd <= 0, 1.0, sd)
        pred = (pred - mean) / sd
    elif normalize != "none":
        raise ValueError(f"unknown normalize mode {normalize!r}")
    out = np.zeros((len(targets), len(windows)))
    for qi, rows in enumerate(windows):
        out[:, qi] = pred[rows].mean(axis=0)
    return out


def select_best_stories(
    candidates: Sequence[Story],
    bundles: Sequence[ModelBundle] | ModelBundle,
    k: int | None = None,
    hrf_lag_trs: int = 3,
) -> list[tuple[Story, float]]:
    """Rank candidate stories by the mean diagonal of their prevalidation
    matrix; ties keep seed order (stable sort)."""
    ranked = []
    for story in candidates:
        matrix = encoding_prevalidation(bundles, story, hrf_lag_trs=hrf_lag_trs)
        targets = list(story.targets)
        diag = []
        for qi, para in enumerate(story.paragraphs):
            for t in para.targets:
                diag.append(matrix[targets.index(t), qi])
        ranked.append((story, float(np.mean(diag))))
    order = sorted(range(len(ranked)), key=lambda i: (-ranked[i][1], ranked[i][0].seed))
    ranked = [ranked[i] for i in order]
    return ranked if k is None else ranked[:k]
