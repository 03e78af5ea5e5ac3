import numpy as np
import pytest

import gct
from gct.core import normalize_token
from gct.errors import ParseError
from gct.explain import Explanation
from gct.llm import StubLLM
from gct.storygen import (
    generate_selective_story,
    generate_story,
    load_story,
    matching_score,
    save_story,
    select_best_stories,
)


def expl(target, text, ngrams=()):
    return Explanation(
        target=target, text=text, explanation_score=1.0, top_ngrams=tuple(ngrams)
    )


@pytest.fixture()
def three_expls(bank):
    return [
        expl(0, "weather", [" ".join(bank["weather"][:2])]),
        expl(1, "food preparation", [bank["food preparation"][0]]),
        expl(2, "animals", [bank["animals"][0]]),
    ]


class TestGenerateStory:
    def test_single_mode_keywords_present(self, stub, bank, three_expls):
        story = generate_story(stub, three_expls, seed=1)
        assert len(story.paragraphs) == 3
        for para, concept in zip(story.paragraphs, ("weather", "food preparation", "animals")):
            toks = {normalize_token(w) for w in para.text.split()}
            assert toks & set(bank[concept])

    def test_deterministic_per_seed(self, stub, three_expls):
        a = generate_story(stub, three_expls, seed=1)
        b = generate_story(stub, three_expls, seed=1)
        c = generate_story(stub, three_expls, seed=2)
        assert [p.text for p in a.paragraphs] == [p.text for p in b.paragraphs]
        assert [p.text for p in a.paragraphs] != [p.text for p in c.paragraphs]

    def test_explanation_count_bounds(self, stub, three_expls):
        with pytest.raises(ValueError):
            generate_story(stub, [])
        with pytest.raises(ValueError):
            generate_story(stub, [three_expls[0]] * 18)

    def test_pair_mode_appendix_shape(self, stub, bank):
        # 8 targets in 4 pairs: each pair yields (a, a+b, b) paragraphs
        expls = [
            expl(i, label, [bank[label][0]])
            for i, label in enumerate(list(bank)[:8])
        ]
        story = generate_story(stub, expls, mode="pair", seed=0)
        assert len(story.paragraphs) == 12
        dual = [p for p in story.paragraphs if len(p.targets) == 2]
        assert len(dual) == 4
        assert story.paragraphs[1].targets == (0, 1)

    def test_polysemantic_mode_two_explanations_per_voxel(self, stub, bank):
        labels = list(bank)
        expls = []
        for v in range(8):
            expls.append(expl(v, labels[v], [bank[labels[v]][0]]))
            expls.append(expl(v, labels[v + 1], [bank[labels[v + 1]][0]]))
        story = generate_story(stub, expls, mode="polysemantic", seed=0)
        assert len(story.paragraphs) == 16
        assert story.paragraphs[0].targets == story.paragraphs[1].targets == (0,)

    def test_polysemantic_requires_shared_target(self, stub, three_expls):
        with pytest.raises(ValueError):
            generate_story(stub, three_expls[:2], mode="polysemantic")

    def test_empty_paragraphs_rejected_after_retry(self, three_expls):
        from gct.errors import IncoherentOutput
        from gct.llm import LLMClient

        class Mute(LLMClient):
            def complete(self, messages):
                return "   "

        with pytest.raises(IncoherentOutput):
            generate_story(Mute(), three_expls, seed=0)

    def test_prompt_log_replayable(self, stub, three_expls, tmp_path):
        from gct.llm import RecordingLLM, ReplayLLM

        cassette = tmp_path / "c.jsonl"
        story = generate_story(RecordingLLM(stub, cassette), three_expls, seed=4)
        replayed = generate_story(ReplayLLM(cassette), three_expls, seed=4)
        assert [p.text for p in story.paragraphs] == [p.text for p in replayed.paragraphs]

    def test_v0_prompt_version(self, stub, three_expls):
        story = generate_story(stub, three_expls, seed=1, prompt_version="v0_first_person")
        assert story.prompt_version == "v0_first_person"
        opening = story.prompt_log[1]["content"]
        assert opening.startswith("Write the beginning paragraph of an interesting story")

    def test_timing_at_cadence(self, stub, three_expls):
        story = generate_story(stub, three_expls, seed=1, cadence_wpm=150.0, lead_in_s=24.0)
        t = story.to_transcript()
        assert t.words[0].onset_s == 24.0
        gap = t.words[1].onset_s - t.words[0].onset_s
        assert gap == pytest.approx(0.4)
        spans = story.paragraph_spans()
        assert spans[0][0] == 24.0
        assert len(spans) == 3


class TestSelectiveStory:
    def test_empty_suppression_reduces_to_generate_story(self, stub, three_expls):
        plain = generate_story(stub, three_expls, seed=7)
        selective = generate_selective_story(stub, "roi-a", [], three_expls, seed=7)
        assert [p.text for p in plain.paragraphs] == [p.text for p in selective.paragraphs]

    def test_target_in_suppress_set_rejected(self, stub, three_expls):
        with pytest.raises(ValueError):
            generate_selective_story(stub, "a", ["a", "b"], three_expls)

    def test_banned_terms_absent_with_compliant_llm(self, stub, bank, three_expls):
        banned = {"roi-b": list(bank["locations"])}
        story = generate_selective_story(
            stub, "roi-a", ["roi-b"], three_expls, seed=1, banned_terms=banned
        )
        toks = {normalize_token(w) for p in story.paragraphs for w in p.text.split()}
        assert not toks & set(bank["locations"])
        assert all(p.compliance_ok for p in story.paragraphs)

    def test_stock_suffixes_reach_the_prompt(self, stub, bank):
        from gct.storygen import ROI_PROMPT_SUFFIXES

        assert "specific location names" in ROI_PROMPT_SUFFIXES["OPA-only"]
        assert '"New York"' in ROI_PROMPT_SUFFIXES["OPA-only"]
        expls = [expl("OPA-only", "directions", [bank["directions"][0]])]
        story = generate_selective_story(
            stub, "OPA-only", ["RSC-only"], expls, seed=1,
            suffixes=ROI_PROMPT_SUFFIXES,
        )
        opening = story.prompt_log[1]["content"]
        assert opening.endswith(ROI_PROMPT_SUFFIXES["OPA-only"])

    def test_noncompliant_llm_flagged_not_dropped(self, bank, three_expls):
        rogue = StubLLM(concept_bank=bank, ignore_bans=True)
        banned = {"roi-b": list(bank["weather"])}  # weather expl will violate
        story = generate_selective_story(
            rogue, "roi-a", ["roi-b"], three_expls, seed=1, banned_terms=banned
        )
        assert not story.paragraphs[0].compliance_ok
        assert story.meta["compliance_failures"] == [0]
        assert len(story.paragraphs) == 3


class TestStoryIO:
    def test_roundtrip(self, stub, three_expls, tmp_path):
        story = generate_story(stub, three_expls, seed=9)
        save_story(story, tmp_path / "s.json")
        assert load_story(tmp_path / "s.json") == story


class TestMatchingScore:
    def test_pure_keyword_paragraph_saturates(self, stub, bank, three_expls):
        story = generate_story(stub, three_expls, seed=1)
        kw_only = " ".join(bank["weather"])
        from dataclasses import replace

        para = replace(story.paragraphs[0], text=kw_only)
        story = replace(story, paragraphs=(para,) + story.paragraphs[1:])
        m = matching_score(stub, story, ["weather"])
        assert m.fractions[0, 0] == 1.0

    def test_unrelated_paragraph_zero(self, stub, three_expls):
        story = generate_story(stub, three_expls, seed=1)
        m = matching_score(stub, story, ["family relationships"])
        assert np.allclose(m.fractions, 0.0)

    def test_diagonal_dominance(self, stub, three_expls):
        story = generate_story(stub, three_expls, seed=1)
        m = matching_score(stub, story, [e.text for e in three_expls])
        z = m.values
        for i in range(3):
            off = [z[i, j] for j in range(3) if j != i]
            assert z[i, i] > max(off)

    def test_z_axis_recorded(self, stub, three_expls):
        story = generate_story(stub, three_expls, seed=1)
        m = matching_score(stub, story, ["weather"], z_axis="paragraph")
        assert m.z_axis == "paragraph"


class TestPrevalidation:
    def make_bundles(self, bank, targets):
        import sys

        sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
        from test_explain import planted_bundle

        return planted_bundle(bank, targets)

    def test_planted_diagonal_dominates(self, stub, bank):
        bundle = self.make_bundles(bank, ["weather", "food preparation", "animals"])
        expls = [
            expl(0, "weather", [bank["weather"][0]]),
            expl(1, "food preparation", [bank["food preparation"][0]]),
            expl(2, "animals", [bank["animals"][0]]),
        ]
        story = generate_story(stub, expls, seed=1)
        matrix = gct.encoding_prevalidation(bundle, story)
        for i in range(3):
            off = [matrix[i, j] for j in range(3) if j != i]
            assert matrix[i, i] > max(off)

    def test_paragraph_permutation_equivariance(self, stub, bank):
        from dataclasses import replace
        import sys

        sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
        from test_explain import planted_bundle

        # context-1 features: word vectors cannot leak across paragraph edges
        bundle = planted_bundle(
            bank, ["weather", "food preparation", "animals"], context=1
        )
        expls = [
            expl(0, "weather", [bank["weather"][0]]),
            expl(1, "food preparation", [bank["food preparation"][0]]),
            expl(2, "animals", [bank["animals"][0]]),
        ]
        story = generate_story(stub, expls, seed=1, lead_in_s=24.0)
        # 56 words x 0.4s + 17.6s gap = 40s slot pitch, a TR multiple, so every
        # slot has the same word-to-tick alignment
        story = replace(story, paragraph_gap_s=17.6)
        perm = [2, 0, 1]
        shuffled = replace(
            story,
            paragraphs=tuple(
                replace(story.paragraphs[p], index=i) for i, p in enumerate(perm)
            ),
        )
        # equal-length paragraphs with wide gaps: windows carry no spillover,
        # so shuffled column i holds original paragraph perm[i]
        base = gct.encoding_prevalidation(bundle, story, targets=(0, 1, 2), normalize="none")
        moved = gct.encoding_prevalidation(bundle, shuffled, targets=(0, 1, 2), normalize="none")
        assert np.allclose(moved, base[:, perm], atol=1e-9)

    def test_distant_text_change_leaves_window_untouched(self, stub, bank):
        from dataclasses import replace

        bundle = self.make_bundles(bank, ["weather", "food preparation", "animals"])
        expls = [
            expl(0, "weather", [bank["weather"][0]]),
            expl(1, "food preparation", [bank["food preparation"][0]]),
            expl(2, "animals", [bank["animals"][0]]),
        ]
        story = generate_story(stub, expls, seed=1)
        story = replace(story, paragraph_gap_s=16.0)
        words = story.paragraphs[2].text.split()
        edited = replace(
            story,
            paragraphs=story.paragraphs[:2]
            + (replace(story.paragraphs[2], text=" ".join(reversed(words))),),
        )
        base = gct.encoding_prevalidation(bundle, story, targets=(0,), normalize="none")
        other = gct.encoding_prevalidation(bundle, edited, targets=(0,), normalize="none")
        assert other[0, 0] == pytest.approx(base[0, 0], abs=1e-12)

    def test_select_best_stories_ordering(self, stub, bank):
        bundle = self.make_bundles(bank, ["weather", "food preparation"])
        expls = [
            expl(0, "weather", [bank["weather"][0]]),
            expl(1, "food preparation", [bank["food preparation"][0]]),
        ]
        good = generate_story(stub, expls, seed=0)
        from dataclasses import replace

        # degrade one story: strip its keywords entirely
        bad_paras = tuple(
            replace(p, text="the and of " * 18) for p in good.paragraphs
        )
        bad = replace(good, paragraphs=bad_paras, seed=1, story_id="bad")
        ranked = select_best_stories([bad, good], bundle)
        assert ranked[0][0].story_id == good.story_id
        assert ranked[0][1] > ranked[1][1]

    def test_tied_candidates_keep_seed_order(self, stub, bank):
        from dataclasses import replace

        bundle = self.make_bundles(bank, ["weather", "food preparation"])
        expls = [
            expl(0, "weather", [bank["weather"][0]]),
            expl(1, "food preparation", [bank["food preparation"][0]]),
        ]
        s0 = generate_story(stub, expls, seed=0)
        s1 = replace(s0, seed=1, story_id="twin")
        ranked = select_best_stories([s1, s0], bundle)
        assert [r[0].seed for r in ranked] == [0, 1]
