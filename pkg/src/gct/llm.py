"""LLM client backends: HTTP chat completion, deterministic stub, and
record/replay cassettes.

Every backend answers ``complete(messages) -> str`` where messages is a chat
transcript of {"role", "content"} dicts. The stub and replay backends are
fully deterministic; the recording wrapper serializes cassette writes so
calls may be issued concurrently.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from .core import normalize_token
from .errors import LLMError
from .lexicon import FILLER_WORDS, ConceptBank, default_concept_bank

STUB_SENTINEL = "[gct-stub:unknown-prompt]"


def canonical_prompt(messages: Sequence[dict]) -> str:
    return json.dumps(list(messages), sort_keys=True, separators=(",", ":"))


def prompt_hash(messages: Sequence[dict]) -> str:
    return hashlib.sha256(canonical_prompt(messages).encode()).hexdigest()


class LLMClient:
    backend = "abstract"

    def complete(self, messages: Sequence[dict]) -> str:
        raise NotImplementedError

    def map_complete(self, prompts: Sequence[Sequence[dict]], max_workers: int = 1) -> list[str]:
        """Complete several independent prompts, optionally concurrently."""
        if max_workers <= 1:
            return [self.complete(m) for m in prompts]
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(self.complete, prompts))


class HttpChatLLM(LLMClient):
    """Chat-completions JSON protocol over HTTP.

    The API key is read from the environment variable named by
    ``api_key_env`` and sent as a bearer token if present.
    """

    backend = "http_chat"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "GCT_LLM_API_KEY",
        temperature: float = 0.0,
        seed: int | None = None,
        timeout_s: float = 60.0,
        max_retries: int = 3,
        backoff_s: float = 0.5,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.seed = seed
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = backoff_s

    def complete(self, messages: Sequence[dict]) -> str:
        import requests

        payload: dict = {
            "model": self.model,
            "messages": list(messages),
            "temperature": self.temperature,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout_s
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:
                last_error = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff_s * 2**attempt)
        raise LLMError(f"chat completion failed after retries: {last_error}")


class RecordingLLM(LLMClient):
    """Wraps another backend and appends every call to a JSONL cassette."""

    backend = "record"

    def __init__(self, inner: LLMClient, cassette_path):
        self.inner = inner
        self.cassette_path = Path(cassette_path)
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[dict]) -> str:
        response = self.inner.complete(messages)
        record = {
            "prompt_hash": prompt_hash(messages),
            "prompt": list(messages),
            "response": response,
        }
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with self._lock:
            with self.cassette_path.open("a") as fh:
                fh.write(line + "\n")
        return response


class ReplayLLM(LLMClient):
    """Replays a recorded cassette; repeated identical prompts are replayed in
    the order they were recorded."""

    backend = "replay"

    def __init__(self, cassette_path):
        self.cassette_path = Path(cassette_path)
        self._queues: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        with self.cassette_path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise LLMError(f"{self.cassette_path}:{lineno}: bad cassette line: {exc}")
                self._queues.setdefault(record["prompt_hash"], []).append(record["response"])
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[dict]) -> str:
        key = prompt_hash(messages)
        queue = self._queues.get(key)
        if not queue:
            raise LLMError(f"cassette has no recording for prompt hash {key[:12]}...")
        with self._lock:
            i = self._cursor.get(key, 0)
            self._cursor[key] = i + 1
        return queue[min(i, len(queue) - 1)]


# -- deterministic stub -----------------------------------------------------

_QUOTED = re.compile(r'"([^"]+)"')
_NUMBERED = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")


def _tokens(text: str) -> list[str]:
    return [t for t in (normalize_token(w) for w in text.split()) if t]


class StubLLM(LLMClient):
    """Rule-based stand-in for an instruction-tuned LLM.

    Recognizes the prompt families used by the pipeline (theme summarization,
    similar/dissimilar phrase generation, story paragraphs, trigram relevance
    judging) and answers them deterministically from a concept bank. A prompt
    outside every family returns an explicit sentinel so tests cannot pass by
    accident.
    """

    backend = "stub"

    def __init__(self, concept_bank: ConceptBank | None = None, seed: int = 0,
                 paragraph_words: int = 56, ignore_bans: bool = False):
        self.concept_bank = dict(concept_bank or default_concept_bank())
        self.seed = seed
        self.paragraph_words = paragraph_words
        self.ignore_bans = ignore_bans
        self._keyword_to_concept = {
            kw: label for label, kws in self.concept_bank.items() for kw in kws
        }

    # deterministic per-call randomness: a generator keyed by the full chat
    def _rng(self, messages: Sequence[dict]):
        import numpy as np

        digest = hashlib.blake2b(
            f"{self.seed}:{canonical_prompt(messages)}".encode(), digest_size=8
        ).digest()
        return np.random.default_rng(int.from_bytes(digest, "little"))

    def complete(self, messages: Sequence[dict]) -> str:
        if not messages:
            raise LLMError("empty prompt")
        text = messages[-1].get("content", "")
        if text.startswith("Here is a list of phrases:"):
            return self._summarize(text)
        if text.startswith("Generate 10 phrases that are similar to the concept of"):
            return self._phrases(text, messages, similar=True)
        if text.startswith("Generate 10 phrases that are not similar to the concept of"):
            return self._phrases(text, messages, similar=False)
        if text.startswith("Write the beginning paragraph") or text.startswith(
            "Write the next paragraph"
        ):
            return self._paragraph(text, messages)
        if text.startswith("Here is an explanation:"):
            return self._judge(text)
        return STUB_SENTINEL

    # --- families ---

    def _concept_scores(self, tokens: Sequence[str]) -> dict[str, int]:
        scores = {label: 0 for label in self.concept_bank}
        for tok in tokens:
            label = self._keyword_to_concept.get(tok)
            if label is not None:
                scores[label] += 1
        return scores

    def _match_concept(self, explanation: str) -> str | None:
        """Best concept for an explanation string, by label then keyword overlap."""
        toks = set(_tokens(explanation))
        if not toks:
            return None
        best, best_score = None, 0
        for label, kws in self.concept_bank.items():
            label_toks = set(_tokens(label))
            score = 3 * len(toks & label_toks) + len(toks & set(kws))
            if score > best_score:
                best, best_score = label, score
        return best

    def _summarize(self, text: str) -> str:
        body = text.split("Here is a list of phrases:", 1)[1]
        body = body.split("What is a common theme", 1)[0]
        tokens = _tokens(body)
        scores = self._concept_scores(tokens)
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        candidates = [label for label, s in ranked if s > 0][:4]
        fallback = ["everyday events", "household objects", "quiet moments", "simple actions"]
        for fb in fallback:
            if len(candidates) >= 5:
                break
            candidates.append(fb)
        while len(candidates) < 5:
            candidates.append("miscellaneous topics")
        return "\n".join(f"- {c}" for c in candidates[:5])

    def _phrases(self, text: str, messages: Sequence[dict], similar: bool) -> str:
        expl = text.split("the concept of", 1)[1].strip().rstrip(":").strip()
        concept = self._match_concept(expl)
        rng = self._rng(messages)
        if similar and concept is not None:
            pool = list(self.concept_bank[concept])
        else:
            # unknown concepts and "not similar" requests both get neutral
            # everyday words, the way a general model writes unrelated phrases
            pool = list(FILLER_WORDS[40:90])
        lines = []
        for i in range(10):
            a, b, c = (pool[int(rng.integers(len(pool)))] for _ in range(3))
            lines.append(f"{i + 1}. the {a} and {b} {c}")
        return "\n".join(lines)

    def _banned(self, text: str) -> set[str]:
        banned: set[str] = set()
        for line in text.splitlines():
            if "Avoid mentioning" in line:
                for term in _QUOTED.findall(line.split("Avoid mentioning", 1)[1]):
                    banned.update(_tokens(term))
        return banned

    def _paragraph(self, text: str, messages: Sequence[dict]) -> str:
        quoted = _QUOTED.findall(text.split("Avoid mentioning")[0])
        if not quoted:
            return STUB_SENTINEL
        # prompts quote each explanation twice and each example once
        explanations: list[str] = []
        examples: list[str] = []
        for q in quoted:
            if q in explanations:
                continue
            if text.count(f'"{q}"') >= 2:
                explanations.append(q)
            else:
                examples.append(q)
        banned = set() if self.ignore_bans else self._banned(text)
        pool: list[str] = []
        for expl in explanations or quoted[:1]:
            concept = self._match_concept(expl)
            kws = list(self.concept_bank.get(concept, ())) if concept else []
            kws += [t for ex in examples for t in _tokens(ex)]
            pool.extend([k for k in kws if k not in banned])
        seen = set()
        pool = [k for k in pool if not (k in seen or seen.add(k))]
        rng = self._rng(messages)
        filler = [w for w in FILLER_WORDS if w not in banned]
        words = []
        for j in range(self.paragraph_words):
            if pool and j % 2 == 0:
                words.append(pool[int(rng.integers(len(pool)))])
            else:
                words.append(filler[int(rng.integers(len(filler)))])
        sentence = " ".join(words)
        return sentence[0].upper() + sentence[1:] + "."

    def _judge(self, text: str) -> str:
        expl = _QUOTED.findall(text)
        concept = self._match_concept(expl[0]) if expl else None
        keywords = set(self.concept_bank.get(concept, ())) if concept else set()
        lines = []
        in_list = False
        for line in text.splitlines():
            if line.strip() == "Phrases:":
                in_list = True
                continue
            if not in_list:
                continue
            m = _NUMBERED.match(line)
            if not m:
                continue
            relevant = bool(keywords & set(_tokens(m.group(2))))
            lines.append(f"{m.group(1)}. {'yes' if relevant else 'no'}")
        return "\n".join(lines) if lines else STUB_SENTINEL


def make_client(spec: dict) -> LLMClient:
    """Build a backend from a config mapping (backend, endpoint, model, ...)."""
    backend = spec.get("backend", "stub")
    if backend == "stub":
        return StubLLM(seed=int(spec.get("seed", 0)))
    if backend == "replay":
        return ReplayLLM(spec["cassette"])
    if backend == "http_chat":
        client: LLMClient = HttpChatLLM(
            endpoint=spec["endpoint"],
            model=spec["model"],
            api_key_env=spec.get("api_key_env", "GCT_LLM_API_KEY"),
            temperature=float(spec.get("temperature", 0.0)),
            seed=spec.get("seed"),
        )
        if spec.get("cassette"):
            client = RecordingLLM(client, spec["cassette"])
        return client
    raise ValueError(f"unknown LLM backend {backend!r}")
