"""Per-word hidden-state extraction from a causal language model.

Each transcript word gets one feature row: the chosen layer's hidden state at
the final subtoken of that word, computed with the word's running left context
(up to a configurable window of words). Exports are deterministic (eval mode,
fixed dtype) and resumable per story.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gctf import read_trailer, save_gctf


class ModelLoadError(RuntimeError):
    pass


class TokenizationMismatch(RuntimeError):
    pass


@dataclass
class ExportSpec:
    model: str
    layer: int
    transcripts: str
    out_dir: str
    context: int = 32
    dtype: str = "float32"
    batch_size: int = 16
    resume: bool = True

    def __post_init__(self):
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.dtype not in ("float32", "float16"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"model": self.model, "layer": self.layer, "context": self.context,
             "dtype": self.dtype},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_words(path) -> list[str]:
    """Word-time CSV: one header line, then token,onset_s,offset_s rows."""
    words = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["token", "onset_s", "offset_s"]:
            raise ValueError(f"{path}: expected header token,onset_s,offset_s")
        for row in reader:
            if row:
                words.append(row[0])
    return words


def _load_backend(spec: ExportSpec):
    try:
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer
    except ImportError as exc:
        raise ModelLoadError(f"transformers/torch unavailable: {exc}") from exc
    try:
        tokenizer = AutoTokenizer.from_pretrained(spec.model)
        dtype = {"float32": torch.float32, "float16": torch.float16}[spec.dtype]
        model = AutoModelForCausalLM.from_pretrained(spec.model, dtype=dtype)
    except Exception as exc:
        raise ModelLoadError(f"could not load checkpoint {spec.model!r}: {exc}") from exc
    model.eval()
    n_layers = model.config.num_hidden_layers
    if not 0 <= spec.layer <= n_layers:
        raise ModelLoadError(
            f"layer {spec.layer} out of range for a {n_layers}-layer model "
            "(0 selects the embeddings)"
        )
    return tokenizer, model


def _word_rows(tokenizer, model, words: list[str], spec: ExportSpec) -> tuple[np.ndarray, list[int]]:
    """One row per word. A word that contributes zero tokens falls back to the
    preceding word's state (index recorded); the first word must tokenize."""
    import torch

    token_counts = [len(tokenizer(w)["input_ids"]) for w in words]
    if token_counts and token_counts[0] == 0:
        raise TokenizationMismatch(f"first word {words[0]!r} produced no tokens")
    contexts = []
    for i in range(len(words)):
        lo = max(0, i - spec.context + 1)
        contexts.append(" ".join(words[lo : i + 1]))
    hidden = model.config.hidden_size
    rows = np.zeros((len(words), hidden), dtype=np.float32)
    fallbacks: list[int] = []
    with torch.no_grad():
        for start in range(0, len(contexts), spec.batch_size):
            batch = contexts[start : start + spec.batch_size]
            enc = tokenizer(batch, return_tensors="pt", padding=True)
            lengths = enc["attention_mask"].sum(dim=1)
            if int(lengths.max()) == 0:
                for j in range(len(batch)):
                    fallbacks.append(start + j)
                    rows[start + j] = rows[start + j - 1]
                continue
            out = model(**enc, output_hidden_states=True)
            states = out.hidden_states[spec.layer]
            for j, length in enumerate(lengths.tolist()):
                i = start + j
                if length == 0 or token_counts[i] == 0:
                    fallbacks.append(i)
                    rows[i] = rows[i - 1]
                    continue
                rows[i] = states[j, int(length) - 1].float().numpy()
    return rows, fallbacks


def export_features(spec: ExportSpec) -> dict:
    """Export every transcript in the directory; returns the manifest."""
    tokenizer, model = _load_backend(spec)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = spec.fingerprint()
    manifest = {
        "model": spec.model,
        "layer": spec.layer,
        "context": spec.context,
        "dtype": spec.dtype,
        "fingerprint": fingerprint,
        "stories": {},
    }
    paths = sorted(Path(spec.transcripts).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no transcript CSVs in {spec.transcripts}")
    for path in paths:
        story_id = path.stem
        out_path = out_dir / f"{story_id}.gctf"
        if spec.resume and out_path.exists():
            trailer = read_trailer(out_path)
            if trailer.get("fingerprint") == fingerprint:
                manifest["stories"][story_id] = {
                    "rows": trailer["n_words"], "status": "kept"
                }
                continue
        words = load_words(path)
        rows, fallbacks = _word_rows(tokenizer, model, words, spec)
        save_gctf(
            out_path,
            rows,
            {
                "kind": "features",
                "extractor_id": f"{spec.model}/layer{spec.layer}",
                "fingerprint": fingerprint,
                "model": spec.model,
                "layer": spec.layer,
                "context": spec.context,
                "dtype": spec.dtype,
                "n_words": len(words),
                "fallback_rows": fallbacks,
                "pooling": "final-subtoken hidden state, running left context",
            },
        )
        manifest["stories"][story_id] = {"rows": len(words), "status": "written"}
    manifest_path = out_dir / "export_manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest
