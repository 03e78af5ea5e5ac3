"""Pipeline configuration: a single TOML file validated against a published
JSON schema. Unknown keys are rejected; parse(emit(config)) == config."""

from __future__ import annotations  # keeps dataclass field types as strings

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class RunSection:
    workdir: str = "runs/toy"
    root_seed: int = 0


@dataclass
class GridSection:
    tr_s: float = 2.0
    trim_head: int = 10
    trim_tail: int = 10


@dataclass
class SimulateSection:
    n_voxels: int = 72
    polysemantic_fraction: float = 0.0
    noise_sd: float = 1.0
    n_train_stories: int = 14
    n_test_stories: int = 2
    test_repeats: int = 2
    words_per_story: int = 560
    word_spacing_s: float = 0.4
    keyword_prob: float = 0.5


@dataclass
class FeaturesSection:
    backend: str = "hashed"  # hashed | file
    dim: int = 64
    context: int = 3
    seed_primary: int = 101
    seed_secondary: int = 202
    feature_dir: str = ""
    feature_dir_secondary: str = ""


@dataclass
class PreprocessSection:
    detrend: bool = False
    savgol_order: int = 2
    savgol_window_s: float = 120.0


@dataclass
class EncodingSection:
    lambdas_log10_min: float = 0.0
    lambdas_log10_max: float = 4.0
    n_lambdas: int = 10
    n_folds: int = 15
    chunk_len_trs: int = 40
    fir_delays_s: list[float] = field(default_factory=lambda: [-8.0, -6.0, -4.0, -2.0])
    lanczos_window: int = 3
    r_threshold: float = 0.15


@dataclass
class SelectSection:
    n_voxels: int = 24


@dataclass
class ExplainSection:
    n_targets: int = 12
    n_stability_pool: int = 18
    stability_threshold: float = 0.6  # candidate-ROI screening
    top_k_ngrams: int = 50
    n_summary_ngrams: int = 30
    n_candidates: int = 5


@dataclass
class LLMSection:
    backend: str = "stub"  # stub | replay | http_chat
    temperature: float = 0.0
    seed: int = 0
    cassette: str = ""
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "GCT_LLM_API_KEY"


@dataclass
class StorygenSection:
    n_stories: int = 2
    keep_best: int = 1
    mode: str = "single"
    prompt_version: str = "v1_coherent"
    cadence_wpm: float = 150.0
    lead_in_s: float = 24.0


@dataclass
class EvaluateSection:
    hrf_lag_trs: int = 3
    n_perm: int = 2000
    fdr_q: float = 0.05
    responses_dir: str = ""  # real (pre-recorded) presentation responses


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    grid: GridSection = field(default_factory=GridSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    encoding: EncodingSection = field(default_factory=EncodingSection)
    select: SelectSection = field(default_factory=SelectSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    llm: LLMSection = field(default_factory=LLMSection)
    storygen: StorygenSection = field(default_factory=StorygenSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {
    "run": RunSection,
    "grid": GridSection,
    "simulate": SimulateSection,
    "features": FeaturesSection,
    "preprocess": PreprocessSection,
    "encoding": EncodingSection,
    "select": SelectSection,
    "explain": ExplainSection,
    "llm": LLMSection,
    "storygen": StorygenSection,
    "evaluate": EvaluateSection,
}


def _schema_for(cls) -> dict:
    props = {}
    for f in fields(cls):
        if f.type in ("int",):
            props[f.name] = {"type": "integer"}
        elif f.type in ("float",):
            props[f.name] = {"type": "number"}
        elif f.type in ("bool",):
            props[f.name] = {"type": "boolean"}
        elif f.type in ("str",):
            props[f.name] = {"type": "string"}
        elif f.type.startswith("list[float]"):
            props[f.name] = {"type": "array", "items": {"type": "number"}}
        else:
            raise TypeError(f"unhandled config field type {f.type!r}")
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    """The published JSON schema for the TOML configuration."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "gct pipeline configuration",
        "type": "object",
        "properties": {name: _schema_for(cls) for name, cls in _SECTION_TYPES.items()},
        "additionalProperties": False,
    }


def config_from_dict(data: dict) -> PipelineConfig:
    try:
        jsonschema.validate(data, config_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message} (at {'/'.join(map(str, exc.path))})")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        section = data.get(name, {})
        coerced = {}
        for f in fields(cls):
            if f.name in section:
                value = section[f.name]
                if f.type == "float":
                    value = float(value)
                coerced[f.name] = value
        kwargs[name] = cls(**coerced)
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: bad TOML: {exc}")
    return config_from_dict(data)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "inf" in text) else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot emit {type(value).__name__} to TOML")


def emit_toml(config: PipelineConfig) -> str:
    lines = []
    for name, section in config.to_dict().items():
        lines.append(f"[{name}]")
        for key, value in section.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(emit_toml(config))


def toy_config(workdir: str = "runs/toy", root_seed: int = 0) -> PipelineConfig:
    """Desk-scale configuration exercising the full simulate->report chain."""
    cfg = PipelineConfig()
    cfg.run.workdir = workdir
    cfg.run.root_seed = root_seed
    return cfg
