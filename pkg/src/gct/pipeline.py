"""Stage orchestration: run manifests, persistence, and idempotent re-runs.

Each stage writes its outputs plus a manifest recording the hashes of its
inputs; a re-run with unchanged inputs is skipped. All randomness flows from
the config's root seed through named substreams, so two runs from the same
manifest inputs are byte-identical in every numeric output (manifests carry
the only timestamps; plots are best-effort and excluded).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__
from .config import PipelineConfig, emit_toml
from .core import (
    ResponseMatrix,
    TRGrid,
    extract_ngrams,
    load_transcript,
    merge_catalogs,
    save_transcript,
)
from .encoding import (
    EncodingModel,
    ModelBundle,
    evaluate_test,
    fit_ridge_cv,
    select_voxels,
    stability_score,
    with_test_r,
)
from .errors import ConfigError, GCTError, MissingDependency, StageFailure
from .evaluation import apply_fdr, driving_scores, format_p, permutation_test
from .explain import Explanation, NGramScorer, explain_target, pick_diverse
from .io import load_model, load_response, save_model, save_response
from .lexicon import default_concept_bank
from .llm import StubLLM, make_client
from .signal import (
    FeatureMatrix,
    FileFeatureExtractor,
    embed_words,
    fir_expand,
    hashed_ngram_extractor,
    lanczos_resample,
    savgol_detrend,
    trim_and_zscore,
    trim_rows,
)
from .simulator import (
    grid_for_transcript,
    load_subject,
    make_corpus,
    make_subject,
    save_subject,
    simulate_run,
)
from .storygen import (
    encoding_prevalidation,
    generate_story,
    load_story,
    save_story,
    select_best_stories,
)
from .validation import derive_seed

STAGES = (
    "simulate",
    "fit",
    "select",
    "stability",
    "explain",
    "storygen",
    "prevalidate",
    "evaluate",
    "report",
)

DEPS: dict[str, tuple[str, ...]] = {
    "simulate": (),
    "fit": ("simulate",),
    "select": ("fit",),
    "stability": ("fit",),
    "explain": ("fit", "select", "stability"),
    "storygen": ("explain",),
    "prevalidate": ("fit", "storygen"),
    "evaluate": ("simulate", "fit", "storygen", "prevalidate"),
    "report": ("evaluate",),
}

# config sections each stage actually reads; anything else changing must not
# invalidate the stage (dependency outputs flow through manifests instead)
STAGE_CONFIG_SECTIONS: dict[str, tuple[str, ...]] = {
    "simulate": ("run", "grid", "simulate"),
    "fit": ("run", "grid", "simulate", "features", "preprocess", "encoding"),
    "select": ("run", "encoding", "select"),
    "stability": ("run", "grid", "simulate", "features", "encoding"),
    "explain": ("run", "grid", "simulate", "features", "explain", "llm"),
    "storygen": ("run", "storygen", "llm"),
    "prevalidate": ("run", "grid", "features", "storygen", "evaluate"),
    "evaluate": ("run", "grid", "simulate", "preprocess", "storygen", "evaluate"),
    "report": ("run",),
}


@dataclass
class RunManifest:
    stage: str
    status: str  # "run" | "skipped"
    signature: str
    config_hash: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__
    created_utc: float = 0.0


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


class Workspace:
    """Paths and manifest bookkeeping for one pipeline working directory."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.run.workdir)
        self.manifest_dir = self.root / "manifests"

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def manifest_path(self, stage: str) -> Path:
        self.manifest_dir.mkdir(parents=True, exist_ok=True)
        return self.manifest_dir / f"{stage}.json"

    def read_manifest(self, stage: str) -> RunManifest | None:
        path = self.manifest_path(stage)
        if not path.exists():
            return None
        return RunManifest(**json.loads(path.read_text()))

    def config_hash(self, stage: str | None = None) -> str:
        data = self.config.to_dict()
        if stage is not None:
            data = {k: data[k] for k in STAGE_CONFIG_SECTIONS[stage]}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def signature(self, stage: str) -> tuple[str, dict]:
        """Stage input signature: the stage's config slice plus dependency
        output hashes."""
        inputs = {"config": self.config_hash(stage)}
        for dep in DEPS[stage]:
            manifest = self.read_manifest(dep)
            if manifest is None:
                raise MissingDependency(
                    f"stage {stage!r} needs {dep!r}, but {self.manifest_path(dep)} is absent"
                )
            for rel, digest in manifest.outputs.items():
                if not (self.root / rel).exists():
                    raise MissingDependency(
                        f"stage {stage!r} needs output {rel!r} of {dep!r}, which is missing"
                    )
                inputs[f"{dep}:{rel}"] = digest
        payload = json.dumps(inputs, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest(), inputs

    def verify_outputs(self, manifest: RunManifest) -> bool:
        for rel, digest in manifest.outputs.items():
            path = self.root / rel
            if not path.exists() or _sha256_file(path) != digest:
                return False
        return True

    def finish(self, stage: str, signature: str, inputs: dict, outputs: list[Path], seed: int) -> RunManifest:
        manifest = RunManifest(
            stage=stage,
            status="run",
            signature=signature,
            config_hash=self.config_hash(),
            inputs=inputs,
            outputs={
                str(p.relative_to(self.root)): _sha256_file(p) for p in sorted(outputs)
            },
            seed=seed,
            created_utc=time.time(),
        )
        payload = asdict(manifest)
        self.manifest_path(stage).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        return manifest


# -- shared builders ----------------------------------------------------------


def _extractors(cfg: PipelineConfig):
    f = cfg.features
    if f.backend == "hashed":
        return (
            hashed_ngram_extractor(f.seed_primary, f.dim, f.context),
            hashed_ngram_extractor(f.seed_secondary, f.dim, f.context),
        )
    if f.backend == "file":
        return (
            FileFeatureExtractor(f.feature_dir),
            FileFeatureExtractor(f.feature_dir_secondary or f.feature_dir),
        )
    raise ConfigError(f"unknown features backend {f.backend!r}")


def _grid_for(cfg: PipelineConfig, transcript) -> TRGrid:
    return grid_for_transcript(
        transcript, tr_s=cfg.grid.tr_s, trim_head=cfg.grid.trim_head, trim_tail=cfg.grid.trim_tail
    )


def _design_rows(cfg: PipelineConfig, extractor, transcript) -> np.ndarray:
    grid = _grid_for(cfg, transcript)
    fm = lanczos_resample(
        embed_words(extractor, transcript), grid, window=cfg.encoding.lanczos_window
    )
    return trim_rows(fir_expand(fm, cfg.encoding.fir_delays_s)).values


def _preprocess(cfg: PipelineConfig, rm: ResponseMatrix) -> ResponseMatrix:
    if cfg.preprocess.detrend:
        rm = savgol_detrend(rm, cfg.preprocess.savgol_order, cfg.preprocess.savgol_window_s)
    return trim_and_zscore(rm)


def _lambdas(cfg: PipelineConfig) -> np.ndarray:
    e = cfg.encoding
    return np.logspace(e.lambdas_log10_min, e.lambdas_log10_max, e.n_lambdas)


def _train_test_ids(cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    names = [f"sim-{i:03d}" for i in range(cfg.simulate.n_train_stories + cfg.simulate.n_test_stories)]
    return names[: cfg.simulate.n_train_stories], names[cfg.simulate.n_train_stories :]


def _load_transcripts(ws: Workspace, ids) -> list:
    return [load_transcript(ws.path("data", "transcripts", f"{sid}.csv")) for sid in ids]


def _save_model(ws: Workspace, model: EncodingModel, name: str) -> Path:
    path = ws.path("models", f"{name}.gctf")
    save_model(model, path)
    return path


def _load_model(ws: Workspace, name: str) -> EncodingModel:
    return load_model(ws.path("models", f"{name}.gctf"))


def _bundles(ws: Workspace) -> tuple[ModelBundle, ModelBundle]:
    ex_a, ex_b = _extractors(ws.config)
    return (
        ModelBundle(_load_model(ws, "model_primary"), ex_a),
        ModelBundle(_load_model(ws, "model_secondary"), ex_b),
    )


def _catalog(ws: Workspace):
    train_ids, _ = _train_test_ids(ws.config)
    return merge_catalogs([extract_ngrams(t) for t in _load_transcripts(ws, train_ids)])


def _llm(cfg: PipelineConfig):
    spec = {
        "backend": cfg.llm.backend,
        "temperature": cfg.llm.temperature,
        "seed": cfg.llm.seed,
        "cassette": cfg.llm.cassette,
        "endpoint": cfg.llm.endpoint,
        "model": cfg.llm.model,
        "api_key_env": cfg.llm.api_key_env,
    }
    return make_client(spec)


# -- stages -------------------------------------------------------------------


def _stage_simulate(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    bank = default_concept_bank()
    subject, ledger = make_subject(
        n_voxels=cfg.simulate.n_voxels,
        concept_bank=bank,
        polysemantic_fraction=cfg.simulate.polysemantic_fraction,
        noise_sd=cfg.simulate.noise_sd,
        seed=derive_seed(seed, "subject"),
    )
    stories = make_corpus(
        bank,
        n_stories=cfg.simulate.n_train_stories + cfg.simulate.n_test_stories,
        words_per_story=cfg.simulate.words_per_story,
        word_spacing_s=cfg.simulate.word_spacing_s,
        keyword_prob=cfg.simulate.keyword_prob,
        seed=derive_seed(seed, "corpus"),
    )
    outputs = []
    train_ids, test_ids = _train_test_ids(cfg)
    for transcript in stories:
        path = ws.path("data", "transcripts", f"{transcript.story_id}.csv")
        save_transcript(transcript, path)
        outputs.append(path)
        grid = _grid_for(cfg, transcript)
        if transcript.story_id in test_ids:
            for rep in range(cfg.simulate.test_repeats):
                rm = simulate_run(subject, transcript, grid, run_id=f"rep{rep}", ledger=ledger)
                path = ws.path("data", "responses", f"{transcript.story_id}__rep{rep}.gctf")
                save_response(rm, path)
                outputs.append(path)
        else:
            rm = simulate_run(subject, transcript, grid, ledger=ledger)
            path = ws.path("data", "responses", f"{transcript.story_id}.gctf")
            save_response(rm, path)
            outputs.append(path)
    subj_json = ws.path("data", "subject.json")
    subj_gctf = ws.path("data", "selectivity.gctf")
    save_subject(subject, ledger, subj_json, subj_gctf)
    outputs.extend([subj_json, subj_gctf])
    return outputs


def _stage_fit(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    ex_a, ex_b = _extractors(cfg)
    train_ids, test_ids = _train_test_ids(cfg)
    train = _load_transcripts(ws, train_ids)
    test = _load_transcripts(ws, test_ids)

    y_train = []
    for sid in train_ids:
        rm = load_response(ws.path("data", "responses", f"{sid}.gctf"))
        y_train.append(_preprocess(cfg, rm).values)
    y_train = np.vstack(y_train)
    voxel_ids = load_response(ws.path("data", "responses", f"{train_ids[0]}.gctf")).voxel_ids

    outputs = []
    models = {}
    for name, extractor in (("model_primary", ex_a), ("model_secondary", ex_b)):
        x_train = np.vstack([_design_rows(cfg, extractor, t) for t in train])
        grid = TRGrid(tr_s=cfg.grid.tr_s, n_volumes=len(x_train), trim_head=0, trim_tail=0)
        fm = FeatureMatrix(
            grid=grid,
            values=x_train,
            lag_set=tuple(cfg.encoding.fir_delays_s),
            base_dim=extractor.dim,
            meta={"extractor_id": extractor.id},
        )
        rm = ResponseMatrix(grid=grid, voxel_ids=voxel_ids, values=y_train)
        model = fit_ridge_cv(
            fm,
            rm,
            lambdas=_lambdas(cfg),
            cv={"n_folds": cfg.encoding.n_folds, "chunk_len": cfg.encoding.chunk_len_trs},
            seed=derive_seed(seed, f"cv:{name}"),
        )
        # held-out evaluation against repeat-averaged responses
        x_test = np.vstack([_design_rows(cfg, extractor, t) for t in test])
        y_test = []
        for sid in test_ids:
            reps = [
                _preprocess(cfg, load_response(ws.path("data", "responses", f"{sid}__rep{r}.gctf"))).values
                for r in range(cfg.simulate.test_repeats)
            ]
            y_test.append(np.mean(reps, axis=0))
        y_test = np.vstack(y_test)
        tgrid = TRGrid(tr_s=cfg.grid.tr_s, n_volumes=len(x_test), trim_head=0, trim_tail=0)
        r = evaluate_test(
            model,
            FeatureMatrix(grid=tgrid, values=x_test, lag_set=tuple(cfg.encoding.fir_delays_s),
                          base_dim=extractor.dim, meta={"extractor_id": extractor.id}),
            ResponseMatrix(grid=tgrid, voxel_ids=voxel_ids, values=y_test),
        )
        models[name] = with_test_r(model, r)
        outputs.append(_save_model(ws, models[name], name))
    summary = {
        name: {
            "mean_test_r": float(np.mean(m.test_r)),
            "extractor_id": m.extractor_id,
            "n_voxels": len(m.voxel_ids),
        }
        for name, m in models.items()
    }
    path = ws.path("models", "fit_summary.json")
    _write_json(path, summary)
    outputs.append(path)
    return outputs


def _stage_select(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    model = _load_model(ws, "model_primary")
    selection = select_voxels(
        model,
        n=cfg.select.n_voxels,
        r_threshold=cfg.encoding.r_threshold,
        seed=derive_seed(seed, "select"),
    )
    idx = model.voxel_index(selection.selected)
    path = ws.path("selection.json")
    _write_json(
        path,
        {
            "selected": list(selection.selected),
            "r_threshold": selection.r_threshold,
            "mean_test_r_selected": float(np.mean(model.test_r[idx])),
            "pc_projection": selection.pc_projection.tolist(),
            "meta": selection.meta,
        },
    )
    return [path]


def _stage_stability(ws: Workspace, seed: int) -> list[Path]:
    bundle_a, bundle_b = _bundles(ws)
    catalog = _catalog(ws)
    selected = json.loads(ws.path("selection.json").read_text())["selected"]
    table = stability_score(bundle_a, bundle_b, catalog, voxels=selected)
    path = ws.path("stability.json")
    _write_json(
        path,
        {
            "voxel_ids": list(table.voxel_ids),
            "stability": table.stability.tolist(),
            "catalog_size": table.catalog_size,
            "extractor_ids": list(table.extractor_ids),
            "method": table.method,
        },
    )
    return [path]


def _stage_explain(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    bundle_a, bundle_b = _bundles(ws)
    catalog = _catalog(ws)
    llm = _llm(cfg)
    stability = json.loads(ws.path("stability.json").read_text())
    ranked = sorted(
        zip(stability["voxel_ids"], stability["stability"]), key=lambda kv: -kv[1]
    )
    pool = [v for v, _ in ranked[: cfg.explain.n_stability_pool]]
    scorer = NGramScorer([bundle_a], catalog)
    stab_of = dict(zip(stability["voxel_ids"], stability["stability"]))
    explanations = []
    for voxel in pool:
        expl = explain_target(
            llm,
            bundle_a,
            None,
            voxel,
            catalog,
            k=cfg.explain.n_candidates,
            seed=derive_seed(seed, f"explain:{voxel}"),
            top_k=cfg.explain.top_k_ngrams,
            scorer=scorer,
        )
        expl.stability = float(stab_of[voxel])
        explanations.append(expl)
    chosen = pick_diverse(explanations, cfg.explain.n_targets)
    path = ws.path("explanations.json")
    _write_json(
        path,
        [
            {
                "target": e.target,
                "text": e.text,
                "explanation_score": e.explanation_score,
                "stability": e.stability,
                "top_ngrams": list(e.top_ngrams),
                "candidates": e.meta.get("candidates", []),
            }
            for e in chosen
        ],
    )
    return [path]


def _load_explanations(ws: Workspace) -> list[Explanation]:
    payload = json.loads(ws.path("explanations.json").read_text())
    return [
        Explanation(
            target=e["target"],
            text=e["text"],
            explanation_score=e["explanation_score"],
            stability=e["stability"],
            top_ngrams=tuple(e["top_ngrams"]),
        )
        for e in payload
    ]


def _stage_storygen(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    llm = _llm(cfg)
    explanations = _load_explanations(ws)
    outputs = []
    for i in range(cfg.storygen.n_stories):
        story = generate_story(
            llm,
            explanations,
            mode=cfg.storygen.mode,
            seed=derive_seed(seed, f"story:{i}"),
            prompt_version=cfg.storygen.prompt_version,
            story_id=f"story-{i:02d}",
            cadence_wpm=cfg.storygen.cadence_wpm,
            lead_in_s=cfg.storygen.lead_in_s,
        )
        path = ws.path("stories", f"{story.story_id}.json")
        save_story(story, path)
        outputs.append(path)
    return outputs


def _stage_prevalidate(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    bundle_a, _ = _bundles(ws)
    stories = [
        load_story(ws.path("stories", f"story-{i:02d}.json"))
        for i in range(cfg.storygen.n_stories)
    ]
    ranked = select_best_stories(stories, bundle_a, hrf_lag_trs=cfg.evaluate.hrf_lag_trs)
    payload = {"ranking": [], "kept": []}
    for story, diag in ranked:
        matrix = encoding_prevalidation(bundle_a, story, hrf_lag_trs=cfg.evaluate.hrf_lag_trs)
        payload["ranking"].append(
            {
                "story_id": story.story_id,
                "diagonal_mean": diag,
                "targets": list(story.targets),
                "matrix": matrix.tolist(),
            }
        )
    payload["kept"] = [r["story_id"] for r in payload["ranking"][: cfg.storygen.keep_best]]
    path = ws.path("prevalidation.json")
    _write_json(path, payload)
    return [path]


def _stage_evaluate(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    kept = json.loads(ws.path("prevalidation.json").read_text())["kept"]
    outputs = []
    per_story = {}
    for story_id in kept:
        story = load_story(ws.path("stories", f"{story_id}.json"))
        transcript = story.to_transcript()
        if cfg.evaluate.responses_dir:
            rm = load_response(Path(cfg.evaluate.responses_dir) / f"{story_id}.gctf")
        else:
            subject, _ = load_subject(ws.path("data", "subject.json"), ws.path("data", "selectivity.gctf"))
            grid = _grid_for(cfg, transcript)
            raw = simulate_run(subject, transcript, grid, run_id=f"present:{story_id}")
            rm = _preprocess(cfg, raw)
            path = ws.path("presentation", f"{story_id}.gctf")
            save_response(rm, path)
            outputs.append(path)
        report = driving_scores(rm, story, hrf_lag_trs=cfg.evaluate.hrf_lag_trs)
        permutation_test(report, n_perm=cfg.evaluate.n_perm, seed=derive_seed(seed, f"perm:{story_id}"))
        apply_fdr(report, q=cfg.evaluate.fdr_q)
        per_story[story_id] = {
            "entries": [
                {
                    "target": e.target,
                    "paragraph": e.paragraph,
                    "score": e.score,
                    "p_value": e.p_value,
                    "significant": e.significant,
                }
                for e in report.entries
            ],
            "cross": report.cross.tolist(),
            "targets": list(report.targets),
            "pooled_stat": report.pooled_stat,
            "pooled_p": report.pooled_p,
            "prompt_version": story.prompt_version,
            "meta": report.meta,
        }
    scores = [e["score"] for s in per_story.values() for e in s["entries"]]
    payload = {
        "stories": per_story,
        "aggregate": {
            "mean_score": float(np.mean(scores)),
            "n_targets": len(scores),
            "n_positive": int(np.sum(np.asarray(scores) > 0)),
        },
    }
    path = ws.path("reports", "driving.json")
    _write_json(path, payload)
    outputs.append(path)
    locked = _locked_curve_for(kept[0], ws, cfg) if kept else None
    if locked is not None:
        path = ws.path("reports", "ngram_locked.json")
        _write_json(path, locked)
        outputs.append(path)
    return outputs


def _locked_curve_for(story_id: str, ws: Workspace, cfg: PipelineConfig) -> dict | None:
    """Time-locked average around the presented key n-grams of one story."""
    from .core import normalize_token
    from .errors import TooFewEvents
    from .evaluation import ngram_locked_response

    story = load_story(ws.path("stories", f"{story_id}.json"))
    resp_path = ws.path("presentation", f"{story_id}.gctf")
    if not resp_path.exists():
        return None
    rm = load_response(resp_path)
    transcript = story.to_transcript()
    keys = {normalize_token(t) for p in story.paragraphs for g in p.key_ngrams
            for t in g.split()}
    onsets = [w.onset_s for w in transcript.words if normalize_token(w.token) in keys]
    # thin to spaced events so snippets do not overlap the same keyword burst
    spaced: list[float] = []
    for onset in onsets:
        if not spaced or onset - spaced[-1] >= 16.0:
            spaced.append(onset)
    try:
        curve = ngram_locked_response(rm, spaced, targets=story.targets)
    except TooFewEvents:
        return None
    return {
        "story_id": story_id,
        "lags_s": curve.lags_s.tolist(),
        "curve": curve.curve.tolist(),
        "peak_lag_s": curve.peak_lag_s,
        "t_stat": curve.t_stat,
        "p_value": curve.p_value,
        "n_events": curve.n_events,
    }


def _stage_report(ws: Workspace, seed: int) -> list[Path]:
    driving = json.loads(ws.path("reports", "driving.json").read_text())
    outputs = []

    csv_path = ws.path("reports", "driving.csv")
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["story_id", "target", "paragraph", "score_sigma", "p_value", "significant"])
        for story_id, block in sorted(driving["stories"].items()):
            for e in block["entries"]:
                writer.writerow(
                    [story_id, e["target"], e["paragraph"],
                     repr(e["score"]), repr(e["p_value"]), e["significant"]]
                )
    outputs.append(csv_path)

    breakdown_path = ws.path("reports", "story_breakdown.csv")
    with breakdown_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["story_id", "mean_score_sigma", "pooled_p"])
        for story_id, block in sorted(driving["stories"].items()):
            mean = float(np.mean([e["score"] for e in block["entries"]]))
            writer.writerow([story_id, repr(mean), repr(block["pooled_p"])])
    outputs.append(breakdown_path)

    versions: dict[str, list[float]] = {}
    for block in driving["stories"].values():
        versions.setdefault(block["prompt_version"], []).extend(
            e["score"] for e in block["entries"]
        )
    versions_path = ws.path("reports", "prompt_versions.csv")
    with versions_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prompt_version", "n_paragraphs", "mean_score_sigma"])
        for version, scores in sorted(versions.items()):
            writer.writerow([version, len(scores), repr(float(np.mean(scores)))])
    outputs.append(versions_path)

    lines = ["driving summary", "==============="]
    for story_id, block in sorted(driving["stories"].items()):
        lines.append(
            f"{story_id}: pooled {format_p(block['pooled_p'])}, "
            f"mean {np.mean([e['score'] for e in block['entries']]):+.3f} sigma"
        )
        for e in block["entries"]:
            flag = "*" if e["significant"] else " "
            lines.append(
                f"  target {e['target']} (paragraph {e['paragraph']}): "
                f"{e['score']:+.3f} sigma, {format_p(e['p_value'])} {flag}"
            )
    agg = driving["aggregate"]
    lines.append(
        f"overall: {agg['n_positive']}/{agg['n_targets']} targets positive, "
        f"mean {agg['mean_score']:+.3f} sigma"
    )
    locked_path = ws.path("reports", "ngram_locked.json")
    if locked_path.exists():
        locked = json.loads(locked_path.read_text())
        lines.append(
            f"key n-gram locked response: peak at {locked['peak_lag_s']:.0f}s, "
            f"{format_p(locked['p_value'])}, {locked['n_events']} events"
        )
    summary_path = ws.path("reports", "summary.txt")
    summary_path.write_text("\n".join(lines) + "\n")
    outputs.append(summary_path)

    _emit_plots(ws, driving)  # best-effort; never affects status
    return outputs


def _emit_plots(ws: Workspace, driving: dict) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for story_id, block in driving["stories"].items():
            scores = [e["score"] for e in block["entries"]]
            fig, ax = plt.subplots(figsize=(6, 3))
            ax.bar(range(len(scores)), scores)
            ax.axhline(0.0, color="k", lw=0.5)
            ax.set_xlabel("target")
            ax.set_ylabel("driving score (sigma)")
            ax.set_title(story_id)
            fig.tight_layout()
            fig.savefig(ws.path("reports", "plots", f"{story_id}.png"))
            plt.close(fig)
    except Exception:
        pass


_STAGE_FUNCS = {
    "simulate": _stage_simulate,
    "fit": _stage_fit,
    "select": _stage_select,
    "stability": _stage_stability,
    "explain": _stage_explain,
    "storygen": _stage_storygen,
    "prevalidate": _stage_prevalidate,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def run_stage(config: PipelineConfig, stage: str, force: bool = False) -> RunManifest:
    """Run one stage (or skip it when inputs are unchanged)."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    ws = Workspace(config)
    ws.root.mkdir(parents=True, exist_ok=True)
    config_path = ws.path("config.toml")
    config_path.write_text(emit_toml(config))
    with FileLock(str(ws.root / ".gct.lock")):
        signature, inputs = ws.signature(stage)
        existing = ws.read_manifest(stage)
        if (
            not force
            and existing is not None
            and existing.signature == signature
            and ws.verify_outputs(existing)
        ):
            existing.status = "skipped"
            return existing
        seed = derive_seed(config.run.root_seed, f"stage:{stage}")
        try:
            outputs = _STAGE_FUNCS[stage](ws, seed)
        except (MissingDependency, ConfigError):
            raise
        except GCTError as exc:
            raise StageFailure(f"stage {stage!r} failed: {exc}") from exc
        except Exception as exc:
            raise StageFailure(f"stage {stage!r} failed unexpectedly: {exc}") from exc
        return ws.finish(stage, signature, inputs, outputs, seed)


def run_pipeline(config: PipelineConfig, stage: str = "all", force: bool = False) -> list[RunManifest]:
    """Run a stage (with its position in the fixed order) or the whole chain."""
    stages = STAGES if stage == "all" else (stage,)
    return [run_stage(config, s, force=force) for s in stages]
