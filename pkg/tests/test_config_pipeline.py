import hashlib
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from gct.cli import main
from gct.config import (
    PipelineConfig,
    config_from_dict,
    config_schema,
    emit_toml,
    load_config,
    save_config,
    toy_config,
)
from gct.errors import ConfigError, MissingDependency
from gct.pipeline import STAGES, run_pipeline, run_stage


def tiny_config(workdir, seed=0) -> PipelineConfig:
    cfg = toy_config(workdir=str(workdir), root_seed=seed)
    cfg.simulate.n_voxels = 24
    cfg.simulate.n_train_stories = 5
    cfg.simulate.n_test_stories = 1
    cfg.simulate.words_per_story = 300
    cfg.encoding.n_folds = 5
    cfg.encoding.n_lambdas = 4
    cfg.select.n_voxels = 10
    cfg.explain.n_stability_pool = 8
    cfg.explain.n_targets = 4
    cfg.storygen.n_stories = 2
    cfg.evaluate.n_perm = 300
    return cfg


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_config(tmp_path / "w")
        path = tmp_path / "c.toml"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"nonsense": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"run": {"workdir": "x", "typo_key": 1}})

    def test_bad_toml_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("run = [not toml")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")

    def test_schema_is_strict(self):
        schema = config_schema()
        assert schema["additionalProperties"] is False
        assert all(
            section["additionalProperties"] is False
            for section in schema["properties"].values()
        )

    def test_toml_float_formatting(self):
        cfg = PipelineConfig()
        text = emit_toml(cfg)
        assert "tr_s = 2.0" in text
        assert 'backend = "stub"' in text


def output_hashes(workdir: Path) -> dict:
    out = {}
    for p in sorted(workdir.rglob("*")):
        rel = p.relative_to(workdir)
        if not p.is_file() or rel.parts[0] == "manifests":
            continue
        if rel.name == "config.toml" or rel.suffix == ".png" or rel.name.endswith(".lock"):
            continue
        out[str(rel)] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.mark.slow
class TestPipeline:
    def test_full_chain_and_idempotence(self, tmp_path):
        cfg = tiny_config(tmp_path / "work")
        manifests = run_pipeline(cfg, stage="all")
        assert [m.stage for m in manifests] == list(STAGES)
        assert all(m.status == "run" for m in manifests)

        driving = json.loads((tmp_path / "work" / "reports" / "driving.json").read_text())
        story = next(iter(driving["stories"].values()))
        assert len(story["entries"]) == 4
        assert all("p_value" in e for e in story["entries"])
        reports = tmp_path / "work" / "reports"
        assert (reports / "summary.txt").exists()
        assert (reports / "driving.csv").exists()
        assert (reports / "story_breakdown.csv").exists()
        assert (reports / "prompt_versions.csv").exists()
        locked = json.loads((reports / "ngram_locked.json").read_text())
        assert locked["n_events"] >= 5

        rerun = run_pipeline(cfg, stage="all")
        assert all(m.status == "skipped" for m in rerun)

        forced = run_stage(cfg, "report", force=True)
        assert forced.status == "run"

    def test_changed_config_invalidates(self, tmp_path):
        cfg = tiny_config(tmp_path / "work")
        run_pipeline(cfg, stage="all")
        cfg.evaluate.n_perm = 301
        rerun = run_pipeline(cfg, stage="all")
        status = {m.stage: m.status for m in rerun}
        assert status["simulate"] == "skipped"  # untouched inputs
        assert status["evaluate"] == "run"  # config hash feeds every signature

    def test_missing_dependency(self, tmp_path):
        cfg = tiny_config(tmp_path / "work")
        with pytest.raises(MissingDependency, match="simulate"):
            run_stage(cfg, "fit")
        run_stage(cfg, "simulate")
        with pytest.raises(MissingDependency, match="fit"):
            run_stage(cfg, "evaluate")

    def test_determinism_across_workdirs(self, tmp_path):
        cfg_a = tiny_config(tmp_path / "a", seed=9)
        cfg_b = tiny_config(tmp_path / "b", seed=9)
        run_pipeline(cfg_a, stage="all")
        run_pipeline(cfg_b, stage="all")
        assert output_hashes(tmp_path / "a") == output_hashes(tmp_path / "b")


class TestCLI:
    def test_init_then_run_stage_smoke(self, tmp_path):
        runner = CliRunner()
        cfg_path = tmp_path / "c.toml"
        out = runner.invoke(main, ["init", str(cfg_path), "--workdir", str(tmp_path / "w")])
        assert out.exit_code == 0
        save_config(tiny_config(tmp_path / "w"), cfg_path)
        out = runner.invoke(main, ["simulate", "--config", str(cfg_path)])
        assert out.exit_code == 0
        assert "simulate: ok" in out.output
        out = runner.invoke(main, ["simulate", "--config", str(cfg_path)])
        assert "skipped, up-to-date" in out.output

    def test_exit_code_config_error(self, tmp_path):
        runner = CliRunner()
        out = runner.invoke(main, ["run", "--config", str(tmp_path / "none.toml")])
        assert out.exit_code == 2

    def test_exit_code_missing_dependency(self, tmp_path):
        runner = CliRunner()
        cfg_path = tmp_path / "c.toml"
        save_config(tiny_config(tmp_path / "w"), cfg_path)
        out = runner.invoke(main, ["evaluate", "--config", str(cfg_path)])
        assert out.exit_code == 3

    def test_unknown_stage_is_config_error(self, tmp_path):
        runner = CliRunner()
        cfg_path = tmp_path / "c.toml"
        save_config(tiny_config(tmp_path / "w"), cfg_path)
        out = runner.invoke(main, ["run", "--config", str(cfg_path), "--stage", "bogus"])
        assert out.exit_code == 2
