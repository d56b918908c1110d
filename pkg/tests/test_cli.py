import json
import shutil
from pathlib import Path

import pytest
import yaml

from daug.cli import main
from daug.config import ExperimentConfig, load_config, stable_hash
from daug.errors import ConfigurationError

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.yaml"


def run(*args):
    return main([*args, "--config", str(TINY)])


def summary(root, command):
    return json.loads((root / "summaries" / f"{command}.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert run("all", "--out", str(root)) == 0
    return root


def test_full_chain_writes_every_artifact(pipeline):
    for d in ("data", "denoiser", "classifier", "heatmaps", "hybrid", "eval", "ablation", "figures"):
        rec = json.loads((pipeline / d / "stage.json").read_text())
        assert rec["seed"] == 0 and len(rec["hash"]) == 16
    for f in ("classification.json", "r2x.json", "x2x.json", "unified.json", "localization.json",
              "false_positive.json", "reports.txt"):
        assert (pipeline / "eval" / f).exists()
    assert (pipeline / "ablation" / "table.txt").read_text().startswith("Method")
    assert len(list((pipeline / "ablation" / "rows").glob("*.json"))) == 4
    assert {p.name for p in (pipeline / "figures").glob("*.png")} >= {
        "remove_finding.png", "no_finding.png", "amplify_pleural.png", "ablation.png"}
    cls = json.loads((pipeline / "eval" / "classification.json").read_text())
    assert len(cls["per_class"]) == 14


def test_rerun_is_idempotent(pipeline):
    before = (pipeline / "hybrid" / "weights.pt").read_bytes()
    assert run("gen-heatmaps", "--out", str(pipeline)) == 0
    s = summary(pipeline, "gen-heatmaps")
    assert s["status"] == "ok" and s["outputs"]["computed"] == 0 and s["outputs"]["cache_hits"] > 0
    assert run("train-hybrid", "--out", str(pipeline)) == 0
    assert summary(pipeline, "train-hybrid")["outputs"]["skipped"] is True
    assert (pipeline / "hybrid" / "weights.pt").read_bytes() == before


def test_eval_before_train_hybrid_names_the_missing_stage(pipeline, tmp_path, capsys):
    root = tmp_path / "partial"
    shutil.copytree(pipeline, root)
    shutil.rmtree(root / "hybrid")
    assert run("eval", "--out", str(root), "--force") == 2
    err = capsys.readouterr().err
    assert "train-hybrid" in err
    s = summary(root, "eval")
    assert s["status"] == "error" and s["error_type"] == "DependencyError"


def test_changed_config_conflicts_until_forced(pipeline, tmp_path, capsys):
    root = tmp_path / "conflict"
    shutil.copytree(pipeline, root)
    cfg = yaml.safe_load(TINY.read_text())
    cfg["hybrid"]["w"] = 0.5
    alt = tmp_path / "alt.yaml"
    alt.write_text(yaml.safe_dump(cfg))
    assert main(["train-hybrid", "--config", str(alt), "--out", str(root)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["train-hybrid", "--config", str(alt), "--out", str(root), "--force"]) == 0
    manifest = json.loads((root / "hybrid" / "manifest.json").read_text())
    assert manifest["w"] == 0.5
    # upstream stages were untouched by the encoder-only change
    assert json.loads((root / "heatmaps" / "stage.json").read_text()) == \
        json.loads((pipeline / "heatmaps" / "stage.json").read_text())


def test_seed_override_conflicts_with_existing_data(pipeline, tmp_path):
    root = tmp_path / "seeded"
    shutil.copytree(pipeline, root)
    assert run("synth", "--out", str(root), "--seed", "7") == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DAUG_OUTPUT_ROOT", str(tmp_path / "env"))
    assert run("synth") == 0
    assert (tmp_path / "env" / "data" / "manifest.json").exists()


def test_show_config(capsys):
    assert run("show-config") == 0
    assert yaml.safe_load(capsys.readouterr().out)["name"] == "tiny"


def test_config_hash_ignores_key_order():
    a = {"x": 1, "y": {"b": [1, 2], "a": 0.5}}
    b = {"y": {"a": 0.5, "b": [1, 2]}, "x": 1}
    assert stable_hash(a) == stable_hash(b)
    assert stable_hash(a) != stable_hash({**a, "x": 2})


def test_config_roundtrip_and_stage_hash_locality(tmp_path):
    cfg = load_config(TINY)
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.hash() == cfg.hash()
    changed = ExperimentConfig.from_dict({**cfg.to_dict(), "hybrid": {**cfg.to_dict()["hybrid"], "w": 0.2}})
    h0, h1 = cfg.stage_hashes(), changed.stage_hashes()
    assert h0["gen-heatmaps"] == h1["gen-heatmaps"]
    assert h0["train-hybrid"] != h1["train-hybrid"]
    assert cfg.with_seed(3).stage_hashes()["synth"] != h0["synth"]


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"hybrid": {"w": 2.0}},
    {"heatmaps": {"t_start": 500}},
    {"denoiser": {"nope": 3}},
    {"heatmaps": {"guides": [{"target": 0, "sign": 0, "mode": "softmax", "scale": 1.0}]}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(bad)


def test_default_config_file_matches_code_defaults():
    desk = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
    assert desk.stage_hashes() == ExperimentConfig().stage_hashes()
