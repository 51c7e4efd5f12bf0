import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import make_record
from gadetect.cli import main
from gadetect.dataset import Eye, write_manifest
from gadetect.errors import ConfigError, JoinError
from gadetect.experiment import (
    DATA_ROOT_ENV,
    ExperimentConfig,
    evaluate_predictions,
    load_config,
    read_predictions,
    run_crossval,
    write_predictions,
)
from gadetect.synth import generate_dataset

SMALL_CFG = {
    "k": 3,
    "preprocess": {"target_size": 64},
    "model": {"input_size": 64},
    "training": {"max_epochs": 2, "patience_epochs": 1, "batch_size": 16},
    "review_sample_size": 3,
}


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return generate_dataset(90, 0.4, 0.5, seed=2, out_dir=root / "data", image_size=64)


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "cfg.yaml"
    p.write_text(yaml.safe_dump(SMALL_CFG))
    return p


def _balanced_manifest(tmp_path, n_pos=1000, n_neg=1000, sens=0.588, spec=0.982):
    records = []
    for i in range(n_pos):
        records.append(make_record(pid=f"P{i:05d}", ga=True, specialist_ga=i < round(sens * n_pos)))
    for i in range(n_neg):
        records.append(make_record(pid=f"N{i:05d}", specialist_ga=i < round((1 - spec) * n_neg)))
    return write_manifest(records, tmp_path / "manifest.csv"), records


def test_gold_scores_give_perfect_accuracy(tmp_path):
    manifest, records = _balanced_manifest(tmp_path, 40, 60)
    keys = [r.image_key for r in records]
    labels = [r.grade.ga_present for r in records]
    folds = [i % 5 for i in range(len(records))]
    preds = write_predictions(tmp_path / "p.csv", keys, np.array(labels, float), folds)
    ev = evaluate_predictions(preds, manifest, "ga")
    assert ev.report.accuracy.point == 1.0 and ev.report.kappa.point == 1.0
    assert ev.report.auc.point == 1.0


def test_specialist_source_roundtrip(tmp_path):
    manifest, _ = _balanced_manifest(tmp_path)
    ev = evaluate_predictions(None, manifest, "ga", source="specialist")
    assert ev.report.sensitivity.point == pytest.approx(0.588, abs=1e-12)
    assert ev.report.specificity.point == pytest.approx(0.982, abs=1e-12)


def test_random_scores_auc_near_half(tmp_path):
    manifest, records = _balanced_manifest(tmp_path, 500, 500)
    rng = np.random.default_rng(0)
    keys = [r.image_key for r in records]
    preds = write_predictions(tmp_path / "p.csv", keys, rng.random(len(keys)), [i % 5 for i in range(len(keys))])
    ev = evaluate_predictions(preds, manifest, "ga")
    assert abs(ev.report.auc.point - 0.5) <= 0.1


def test_unknown_key_is_join_error(tmp_path):
    manifest, records = _balanced_manifest(tmp_path, 3, 3)
    preds = write_predictions(tmp_path / "p.csv", ["ghost:LEFT:x:LEFT_OF_PAIR"], [0.2], [0])
    with pytest.raises(JoinError, match="ghost"):
        evaluate_predictions(preds, manifest, "ga")
    assert main(["evaluate", "--predictions", str(preds), "--manifest", str(manifest), "--out", str(tmp_path / "e")]) == 3


def test_predictions_roundtrip(tmp_path):
    p = write_predictions(tmp_path / "p.csv", ["a", "b"], np.array([0.25, 1 / 3]), [0, 1])
    assert read_predictions(p) == [("a", 0.25, 0), ("b", 1 / 3, 1)]


def test_config_flags_win(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"task": "cga", "seed": 3, "manifest": "a.csv"}))
    cfg = load_config(p, {"task": "ga", "seed": 9, "out": "o", "profile": None, "manifest": None})
    assert (cfg.task, cfg.seed, cfg.training.seed, cfg.output_dir, cfg.manifest) == ("ga", 9, 9, "o", "a.csv")
    assert cfg.model.task == "ga"
    paper = load_config(None, {"profile": "paper"})
    assert paper.model.input_size == 512 and paper.preprocess.target_size == 512


def test_config_roundtrip_and_errors(tmp_path):
    cfg = ExperimentConfig(**{**ExperimentConfig().__dict__, "k": 4})
    d = cfg.to_dict()
    assert ExperimentConfig.from_dict(d).hash() == cfg.hash()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(k=1)


def test_exit_code_k1(tmp_path, small_data):
    cfg = tmp_path / "k1.yaml"
    cfg.write_text("k: 1\n")
    code = main(["run-crossval", "--config", str(cfg), "--manifest", str(small_data), "--out", str(tmp_path / "x")])
    assert code == 2


def test_exit_codes_data_and_io(tmp_path, small_data):
    assert main(["ingest", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("participant_id\nP1\n")
    assert main(["ingest", "--manifest", str(bad), "--out", str(tmp_path / "o")]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth-gen", "--n", "2", "--out", str(blocker / "sub")]) == 5


def test_data_root_env(tmp_path, small_data, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(Path(small_data).parent))
    assert main(["ingest", "--manifest", "manifest.csv", "--out", str(tmp_path / "ing")]) == 0
    summary = json.loads((tmp_path / "ing" / "summary.json").read_text())
    assert summary["n_images"] <= summary["n_parsed"] == 90


def test_split_subcommand(tmp_path, small_data, small_cfg):
    out = tmp_path / "split"
    assert main(["split", "--config", str(small_cfg), "--manifest", str(small_data), "--out", str(out)]) == 0
    runs = json.loads((out / "runs.json").read_text())
    assert [r["dev_fold"] for r in runs] == [1, 2, 0]


def test_crossval_end_to_end_determinism_and_resume(tmp_path, small_data, small_cfg):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["run-crossval", "--config", str(small_cfg), "--manifest", str(small_data),
                     "--seed", "1", "--out", str(out)])
        assert code == 0
        outs.append(out)
    a, b = outs
    for rel in ("report/metrics_report.json", "report/aggregate.json", "report/table2.csv",
                "report/errors_area.csv", "folds.csv"):
        assert (a / rel).read_text() == (b / rel).read_text(), rel
    cfg_a = yaml.safe_load((a / "config.yaml").read_text())
    assert cfg_a.pop("output_dir") == str(a) and cfg_a["seed"] == 1
    assert sorted(p.name for p in a.glob("run_*")) == ["run_0", "run_1", "run_2"]
    for png in ("roc.png", "history.png", "errors_area.png"):
        assert (a / "report" / png).stat().st_size > 0
    agg = json.loads((a / "report" / "aggregate.json").read_text())
    assert agg["config_hash"] == ExperimentConfig.from_dict(yaml.safe_load((a / "config.yaml").read_text())).hash()

    # resume: a finished run is reused, a removed one is retrained identically
    before = (a / "run_1" / "predictions.csv").read_text()
    (a / "run_1" / "DONE").unlink()
    stamp = (a / "run_0" / "model" / "weights.pt").stat().st_mtime_ns
    cfg = load_config(small_cfg, {"manifest": str(small_data), "out": str(a), "seed": 1})
    run_crossval(cfg)
    assert (a / "run_0" / "model" / "weights.pt").stat().st_mtime_ns == stamp
    assert (a / "run_1" / "predictions.csv").read_text() == before
    assert (a / "report" / "metrics_report.json").read_text() == (b / "report" / "metrics_report.json").read_text()


def test_predict_evaluate_saliency_commands(tmp_path, small_data, small_cfg):
    exp = tmp_path / "exp"
    assert main(["train", "--config", str(small_cfg), "--manifest", str(small_data), "--out", str(exp), "--run", "0"]) == 0
    preds = tmp_path / "p.csv"
    assert main(["predict", "--artifact", str(exp / "run_0" / "model"), "--manifest", str(small_data),
                 "--folds", str(exp / "folds.csv"), "--fold", "0", "--out", str(preds)]) == 0
    assert sorted(read_predictions(preds)) == sorted(read_predictions(exp / "run_0" / "predictions.csv"))
    assert main(["evaluate", "--predictions", str(preds), "--manifest", str(small_data),
                 "--out", str(tmp_path / "ev"), "--aggregate", "pooled"]) == 0
    assert (tmp_path / "ev" / "table2.csv").exists()
    assert main(["analyze-errors", "--predictions", str(preds), "--manifest", str(small_data),
                 "--out", str(tmp_path / "ae"), "--n", "2"]) == 0
    assert (tmp_path / "ae" / "fn_review.csv").exists()
    key = read_predictions(preds)[0][0]
    assert main(["saliency", "--artifact", str(exp / "run_0" / "model"), "--manifest", str(small_data),
                 "--keys", key, "--panel", "1", "--out", str(tmp_path / "sal")]) == 0
    assert (tmp_path / "sal" / "panel.png").exists()
    assert len(list((tmp_path / "sal").glob("*.gar"))) == 1


def test_eye_enum_in_keys():
    assert make_record(eye=Eye.RIGHT).image_key.split(":")[1] == "RIGHT"
