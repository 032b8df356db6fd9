import hashlib
import json

import pytest

from dcqa.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_USAGE, load_config, main

QUICK = ["--set", "training.max_epochs=2", "--set", "training.early_stop_patience=2",
         "--set", "backend.d=8", "--set", "dataset.synthetic.n_examples=40"]


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("dataset:\n  tag: SYNTHETIC\ntraining:\n  learning_rate: 1e-3\n")
    return path


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_scientific_notation_in_yaml(config):
    assert load_config(str(config))["training"]["learning_rate"] == 1e-3


def test_train_then_eval_matches(tmp_path, config, capsys):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(config), "--out", str(out), *QUICK,
                 "--set", "training.batch_size=8"]) == EXIT_OK
    run = out / "SYNTHETIC" / "reference" / "FULL" / "1"
    result = read_jsonl(run / "result.jsonl")[-1]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["training"]["batch_size"] == 8
    assert manifest["seed"] == 1 and "wall_time_sec" in manifest and "code_version" in manifest

    assert main(["eval", "--checkpoint", str(run / "best.pt"), "--split", "test"]) == EXIT_OK
    record = read_jsonl(run / "eval.jsonl")[-1]
    assert record["accuracy"] == result["test_accuracy"]
    assert f"{result['test_accuracy']:.4f}" in capsys.readouterr().out


def test_seed_flag_sets_directory(tmp_path, config):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(config), "--out", str(out), "--seed", "7", *QUICK,
                 "--set", "model.ablation=[NO_DE]"]) == EXIT_OK
    assert (out / "SYNTHETIC" / "reference" / "-DE" / "7" / "best.pt").exists()


def test_inconsistent_ablation_exit(config, capsys):
    assert main(["train", "--config", str(config), "--set", "model.ablation=[NO_C1]"]) == EXIT_CONFIG
    assert "inconsistent ablation flags" in capsys.readouterr().err


def test_bad_values_exit(config, capsys):
    assert main(["train", "--config", str(config), "--set", "training.batch_size=0"]) == EXIT_CONFIG
    assert main(["train", "--config", str(config), "--set", "dataset.tag=CSQA"]) == EXIT_CONFIG
    assert "data_dir" in capsys.readouterr().err


def test_usage_errors():
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_data_dir_env_fallback(tmp_path, monkeypatch, config):
    src = tmp_path / "raw" / "OBQA"
    src.mkdir(parents=True)
    rec = {"id": "x", "answerKey": "A",
           "question": {"stem": "q", "choices": [{"label": l, "text": l} for l in "ABCD"]}}
    for name in ("train", "dev", "test"):
        (src / f"{name}.jsonl").write_text(json.dumps(rec) + "\n")
    monkeypatch.setenv("DCQA_DATA_DIR", str(tmp_path / "raw"))
    cfg = load_config(str(config), ["dataset.tag=OBQA"])
    assert cfg["dataset"]["data_dir"] == str(tmp_path / "raw")


def test_prepare_data_leaves_inputs_alone(tmp_path):
    src = tmp_path / "raw" / "OBQA"
    src.mkdir(parents=True)
    rec = {"id": "x", "answerKey": "B",
           "question": {"stem": "q", "choices": [{"label": l, "text": l} for l in "ABCD"]}}
    for name in ("train", "dev", "test"):
        (src / f"{name}.jsonl").write_text(json.dumps(rec) + "\n")
    digest = lambda: {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in src.iterdir()}
    before = digest()
    assert main(["prepare-data", "--dataset", "OBQA", "--data-dir", str(tmp_path / "raw"),
                 "--out", str(tmp_path / "prep")]) == EXIT_OK
    assert digest() == before
    assert (tmp_path / "prep" / "test.jsonl").exists()

    (src / "dev.jsonl").write_text("{broken\n")
    assert main(["prepare-data", "--dataset", "OBQA", "--data-dir", str(tmp_path / "raw"),
                 "--out", str(tmp_path / "prep2")]) == EXIT_DATA


def test_other_commands(tmp_path, config, capsys):
    out = tmp_path / "runs"
    assert main(["multi-seed", "--config", str(config), "--out", str(out), "--seeds", "1,2", *QUICK]) == EXIT_OK
    assert "±" in capsys.readouterr().out
    ckpts = sorted(out.rglob("best.pt"))
    assert len(ckpts) == 2
    ckpt = ckpts[0]

    assert main(["count-params", "--checkpoint", str(ckpt)]) == EXIT_OK
    assert "total" in capsys.readouterr().out

    assert main(["prepare-data", "--dataset", "SYNTHETIC", "--n-examples", "40",
                 "--out", str(tmp_path / "syn")]) == EXIT_OK
    example_id = json.loads((tmp_path / "syn" / "dev.jsonl").read_text().splitlines()[0])["id"]
    heat = tmp_path / "heat.json"
    assert main(["visualize", "--checkpoint", str(ckpt), "--example-id", example_id, "--stages",
                 "--out", str(heat)]) == EXIT_OK
    assert len(json.loads(heat.read_text())["matrices"]) == 3
    assert main(["visualize", "--checkpoint", str(ckpt), "--example-id", "nope",
                 "--out", str(heat)]) == EXIT_DATA

    assert main(["ablate", "--config", str(config), "--out", str(out), "--variants", "FULL,-C3",
                 "--seeds", "1,2", *QUICK]) == EXIT_OK
    assert (out / "SYNTHETIC" / "reference" / "ablation" / "ablation.jsonl").exists()
    assert main(["ablate", "--config", str(config), "--variants=-ZZ", *QUICK]) == EXIT_CONFIG
